//! One line per acceptance criterion, run in sequence so the timed
//! criteria are not competing with each other for the CPU.
//!
//! Ablation artifacts are kept under the target directory for inspection.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dgdetr_cli::commands;
use dgdetr_cli::config::{Precision, RunConfig};
use dgdetr_cli::gradcheck;
use dgdetr_cli::metrics::MetricsRecord;
use dgdetr_cli::selftest::{self, SelftestOptions};

struct Verdict {
    passed: bool,
    detail: String,
}

fn find<'a>(records: &'a [MetricsRecord], name: &str) -> &'a MetricsRecord {
    records.iter().find(|r| r.name == name).unwrap_or_else(|| panic!("no record {name}"))
}

fn describe(records: &[&MetricsRecord]) -> Verdict {
    Verdict {
        passed: records.iter().all(|r| r.passed),
        detail: records.iter().map(|r| format!("{} {:.2e} (tol {:.0e})", r.name, r.value, r.tolerance)).collect::<Vec<_>>().join(", "),
    }
}

fn selftest_records(dtype: Precision) -> (Vec<MetricsRecord>, f64) {
    let t = Instant::now();
    let records = selftest::run(&SelftestOptions { cases: 1000, seed: 0, dtype, corrupt_haar: false }).expect("selftest runs");
    (records, t.elapsed().as_secs_f64())
}

fn run_cli(args: &[&str]) -> i32 {
    dgdetr_cli::run(std::iter::once("dgdetr").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn determinism(root: &Path) -> Verdict {
    std::fs::create_dir_all(root).expect("determinism directory");
    let config = root.join("determinism.toml");
    std::fs::write(
        &config,
        "[train]\ntrain_scenes = 16\nepochs = 2\n[train.eval]\nscenes = 8\n[eval.protocol]\nscenes = 8\n\
         [ablate]\nseeds = [0, 1]\narms = [\"baseline\", \"both\"]\n[ablate.train]\ntrain_scenes = 8\nepochs = 1\n[ablate.train.eval]\nscenes = 4\n",
    )
    .expect("config written");
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for command in ["selftest", "gradcheck", "train", "eval", "ablate"] {
        let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|r| root.join(format!("{command}-{r}"))).collect();
        for dir in &dirs {
            let mut args = vec![command, "--config", p(&config), "--seed", "7", "--out", p(dir)];
            let ckpt = root.join("train-a").join("checkpoint.dgck");
            if command == "eval" {
                args.extend(["--checkpoint", p(&ckpt)]);
            }
            if command == "selftest" {
                args.extend(["--cases", "200"]);
            }
            let code = run_cli(&args);
            if code != 0 {
                mismatched.push(format!("{command} exited {code}"));
            }
        }
        for file in ["metrics.json", "epochs.jsonl", "checkpoint.dgck", "ap_table.json", "ablation.json"] {
            let (a, b) = (dirs[0].join(file), dirs[1].join(file));
            if a.exists() || b.exists() {
                compared += 1;
                if std::fs::read(&a).ok() != std::fs::read(&b).ok() {
                    mismatched.push(format!("{command}/{file}"));
                }
            }
        }
    }
    Verdict {
        passed: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            format!("{compared} output files byte-identical across reruns")
        } else {
            format!("differs: {}", mismatched.join(", "))
        },
    }
}

fn main() {
    let artifacts = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&artifacts);
    std::fs::create_dir_all(&artifacts).expect("artifact directory");
    let mut verdicts: Vec<(&str, Verdict)> = Vec::new();

    let (f64s, t64) = selftest_records(Precision::F64);
    let (f32s, t32) = selftest_records(Precision::F32);

    let mut v = describe(&[find(&f32s, "reconstruction_f32"), find(&f64s, "reconstruction_f64")]);
    // Both precisions, all suites included, inside the time limit.
    let seconds = t32 + t64;
    v.passed &= seconds < 10.0;
    v.detail.push_str(&format!(", 1000 cases per precision, {seconds:.2} s of 10 s"));
    verdicts.push(("perfect reconstruction", v));
    verdicts.push(("Parseval energy", describe(&[find(&f32s, "parseval_f32"), find(&f64s, "parseval_f64")])));
    verdicts.push(("WaveNP detail-band preservation", describe(&[find(&f32s, "wavenp_detail_bands_f32"), find(&f64s, "wavenp_detail_bands_f64")])));
    verdicts.push(("NP statistics targeting", describe(&[find(&f32s, "np_statistics_f32"), find(&f64s, "np_statistics_f64")])));
    verdicts.push((
        "DAQS orthogonality and idempotence",
        describe(&[find(&f64s, "daqs_orthogonality_f64"), find(&f64s, "daqs_idempotence_f64"), find(&f64s, "daqs_zero_alpha_noop_f64"), find(&f32s, "daqs_orthogonality_f32")]),
    ));

    let t = Instant::now();
    let grads = gradcheck::run(&RunConfig::default().gradcheck, 0).expect("gradcheck runs");
    let seconds = t.elapsed().as_secs_f64();
    let worst_op = grads.iter().filter(|r| r.name != "gradcheck_toy_model_slice").map(|r| r.value).fold(0.0f64, f64::max);
    let slice = find(&grads, "gradcheck_toy_model_slice");
    verdicts.push((
        "gradient suite",
        Verdict {
            passed: grads.iter().all(|r| r.passed) && seconds < 60.0,
            detail: format!("{} operators worst {worst_op:.2e} (tol 1e-5), model slice {:.2e} (tol 1e-4), {seconds:.2} s of 60 s", grads.len() - 1, slice.value),
        },
    ));
    verdicts.push(("Hungarian matcher vs brute force", describe(&[find(&f64s, "matching_vs_brute_force")])));

    let mut cfg = RunConfig { out: artifacts.join("ablation"), ..RunConfig::default() };
    std::fs::create_dir_all(&cfg.out).expect("ablation directory");
    cfg.ablate.seeds = (0..5).collect();
    let t = Instant::now();
    let records = commands::ablate(&cfg).expect("ablation runs");
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let ordering = |claim: &str| find(&records, &format!("ordering: {claim}"));
    let table4: Vec<&MetricsRecord> =
        ["both >= wavenp", "both >= daqs", "daqs >= baseline", "both > baseline"].iter().map(|c| ordering(c)).collect();
    let mut v = Verdict {
        passed: table4.iter().all(|r| r.passed) && minutes < 10.0,
        detail: table4
            .iter()
            .map(|r| format!("{} on {}/4 (need {})", r.name.trim_start_matches("ordering: "), r.value, r.tolerance))
            .collect::<Vec<_>>()
            .join(", "),
    };
    v.detail.push_str(&format!(", {minutes:.1} min of 10 min"));
    verdicts.push(("component ablation ordering", v));
    let t5 = ordering("low-freq > high-freq");
    verdicts.push((
        "low- vs high-frequency perturbation",
        Verdict { passed: t5.passed && minutes < 10.0, detail: format!("holds on {}/4 (need {})", t5.value, t5.tolerance) },
    ));

    verdicts.push(("determinism", determinism(&artifacts.join("determinism"))));

    println!();
    for (name, v) in &verdicts {
        println!("{} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("ablation artifacts: {}", artifacts.join("ablation").display());
    let failed = verdicts.iter().filter(|(_, v)| !v.passed).count();
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
