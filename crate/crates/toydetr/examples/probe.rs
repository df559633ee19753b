//! Runs the ablation grid with overrides from the environment and prints
//! the median table, e.g. `SCENES=200 EPOCHS=40 LR=3e-3 probe`.

use std::time::Instant;

use dgdetr_toydetr::ablation::{run_ablation, Arm};
use dgdetr_toydetr::TrainConfig;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.train_scenes = env("SCENES", 150);
    cfg.epochs = env("EPOCHS", 30);
    cfg.batch_size = env("BATCH", 8);
    cfg.optim.lr = env("LR", cfg.optim.lr);
    cfg.eval.scenes = env("EVAL", 100);
    cfg.eval_every = 0;
    cfg.model.wavenp.sigma_np = env("SIGMA", cfg.model.wavenp.sigma_np);
    let seeds: Vec<u64> = (0..env("SEEDS", 5u64)).collect();
    let arms: Vec<Arm> = match std::env::var("ARMS") {
        Ok(list) => Arm::ALL.into_iter().filter(|a| list.split(',').any(|n| n == a.name())).collect(),
        Err(_) => Arm::ALL.to_vec(),
    };
    let t = Instant::now();
    let report = run_ablation(&cfg, &arms, &seeds, |r| {
        eprintln!("{} s{} loss {:.3}->{:.3} src {:.3} {:?} [{:.0}s]", r.arm, r.seed, r.first_loss, r.final_loss, r.ap_source, r.ap_per_domain.values().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(), t.elapsed().as_secs_f64());
    })
    .unwrap();
    print!("{:<10}", "arm");
    let cols: Vec<String> = std::iter::once("source".to_string()).chain(report.domains.iter().cloned()).collect();
    for c in &cols {
        print!(" {:>14}", c);
    }
    println!();
    for (arm, row) in &report.cells {
        print!("{:<10}", arm.name());
        for c in &cols {
            print!(" {:>14.3}", row[c].median);
        }
        println!();
    }
    for o in &report.orderings {
        println!("{} {}: holds on {}/{} (need {})", if o.passed { "PASS" } else { "FAIL" }, o.claim, o.holds_on.len(), report.domains.len(), o.required);
    }
    println!("total {:.0}s", t.elapsed().as_secs_f64());
}
