use dgdetr_toydetr::checkpoint;
use dgdetr_toydetr::train::{run, train, Schedule};
use dgdetr_toydetr::{TrainConfig, TrainState};

fn small() -> TrainConfig {
    let mut cfg = TrainConfig { train_scenes: 12, epochs: 3, batch_size: 4, eval_every: 1, ..Default::default() };
    cfg.eval.scenes = 6;
    cfg.domains.truncate(2);
    cfg
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = small();
    cfg.optim.lr = 0.0;
    let (state, history) = train(&cfg, 4, None).unwrap();
    assert_eq!(state.params, TrainState::new(cfg, 4).unwrap().params);
    assert_eq!(history.len(), 3);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_logs() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, 9, Some(a.path())).unwrap();
    train(&cfg, 9, Some(b.path())).unwrap();
    for f in ["checkpoint.dgck", "epochs.jsonl"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    train(&cfg, 10, Some(c.path())).unwrap();
    assert_ne!(std::fs::read(a.path().join("checkpoint.dgck")).unwrap(), std::fs::read(c.path().join("checkpoint.dgck")).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut cfg = small();
    cfg.schedule = Schedule::Cosine;
    let full = tempfile::tempdir().unwrap();
    let (whole, history) = train(&cfg, 3, Some(full.path())).unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(cfg.clone(), 3).unwrap();
    let first = run(&mut state, 1, Some(part.path())).unwrap();
    checkpoint::save(&state, &part.path().join("mid.dgck")).unwrap();
    let mut resumed = checkpoint::load(&part.path().join("mid.dgck")).unwrap();
    assert_eq!(resumed, state);
    let rest = run(&mut resumed, cfg.epochs, Some(part.path())).unwrap();

    assert_eq!(resumed.params, whole.params);
    assert_eq!(resumed.adam, whole.adam);
    assert_eq!([first, rest].concat(), history);
    let log = |dir: &std::path::Path| std::fs::read(dir.join("epochs.jsonl")).unwrap();
    assert_eq!(log(part.path()), log(full.path()));
}

#[test]
fn history_reports_source_and_domain_ap() {
    let (_, history) = train(&small(), 1, None).unwrap();
    assert!(history.iter().all(|r| r.ap_source.is_some() && r.loss.is_finite()));
    let last = history.last().unwrap().ap_per_domain.as_ref().unwrap();
    assert_eq!(last.len(), 2);
    assert!(history[..2].iter().all(|r| r.ap_per_domain.is_none()));
}

#[test]
fn checkpoint_rejects_corruption() {
    let (state, _) = train(&TrainConfig { epochs: 1, ..small() }, 2, None).unwrap();
    let bytes = checkpoint::to_bytes(&state).unwrap();
    assert_eq!(checkpoint::from_bytes(&bytes).unwrap(), state);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = TrainConfig { batch_size: 0, ..small() };
    assert!(TrainState::new(cfg, 0).is_err());
}
