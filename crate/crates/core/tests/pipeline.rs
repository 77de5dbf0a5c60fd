use lhmix::cli::{load_data, prepare, train_run, RunConfig, RunData};
use lhmix::eval::{self, macro_f1, micro_f1};
use lhmix::mixup::MixMode;
use lhmix::{Checkpoint, SyntheticSpec, TrainConfig, Trainer};

fn small_data() -> RunData {
    let cfg = RunConfig {
        synthetic: Some(SyntheticSpec {
            n_train: 160,
            n_dev: 60,
            n_test: 80,
            ..SyntheticSpec::default()
        }),
        ..serde_json::from_str(r#"{"synthetic": {}}"#).unwrap()
    };
    load_data(&cfg).unwrap()
}

fn small_config(mode: MixMode) -> TrainConfig {
    let mut c = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 6,
        warmup_epochs: 2,
        patience: 10,
        seed: 21,
        ..TrainConfig::default()
    };
    c.mixup.mode = mode;
    c.encoder.d_model = 12;
    c.encoder.layers = 1;
    c.encoder.max_len = 48;
    c
}

#[test]
fn resumed_run_matches_straight_run() {
    let data = small_data();
    let edges = [10, 50, 200];
    for mode in [MixMode::Off, MixMode::Vanilla, MixMode::Lh] {
        let config = small_config(mode);
        let dir = tempfile::tempdir().unwrap();
        let straight = dir.path().join("straight");
        let resumed = dir.path().join("resumed");
        let m1 = train_run(&data, &data.train, &config, &edges, &straight, None).unwrap();

        // stop after three epochs and carry the state through its JSON form
        let prep = prepare(&data, &data.train, &config, &edges).unwrap();
        let mut t = Trainer::new(config.clone(), &data.taxonomy, &prep.vocab, &prep.train, &prep.dev).unwrap();
        for _ in 0..3 {
            t.run_epoch().unwrap();
        }
        let json = Checkpoint::resumable(&config, &prep.vocab, &data.taxonomy, t.state()).to_json().unwrap();
        let ck = Checkpoint::from_json(&json).unwrap();
        let m2 = train_run(&data, &data.train, &config, &edges, &resumed, Some(&ck)).unwrap();

        assert_eq!(m1, m2, "{mode:?}");
        for f in ["checkpoint.json", "last.json", "training_log.csv", "pairs.csv", "metrics.json"] {
            assert_eq!(
                std::fs::read(straight.join(f)).unwrap(),
                std::fs::read(resumed.join(f)).unwrap(),
                "{mode:?} {f}"
            );
        }
    }
}

#[test]
fn resume_rejects_mismatched_config() {
    let data = small_data();
    let config = small_config(MixMode::Lh);
    let prep = prepare(&data, &data.train, &config, &[10]).unwrap();
    let t = Trainer::new(config.clone(), &data.taxonomy, &prep.vocab, &prep.train, &prep.dev).unwrap();
    let ck = Checkpoint::resumable(&config, &prep.vocab, &data.taxonomy, t.state());
    let other = TrainConfig { seed: 22, ..config };
    let dir = tempfile::tempdir().unwrap();
    assert!(train_run(&data, &data.train, &other, &[10], dir.path(), Some(&ck)).is_err());
    // a checkpoint without training state cannot be resumed
    let plain = Checkpoint::new(&ck.config, &prep.vocab, &data.taxonomy, t.model());
    assert!(train_run(&data, &data.train, &ck.config, &[10], dir.path(), Some(&plain)).is_err());
}

/// Restrict both prediction and gold sets to `group` and recompute from scratch.
fn filtered(pred: &[Vec<usize>], gold: &[Vec<usize>], group: &[usize]) -> (f64, f64) {
    let keep = |sets: &[Vec<usize>]| -> Vec<Vec<usize>> {
        sets.iter().map(|s| s.iter().copied().filter(|l| group.contains(l)).collect()).collect()
    };
    let (p, g) = (keep(pred), keep(gold));
    (micro_f1(&p, &g).unwrap(), macro_f1(&p, &g, group).unwrap())
}

#[test]
fn breakdowns_equal_filter_and_recompute() {
    let data = small_data();
    let config = TrainConfig {
        max_epochs: 3,
        ..small_config(MixMode::Lh)
    };
    let prep = prepare(&data, &data.train, &config, &[10, 50, 200]).unwrap();
    let tax = &data.taxonomy;
    let result = Trainer::new(config.clone(), tax, &prep.vocab, &prep.train, &prep.dev).unwrap().fit().unwrap();
    let pred = eval::predict_all(&result.best_model, tax, &prep.test).unwrap();
    let gold: Vec<Vec<usize>> = prep.test.iter().map(|ex| ex.gold.clone()).collect();
    let rep = eval::report(&pred, &gold, tax, &prep.buckets).unwrap();

    for (d, group) in tax.depth_sets().iter().enumerate() {
        let (mi, ma) = filtered(&pred, &gold, group);
        assert!((rep.per_depth[d].micro_f1 - mi).abs() < 1e-12, "depth {d}");
        assert!((rep.per_depth[d].macro_f1 - ma).abs() < 1e-12, "depth {d}");
    }
    for (b, m) in rep.per_bucket.iter().enumerate() {
        let group: Vec<usize> = (0..tax.len()).filter(|&l| prep.buckets[l] == b).collect();
        let (mi, ma) = filtered(&pred, &gold, &group);
        assert!((m.micro_f1 - mi).abs() < 1e-12, "bucket {b}");
        assert!((m.macro_f1 - ma).abs() < 1e-12, "bucket {b}");
        assert_eq!(m.labels, group.len());
    }
    let everything: Vec<usize> = (0..tax.len()).collect();
    let (mi, ma) = filtered(&pred, &gold, &everything);
    assert!((rep.micro_f1 - mi).abs() < 1e-12 && (rep.macro_f1 - ma).abs() < 1e-12);

    // one bucket holding every label reproduces the overall numbers
    let single = eval::breakdown_by_bucket(&pred, &gold, &vec![0; tax.len()]).unwrap();
    assert_eq!(single.len(), 1);
    assert!((single[0].macro_f1 - rep.macro_f1).abs() < 1e-12);
    assert!((single[0].micro_f1 - rep.micro_f1).abs() < 1e-12);
}
