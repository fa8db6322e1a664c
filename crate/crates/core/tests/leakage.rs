use omnidet::data::{generate_synthetic, Pools};
use omnidet::trainer::Trainer;
use omnidet::{Config, Exec, Granularity};

#[test]
fn training_never_reads_withheld_boxes() {
    let d = generate_synthetic(5, 24, 64, 3, "train", Exec::Parallel)
        .unwrap()
        .partition([0.25, 0.5, 0.25], 5)
        .unwrap();
    assert_eq!(d.hidden.len(), d.manifest.count(Granularity::Weak) + d.manifest.count(Granularity::Unlabeled));
    for (i, r) in d.manifest.records.iter().enumerate() {
        let s = d.sample(i).unwrap();
        assert_eq!(s.boxes().is_some(), r.granularity == Granularity::Full);
        assert_eq!(s.image_labels().is_some(), r.granularity != Granularity::Unlabeled);
    }
    let cfg = Config {
        image_size: 64,
        channels: 8,
        steps: 4,
        ..Config::default()
    };
    let mut t = Trainer::new(cfg, Exec::Parallel).unwrap();
    let pools = Pools::from_manifest(&d.manifest);
    while t.state.step < 4 {
        let b = t.make_batch(&d, &pools).unwrap();
        assert!(b.iter().all(|s| s.granularity == Granularity::Full || s.boxes().is_none()));
        t.train_step(&b).unwrap();
    }
    assert!(!d.hidden.was_accessed());
    t.evaluate(&d).unwrap();
    assert!(d.hidden.was_accessed());
}
