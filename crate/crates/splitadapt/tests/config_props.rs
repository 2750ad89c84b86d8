use proptest::prelude::*;
use splitadapt::config::{ExperimentConfig, KEYS};
use splitadapt::experiment::{read_rows, write_rows, Row};

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ini_text_round_trips(
        alpha in 0.0f64..1.0,
        laplace in 0.0f64..5.0,
        lr in 1e-6f64..1e-1,
        seeds in proptest::collection::vec(any::<u64>(), 1..6),
        sweep in proptest::collection::vec(0.0f64..10.0, 1..6),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.client.alpha = alpha;
        cfg.client.laplace = laplace;
        cfg.adapt.lr = lr;
        cfg.seeds = seeds;
        cfg.sweep = sweep;
        let mut back = ExperimentConfig::default();
        back.merge_ini(&cfg.to_ini()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn garbage_values_are_rejected_by_field(k in 0..KEYS.len(), v in "[^\n=]{0,12}") {
        let mut cfg = ExperimentConfig::default();
        if let Err(e) = cfg.apply_override(&format!("{}={v}", KEYS[k])).and_then(|_| cfg.validate()) {
            prop_assert!(!e.field.is_empty());
        }
    }

    #[test]
    fn csv_rows_round_trip(acc in proptest::option::of(0.0f64..=1.0), ssim in proptest::option::of(-1.0f64..=1.0), seed in any::<u64>()) {
        let row = Row {
            run_id: format!("x-{seed}"),
            mode: "SA".into(),
            shots: Some(3),
            seed,
            accuracy: acc,
            ssim,
            psnr: ssim.map(|s| s * 40.0),
            wall_seconds: 0.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_rows(&p, std::slice::from_ref(&row)).unwrap();
        prop_assert_eq!(read_rows(&p).unwrap(), vec![row]);
    }
}
