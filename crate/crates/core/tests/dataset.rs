use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sacbf::cbf_init::{synthesize_b0, CbfOption, InitOptions};
use sacbf::dataset::{build_labeled_dataset, config_digest, load_dataset, save_dataset, GridSpec};
use sacbf::reach_gen::{eval_q, GeneratorConfig};
use sacbf::sysmodel::pendulum_build;

fn generator(k: usize) -> GeneratorConfig {
    let (sys, cons, input) = pendulum_build();
    let b0 = synthesize_b0(&sys, &cons, &input, &InitOptions::pendulum(CbfOption::Tightened)).unwrap().cbf;
    GeneratorConfig::new(sys, cons, input, b0, k).unwrap()
}

#[test]
fn labels_are_reproducible_admitted_and_cover_the_grid() {
    let cfg = generator(3);
    let grid = GridSpec::new(vec![9, 8, 7], vec![-0.16, -1.1, -4.0], vec![0.16, 1.1, 4.0]).unwrap();
    let b_bar = 1.0;
    let d = build_labeled_dataset(&cfg, &grid, b_bar).unwrap();
    assert_eq!(d.total, 9 * 8 * 7);
    assert!(d.admitted() > 0 && d.admitted() < d.total);
    assert!(d.max_label() <= b_bar);
    assert_eq!(d.digest, config_digest(&cfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in sample(&mut rng, d.admitted(), 100.min(d.admitted())) {
        let s = &d.samples[i];
        assert!((eval_q(&cfg, &s.x, &s.u).unwrap() - s.q).abs() <= 1e-9);
    }
    // an independent full pass admits exactly the same tuples
    let mut expected = 0;
    for p in grid.points() {
        let x = nalgebra::DVector::from_vec(p[..2].to_vec());
        let u = nalgebra::DVector::from_vec(p[2..].to_vec());
        if eval_q(&cfg, &x, &u).unwrap() <= b_bar {
            expected += 1;
        }
    }
    assert_eq!(d.admitted(), expected);
}

#[test]
fn files_round_trip_bit_exactly_and_keep_the_generator() {
    let cfg = generator(2);
    let grid = GridSpec::new(vec![4, 4, 3], vec![-0.16, -1.1, -4.0], vec![0.16, 1.1, 4.0]).unwrap();
    let d = build_labeled_dataset(&cfg, &grid, 10.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.bin");
    save_dataset(&d, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, d);
    let regen = back.generator().unwrap();
    assert_eq!(config_digest(&regen).unwrap(), d.digest);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_dataset(&path).is_err());
}
