use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacbf::cbf_init::{synthesize_b0, CbfOption, InitOptions};
use sacbf::reach_gen::{eval_bk, GeneratorConfig};
use sacbf::sysmodel::pendulum_build;

fn generator(option: CbfOption, k: usize) -> GeneratorConfig {
    let (sys, cons, input) = pendulum_build();
    let b0 = synthesize_b0(&sys, &cons, &input, &InitOptions::pendulum(option)).unwrap().cbf;
    GeneratorConfig::new(sys, cons, input, b0, k).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_vec(vec![rng.random_range(-0.2..0.2), rng.random_range(-1.5..1.5)])
}

#[test]
fn value_is_reconstructed_from_the_trajectory_and_bounded_by_h() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for option in [CbfOption::Plain, CbfOption::Tightened, CbfOption::Contractive] {
        let cfg = generator(option, 4);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let r = eval_bk(&cfg, &x).unwrap();
            assert!((cfg.objective(&r.states) - r.value).abs() <= 1e-9);
            assert!(r.value >= cfg.cons.eval(&x) + cfg.lambda_t(0) - 1e-9);
            // the stored trajectory follows the dynamics with admissible inputs
            for t in 0..r.inputs.len() {
                // boundary states may carry either adjacent mode; both give the same successor
                let (next, _) = cfg.sys.step(&r.states[t], &r.inputs[t]).unwrap();
                let mode = cfg.sys.mode(r.modes[t]);
                assert!(mode.region.max_violation(&r.states[t]) <= 1e-7);
                assert!((mode.apply(&r.states[t], &r.inputs[t]) - &r.states[t + 1]).amax() <= 1e-7);
                assert!((next - &r.states[t + 1]).amax() <= 1e-7);
                assert!(cfg.input.max_violation(&r.inputs[t]) <= 1e-8);
            }
        }
    }
}

#[test]
fn initial_safe_set_is_nested_in_later_ones() {
    let cfg = generator(CbfOption::Plain, 7);
    for i in 0..30 {
        for j in 0..30 {
            let x = DVector::from_vec(vec![-0.16 + 0.32 * i as f64 / 29.0, -1.1 + 2.2 * j as f64 / 29.0]);
            if cfg.b0.eval(&x) <= 0.0 {
                for k in [1, 4, 7] {
                    let v = eval_bk(&cfg.with_horizon(k).unwrap(), &x).unwrap().value;
                    assert!(v <= 1e-6, "B_{k}({x}) = {v} with B_0 <= 0");
                }
            }
        }
    }
}

#[test]
fn close_pairs_respect_the_lipschitz_bound() {
    let cfg = generator(CbfOption::Plain, 3);
    let bound = cfg.lipschitz_bound();
    assert!(bound.is_finite() && bound > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let x = random_state(&mut rng);
        let d = DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).normalize()
            * rng.random_range(1e-6..1e-3);
        let y = &x + &d;
        let gap = (eval_bk(&cfg, &x).unwrap().value - eval_bk(&cfg, &y).unwrap().value).abs();
        assert!(gap <= bound * d.norm() + 1e-9, "gap {gap} > {bound} * {}", d.norm());
    }
}
