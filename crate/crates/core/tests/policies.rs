use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacbf::optkit::polytope::vertices;
use sacbf::policies::{
    build_terminal_set, dare_solve, learned_mpc_hyper, mpc_dataset, mpc_enumerate, mpc_solve, policy_eval, train_learned_mpc,
    MpcConfig, Policy,
};
use sacbf::sysmodel::pendulum_build;

fn random_state(rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_vec(vec![rng.random_range(-0.15..0.15), rng.random_range(-1.0..1.0)])
}

#[test]
fn mpc_matches_mode_sequence_enumeration() {
    let (sys, cons, input) = pendulum_build();
    let cfg = MpcConfig::pendulum(&sys, &cons, &input, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 50 {
        let x = random_state(&mut rng);
        let Some(oracle) = mpc_enumerate(&cfg, &sys, &input, &x).unwrap() else {
            assert!(mpc_solve(&cfg, &sys, &input, &x).unwrap().is_none());
            continue;
        };
        let s = mpc_solve(&cfg, &sys, &input, &x).unwrap().expect("feasible by enumeration");
        assert!((s.cost - oracle).abs() <= 1e-6, "x={x} bb={} enum={oracle}", s.cost);
        checked += 1;
    }
}

#[test]
fn terminal_set_is_invariant_with_admissible_inputs() {
    let (sys, cons, input) = pendulum_build();
    let cfg = MpcConfig::pendulum(&sys, &cons, &input, 5).unwrap();
    let omega = &cfg.terminal_set;
    for v in vertices(omega) {
        let next = &cfg.gain.a_cl * &v;
        assert!(omega.max_violation(&next) <= 1e-8, "vertex {v} maps outside");
        assert!(input.max_violation(&(-(&cfg.gain.k * &v))) <= 1e-8);
    }
    // simulation oracle from interior points
    let verts = vertices(omega);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let w: Vec<f64> = (0..verts.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = w.iter().sum();
        let mut x = verts.iter().zip(&w).fold(DVector::zeros(2), |acc, (v, wi)| acc + v * (wi / total));
        for _ in 0..50 {
            assert!(cons.eval(&x) <= 1e-9);
            assert!(input.max_violation(&(-(&cfg.gain.k * &x))) <= 1e-9);
            x = &cfg.gain.a_cl * x;
        }
    }
}

#[test]
fn points_beyond_a_facet_leave_the_admissible_set() {
    let (sys, cons, input) = pendulum_build();
    let cfg = MpcConfig::pendulum(&sys, &cons, &input, 5).unwrap();
    let omega = &cfg.terminal_set;
    let verts = vertices(omega);
    for i in 0..omega.n_faces() {
        let a = omega.h_mat.row(i).transpose();
        let b = omega.h_vec[i];
        // facet midpoint: average of the vertices on this facet
        let on: Vec<&DVector<f64>> = verts.iter().filter(|v| (a.dot(v) - b).abs() <= 1e-9).collect();
        assert!(!on.is_empty());
        let mid = on.iter().fold(DVector::zeros(2), |acc, v| acc + *v) / on.len() as f64;
        let mut x = &mid + &a * (1e-6 / a.norm_squared());
        let mut left = false;
        for _ in 0..500 {
            if cons.eval(&x) > 0.0 || input.max_violation(&(-(&cfg.gain.k * &x))) > 0.0 {
                left = true;
                break;
            }
            x = &cfg.gain.a_cl * x;
        }
        assert!(left, "perturbation of facet {i} stayed admissible");
    }
}

#[test]
fn zero_closed_loop_gives_immediate_fixed_point() {
    let (_, cons, input) = pendulum_build();
    let q = DMatrix::identity(2, 2);
    let gain = dare_solve(&DMatrix::zeros(2, 2), &DMatrix::from_row_slice(2, 1, &[0.0, 0.05]), &q, &DMatrix::identity(1, 1))
        .unwrap();
    let x_set = sacbf::policies::state_polytope(&cons).unwrap();
    let omega = build_terminal_set(&gain, &x_set, &input).unwrap();
    assert!(sacbf::optkit::polytope::set_equal(&omega, &x_set).unwrap());
}

#[test]
fn supported_horizons_and_cost_monotonicity_diagnostic() {
    let (sys, cons, input) = pendulum_build();
    let base = MpcConfig::pendulum(&sys, &cons, &input, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut violations = 0;
    let mut compared = 0;
    let start = Instant::now();
    for _ in 0..50 {
        let x = random_state(&mut rng);
        let mut costs = Vec::new();
        for n in [5, 6, 7] {
            let cfg = base.with_horizon(n).unwrap();
            costs.push(mpc_solve(&cfg, &sys, &input, &x).unwrap().map(|s| s.cost));
        }
        if let (Some(c5), Some(c7)) = (costs[0], costs[2]) {
            compared += 1;
            if c7 > c5 + 1e-6 {
                violations += 1;
            }
        }
    }
    eprintln!(
        "horizon monotonicity: {violations} of {compared} states with cost(N=7) > cost(N=5) ({:.1}s)",
        start.elapsed().as_secs_f64()
    );
    assert!(compared > 0);
}

#[test]
fn learned_mpc_imitates_the_controller() {
    let (sys, cons, input) = pendulum_build();
    let cfg = MpcConfig::pendulum(&sys, &cons, &input, 7).unwrap();
    let data = mpc_dataset(&cfg, &sys, &input, 4000, 40000, 3).unwrap();
    let model = train_learned_mpc(&data, &learned_mpc_hyper()).unwrap();
    eprintln!("learned MPC: drawn {} train mse {:.3e} validation mse {:.3e}", data.drawn, model.train_mse, model.validation_mse);
    assert_eq!(model.nets[0].widths(), &[2, 16, 32, 8, 1]);
    assert_eq!(model.nets[0].activations()[0], sacbf::learner::Activation::Relu);
    assert!(model.train_mse <= 10.0 * model.validation_mse.max(1e-12), "{} vs {}", model.train_mse, model.validation_mse);
    let u = policy_eval(&Policy::Learned(model), &DVector::zeros(2), 0).unwrap();
    assert!(u[0].is_finite() && u[0].abs() <= 0.05, "u(0) = {}", u[0]);
}
