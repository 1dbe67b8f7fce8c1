use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacbf::cbf_init::CbfOption;
use sacbf::filter::{apply_filter, filter_nlp, filter_quadratic, Backend, FilterSpec};
use sacbf::learner::SacbfModel;
use sacbf::sysmodel::Polytope;

fn v(a: f64) -> DVector<f64> {
    DVector::from_vec(vec![a])
}

fn spec(q1: f64, q2: f64, l: f64, backend: Backend) -> FilterSpec {
    let m = SacbfModel::constant_quadratic(2, q1, &v(q2), &DMatrix::from_element(1, 1, l)).unwrap();
    FilterSpec::new(m, CbfOption::Plain, 0.0, Polytope::from_box(&[-4.0], &[4.0]).unwrap(), backend).unwrap()
}

/// Nearest feasible point on a uniform grid of `[-4, 4]`.
fn grid_oracle(q1: f64, q2: f64, l: f64, u0: f64, points: usize) -> Option<f64> {
    (0..points)
        .map(|i| -4.0 + 8.0 * i as f64 / (points - 1) as f64)
        .filter(|&u| q1 + q2 * u + l * l * u * u <= 0.0)
        .min_by(|a, b| (a - u0).abs().total_cmp(&(b - u0).abs()))
}

#[test]
fn quadratic_filter_matches_a_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..300 {
        let (q1, q2, l) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.05..3.0));
        let u0 = rng.random_range(-6.0..6.0);
        let r = filter_quadratic(&spec(q1, q2, l, Backend::QuadExact), &DVector::zeros(2), &v(u0)).unwrap();
        match grid_oracle(q1, q2, l, u0, 20_001) {
            Some(o) => {
                assert!(r.feasible && !r.relaxed);
                assert!((r.u[0] - o).abs() <= 1e-3, "u {} vs grid {o}", r.u[0]);
            }
            None => assert!(!r.feasible),
        }
    }
}

#[test]
fn local_search_reaches_the_convex_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = DVector::zeros(2);
    for _ in 0..200 {
        let (q1, q2, l) = (rng.random_range(-5.0..0.0), rng.random_range(-5.0..5.0), rng.random_range(0.05..3.0));
        let u0 = rng.random_range(-6.0..6.0);
        let exact = filter_quadratic(&spec(q1, q2, l, Backend::QuadExact), &x, &v(u0)).unwrap();
        let local = filter_nlp(&spec(q1, q2, l, Backend::NlpLocal), &x, &v(u0)).unwrap();
        assert!(exact.feasible && local.feasible);
        assert!((exact.u[0] - local.u[0]).abs() <= 1e-6, "{} vs {}", exact.u[0], local.u[0]);
    }
}

#[test]
fn infeasible_instances_relax_to_the_barrier_minimizer() {
    // q1 > q2^2 / (4 l^2): the quadratic is positive everywhere
    for (q1, q2, l) in [(1.0, 0.5, 1.0), (5.0, -2.0, 0.5), (0.2, 0.0, 2.0)] {
        let r = apply_filter(&spec(q1, q2, l, Backend::QuadExact), &DVector::zeros(2), &v(3.0)).unwrap();
        assert!(!r.feasible && r.relaxed);
        let expected = (-q2 / (2.0 * l * l)).clamp(-4.0, 4.0);
        assert!((r.u[0] - expected).abs() <= 1e-6);
    }
}

proptest! {
    #[test]
    fn feasible_proposals_pass_through(q1 in -5.0f64..-0.01, q2 in -3.0f64..3.0, l in 0.05f64..2.0, t in 0.0f64..1.0) {
        // pick u0 inside the feasible interval intersected with the box
        let a = l * l;
        let disc = q2 * q2 - 4.0 * a * q1;
        let (lo, hi) = ((-q2 - disc.sqrt()) / (2.0 * a), (-q2 + disc.sqrt()) / (2.0 * a));
        let (lo, hi) = (lo.max(-4.0), hi.min(4.0));
        prop_assume!(lo < hi);
        let u0 = lo + t * (hi - lo);
        prop_assume!(q1 + q2 * u0 + a * u0 * u0 <= -1e-12);
        for backend in [Backend::QuadExact, Backend::NlpLocal] {
            let r = apply_filter(&spec(q1, q2, l, backend), &DVector::zeros(2), &v(u0)).unwrap();
            prop_assert_eq!(r.u[0], u0);
            prop_assert!(r.feasible && !r.relaxed);
        }
    }
}
