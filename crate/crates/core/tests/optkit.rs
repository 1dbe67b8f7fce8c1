use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sacbf::optkit::lp::{solve_lp, LinearProgram, LpStatus};
use sacbf::optkit::polytope::{is_redundant, polytope_pre_reduce, remove_redundant, support};
use sacbf::optkit::qcqp::{solve_qcqp, ConvexQcqp, QcqpStatus};
use sacbf::sysmodel::Polytope;

/// Bounded random LP: box `|z_i| <= 3` plus extra random halfspaces containing the origin.
fn bounded_lp(c: &[f64], extra: &[(f64, f64, f64)]) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let mut rows: Vec<[f64; 2]> = vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
    let mut rhs = vec![3.0; 4];
    for &(a, b, r) in extra {
        rows.push([a, b]);
        rhs.push(r);
    }
    let g = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    (DVector::from_row_slice(c), g, DVector::from_vec(rhs))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn qcqp_agrees_with_simplex_on_linear_instances(
        c in prop::array::uniform2(-2.0f64..2.0),
        extra in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.1f64..2.0), 0..5),
    ) {
        let (c, g, h) = bounded_lp(&c, &extra);
        let lp = solve_lp(&LinearProgram::new(c.clone(), g.clone(), h.clone())).unwrap();
        prop_assert_eq!(lp.status, LpStatus::Optimal);
        let q = solve_qcqp(&ConvexQcqp::new(DMatrix::zeros(2, 2), c, 0.0).with_linear(g, h)).unwrap();
        prop_assert_eq!(q.status, QcqpStatus::Optimal);
        prop_assert!((q.objective - lp.objective).abs() <= 1e-8 * (1.0 + lp.objective.abs()), "{} vs {}", q.objective, lp.objective);
    }

    #[test]
    fn reduced_polytopes_have_no_redundant_rows(
        extra in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.1f64..4.0), 1..8),
    ) {
        let (_, g, h) = bounded_lp(&[0.0, 0.0], &extra);
        let p = Polytope::new(g, h).unwrap();
        let r = remove_redundant(&p).unwrap();
        for i in 0..r.n_faces() {
            prop_assert!(!is_redundant(&r, i).unwrap());
        }
        // same set: identical support in every facet direction of either description
        for i in 0..p.n_faces() {
            let d = p.h_mat.row(i).transpose();
            let (a, b) = (support(&p, &d).unwrap().unwrap(), support(&r, &d).unwrap().unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn pre_image_reduction_is_irredundant(theta in 0.0f64..std::f64::consts::TAU, scale in 0.3f64..0.95) {
        let a = DMatrix::from_row_slice(2, 2, &[scale * theta.cos(), -scale * theta.sin(), scale * theta.sin(), scale * theta.cos()]);
        let (_, g, h) = bounded_lp(&[0.0, 0.0], &[(1.0, 1.0, 4.0), (1.0, -1.0, 4.0)]);
        let p = Polytope::new(g, h).unwrap();
        let pre = polytope_pre_reduce(&a, &p).unwrap();
        for i in 0..pre.n_faces() {
            prop_assert!(!is_redundant(&pre, i).unwrap());
        }
    }
}
