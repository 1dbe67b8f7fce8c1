//! Polytope algebra certified by linear programs.

use nalgebra::{DMatrix, DVector};

use super::lp::{solve_lp, LinearProgram, LpStatus};
use crate::error::Result;
use crate::sysmodel::Polytope;

/// Tolerance for redundancy and containment certificates.
pub const SET_TOL: f64 = 1e-9;

/// `max d'x` over the polytope; `None` when unbounded, `-inf` when empty.
pub fn support(p: &Polytope, direction: &DVector<f64>) -> Result<Option<f64>> {
    if p.is_flagged_empty() {
        return Ok(Some(f64::NEG_INFINITY));
    }
    let sol = solve_lp(&LinearProgram::new(
        -direction,
        p.h_mat.clone(),
        p.h_vec.clone(),
    ))?;
    Ok(match sol.status {
        LpStatus::Optimal => Some(-sol.objective),
        LpStatus::Unbounded => None,
        LpStatus::Infeasible => Some(f64::NEG_INFINITY),
    })
}

/// True when the polytope has no point (LP feasibility).
pub fn is_empty(p: &Polytope) -> Result<bool> {
    if p.is_flagged_empty() {
        return Ok(true);
    }
    let sol = solve_lp(&LinearProgram::new(
        DVector::zeros(p.dim()),
        p.h_mat.clone(),
        p.h_vec.clone(),
    ))?;
    Ok(sol.status == LpStatus::Infeasible)
}

/// Scales rows to unit norm and drops zero rows, flagging trivially empty systems.
fn normalize_rows(p: &Polytope) -> Polytope {
    let n = p.dim();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..p.n_faces() {
        let norm = p.h_mat.row(i).norm();
        if norm <= 1e-12 {
            if p.h_vec[i] < -1e-12 {
                return Polytope::empty(n);
            }
            continue;
        }
        rows.extend(p.h_mat.row(i).iter().map(|v| v / norm));
        rhs.push(p.h_vec[i] / norm);
    }
    let m = rhs.len();
    Polytope::new(DMatrix::from_row_slice(m, n, &rows), DVector::from_vec(rhs))
        .expect("normalized rows")
}

fn without_row(p: &Polytope, skip: usize) -> Polytope {
    let keep: Vec<usize> = (0..p.n_faces()).filter(|&i| i != skip).collect();
    select_rows(p, &keep)
}

fn select_rows(p: &Polytope, keep: &[usize]) -> Polytope {
    let h_mat = DMatrix::from_fn(keep.len(), p.dim(), |r, c| p.h_mat[(keep[r], c)]);
    let h_vec = DVector::from_fn(keep.len(), |r, _| p.h_vec[keep[r]]);
    Polytope::new(h_mat, h_vec).expect("row subset")
}

/// Whether row `i` is implied by the remaining rows.
pub fn is_redundant(p: &Polytope, i: usize) -> Result<bool> {
    let rest = without_row(p, i);
    let dir = p.h_mat.row(i).transpose();
    Ok(match support(&rest, &dir)? {
        None => false,
        Some(v) => v <= p.h_vec[i] + SET_TOL * (1.0 + p.h_vec[i].abs()),
    })
}

/// Minimal representation with unit-norm rows; empty sets come back flagged.
pub fn remove_redundant(p: &Polytope) -> Result<Polytope> {
    let mut cur = normalize_rows(p);
    if cur.is_flagged_empty() || is_empty(&cur)? {
        return Ok(Polytope::empty(p.dim()));
    }
    let mut i = 0;
    while i < cur.n_faces() {
        if is_redundant(&cur, i)? {
            cur = without_row(&cur, i);
        } else {
            i += 1;
        }
    }
    Ok(cur)
}

/// `{x in P : A_cl x in P}` with redundant rows removed.
pub fn polytope_pre_reduce(a_cl: &DMatrix<f64>, p: &Polytope) -> Result<Polytope> {
    if a_cl.nrows() != a_cl.ncols() || a_cl.nrows() != p.dim() {
        return Err(crate::error::Error::Dimension(
            "closed-loop matrix must be square and match the polytope".into(),
        ));
    }
    if p.is_flagged_empty() {
        return Ok(p.clone());
    }
    let pulled = Polytope::new(&p.h_mat * a_cl, p.h_vec.clone())?;
    remove_redundant(&p.intersect(&pulled)?)
}

/// `inner ⊆ outer`, certified face by face.
pub fn is_subset(inner: &Polytope, outer: &Polytope) -> Result<bool> {
    if is_empty(inner)? {
        return Ok(true);
    }
    for i in 0..outer.n_faces() {
        let dir = outer.h_mat.row(i).transpose();
        match support(inner, &dir)? {
            None => return Ok(false),
            Some(v) if v > outer.h_vec[i] + SET_TOL * (1.0 + outer.h_vec[i].abs()) => {
                return Ok(false)
            }
            Some(_) => {}
        }
    }
    Ok(true)
}

pub fn set_equal(a: &Polytope, b: &Polytope) -> Result<bool> {
    Ok(is_subset(a, b)? && is_subset(b, a)?)
}

/// Vertices of a bounded polytope by enumerating `n`-row intersections.
pub fn vertices(p: &Polytope) -> Vec<DVector<f64>> {
    let n = p.dim();
    let m = p.n_faces();
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        return out;
    }
    loop {
        let a = DMatrix::from_fn(n, n, |r, c| p.h_mat[(idx[r], c)]);
        let b = DVector::from_fn(n, |r, _| p.h_vec[idx[r]]);
        if let Some(x) = a.lu().solve(&b) {
            if x.iter().all(|v| v.is_finite())
                && p.max_violation(&x) <= 1e-9
                && !out.iter().any(|v| (v - &x).amax() < 1e-9)
            {
                out.push(x);
            }
        }
        // next combination
        let mut k = n;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if idx[k] < m - n + k {
                idx[k] += 1;
                for j in k + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Polytope {
        Polytope::symmetric_box(&[1.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_map_keeps_box() {
        let r = polytope_pre_reduce(&DMatrix::zeros(2, 2), &unit_box()).unwrap();
        assert!(set_equal(&r, &unit_box()).unwrap());
        assert_eq!(r.n_faces(), 4);
    }

    #[test]
    fn doubling_map_halves_box() {
        let r = polytope_pre_reduce(&(DMatrix::identity(2, 2) * 2.0), &unit_box()).unwrap();
        assert!(set_equal(&r, &Polytope::symmetric_box(&[0.5, 0.5]).unwrap()).unwrap());
        assert_eq!(r.n_faces(), 4);
    }

    #[test]
    fn empty_result_is_flagged() {
        let p = Polytope::new(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_row_slice(&[1.0, -2.0]),
        )
        .unwrap();
        let r = polytope_pre_reduce(&DMatrix::identity(1, 1), &p).unwrap();
        assert!(r.is_flagged_empty());
    }

    #[test]
    fn redundancy_removal_is_minimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let m = 12;
            let h = DMatrix::from_fn(m, 2, |_, _| rng.random_range(-1.0..1.0));
            let g = DVector::from_fn(m, |_, _| rng.random_range(0.2..1.0));
            let p = Polytope::new(h, g).unwrap().intersect(&unit_box()).unwrap();
            let r = remove_redundant(&p).unwrap();
            assert!(set_equal(&r, &p).unwrap());
            for i in 0..r.n_faces() {
                assert!(!is_redundant(&r, i).unwrap(), "row {i} redundant");
            }
        }
    }

    #[test]
    fn pre_reduce_membership_matches_two_step_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.7..0.7));
            let r = polytope_pre_reduce(&a, &unit_box()).unwrap();
            for _ in 0..200 {
                let x = DVector::from_fn(2, |_, _| rng.random_range(-1.3..1.3));
                let direct = unit_box().max_violation(&x) <= 0.0
                    && unit_box().max_violation(&(&a * &x)) <= 0.0;
                let margin = unit_box()
                    .max_violation(&x)
                    .abs()
                    .min(unit_box().max_violation(&(&a * &x)).abs());
                if margin > 1e-9 {
                    assert_eq!(r.contains(&x, 1e-12), direct);
                }
            }
        }
    }

    #[test]
    fn box_vertices() {
        let v = vertices(&unit_box());
        assert_eq!(v.len(), 4);
    }
}
