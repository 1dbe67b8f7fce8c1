//! Log-determinant maximization under linear matrix inequalities by a
//! barrier interior-point method.

use nalgebra::{DMatrix, DVector};

use super::Tolerances;
use crate::error::{Error, Result};

/// Symmetric matrix affine in the decision vector: `C + sum_i y_i F_i`.
#[derive(Clone, Debug)]
pub struct AffineSym {
    pub constant: DMatrix<f64>,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl AffineSym {
    pub fn eval(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (yi, f) in y.iter().zip(&self.coeffs) {
            if *yi != 0.0 {
                m += *yi * f;
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.constant.nrows()
    }

    fn shifted(&self, n_vars: usize) -> AffineSym {
        // appends a coefficient identity for the phase-one shift variable
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(n_vars, DMatrix::zeros(self.size(), self.size()));
        coeffs.push(DMatrix::identity(self.size(), self.size()));
        AffineSym {
            constant: self.constant.clone(),
            coeffs,
        }
    }
}

/// `max log det E` over symmetric `E` and `Y` subject to `M_k(E, Y) >= 0`.
#[derive(Clone, Debug)]
pub struct LmiProblem {
    pub n_x: usize,
    pub n_u: usize,
    pub blocks: Vec<AffineSym>,
}

#[derive(Clone, Debug)]
pub struct LmiSolution {
    pub e: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Value of `-log det E`.
    pub objective: f64,
    /// Minimum eigenvalue of every constraint block at the solution.
    pub block_min_eigs: Vec<f64>,
}

impl LmiProblem {
    pub fn n_vars(&self) -> usize {
        self.n_x * (self.n_x + 1) / 2 + self.n_u * self.n_x
    }

    /// Builds the affine blocks by evaluating `blocks` on the coordinate basis.
    pub fn from_fn<F>(n_x: usize, n_u: usize, blocks: F) -> Result<Self>
    where
        F: Fn(&DMatrix<f64>, &DMatrix<f64>) -> Vec<DMatrix<f64>>,
    {
        let shell = Self {
            n_x,
            n_u,
            blocks: Vec::new(),
        };
        let nv = shell.n_vars();
        let zero = DVector::zeros(nv);
        let (e0, y0) = shell.unpack(&zero);
        let base = blocks(&e0, &y0);
        let mut coeffs: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(nv); base.len()];
        for i in 0..nv {
            let mut y = DVector::zeros(nv);
            y[i] = 1.0;
            let (e, yy) = shell.unpack(&y);
            let vals = blocks(&e, &yy);
            if vals.len() != base.len() {
                return Err(Error::Dimension(
                    "LMI block count changes with the decision".into(),
                ));
            }
            for (k, v) in vals.iter().enumerate() {
                coeffs[k].push(v - &base[k]);
            }
        }
        let affine: Vec<AffineSym> = base
            .into_iter()
            .zip(coeffs)
            .map(|(constant, coeffs)| AffineSym { constant, coeffs })
            .collect();
        for (k, b) in affine.iter().enumerate() {
            let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-14 * (1.0 + m.amax());
            if b.constant.nrows() != b.constant.ncols()
                || !sym(&b.constant)
                || !b.coeffs.iter().all(sym)
            {
                return Err(Error::InvalidArgument(format!(
                    "LMI block {k} is not symmetric"
                )));
            }
        }
        // affinity probe at a fixed point
        let probe = DVector::from_fn(nv, |i, _| 0.3 + 0.17 * i as f64);
        let (e, yy) = shell.unpack(&probe);
        for (k, v) in blocks(&e, &yy).iter().enumerate() {
            if (v - affine[k].eval(&probe)).amax() > 1e-9 * (1.0 + v.amax()) {
                return Err(Error::InvalidArgument(format!(
                    "LMI block {k} is not affine in (E, Y)"
                )));
            }
        }
        Ok(Self {
            n_x,
            n_u,
            blocks: affine,
        })
    }

    pub fn unpack(&self, y: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n_x;
        let mut e = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                e[(i, j)] = y[k];
                e[(j, i)] = y[k];
                k += 1;
            }
        }
        let mut gain = DMatrix::zeros(self.n_u, n);
        for i in 0..self.n_u {
            for j in 0..n {
                gain[(i, j)] = y[k];
                k += 1;
            }
        }
        (e, gain)
    }

    pub fn pack(&self, e: &DMatrix<f64>, gain: &DMatrix<f64>) -> DVector<f64> {
        let mut y = Vec::with_capacity(self.n_vars());
        for i in 0..self.n_x {
            for j in i..self.n_x {
                y.push(e[(i, j)]);
            }
        }
        for i in 0..self.n_u {
            for j in 0..self.n_x {
                y.push(gain[(i, j)]);
            }
        }
        DVector::from_vec(y)
    }

    fn e_affine(&self) -> AffineSym {
        let nv = self.n_vars();
        let coeffs = (0..nv)
            .map(|i| {
                let mut y = DVector::zeros(nv);
                y[i] = 1.0;
                self.unpack(&y).0
            })
            .collect();
        AffineSym {
            constant: DMatrix::zeros(self.n_x, self.n_x),
            coeffs,
        }
    }

    /// Minimum eigenvalue of each block at `(E, Y)`, by symmetric eigendecomposition.
    pub fn block_min_eigs(&self, e: &DMatrix<f64>, gain: &DMatrix<f64>) -> Vec<f64> {
        let y = self.pack(e, gain);
        self.blocks.iter().map(|b| min_eig(&b.eval(&y))).collect()
    }
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen().eigenvalues.min()
}

enum Objective<'a> {
    Linear(&'a DVector<f64>),
    NegLogDet(&'a AffineSym),
}

/// Barrier value, or `None` when some block leaves the PD cone.
fn barrier_value(obj: &Objective, t: f64, blocks: &[AffineSym], y: &DVector<f64>) -> Option<f64> {
    let mut val = match obj {
        Objective::Linear(c) => t * c.dot(y),
        Objective::NegLogDet(e) => -t * log_det(&e.eval(y))?,
    };
    for b in blocks {
        val -= log_det(&b.eval(y))?;
    }
    Some(val)
}

fn log_det(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(
        2.0 * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>(),
    )
}

/// Gradient and Hessian of `-w log det M(y)` accumulated into `g`, `h`.
fn accumulate(
    b: &AffineSym,
    w: f64,
    y: &DVector<f64>,
    g: &mut DVector<f64>,
    h: &mut DMatrix<f64>,
) -> Option<()> {
    let inv = b.eval(y).cholesky()?.inverse();
    let prods: Vec<DMatrix<f64>> = b.coeffs.iter().map(|f| &inv * f).collect();
    let nv = g.len();
    for i in 0..nv {
        g[i] -= w * prods[i].trace();
        for j in 0..=i {
            let v = w * (&prods[i] * &prods[j]).trace();
            h[(i, j)] += v;
            if i != j {
                h[(j, i)] += v;
            }
        }
    }
    Some(())
}

/// Path-following barrier method; `early` stops once it returns true after a centering.
fn barrier_solve(
    obj: &Objective,
    blocks: &[AffineSym],
    mut y: DVector<f64>,
    gap: f64,
    early: Option<&dyn Fn(&DVector<f64>) -> bool>,
) -> Result<DVector<f64>> {
    let nv = y.len();
    let total_dim: usize = blocks.iter().map(AffineSym::size).sum::<usize>()
        + match obj {
            Objective::NegLogDet(e) => e.size(),
            Objective::Linear(_) => 0,
        };
    let mut t = 1.0;
    loop {
        for _ in 0..200 {
            let mut g = DVector::zeros(nv);
            let mut h = DMatrix::zeros(nv, nv);
            match obj {
                Objective::Linear(c) => g += t * *c,
                Objective::NegLogDet(e) => accumulate(e, t, &y, &mut g, &mut h)
                    .ok_or_else(|| Error::Solver("E left the PD cone".into()))?,
            }
            for b in blocks {
                accumulate(b, 1.0, &y, &mut g, &mut h)
                    .ok_or_else(|| Error::Solver("LMI iterate left the PD cone".into()))?;
            }
            let reg = 1e-14 * (1.0 + h.diagonal().amax());
            for i in 0..nv {
                h[(i, i)] += reg;
            }
            let Some(chol) = h.cholesky() else {
                return Err(Error::Solver("singular barrier Hessian".into()));
            };
            let dy = -chol.solve(&g);
            let decrement = -g.dot(&dy);
            if decrement / 2.0 <= 1e-12 {
                break;
            }
            let f0 = barrier_value(obj, t, blocks, &y)
                .ok_or_else(|| Error::Solver("infeasible iterate".into()))?;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..80 {
                let trial = &y + step * &dy;
                if let Some(f1) = barrier_value(obj, t, blocks, &trial) {
                    if f1 <= f0 - 0.25 * step * decrement {
                        y = trial;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if let Some(stop) = early {
            if stop(&y) {
                return Ok(y);
            }
        }
        if total_dim as f64 / t < gap {
            return Ok(y);
        }
        t *= 10.0;
    }
}

pub fn solve_logdet_sdp(p: &LmiProblem) -> Result<LmiSolution> {
    solve_logdet_sdp_with(p, &Tolerances::default())
}

pub fn solve_logdet_sdp_with(p: &LmiProblem, tol: &Tolerances) -> Result<LmiSolution> {
    let nv = p.n_vars();
    let e_aff = p.e_affine();
    let mut all_blocks = p.blocks.clone();
    all_blocks.push(e_aff.clone());
    let starts = [1e-2, 1e-1, 1.0, 1e-3, 10.0];
    let mut best: Option<LmiSolution> = None;
    let mut last_err = None;
    for scale in starts {
        let start = p.pack(
            &(DMatrix::identity(p.n_x, p.n_x) * scale),
            &DMatrix::zeros(p.n_u, p.n_x),
        );
        let feasible = match phase_one(&all_blocks, &start, nv) {
            Ok(y) => y,
            Err(e @ Error::LmiInfeasible { .. }) => return Err(e),
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let y = match barrier_solve(
            &Objective::NegLogDet(&e_aff),
            &p.blocks,
            feasible,
            1e-9,
            None,
        ) {
            Ok(y) => y,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let (e, gain) = p.unpack(&y);
        let Some(ld) = log_det(&e) else { continue };
        let block_min_eigs = p.block_min_eigs(&e, &gain);
        if block_min_eigs.iter().any(|v| *v < -tol.lmi) {
            continue;
        }
        let cand = LmiSolution {
            e,
            y: gain,
            objective: -ld,
            block_min_eigs,
        };
        if best.as_ref().is_none_or(|b| cand.objective < b.objective) {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| {
        last_err
            .unwrap_or_else(|| Error::Solver("no start produced a validated LMI solution".into()))
    })
}

/// Finds a strictly feasible point by minimizing a common shift `s` with `M_k + s I > 0`.
fn phase_one(blocks: &[AffineSym], start: &DVector<f64>, nv: usize) -> Result<DVector<f64>> {
    let eigs: Vec<f64> = blocks.iter().map(|b| min_eig(&b.eval(start))).collect();
    let worst = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    if worst > 0.0 {
        return Ok(start.clone());
    }
    let mut shifted: Vec<AffineSym> = blocks.iter().map(|b| b.shifted(nv)).collect();
    // keeps the shift bounded below
    let mut floor_coeffs = vec![DMatrix::zeros(1, 1); nv];
    floor_coeffs.push(DMatrix::identity(1, 1));
    shifted.push(AffineSym {
        constant: DMatrix::identity(1, 1),
        coeffs: floor_coeffs,
    });
    let mut y0 = DVector::zeros(nv + 1);
    y0.rows_mut(0, nv).copy_from(start);
    y0[nv] = -worst + 1.0;
    let mut c = DVector::zeros(nv + 1);
    c[nv] = 1.0;
    let stop = |y: &DVector<f64>| y[nv] < -1e-6;
    let y = barrier_solve(&Objective::Linear(&c), &shifted, y0, 1e-10, Some(&stop))?;
    if y[nv] >= -1e-12 {
        let point = y.rows(0, nv).into_owned();
        let (block, min_eig) = blocks
            .iter()
            .map(|b| min_eig(&b.eval(&point)))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, f64::NAN));
        return Err(Error::LmiInfeasible { block, min_eig });
    }
    Ok(y.rows(0, nv).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_cap_gives_identity() {
        let p = LmiProblem::from_fn(2, 1, |e, _| {
            vec![
                DMatrix::from_element(1, 1, 1.0 - e[(0, 0)]),
                DMatrix::from_element(1, 1, 1.0 - e[(1, 1)]),
                DMatrix::from_element(1, 1, -e[(0, 1)]),
            ]
        })
        .unwrap();
        let s = solve_logdet_sdp(&p).unwrap();
        // the cap on E_12 is tangent to the objective, so the barrier approaches it slowly
        assert!(
            (s.e.clone() - DMatrix::identity(2, 2)).amax() < 1e-4,
            "{}",
            s.e
        );
        assert!(s.objective.abs() < 1e-8);
        assert!(s.block_min_eigs.iter().all(|v| *v >= -1e-8));
    }

    #[test]
    fn ellipse_inside_box_is_the_inscribed_disc() {
        // {x : x'E^{-1}x <= 1} inside |x_i| <= 1  <=>  E_ii <= 1
        let p = LmiProblem::from_fn(2, 1, |e, _| {
            (0..2)
                .map(|i| DMatrix::from_element(1, 1, 1.0 - e[(i, i)]))
                .collect()
        })
        .unwrap();
        let s = solve_logdet_sdp(&p).unwrap();
        assert!((s.e.clone() - DMatrix::identity(2, 2)).amax() < 1e-6);
        assert!(s.objective.abs() < 1e-6);
    }

    #[test]
    fn reports_infeasible_block() {
        let p = LmiProblem::from_fn(1, 1, |e, _| {
            vec![
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, -1.0 - e[(0, 0)]),
            ]
        })
        .unwrap();
        match solve_logdet_sdp(&p) {
            Err(Error::LmiInfeasible { block, .. }) => assert_eq!(block, 1),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_affine_blocks() {
        let r = LmiProblem::from_fn(1, 1, |e, _| {
            vec![DMatrix::from_element(1, 1, e[(0, 0)] * e[(0, 0)])]
        });
        assert!(r.is_err());
    }

    #[test]
    fn invariant_ellipsoid_for_stable_scalar_system() {
        // x+ = a x + b u, |u| <= 1: LMI [[E, (aE+bY)], [*, E]] >= 0, [[1, Y], [Y, E]] >= 0, E <= 4
        let (a, b) = (1.2, 1.0);
        let p = LmiProblem::from_fn(1, 1, |e, y| {
            let e0 = e[(0, 0)];
            let y0 = y[(0, 0)];
            vec![
                DMatrix::from_row_slice(2, 2, &[e0, a * e0 + b * y0, a * e0 + b * y0, e0]),
                DMatrix::from_row_slice(2, 2, &[1.0, y0, y0, e0]),
                DMatrix::from_element(1, 1, 4.0 - e0),
            ]
        })
        .unwrap();
        let s = solve_logdet_sdp(&p).unwrap();
        assert!((s.e[(0, 0)] - 4.0).abs() < 1e-6);
        for (k, blk) in p.blocks.iter().enumerate() {
            let val = blk.eval(&p.pack(&s.e, &s.y));
            assert!(min_eig(&val) >= -1e-8, "block {k}");
        }
    }
}
