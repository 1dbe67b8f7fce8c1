//! Primal active-set method for inequality-form linear programs.

use nalgebra::{DMatrix, DVector};

use super::Tolerances;
use crate::error::{Error, Result};

/// `min c'z  s.t.  G z <= g,  A z = b`.
#[derive(Clone, Debug)]
pub struct LinearProgram {
    pub c: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl LinearProgram {
    pub fn new(c: DVector<f64>, g_mat: DMatrix<f64>, g_vec: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            c,
            g_mat,
            g_vec,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.g_mat.ncols() != n && self.g_mat.nrows() > 0
            || self.g_mat.nrows() != self.g_vec.len()
            || self.a_eq.nrows() != self.b_eq.len()
            || (self.a_eq.nrows() > 0 && self.a_eq.ncols() != n)
        {
            return Err(Error::Dimension("linear program data".into()));
        }
        let data = self
            .c
            .iter()
            .chain(self.g_mat.iter())
            .chain(self.g_vec.iter());
        if data
            .chain(self.a_eq.iter())
            .chain(self.b_eq.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("linear program data"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: LpStatus,
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
    Stopped,
}

struct ActiveSet<'a> {
    c: &'a DVector<f64>,
    g_mat: &'a DMatrix<f64>,
    g_vec: &'a DVector<f64>,
    a_eq: &'a DMatrix<f64>,
    tol: f64,
    iterations: usize,
}

impl ActiveSet<'_> {
    /// Runs from a feasible `z`; optionally stops once coordinate `stop.0` drops to `stop.1`.
    fn run(&mut self, z: &mut DVector<f64>, stop: Option<(usize, f64)>) -> Result<Outcome> {
        let n = z.len();
        let m = self.g_mat.nrows();
        let p = self.a_eq.nrows();
        let cnorm = self.c.norm().max(1.0);
        let row_norms: Vec<f64> = (0..m).map(|i| self.g_mat.row(i).norm()).collect();
        let mut working: Vec<usize> = Vec::new();
        let max_iter = 50 * (m + n + p) + 100;
        for _ in 0..max_iter {
            self.iterations += 1;
            if let Some((idx, level)) = stop {
                if z[idx] <= level {
                    return Ok(Outcome::Stopped);
                }
            }
            let w = p + working.len();
            let mut rows = DMatrix::zeros(w, n);
            rows.rows_mut(0, p).copy_from(self.a_eq);
            for (k, &i) in working.iter().enumerate() {
                rows.row_mut(p + k).copy_from(&self.g_mat.row(i));
            }
            // orthonormal basis of the working rows; the Gram matrix would square their conditioning
            let basis = if w == 0 {
                None
            } else {
                let qr = rows.transpose().qr();
                let r = qr.r();
                let rmax = r.diagonal().amax();
                if r.diagonal().iter().any(|v| v.abs() <= 1e-12 * rmax) {
                    return Err(Error::Solver("LP working set became linearly dependent".into()));
                }
                Some((qr.q(), r))
            };
            let (pc, y) = match &basis {
                None => (self.c.clone(), DVector::zeros(0)),
                Some((q, r)) => {
                    let qc = q.transpose() * self.c;
                    let y = r
                        .solve_upper_triangular(&qc)
                        .ok_or_else(|| Error::Solver("LP working set became linearly dependent".into()))?;
                    (self.c - q * qc, y)
                }
            };
            // rows lying in the span of the working set cannot enter
            let independent = |i: usize| -> bool {
                let a = self.g_mat.row(i).transpose();
                let r = match &basis {
                    None => a.clone(),
                    Some((q, _)) => &a - q * (q.transpose() * &a),
                };
                r.norm() > 1e-9 * row_norms[i]
            };
            if pc.norm() > 1e-10 * cnorm {
                let d = -pc;
                let dnorm = d.norm();
                let mut dependent: Vec<usize> = Vec::new();
                let (alpha, entering) = loop {
                    let mut best: Option<(f64, usize)> = None;
                    for i in 0..m {
                        if working.contains(&i) || dependent.contains(&i) {
                            continue;
                        }
                        let ad = self.g_mat.row(i).transpose().dot(&d);
                        if ad <= 1e-12 * row_norms[i] * dnorm {
                            continue;
                        }
                        let slack = (self.g_vec[i] - self.g_mat.row(i).transpose().dot(z)).max(0.0);
                        let alpha = slack / ad;
                        let better = match best {
                            None => true,
                            Some((a, _)) => alpha < a - 1e-14 * a.abs().max(1e-300),
                        };
                        if better {
                            best = Some((alpha, i));
                        }
                    }
                    match best {
                        None => return Ok(Outcome::Unbounded),
                        Some((alpha, i)) if independent(i) => break (alpha, i),
                        Some((_, i)) => dependent.push(i),
                    }
                };
                if let Some((idx, level)) = stop {
                    // stop exactly at the requested level when the step crosses it
                    if d[idx] < 0.0 && z[idx] + alpha * d[idx] <= level {
                        let reach = (level - z[idx]) / d[idx];
                        z.axpy(reach.max(0.0), &d, 1.0);
                        return Ok(Outcome::Stopped);
                    }
                }
                z.axpy(alpha, &d, 1.0);
                working.push(entering);
            } else {
                // multipliers of c + M' lambda = 0 are -y
                let leaving = working
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| -y[p + k] < -self.tol * cnorm)
                    .min_by_key(|(_, &i)| i)
                    .map(|(k, _)| k);
                match leaving {
                    Some(k) => {
                        working.remove(k);
                    }
                    None => return Ok(Outcome::Optimal),
                }
            }
        }
        Err(Error::Solver("LP iteration limit reached".into()))
    }
}

pub fn solve_lp(p: &LinearProgram) -> Result<LpSolution> {
    solve_lp_with(p, &Tolerances::default())
}

pub fn solve_lp_with(p: &LinearProgram, tol: &Tolerances) -> Result<LpSolution> {
    p.validate()?;
    let n = p.dim();
    let m = p.g_mat.nrows();
    let neq = p.a_eq.nrows();
    let gscale = 1.0
        + p.g_vec
            .amax()
            .max(if neq > 0 { p.b_eq.amax() } else { 0.0 });

    let z0 = if neq > 0 {
        let svd = p.a_eq.clone().svd(true, true);
        let z0 = svd
            .solve(&p.b_eq, 1e-12)
            .map_err(|e| Error::Solver(format!("equality least squares: {e}")))?;
        if (&p.a_eq * &z0 - &p.b_eq).amax() > tol.lp * gscale {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                z: z0,
                objective: f64::INFINITY,
                iterations: 0,
            });
        }
        z0
    } else {
        DVector::zeros(n)
    };

    // phase one: min t  s.t.  G z - t <= g,  t >= -1,  A z = b
    let viol0 = if m > 0 {
        (&p.g_mat * &z0 - &p.g_vec).max()
    } else {
        f64::NEG_INFINITY
    };
    let mut iterations = 0;
    let mut z = if viol0 > 0.0 {
        let mut g1 = DMatrix::zeros(m + 1, n + 1);
        g1.view_mut((0, 0), (m, n)).copy_from(&p.g_mat);
        for i in 0..=m {
            g1[(i, n)] = -1.0;
        }
        let mut h1 = DVector::zeros(m + 1);
        h1.rows_mut(0, m).copy_from(&p.g_vec);
        h1[m] = 1.0;
        let mut a1 = DMatrix::zeros(neq, n + 1);
        a1.view_mut((0, 0), (neq, n)).copy_from(&p.a_eq);
        let mut c1 = DVector::zeros(n + 1);
        c1[n] = 1.0;
        let mut z1 = DVector::zeros(n + 1);
        z1.rows_mut(0, n).copy_from(&z0);
        z1[n] = viol0 + 1.0;
        let mut solver = ActiveSet {
            c: &c1,
            g_mat: &g1,
            g_vec: &h1,
            a_eq: &a1,
            tol: tol.lp,
            iterations: 0,
        };
        solver.run(&mut z1, Some((n, 0.0)))?;
        iterations += solver.iterations;
        if z1[n] > tol.lp * gscale {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                z: z1.rows(0, n).into_owned(),
                objective: f64::INFINITY,
                iterations,
            });
        }
        z1.rows(0, n).into_owned()
    } else {
        z0
    };

    let mut solver = ActiveSet {
        c: &p.c,
        g_mat: &p.g_mat,
        g_vec: &p.g_vec,
        a_eq: &p.a_eq,
        tol: tol.lp,
        iterations: 0,
    };
    let outcome = solver.run(&mut z, None)?;
    iterations += solver.iterations;
    let status = match outcome {
        Outcome::Unbounded => LpStatus::Unbounded,
        _ => LpStatus::Optimal,
    };
    let viol = if m > 0 {
        (&p.g_mat * &z - &p.g_vec).max()
    } else {
        f64::NEG_INFINITY
    };
    let eq_res = if neq > 0 {
        (&p.a_eq * &z - &p.b_eq).amax()
    } else {
        0.0
    };
    if viol > 10.0 * tol.lp * gscale
        || eq_res > 10.0 * tol.lp * gscale
        || z.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Solver(format!(
            "LP result failed validation (violation {viol:.3e}, equality residual {eq_res:.3e})"
        )));
    }
    let objective = match status {
        LpStatus::Unbounded => f64::NEG_INFINITY,
        _ => p.c.dot(&z),
    };
    Ok(LpSolution {
        status,
        z,
        objective,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lp(c: &[f64], g: &[f64], h: &[f64]) -> LinearProgram {
        let n = c.len();
        LinearProgram::new(
            DVector::from_row_slice(c),
            DMatrix::from_row_slice(h.len(), n, g),
            DVector::from_row_slice(h),
        )
    }

    #[test]
    fn unit_interval() {
        let s = solve_lp(&lp(&[1.0], &[1.0, -1.0], &[1.0, 0.0])).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!(s.z[0].abs() < 1e-12);
    }

    #[test]
    fn max_over_middle_region() {
        let s = solve_lp(&lp(
            &[-1.0, 0.0],
            &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0],
            &[0.1, 0.1, 5.0, 5.0],
        ))
        .unwrap();
        assert!((s.objective + 0.1).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let s = solve_lp(&lp(&[1.0], &[1.0, -1.0], &[-1.0, -1.0])).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
        let s = solve_lp(&lp(&[-1.0, 0.0], &[-1.0, 0.0], &[0.0])).unwrap();
        assert_eq!(s.status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_constraints() {
        let p = lp(&[1.0, 2.0], &[-1.0, 0.0, 0.0, -1.0], &[0.0, 0.0]).with_equalities(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_row_slice(&[3.0]),
        );
        let s = solve_lp(&p).unwrap();
        assert!((s.objective - 3.0).abs() < 1e-12);
        assert!((s.z[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_vertex() {
        // several constraints meet at the optimal vertex (0, 0)
        let p = lp(
            &[1.0, 1.0],
            &[-1.0, 0.0, 0.0, -1.0, -1.0, -1.0, -2.0, -1.0, -1.0, -2.0],
            &[0.0, 0.0, 0.0, 0.0, 0.0],
        );
        let s = solve_lp(&p).unwrap();
        assert!(s.objective.abs() < 1e-12);
    }

    /// Brute-force oracle: best feasible intersection of two constraint lines.
    fn vertex_oracle(c: &[f64; 2], g: &[[f64; 2]], h: &[f64]) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                let det = g[i][0] * g[j][1] - g[i][1] * g[j][0];
                if det.abs() < 1e-9 {
                    continue;
                }
                let x = (h[i] * g[j][1] - g[i][1] * h[j]) / det;
                let y = (g[i][0] * h[j] - h[i] * g[j][0]) / det;
                let feasible = g
                    .iter()
                    .zip(h)
                    .all(|(r, b)| r[0] * x + r[1] * y <= b + 1e-9);
                if feasible {
                    let v = c[0] * x + c[1] * y;
                    best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
            }
        }
        best
    }

    #[test]
    fn random_planar_lps_match_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let m = rng.random_range(3..9);
            let mut g: Vec<[f64; 2]> = (0..m)
                .map(|_| {
                    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    [th.cos(), th.sin()]
                })
                .collect();
            let mut h: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..2.0)).collect();
            // bounding box keeps every instance bounded
            for (r, b) in [
                ([1.0, 0.0], 10.0),
                ([-1.0, 0.0], 10.0),
                ([0.0, 1.0], 10.0),
                ([0.0, -1.0], 10.0),
            ] {
                g.push(r);
                h.push(b);
            }
            let c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let flat: Vec<f64> = g.iter().flatten().copied().collect();
            let s = solve_lp(&lp(&c, &flat, &h)).unwrap();
            match vertex_oracle(&c, &g, &h) {
                Some(v) => {
                    assert_eq!(s.status, LpStatus::Optimal);
                    assert!(
                        (s.objective - v).abs() <= 1e-9 * (1.0 + v.abs()),
                        "{} vs {v}",
                        s.objective
                    );
                }
                None => assert_eq!(s.status, LpStatus::Infeasible),
            }
        }
    }
}
