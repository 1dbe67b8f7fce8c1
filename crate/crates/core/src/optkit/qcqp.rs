//! Primal-dual interior-point method for small convex QCQPs.

use nalgebra::{DMatrix, DVector};

use super::Tolerances;
use crate::error::{Error, Result};

/// `z' P z + q' z + r <= 0` with `P` positive semidefinite.
#[derive(Clone, Debug)]
pub struct QuadConstraint {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
}

impl QuadConstraint {
    pub fn eval(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.p * z)) + self.q.dot(z) + self.r
    }
}

/// `min z'P0 z + q0'z + r0` subject to convex quadratic, linear and equality constraints.
#[derive(Clone, Debug)]
pub struct ConvexQcqp {
    pub p0: DMatrix<f64>,
    pub q0: DVector<f64>,
    pub r0: f64,
    pub quad: Vec<QuadConstraint>,
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl ConvexQcqp {
    pub fn new(p0: DMatrix<f64>, q0: DVector<f64>, r0: f64) -> Self {
        let n = q0.len();
        Self {
            p0,
            q0,
            r0,
            quad: Vec::new(),
            g_mat: DMatrix::zeros(0, n),
            g_vec: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_linear(mut self, g_mat: DMatrix<f64>, g_vec: DVector<f64>) -> Self {
        self.g_mat = g_mat;
        self.g_vec = g_vec;
        self
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    pub fn with_quad(mut self, c: QuadConstraint) -> Self {
        self.quad.push(c);
        self
    }

    pub fn dim(&self) -> usize {
        self.q0.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        z.dot(&(&self.p0 * z)) + self.q0.dot(z) + self.r0
    }

    /// Largest inequality violation and equality residual at `z`.
    pub fn violation(&self, z: &DVector<f64>) -> (f64, f64) {
        let mut worst = self
            .quad
            .iter()
            .map(|c| c.eval(z))
            .fold(f64::NEG_INFINITY, f64::max);
        if self.g_mat.nrows() > 0 {
            worst = worst.max((&self.g_mat * z - &self.g_vec).max());
        }
        let eq = if self.a_eq.nrows() > 0 {
            (&self.a_eq * z - &self.b_eq).amax()
        } else {
            0.0
        };
        (worst, eq)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let square = |m: &DMatrix<f64>| m.shape() == (n, n);
        if !square(&self.p0)
            || self.quad.iter().any(|c| !square(&c.p) || c.q.len() != n)
            || self.g_mat.nrows() != self.g_vec.len()
            || (self.g_mat.nrows() > 0 && self.g_mat.ncols() != n)
            || self.a_eq.nrows() != self.b_eq.len()
            || (self.a_eq.nrows() > 0 && self.a_eq.ncols() != n)
        {
            return Err(Error::Dimension("QCQP data".into()));
        }
        let finite = self
            .p0
            .iter()
            .chain(self.q0.iter())
            .chain(self.g_mat.iter())
            .chain(self.g_vec.iter());
        if finite
            .chain(self.quad.iter().flat_map(|c| c.p.iter().chain(c.q.iter())))
            .any(|v| !v.is_finite())
            || !self.r0.is_finite()
        {
            return Err(Error::NonFinite("QCQP data"));
        }
        for (j, m) in std::iter::once(&self.p0)
            .chain(self.quad.iter().map(|c| &c.p))
            .enumerate()
        {
            if !is_psd(m) {
                return Err(Error::InvalidArgument(format!(
                    "QCQP matrix {j} is not positive semidefinite"
                )));
            }
        }
        Ok(())
    }
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    if m.iter().all(|v| *v == 0.0) {
        return true;
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return false;
    }
    m.clone().symmetric_eigen().eigenvalues.min() >= -1e-10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QcqpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QcqpSolution {
    pub status: QcqpStatus,
    pub z: DVector<f64>,
    pub objective: f64,
    /// Optimal value of the phase-one slack problem when infeasible (positive certificate);
    /// for an optimal status, the scaled residual violation accepted on a marginally feasible problem.
    pub infeasibility: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Lower bound on the centering parameter; keeps complementarity from collapsing
/// before the dual residual has converged.
const SIGMA_FLOOR: f64 = 0.05;

/// `lam/s` above which a constraint is kept in augmented form in the Newton system.
const STIFF_RATIO: f64 = 1e6;

enum NewtonFactor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(
        nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
        DMatrix<f64>,
    ),
}

pub fn solve_qcqp(p: &ConvexQcqp) -> Result<QcqpSolution> {
    solve_qcqp_with(p, &Tolerances::default())
}

pub fn solve_qcqp_with(p: &ConvexQcqp, tol: &Tolerances) -> Result<QcqpSolution> {
    p.validate()?;
    if p.dim() == 1 && p.a_eq.nrows() == 0 {
        return solve_scalar(p);
    }
    let z0 = initial_point(p)?;
    let out = interior_point(p, &z0, tol.kkt, 200)?;
    if let Some(sol) = out {
        return finish(p, sol, tol);
    }
    // main iteration stalled: decide feasibility through the slack problem
    let (t_star, z_feas) = phase_one(p, &z0, tol)?;
    if t_star > tol.kkt {
        return Ok(QcqpSolution {
            status: QcqpStatus::Infeasible,
            z: z_feas,
            objective: f64::INFINITY,
            infeasibility: t_star,
            kkt_residual: f64::NAN,
            iterations: 0,
        });
    }
    match interior_point(p, &z_feas, tol.kkt, 400)? {
        Some(sol) => finish(p, sol, tol),
        None => Err(Error::Solver(
            "QCQP interior point failed to converge on a feasible problem".into(),
        )),
    }
}

fn finish(p: &ConvexQcqp, sol: QcqpSolution, tol: &Tolerances) -> Result<QcqpSolution> {
    let scale = 1.0
        + p.g_vec
            .iter()
            .chain(p.b_eq.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));
    let (viol, eq) = p.violation(&sol.z);
    let allowed = tol.kkt.max(sol.infeasibility) * scale;
    if viol > allowed || eq > allowed || sol.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver(format!(
            "QCQP result failed validation (violation {viol:.3e}, equality residual {eq:.3e})"
        )));
    }
    Ok(sol)
}

fn initial_point(p: &ConvexQcqp) -> Result<DVector<f64>> {
    if p.a_eq.nrows() == 0 {
        return Ok(DVector::zeros(p.dim()));
    }
    p.a_eq
        .clone()
        .svd(true, true)
        .solve(&p.b_eq, 1e-12)
        .map_err(|e| Error::Solver(format!("equality least squares: {e}")))
}

/// `min t  s.t.  f_i(z) <= t,  t >= -1,  A z = b`; returns `(t*, z*)`.
fn phase_one(p: &ConvexQcqp, z0: &DVector<f64>, tol: &Tolerances) -> Result<(f64, DVector<f64>)> {
    let n = p.dim();
    let lift_mat = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(n + 1, n + 1);
        out.view_mut((0, 0), (n, n)).copy_from(m);
        out
    };
    let lift_vec = |v: &DVector<f64>, last: f64| {
        let mut out = DVector::zeros(n + 1);
        out.rows_mut(0, n).copy_from(v);
        out[n] = last;
        out
    };
    let m = p.g_mat.nrows();
    let mut g1 = DMatrix::zeros(m + 1, n + 1);
    g1.view_mut((0, 0), (m, n)).copy_from(&p.g_mat);
    for i in 0..m {
        g1[(i, n)] = -1.0;
    }
    g1[(m, n)] = -1.0;
    let mut h1 = DVector::zeros(m + 1);
    h1.rows_mut(0, m).copy_from(&p.g_vec);
    h1[m] = 1.0;
    let mut a1 = DMatrix::zeros(p.a_eq.nrows(), n + 1);
    a1.view_mut((0, 0), (p.a_eq.nrows(), n)).copy_from(&p.a_eq);
    let quad = p
        .quad
        .iter()
        .map(|c| QuadConstraint {
            p: lift_mat(&c.p),
            q: lift_vec(&c.q, -1.0),
            r: c.r,
        })
        .collect();
    let aux = ConvexQcqp {
        p0: DMatrix::zeros(n + 1, n + 1),
        q0: lift_vec(&DVector::zeros(n), 1.0),
        r0: 0.0,
        quad,
        g_mat: g1,
        g_vec: h1,
        a_eq: a1,
        b_eq: p.b_eq.clone(),
    };
    let (viol, _) = p.violation(z0);
    let start = lift_vec(z0, viol.max(0.0) + 1.0);
    let sol = interior_point(&aux, &start, tol.kkt, 300)?
        .ok_or_else(|| Error::Solver("QCQP phase one failed to converge".into()))?;
    Ok((sol.z[n], sol.z.rows(0, n).into_owned()))
}

/// Mehrotra predictor-corrector on the slack formulation; `None` when it stalls.
fn interior_point(
    p: &ConvexQcqp,
    z0: &DVector<f64>,
    eps: f64,
    max_iter: usize,
) -> Result<Option<QcqpSolution>> {
    let n = p.dim();
    let nq = p.quad.len();
    let nl = p.g_mat.nrows();
    let m = nq + nl;
    let ne = p.a_eq.nrows();
    let mut z = z0.clone();

    let eval_f = |z: &DVector<f64>| -> DVector<f64> {
        let mut f = DVector::zeros(m);
        for (i, c) in p.quad.iter().enumerate() {
            f[i] = c.eval(z);
        }
        if nl > 0 {
            f.rows_mut(nq, nl).copy_from(&(&p.g_mat * z - &p.g_vec));
        }
        f
    };
    let jac = |z: &DVector<f64>| -> DMatrix<f64> {
        let mut j = DMatrix::zeros(m, n);
        for (i, c) in p.quad.iter().enumerate() {
            j.row_mut(i).copy_from(&(2.0 * &c.p * z + &c.q).transpose());
        }
        if nl > 0 {
            j.rows_mut(nq, nl).copy_from(&p.g_mat);
        }
        j
    };

    if m == 0 {
        return solve_equality_qp(p).map(Some);
    }

    let f0 = eval_f(&z);
    let mut s = f0.map(|v| (-v).max(1.0));
    let mut lam = DVector::from_element(m, 1.0);
    let mut nu = DVector::zeros(ne);
    let scale_d = 1.0 + p.q0.amax();
    let scale_p = 1.0
        + p.g_vec
            .iter()
            .chain(p.b_eq.iter())
            .fold(0.0f64, |a, v| a.max(v.abs()));

    let mut stalled = 0usize;
    let mut fallback: Option<QcqpSolution> = None;
    // marginally feasible problems can stall with a small residual violation
    let mut loose: Option<QcqpSolution> = None;
    for it in 0..max_iter {
        let f = eval_f(&z);
        let j = jac(&z);
        let mut r_d = 2.0 * &p.p0 * &z + &p.q0 + j.transpose() * &lam;
        if ne > 0 {
            r_d += p.a_eq.transpose() * &nu;
        }
        let r_p = &f + &s;
        let r_e = if ne > 0 {
            &p.a_eq * &z - &p.b_eq
        } else {
            DVector::zeros(0)
        };
        let mu = s.dot(&lam) / m as f64;
        // relative to the magnitude of the terms that cancel in the dual residual
        let jl = j.abs().transpose() * lam.abs();
        let kkt = r_d.amax() / (scale_d + jl.amax().max((2.0 * &p.p0 * &z).amax()));
        let primal = r_p.amax().max(if ne > 0 { r_e.amax() } else { 0.0 }) / scale_p;
        if kkt <= eps && primal <= 0.1 * eps {
            let objective = p.objective(&z);
            let sol = QcqpSolution {
                status: QcqpStatus::Optimal,
                z: z.clone(),
                objective,
                infeasibility: 0.0,
                kkt_residual: kkt.max(primal).max(mu),
                iterations: it,
            };
            if mu <= 0.01 * eps {
                return Ok(Some(sol));
            }
            // duality gap small enough to accept if the iteration later stalls
            if m as f64 * mu <= 10.0 * eps * (1.0 + objective.abs())
                && fallback
                    .as_ref()
                    .is_none_or(|f: &QcqpSolution| sol.kkt_residual < f.kkt_residual)
            {
                fallback = Some(sol);
            }
        }
        if kkt <= eps
            && primal <= eps.sqrt()
            && m as f64 * mu <= 10.0 * eps * (1.0 + p.objective(&z).abs())
            && loose.as_ref().is_none_or(|l: &QcqpSolution| primal < l.infeasibility)
        {
            loose = Some(QcqpSolution {
                status: QcqpStatus::Optimal,
                z: z.clone(),
                objective: p.objective(&z),
                infeasibility: primal,
                kkt_residual: kkt.max(primal).max(mu),
                iterations: it,
            });
        }
        if z.amax() > 1e12 || !mu.is_finite() {
            return Ok(fallback.or(loose));
        }

        let mut h = 2.0 * &p.p0;
        for (i, c) in p.quad.iter().enumerate() {
            h += 2.0 * lam[i] * &c.p;
        }
        // constraints with a large lam/s ratio stay in augmented form; eliminating
        // them into the normal matrix destroys its conditioning near the solution
        let d = lam.component_div(&s);
        let stiff: Vec<usize> = (0..m).filter(|&i| d[i] > STIFF_RATIO).collect();
        let mut d_soft = d.clone();
        for &i in &stiff {
            d_soft[i] = 0.0;
        }
        let mut k = h + j.transpose() * DMatrix::from_diagonal(&d_soft) * &j;
        let reg = 1e-13 * (1.0 + k.diagonal().amax());
        for i in 0..n {
            k[(i, i)] += reg;
        }
        let na = stiff.len();
        let dim = n + na + ne;
        let factor = if dim == n {
            match k.clone().cholesky() {
                Some(c) => NewtonFactor::Cholesky(c),
                None => return Ok(fallback.or(loose)),
            }
        } else {
            let mut kkt = DMatrix::zeros(dim, dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(&k);
            for (r, &i) in stiff.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + r, c)] = j[(i, c)];
                    kkt[(c, n + r)] = j[(i, c)];
                }
                kkt[(n + r, n + r)] = -s[i] / lam[i];
            }
            if ne > 0 {
                kkt.view_mut((n + na, 0), (ne, n)).copy_from(&p.a_eq);
                kkt.view_mut((0, n + na), (n, ne))
                    .copy_from(&p.a_eq.transpose());
            }
            NewtonFactor::Lu(kkt.clone().lu(), kkt)
        };

        let solve = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
            let mut w = (r_c + lam.component_mul(&r_p)).component_div(&s);
            for &i in &stiff {
                w[i] = 0.0;
            }
            let rhs_z = -&r_d - j.transpose() * w;
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&rhs_z);
            for (r, &i) in stiff.iter().enumerate() {
                rhs[n + r] = -r_p[i] - r_c[i] / lam[i];
            }
            if ne > 0 {
                rhs.rows_mut(n + na, ne).copy_from(&(-&r_e));
            }
            let sol = match &factor {
                NewtonFactor::Cholesky(c) => c.solve(&rhs),
                NewtonFactor::Lu(lu, mat) => {
                    // one step of iterative refinement against the unfactored matrix
                    let mut x = lu.solve(&rhs)?;
                    let res = &rhs - mat * &x;
                    x += lu.solve(&res)?;
                    x
                }
            };
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let dz = sol.rows(0, n).into_owned();
            let ds = -&r_p - &j * &dz;
            let mut dl = (r_c - lam.component_mul(&ds)).component_div(&s);
            for (r, &i) in stiff.iter().enumerate() {
                dl[i] = sol[n + r];
            }
            Some((dz, ds, dl))
        };
        let max_step = |ds: &DVector<f64>, dl: &DVector<f64>| -> f64 {
            let mut a: f64 = 1.0;
            for i in 0..m {
                if ds[i] < 0.0 {
                    a = a.min(-s[i] / ds[i]);
                }
                if dl[i] < 0.0 {
                    a = a.min(-lam[i] / dl[i]);
                }
            }
            a
        };

        let r_aff = -s.component_mul(&lam);
        let Some((_, ds_a, dl_a)) = solve(&r_aff) else {
            return Ok(fallback.or(loose));
        };
        let a_aff = max_step(&ds_a, &dl_a);
        let mu_aff = (&s + a_aff * &ds_a).dot(&(&lam + a_aff * &dl_a)) / m as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3).max(SIGMA_FLOOR);
        // complementarity is not pushed far below the stopping level; that only ruins conditioning
        let target = (sigma * mu).max(1e-3 * eps);
        let r_c = &r_aff + DVector::from_element(m, target) - ds_a.component_mul(&dl_a);
        let Some((dz, ds, dl)) = solve(&r_c) else {
            return Ok(fallback.or(loose));
        };
        let alpha = (0.99 * max_step(&ds, &dl)).min(1.0);
        if alpha < 1e-3 && fallback.is_some() {
            return Ok(fallback.or(loose));
        }
        if alpha * dz.amax() <= 1e-15 * (1.0 + z.amax()) && mu <= 0.01 * eps && primal <= 0.1 * eps
        {
            stalled += 1;
            if stalled >= 5 {
                return Ok(fallback.or(loose));
            }
        } else {
            stalled = 0;
        }
        z.axpy(alpha, &dz, 1.0);
        s.axpy(alpha, &ds, 1.0);
        lam.axpy(alpha, &dl, 1.0);
        if ne > 0 {
            // recover equality multipliers by least squares on the dual residual
            let rd0 = 2.0 * &p.p0 * &z + &p.q0 + jac(&z).transpose() * &lam;
            let at = p.a_eq.transpose();
            if let Ok(v) = at.svd(true, true).solve(&(-rd0), 1e-14) {
                nu = v;
            }
        }
        if it > 60 && r_p.amax() / scale_p > 1e-6 && alpha < 1e-6 {
            return Ok(fallback.or(loose));
        }
    }
    Ok(fallback.or(loose))
}

/// Equality-constrained (or unconstrained) convex QP via its KKT system.
fn solve_equality_qp(p: &ConvexQcqp) -> Result<QcqpSolution> {
    let n = p.dim();
    let ne = p.a_eq.nrows();
    let mut kkt = DMatrix::zeros(n + ne, n + ne);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(2.0 * &p.p0));
    if ne > 0 {
        kkt.view_mut((n, 0), (ne, n)).copy_from(&p.a_eq);
        kkt.view_mut((0, n), (n, ne)).copy_from(&p.a_eq.transpose());
    }
    let mut rhs = DVector::zeros(n + ne);
    rhs.rows_mut(0, n).copy_from(&(-&p.q0));
    if ne > 0 {
        rhs.rows_mut(n, ne).copy_from(&p.b_eq);
    }
    let sol = kkt
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Solver(format!("equality QP: {e}")))?;
    let z = sol.rows(0, n).into_owned();
    let mut grad = 2.0 * &p.p0 * &z + &p.q0;
    if ne > 0 {
        grad += p.a_eq.transpose() * sol.rows(n, ne);
    }
    if grad.amax() > 1e-8 * (1.0 + p.q0.amax()) {
        return Err(Error::Solver("QCQP objective is unbounded below".into()));
    }
    let objective = p.objective(&z);
    Ok(QcqpSolution {
        status: QcqpStatus::Optimal,
        z,
        objective,
        infeasibility: 0.0,
        kkt_residual: grad.amax(),
        iterations: 1,
    })
}

/// Closed-form solution of a one-dimensional instance.
fn solve_scalar(p: &ConvexQcqp) -> Result<QcqpSolution> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut narrow = |a: f64, b: f64| {
        lo = lo.max(a);
        hi = hi.min(b);
    };
    for c in &p.quad {
        match quad_interval(c.p[(0, 0)], c.q[0], c.r) {
            Some((a, b)) => narrow(a, b),
            None => narrow(f64::INFINITY, f64::NEG_INFINITY),
        }
    }
    for i in 0..p.g_mat.nrows() {
        let a = p.g_mat[(i, 0)];
        let b = p.g_vec[i];
        if a > 0.0 {
            narrow(f64::NEG_INFINITY, b / a);
        } else if a < 0.0 {
            narrow(b / a, f64::INFINITY);
        } else if b < 0.0 {
            narrow(f64::INFINITY, f64::NEG_INFINITY);
        }
    }
    if lo > hi {
        let gap = lo - hi;
        return Ok(QcqpSolution {
            status: QcqpStatus::Infeasible,
            z: DVector::from_element(1, f64::NAN),
            objective: f64::INFINITY,
            infeasibility: if gap.is_finite() { gap } else { f64::INFINITY },
            kkt_residual: f64::NAN,
            iterations: 0,
        });
    }
    let a = p.p0[(0, 0)];
    let b = p.q0[0];
    let z = if a > 0.0 {
        (-b / (2.0 * a)).clamp(lo, hi)
    } else if b > 0.0 {
        lo
    } else if b < 0.0 {
        hi
    } else if lo.is_finite() {
        lo
    } else if hi.is_finite() {
        hi
    } else {
        0.0
    };
    if !z.is_finite() {
        return Err(Error::Solver("QCQP objective is unbounded below".into()));
    }
    let zv = DVector::from_element(1, z);
    let objective = p.objective(&zv);
    Ok(QcqpSolution {
        status: QcqpStatus::Optimal,
        z: zv,
        objective,
        infeasibility: 0.0,
        kkt_residual: 0.0,
        iterations: 0,
    })
}

/// Solution set `[lo, hi]` of `a z^2 + b z + c <= 0` for `a >= 0`, `None` when empty.
pub fn quad_interval(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a == 0.0 {
        return if b > 0.0 {
            Some((f64::NEG_INFINITY, -c / b))
        } else if b < 0.0 {
            Some((-c / b, f64::INFINITY))
        } else if c <= 0.0 {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            None
        };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // cancellation-free roots
    let sign = if b >= 0.0 { 1.0 } else { -1.0 };
    let q = -0.5 * (b + sign * sq);
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (q / a, c / q) };
    Some((r1.min(r2), r1.max(r2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optkit::lp::{solve_lp, LinearProgram, LpStatus};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, d: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, d)
    }
    fn v(d: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(d)
    }

    #[test]
    fn scalar_projection_onto_unit_interval() {
        let p = ConvexQcqp::new(m(1, 1, &[1.0]), v(&[-4.0]), 4.0)
            .with_quad(QuadConstraint {
                p: m(1, 1, &[1.0]),
                q: v(&[0.0]),
                r: -1.0,
            })
            .with_linear(m(2, 1, &[1.0, -1.0]), v(&[4.0, 4.0]));
        let s = solve_qcqp(&p).unwrap();
        assert_eq!(s.status, QcqpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_norm() {
        let p = ConvexQcqp::new(DMatrix::identity(3, 3), DVector::zeros(3), 0.0);
        let s = solve_qcqp(&p).unwrap();
        assert!(s.z.amax() < 1e-12 && s.objective.abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let p = ConvexQcqp::new(m(2, 2, &[1.0, 0.0, 0.0, -1.0]), DVector::zeros(2), 0.0);
        assert!(matches!(solve_qcqp(&p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn infeasible_disc_and_halfplane() {
        let p = ConvexQcqp::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.0)
            .with_quad(QuadConstraint {
                p: DMatrix::identity(2, 2),
                q: DVector::zeros(2),
                r: -1.0,
            })
            .with_linear(m(1, 2, &[-1.0, 0.0]), v(&[-2.0]));
        let s = solve_qcqp(&p).unwrap();
        assert_eq!(s.status, QcqpStatus::Infeasible);
        assert!(s.infeasibility > 0.1);
    }

    #[test]
    fn linear_objective_on_disc() {
        let p =
            ConvexQcqp::new(DMatrix::zeros(2, 2), v(&[1.0, 1.0]), 0.0).with_quad(QuadConstraint {
                p: DMatrix::identity(2, 2),
                q: DVector::zeros(2),
                r: -1.0,
            });
        let s = solve_qcqp(&p).unwrap();
        assert!((s.objective + 2f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn equality_constrained() {
        let p = ConvexQcqp::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.0)
            .with_equalities(m(1, 2, &[1.0, 1.0]), v(&[2.0]))
            .with_linear(m(1, 2, &[1.0, 0.0]), v(&[0.5]));
        let s = solve_qcqp(&p).unwrap();
        assert!((s.z[0] - 0.5).abs() < 1e-7 && (s.z[1] - 1.5).abs() < 1e-7);
    }

    #[test]
    fn quad_interval_cases() {
        assert_eq!(quad_interval(1.0, 0.0, -1.0), Some((-1.0, 1.0)));
        assert_eq!(quad_interval(1.0, 0.0, 1.0), None);
        assert_eq!(quad_interval(0.0, 0.0, 1.0), None);
        assert_eq!(
            quad_interval(0.0, 0.0, -1.0),
            Some((f64::NEG_INFINITY, f64::INFINITY))
        );
        assert_eq!(
            quad_interval(0.0, 2.0, -1.0),
            Some((f64::NEG_INFINITY, 0.5))
        );
        let (a, b) = quad_interval(1e-12, 1.0, -1.0).unwrap();
        assert!(a < -1e11 && (b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lp_instances_agree_with_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(2..5);
            let mrows = rng.random_range(n + 1..3 * n + 2);
            let g = DMatrix::from_fn(mrows, n, |_, _| rng.random_range(-1.0..1.0));
            let h = DVector::from_fn(mrows, |_, _| rng.random_range(0.1..1.0));
            let mut gb = DMatrix::zeros(mrows + 2 * n, n);
            gb.rows_mut(0, mrows).copy_from(&g);
            let mut hb = DVector::from_element(mrows + 2 * n, 3.0);
            hb.rows_mut(0, mrows).copy_from(&h);
            for i in 0..n {
                gb[(mrows + i, i)] = 1.0;
                gb[(mrows + n + i, i)] = -1.0;
            }
            let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let l = solve_lp(&LinearProgram::new(c.clone(), gb.clone(), hb.clone())).unwrap();
            assert_eq!(l.status, LpStatus::Optimal);
            let q = solve_qcqp(&ConvexQcqp::new(DMatrix::zeros(n, n), c, 0.0).with_linear(gb, hb))
                .unwrap();
            assert!(
                (l.objective - q.objective).abs() <= 1e-8 * (1.0 + l.objective.abs()),
                "{} {}",
                l.objective,
                q.objective
            );
        }
    }

    #[test]
    fn random_planar_instances_match_boundary_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let c0 = v(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let center = v(&[rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let shape = &a * a.transpose() + DMatrix::identity(2, 2) * 0.3;
            let radius2 = 0.5;
            let cons = QuadConstraint {
                p: shape.clone(),
                q: -2.0 * &shape * &center,
                r: center.dot(&(&shape * &center)) - radius2,
            };
            let g = v(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let hv = rng.random_range(-0.1..0.3);
            let p = ConvexQcqp::new(DMatrix::identity(2, 2), -2.0 * &c0, c0.dot(&c0))
                .with_quad(cons.clone())
                .with_linear(DMatrix::from_row_slice(1, 2, g.as_slice()), v(&[hv]));
            let s = solve_qcqp(&p).unwrap();

            // oracle: the optimum is the free minimizer, a point of the ellipse arc or of the chord
            let feasible = |z: &DVector<f64>| cons.eval(z) <= 1e-12 && g.dot(z) - hv <= 1e-12;
            let mut best = f64::INFINITY;
            if feasible(&c0) {
                best = 0.0;
            }
            let l_inv_t = shape
                .clone()
                .cholesky()
                .unwrap()
                .l()
                .transpose()
                .try_inverse()
                .unwrap();
            let n_arc = 1_000_000;
            for k in 0..n_arc {
                let th = std::f64::consts::TAU * k as f64 / n_arc as f64;
                let z = &center + &l_inv_t * v(&[th.cos(), th.sin()]) * radius2.sqrt();
                if g.dot(&z) - hv <= 0.0 {
                    best = best.min(p.objective(&z));
                }
            }
            let d = v(&[-g[1], g[0]]);
            let zp = &g * (hv / g.dot(&g));
            // chord of the line inside the ellipse: quadratic in the line parameter
            let qa = d.dot(&(&shape * &d));
            let qb = 2.0 * d.dot(&(&shape * (&zp - &center)));
            let qc = (&zp - &center).dot(&(&shape * (&zp - &center))) - radius2;
            if let Some((lo, hi)) = quad_interval(qa, qb, qc) {
                let n_chord = 100_000;
                for k in 0..=n_chord {
                    let z = &zp + &d * (lo + (hi - lo) * k as f64 / n_chord as f64);
                    best = best.min(p.objective(&z));
                }
            }
            if best.is_finite() {
                assert_eq!(s.status, QcqpStatus::Optimal);
                assert!(
                    s.objective <= best + 1e-9,
                    "solver {} oracle {best}",
                    s.objective
                );
                assert!(
                    best - s.objective <= 1e-4,
                    "solver {} oracle {best}",
                    s.objective
                );
            } else {
                assert_eq!(s.status, QcqpStatus::Infeasible);
            }
        }
    }
}
