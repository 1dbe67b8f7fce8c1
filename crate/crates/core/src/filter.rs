//! Safety filters: the input closest to a proposed one subject to a barrier
//! constraint `Q(x, u) <= c`, and the relaxation used when that set is empty.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cbf_init::CbfOption;
use crate::error::{Error, Result};
use crate::learner::{ModelKind, SacbfModel};
use crate::optkit::qcqp::{quad_interval, solve_qcqp, ConvexQcqp, QcqpStatus, QuadConstraint};
use crate::reach_gen::{eval_bk, eval_q_below, GeneratorConfig};
use crate::sysmodel::{InputVec, Polytope, PwaSystem, StateVec};

/// Residual allowed on the barrier constraint of a feasible result.
pub const FEAS_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Closed form (one input) or convex QCQP on the quadratic model.
    QuadExact,
    /// Local search with multistart on any state-action or successor barrier.
    NlpLocal,
}

#[derive(Clone, Debug)]
pub struct FilterSpec {
    pub model: SacbfModel,
    pub option: CbfOption,
    /// Right-hand side `c` of `Q_θ(x, u) <= c`.
    pub tighten_c: f64,
    pub input: Polytope,
    pub backend: Backend,
    pub multistart: usize,
    /// Dynamics used to form successors for the standard barrier surrogate.
    pub sys: Option<PwaSystem>,
    /// Raised when the contractive guarantee precondition `Δ <= λ/2` fails.
    pub precondition_warning: bool,
}

impl FilterSpec {
    /// `c = 0` for options 1 and 2 and `c = -λ + Δ` for option 3, with `λ`
    /// in normalized barrier units.
    pub fn new(
        model: SacbfModel,
        option: CbfOption,
        lambda_scaled: f64,
        input: Polytope,
        backend: Backend,
    ) -> Result<Self> {
        if input.dim() != model.n_u {
            return Err(Error::Dimension("input set and model input size differ".into()));
        }
        match (backend, model.kind) {
            (Backend::QuadExact, ModelKind::Quadratic) => {}
            (Backend::NlpLocal, ModelKind::Quadratic | ModelKind::FullNn | ModelKind::StandardCbf) => {}
            (b, k) => {
                return Err(Error::InvalidArgument(format!(
                    "backend {b:?} cannot filter with a {} model",
                    k.tag()
                )))
            }
        }
        let (tighten_c, precondition_warning) = match option {
            CbfOption::Contractive => {
                let delta = model.delta.ok_or_else(|| {
                    Error::InvalidArgument("option 3 filtering needs the model's estimated delta".into())
                })?;
                (-lambda_scaled + delta, delta > lambda_scaled / 2.0)
            }
            _ => (0.0, false),
        };
        Ok(Self {
            model,
            option,
            tighten_c,
            input,
            backend,
            multistart: 5,
            sys: None,
            precondition_warning,
        })
    }

    pub fn with_system(mut self, sys: PwaSystem) -> Self {
        self.sys = Some(sys);
        self
    }

    /// Barrier value and its gradient in `u`; `+inf` when the successor leaves the domain.
    pub fn constraint(&self, x: &StateVec, u: &InputVec) -> Result<(f64, DVector<f64>)> {
        match self.model.kind {
            ModelKind::StandardCbf => {
                let sys = self.sys.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("the standard barrier filter needs the system dynamics".into())
                })?;
                let (next, mode) = match sys.step(x, u) {
                    Ok(s) => s,
                    Err(Error::Domain { .. }) => return Ok((f64::INFINITY, DVector::zeros(u.len()))),
                    Err(e) => return Err(e),
                };
                let (b, g) = self.model.b_and_grad(&next)?;
                Ok((b, sys.mode(mode).b.transpose() * g))
            }
            _ => self.model.q_and_grad_u(x, u),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub u: InputVec,
    pub feasible: bool,
    pub relaxed: bool,
    pub solve_time_us: f64,
    /// `‖u - u0‖₂`.
    pub objective: f64,
}

impl FilterResult {
    fn new(u: InputVec, u0: &InputVec, feasible: bool, relaxed: bool, start: Instant) -> Self {
        let objective = (&u - u0).norm();
        Self {
            u,
            feasible,
            relaxed,
            solve_time_us: start.elapsed().as_secs_f64() * 1e6,
            objective,
        }
    }
}

fn check_point(spec: &FilterSpec, x: &StateVec, u0: &InputVec) -> Result<()> {
    if x.len() != spec.model.n_x || u0.len() != spec.model.n_u {
        return Err(Error::Dimension("filter state or input size".into()));
    }
    if x.iter().chain(u0.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("filter input"));
    }
    Ok(())
}

/// Nearest point to `u0` in `U ∩ {u | q1 + q2'u + u'Q3u <= c}`, `None` when empty.
pub fn project_quadratic(
    q1: f64,
    q2: &DVector<f64>,
    q3: &DMatrix<f64>,
    c: f64,
    input: &Polytope,
    u0: &InputVec,
) -> Result<Option<InputVec>> {
    let value = |u: &InputVec| q1 + q2.dot(u) + u.dot(&(q3 * u));
    if input.contains(u0, 0.0) && value(u0) <= c {
        return Ok(Some(u0.clone()));
    }
    if u0.len() == 1 {
        let Some((lo, hi)) = input.interval() else {
            return Ok(None);
        };
        let Some((a, b)) = quad_interval(q3[(0, 0)], q2[0], q1 - c) else {
            return Ok(None);
        };
        let (lo, hi) = (lo.max(a), hi.min(b));
        if lo > hi {
            return Ok(None);
        }
        return Ok(Some(DVector::from_element(1, u0[0].clamp(lo, hi))));
    }
    let n = u0.len();
    let p = ConvexQcqp::new(DMatrix::identity(n, n), -2.0 * u0, u0.norm_squared())
        .with_quad(QuadConstraint { p: q3.clone(), q: q2.clone(), r: q1 - c })
        .with_linear(input.h_mat.clone(), input.h_vec.clone());
    let sol = solve_qcqp(&p)?;
    Ok(match sol.status {
        QcqpStatus::Optimal => Some(sol.z),
        QcqpStatus::Infeasible => None,
    })
}

/// Minimizer of `q2'u + u'Q3u` over `U`.
pub fn minimize_quadratic(q2: &DVector<f64>, q3: &DMatrix<f64>, input: &Polytope) -> Result<InputVec> {
    if q2.len() == 1 {
        let (lo, hi) = input
            .interval()
            .ok_or_else(|| Error::InvalidArgument("empty input set".into()))?;
        let (a, b) = (q3[(0, 0)], q2[0]);
        let u = if a > 0.0 {
            (-b / (2.0 * a)).clamp(lo, hi)
        } else if b > 0.0 {
            lo
        } else if b < 0.0 {
            hi
        } else {
            0.0f64.clamp(lo, hi)
        };
        return Ok(DVector::from_element(1, u));
    }
    let p = ConvexQcqp::new(q3.clone(), q2.clone(), 0.0).with_linear(input.h_mat.clone(), input.h_vec.clone());
    let sol = solve_qcqp(&p)?;
    match sol.status {
        QcqpStatus::Optimal => Ok(sol.z),
        QcqpStatus::Infeasible => Err(Error::InvalidArgument("empty input set".into())),
    }
}

/// Exact filter on the quadratic model.
pub fn filter_quadratic(spec: &FilterSpec, x: &StateVec, u0: &InputVec) -> Result<FilterResult> {
    check_point(spec, x, u0)?;
    let start = Instant::now();
    let (q1, q2, l) = spec.model.coefficients(x)?;
    let q3 = &l * l.transpose();
    Ok(match project_quadratic(q1, &q2, &q3, spec.tighten_c, &spec.input, u0)? {
        Some(u) => FilterResult::new(u, u0, true, false, start),
        None => FilterResult::new(spec.input.clamp_box(u0).unwrap_or_else(|| u0.clone()), u0, false, false, start),
    })
}

/// Box bounds of the input set, required by the local search.
fn input_box(input: &Polytope) -> Result<(Vec<f64>, Vec<f64>)> {
    input
        .as_box()
        .ok_or_else(|| Error::InvalidArgument("local filter search needs a box input set".into()))
}

fn clamp(u: &DVector<f64>, lo: &[f64], hi: &[f64]) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| u[i].clamp(lo[i], hi[i]))
}

/// Start points: `u0`, the box center, the corners, then seeded uniform draws.
fn start_points(u0: &InputVec, lo: &[f64], hi: &[f64], count: usize) -> Vec<InputVec> {
    let n = u0.len();
    let mut starts = vec![clamp(u0, lo, hi), DVector::from_fn(n, |i, _| 0.5 * (lo[i] + hi[i]))];
    if n < 16 {
        for mask in 0..(1usize << n) {
            starts.push(DVector::from_fn(n, |i, _| if mask >> i & 1 == 1 { hi[i] } else { lo[i] }));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    while starts.len() < count {
        starts.push(DVector::from_fn(n, |i, _| rng.random_range(lo[i]..=hi[i])));
    }
    starts.truncate(count.max(1));
    starts
}

/// Projection of `u0` onto `box ∩ {v | a'v <= b}`, `None` when empty.
fn project_box_halfspace(u0: &DVector<f64>, a: &DVector<f64>, b: f64, lo: &[f64], hi: &[f64]) -> Option<DVector<f64>> {
    let at = |mu: f64| clamp(&(u0 - mu * a), lo, hi);
    let excess = |mu: f64| a.dot(&at(mu)) - b;
    if excess(0.0) <= 0.0 {
        return Some(at(0.0));
    }
    let mut hi_mu = 1.0 / a.norm_squared().max(1e-300);
    let mut tries = 0;
    while excess(hi_mu) > 0.0 {
        hi_mu *= 4.0;
        tries += 1;
        if tries > 200 {
            return None;
        }
    }
    let mut lo_mu = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo_mu + hi_mu);
        if excess(mid) > 0.0 {
            lo_mu = mid;
        } else {
            hi_mu = mid;
        }
        if hi_mu - lo_mu <= 1e-16 * hi_mu {
            break;
        }
    }
    Some(at(hi_mu))
}

type Barrier<'a> = dyn Fn(&InputVec) -> Result<(f64, DVector<f64>)> + 'a;

/// Projected gradient descent on `g` over the box; stops once `g <= stop`.
fn descend(g: &Barrier<'_>, mut u: DVector<f64>, stop: f64, lo: &[f64], hi: &[f64], iters: usize) -> Result<(DVector<f64>, f64)> {
    let (mut gv, mut gg) = g(&u)?;
    let width = lo.iter().zip(hi).map(|(a, b)| b - a).fold(0.0, f64::max).max(1e-12);
    let mut step = width / gg.norm().max(1e-12);
    for _ in 0..iters {
        if gv <= stop || !gv.is_finite() {
            break;
        }
        let mut moved = false;
        for _ in 0..60 {
            let trial = clamp(&(&u - step * &gg), lo, hi);
            let d = &trial - &u;
            if d.norm() <= 1e-15 * (1.0 + u.norm()) {
                break;
            }
            let (tv, tg) = g(&trial)?;
            if tv <= gv + 1e-4 * gg.dot(&d) {
                u = trial;
                gv = tv;
                gg = tg;
                moved = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Ok((u, gv))
}

/// Pulls an infeasible point back onto `{g <= c}` along the gradient.
fn correct(g: &Barrier<'_>, mut u: DVector<f64>, c: f64, lo: &[f64], hi: &[f64]) -> Result<Option<DVector<f64>>> {
    let target = c - 1e-12 * (1.0 + c.abs());
    for _ in 0..4 {
        let (v, grad) = g(&u)?;
        if v <= c {
            return Ok(Some(u));
        }
        let n2 = grad.norm_squared();
        if n2 == 0.0 || !v.is_finite() {
            return Ok(None);
        }
        u = clamp(&(&u - (v - target) / n2 * &grad), lo, hi);
    }
    Ok((g(&u)?.0 <= c).then_some(u))
}

/// Local solution of `min ‖u - u0‖ s.t. g(u) <= c, lo <= u <= hi` from a
/// feasible point: linearized projections with backtracking and a
/// gradient correction back onto the feasible side.
fn polish(g: &Barrier<'_>, mut u: DVector<f64>, u0: &DVector<f64>, c: f64, lo: &[f64], hi: &[f64]) -> Result<DVector<f64>> {
    let mut dist = (&u - u0).norm();
    for _ in 0..200 {
        let (gv, gg) = g(&u)?;
        let b = c - gv + gg.dot(&u);
        let Some(target) = project_box_halfspace(u0, &gg, b, lo, hi) else {
            break;
        };
        let d = &target - &u;
        if d.norm() <= 1e-13 * (1.0 + u.norm()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = clamp(&(&u + t * &d), lo, hi);
            if let Some(p) = correct(g, trial, c, lo, hi)? {
                let pd = (&p - u0).norm();
                if pd < dist - 1e-15 * (1.0 + dist) {
                    accepted = Some((p, pd));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((p, pd)) => {
                let gain = dist - pd;
                u = p;
                dist = pd;
                if gain <= 1e-13 * (1.0 + dist) {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(u)
}

/// Best local solution of `min ‖u - u0‖ s.t. g(u) <= c, u in box` over the
/// start points, `None` when no start reaches the feasible set.
pub fn project_local(
    g: &Barrier<'_>,
    c: f64,
    input: &Polytope,
    u0: &InputVec,
    starts: usize,
) -> Result<Option<InputVec>> {
    let (lo, hi) = input_box(input)?;
    if input.contains(u0, 0.0) && g(u0)?.0 <= c {
        return Ok(Some(u0.clone()));
    }
    let mut best: Option<(f64, InputVec)> = None;
    for s in start_points(u0, &lo, &hi, starts) {
        let (u, v) = descend(g, s, c, &lo, &hi, 500)?;
        if v > c {
            continue;
        }
        let u = polish(g, u, u0, c, &lo, &hi)?;
        let d = (&u - u0).norm();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, u));
        }
    }
    Ok(best.map(|(_, u)| u))
}

/// Local minimizer of `g` over the box from the start points.
pub fn minimize_local(g: &Barrier<'_>, input: &Polytope, u0: &InputVec, starts: usize) -> Result<InputVec> {
    let (lo, hi) = input_box(input)?;
    let mut best: Option<(f64, InputVec)> = None;
    for s in start_points(u0, &lo, &hi, starts) {
        let (u, v) = descend(g, s, f64::NEG_INFINITY, &lo, &hi, 500)?;
        if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
            best = Some((v, u));
        }
    }
    best.map(|(_, u)| u)
        .ok_or_else(|| Error::InvalidArgument("no start points".into()))
}

/// Local filter for the full network and the standard barrier surrogate.
pub fn filter_nlp(spec: &FilterSpec, x: &StateVec, u0: &InputVec) -> Result<FilterResult> {
    check_point(spec, x, u0)?;
    let start = Instant::now();
    let g = |u: &InputVec| spec.constraint(x, u);
    Ok(match project_local(&g, spec.tighten_c, &spec.input, u0, spec.multistart)? {
        Some(u) => FilterResult::new(u, u0, true, false, start),
        None => FilterResult::new(spec.input.clamp_box(u0).unwrap_or_else(|| u0.clone()), u0, false, false, start),
    })
}

/// Input of least constraint violation, `argmin_{u in U} Q_θ(x, u)`.
pub fn relax_on_infeasible(spec: &FilterSpec, x: &StateVec, u0: &InputVec) -> Result<FilterResult> {
    check_point(spec, x, u0)?;
    let start = Instant::now();
    let u = match spec.backend {
        Backend::QuadExact => {
            let (_, q2, l) = spec.model.coefficients(x)?;
            minimize_quadratic(&q2, &(&l * l.transpose()), &spec.input)?
        }
        Backend::NlpLocal => {
            let g = |u: &InputVec| spec.constraint(x, u);
            minimize_local(&g, &spec.input, u0, spec.multistart)?
        }
    };
    Ok(FilterResult::new(u, u0, false, true, start))
}

/// Primary solve by the filter's backend, relaxed when infeasible; the time
/// covers both solves.
pub fn apply_filter(spec: &FilterSpec, x: &StateVec, u0: &InputVec) -> Result<FilterResult> {
    let start = Instant::now();
    let primary = match spec.backend {
        Backend::QuadExact => filter_quadratic(spec, x, u0)?,
        Backend::NlpLocal => filter_nlp(spec, x, u0)?,
    };
    let mut out = if primary.feasible {
        primary
    } else {
        relax_on_infeasible(spec, x, u0)?
    };
    out.solve_time_us = start.elapsed().as_secs_f64() * 1e6;
    Ok(out)
}

/// Filter on the exact `Q(x, u) = B_k(f(x, u))` for one input: keeps `u0`
/// when `Q(x, u0) <= level`, otherwise bisects between `u0` and the first
/// input of the `B_k(x)` optimizer, which is feasible whenever `x` is safe.
pub fn filter_exact(cfg: &GeneratorConfig, level: f64, x: &StateVec, u0: &InputVec, bisections: usize) -> Result<FilterResult> {
    let start = Instant::now();
    let cutoff = level + 1e-9;
    let feasible = |u: &InputVec| -> Result<bool> {
        match eval_q_below(cfg, x, u, cutoff) {
            Ok(q) => Ok(q.is_some()),
            Err(Error::Domain { .. }) => Ok(false),
            Err(e) => Err(e),
        }
    };
    let cand = cfg.input.clamp_box(u0).unwrap_or_else(|| u0.clone());
    if feasible(&cand)? {
        return Ok(FilterResult::new(cand, u0, true, false, start));
    }
    let best = eval_bk(cfg, x)?;
    let mut safe = best.inputs.first().cloned().ok_or_else(|| Error::InvalidArgument("horizon must be positive".into()))?;
    if !feasible(&safe)? {
        return Ok(FilterResult::new(safe, u0, false, true, start));
    }
    let mut unsafe_end = cand;
    for _ in 0..bisections {
        let mid = 0.5 * (&safe + &unsafe_end);
        if feasible(&mid)? {
            safe = mid;
        } else {
            unsafe_end = mid;
        }
    }
    Ok(FilterResult::new(safe, u0, true, false, start))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(d: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(d)
    }

    fn box1() -> Polytope {
        Polytope::from_box(&[-4.0], &[4.0]).unwrap()
    }

    fn quad_spec(q1: f64, q2: f64, l: f64) -> FilterSpec {
        let m = SacbfModel::constant_quadratic(2, q1, &v(&[q2]), &DMatrix::from_element(1, 1, l)).unwrap();
        FilterSpec::new(m, CbfOption::Plain, 0.0, box1(), Backend::QuadExact).unwrap()
    }

    #[test]
    fn feasible_proposal_is_returned_unchanged() {
        let spec = quad_spec(-1.0, 0.0, 1.0);
        let r = filter_quadratic(&spec, &v(&[0.1, 0.2]), &v(&[0.3])).unwrap();
        assert!(r.feasible && !r.relaxed);
        assert_eq!(r.u, v(&[0.3]));
        assert_eq!(r.objective, 0.0);
    }

    #[test]
    fn empty_constraint_set_is_infeasible_and_relaxes_to_zero() {
        let spec = quad_spec(1.0, 0.0, 1.0);
        let x = v(&[0.0, 0.0]);
        assert!(!filter_quadratic(&spec, &x, &v(&[2.0])).unwrap().feasible);
        let r = apply_filter(&spec, &x, &v(&[2.0])).unwrap();
        assert!(r.relaxed && !r.feasible);
        assert!(r.u[0].abs() < 1e-12);
    }

    #[test]
    fn nearest_point_of_unit_interval() {
        let spec = quad_spec(-1.0, 0.0, 1.0);
        let r = filter_quadratic(&spec, &v(&[0.0, 0.0]), &v(&[2.0])).unwrap();
        assert!((r.u[0] - 1.0).abs() < 1e-12 && r.feasible);
    }

    #[test]
    fn degenerate_quadratic_subcases() {
        let b = box1();
        let z = DMatrix::zeros(1, 1);
        // affine: 1 + 2u <= 0
        let u = project_quadratic(1.0, &v(&[2.0]), &z, 0.0, &b, &v(&[3.0])).unwrap().unwrap();
        assert!((u[0] + 0.5).abs() < 1e-15);
        // constant, satisfied everywhere
        let u = project_quadratic(-1.0, &v(&[0.0]), &z, 0.0, &b, &v(&[9.0])).unwrap().unwrap();
        assert_eq!(u[0], 4.0);
        // constant, violated everywhere
        assert!(project_quadratic(1.0, &v(&[0.0]), &z, 0.0, &b, &v(&[0.0])).unwrap().is_none());
        // interval outside the box
        assert!(project_quadratic(99.0, &v(&[-20.0]), &DMatrix::from_element(1, 1, 1.0), 0.0, &b, &v(&[0.0]))
            .unwrap()
            .is_none());
    }

    #[test]
    fn local_search_agrees_with_closed_form() {
        let g = |u: &InputVec| Ok((-1.0 + u[0] * u[0], v(&[2.0 * u[0]])));
        let u = project_local(&g, 0.0, &box1(), &v(&[2.0]), 5).unwrap().unwrap();
        assert!((u[0] - 1.0).abs() < 1e-3, "{u}");
        assert!(-1.0 + u[0] * u[0] <= 0.0);
    }

    #[test]
    fn local_search_in_two_inputs() {
        let input = Polytope::from_box(&[-2.0, -2.0], &[2.0, 2.0]).unwrap();
        // unit disk, proposal outside: answer is the radial projection
        let g = |u: &InputVec| Ok((u.norm_squared() - 1.0, 2.0 * u));
        let u0 = v(&[1.5, 1.5]);
        let u = project_local(&g, 0.0, &input, &u0, 5).unwrap().unwrap();
        let expect = &u0 / u0.norm();
        assert!((&u - &expect).norm() < 1e-6, "{u}");
        let q = project_quadratic(-1.0, &v(&[0.0, 0.0]), &DMatrix::identity(2, 2), 0.0, &input, &u0)
            .unwrap()
            .unwrap();
        assert!((&q - &expect).norm() < 1e-6, "{q}");
    }

    #[test]
    fn contractive_spec_tightens_and_flags_large_delta() {
        let mut m = SacbfModel::constant_quadratic(2, 0.0, &v(&[0.0]), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!(FilterSpec::new(m.clone(), CbfOption::Contractive, 0.1, box1(), Backend::QuadExact).is_err());
        m.delta = Some(0.03);
        let s = FilterSpec::new(m.clone(), CbfOption::Contractive, 0.1, box1(), Backend::QuadExact).unwrap();
        assert!((s.tighten_c + 0.07).abs() < 1e-15 && !s.precondition_warning);
        m.delta = Some(0.06);
        let s = FilterSpec::new(m, CbfOption::Contractive, 0.1, box1(), Backend::QuadExact).unwrap();
        assert!(s.precondition_warning);
    }

    #[test]
    fn backend_must_match_model_kind() {
        let spec = quad_spec(0.0, 0.0, 1.0);
        let mut m = spec.model.clone();
        m.kind = ModelKind::FullNn;
        assert!(FilterSpec::new(m, CbfOption::Plain, 0.0, box1(), Backend::QuadExact).is_err());
    }
}
