//! Reachability value function `B_k` for PWA systems and the state-action
//! labels `Q(x, u) = B_k(f(x, u))`.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::cbf_init::{CbfOption, QuadraticCbf};
use crate::error::{Error, Result};
use crate::horizon::{StateRow, TerminalQuad, Trajectory, TrajectoryProgram, GAP};
use crate::optkit::polytope::vertices;
use crate::sysmodel::{ConstraintFn, InputVec, Polytope, PwaSystem, StateVec};

/// Everything needed to evaluate `B_k`.
#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub sys: PwaSystem,
    pub cons: ConstraintFn,
    pub input: Polytope,
    pub b0: QuadraticCbf,
    pub k: usize,
    pub option: CbfOption,
    /// Tightening constant in normalized barrier units.
    pub lambda: f64,
    /// Discount base: 1 for plain barriers, `1/beta` for exponential ones.
    pub alpha: f64,
}

impl GeneratorConfig {
    pub fn new(
        sys: PwaSystem,
        cons: ConstraintFn,
        input: Polytope,
        b0: QuadraticCbf,
        k: usize,
    ) -> Result<Self> {
        let option = b0.option;
        let lambda = match option {
            CbfOption::Plain => 0.0,
            _ => b0.lambda_scaled,
        };
        let alpha = b0.beta.map_or(1.0, |beta| 1.0 / beta);
        let cfg = Self {
            sys,
            cons,
            input,
            b0,
            k,
            option,
            lambda,
            alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_horizon(&self, k: usize) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.k = k;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 1.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(
                "discount base must be at least 1".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
        }
        if self.b0.n_x() != self.sys.n_x() || self.cons.n_x() != self.sys.n_x() {
            return Err(Error::Dimension(
                "barrier, constraint and system state sizes differ".into(),
            ));
        }
        if self.option == CbfOption::Contractive && self.k > self.b0.k_budget {
            return Err(Error::InvalidArgument(format!(
                "horizon {} exceeds the contractive budget {} the initial barrier was certified for",
                self.k, self.b0.k_budget
            )));
        }
        Ok(())
    }

    /// Tightening `lambda_t` applied to the constraint term at time `t`.
    pub fn lambda_t(&self, t: usize) -> f64 {
        match self.option {
            CbfOption::Plain => 0.0,
            CbfOption::Tightened => self.lambda,
            CbfOption::Contractive => t as f64 * self.lambda,
        }
    }

    /// Safety threshold of the decrease condition: `0`, or `-lambda` for contractive barriers.
    pub fn decrease_threshold(&self) -> f64 {
        match self.option {
            CbfOption::Contractive => -self.lambda,
            _ => 0.0,
        }
    }

    /// Horizon program whose optimal value is `B_k(x)`.
    fn program(&self, x: &StateVec) -> TrajectoryProgram<'_> {
        let k = self.k;
        let mut prog = TrajectoryProgram::new(&self.sys, x.clone(), k, &self.input);
        // terms at t = 0..k-1 and the terminal barrier at t = k
        for t in 0..k {
            let w = self.alpha.powi(t as i32);
            let lam = self.lambda_t(t);
            prog.state_rows[t] = (0..self.cons.n_pieces())
                .map(|j| StateRow {
                    a: self.cons.rows().row(j).transpose() * w,
                    rhs: w * (self.cons.offsets()[j] - lam),
                    s_coef: 1.0,
                })
                .collect();
        }
        let wk = self.alpha.powi(k as i32);
        prog.terminal_quad = Some(TerminalQuad {
            p: &self.b0.p * wk,
            offset: -wk,
            s_coef: 1.0,
        });
        prog.epigraph_floor = Some(-wk);
        prog
    }

    /// Objective of a trajectory, recomputed from its states.
    pub fn objective(&self, states: &[StateVec]) -> f64 {
        let k = states.len() - 1;
        let mut v = self.alpha.powi(k as i32) * self.b0.eval(&states[k]);
        for (t, x) in states.iter().take(k).enumerate() {
            v = v.max(self.alpha.powi(t as i32) * (self.cons.eval(x) + self.lambda_t(t)));
        }
        v
    }

    /// Lipschitz bound `max(max_t alpha^t L_h L_f^t, alpha^k L_B0 L_f^k)` over the domain box.
    pub fn lipschitz_bound(&self) -> f64 {
        let l_f = self
            .sys
            .modes()
            .iter()
            .map(|m| m.a.singular_values().max())
            .fold(0.0, f64::max);
        let l_h = self.cons.lipschitz();
        let radius = vertices(self.sys.domain())
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max);
        let l_b0 = 2.0 * self.b0.p.symmetric_eigenvalues().max() * radius;
        let mut l = self.alpha.powi(self.k as i32) * l_b0 * l_f.powi(self.k as i32);
        for t in 0..self.k {
            l = l.max(self.alpha.powi(t as i32) * l_h * l_f.powi(t as i32));
        }
        l
    }
}

/// Optimal value of the reachability problem with its trajectory.
#[derive(Clone, Debug)]
pub struct ReachValue {
    pub value: f64,
    pub states: Vec<StateVec>,
    pub inputs: Vec<InputVec>,
    pub modes: Vec<usize>,
    pub node_count: usize,
}

impl ReachValue {
    fn from_trajectory(cfg: &GeneratorConfig, t: Trajectory, node_count: usize) -> Self {
        let value = cfg.objective(&t.states);
        Self {
            value,
            states: t.states,
            inputs: t.inputs,
            modes: t.modes,
            node_count,
        }
    }
}

fn check_state(cfg: &GeneratorConfig, x: &StateVec) -> Result<()> {
    if x.len() != cfg.sys.n_x() {
        return Err(Error::Dimension("state length".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    Ok(())
}

/// Exact `B_k(x)`.
pub fn eval_bk(cfg: &GeneratorConfig, x: &StateVec) -> Result<ReachValue> {
    check_state(cfg, x)?;
    let feedback = |z: &StateVec| cfg.b0.feedback(z, &cfg.input);
    let mut prog = cfg.program(x);
    prog.rollout = Some(&feedback);
    let res = prog.search(f64::INFINITY)?;
    let best = res.best.ok_or_else(|| {
        Error::Solver("no feasible mode sequence for the reachability problem".into())
    })?;
    Ok(ReachValue::from_trajectory(cfg, best, res.node_count))
}

/// `B_k(x)` if it is below `cutoff`, otherwise `None` (then `B_k(x) >= cutoff - 1e-9`).
pub fn eval_bk_below(
    cfg: &GeneratorConfig,
    x: &StateVec,
    cutoff: f64,
) -> Result<Option<ReachValue>> {
    check_state(cfg, x)?;
    if cfg.cons.eval(x) + cfg.lambda_t(0) >= cutoff && cfg.k > 0 {
        return Ok(None);
    }
    let feedback = |z: &StateVec| cfg.b0.feedback(z, &cfg.input);
    let mut prog = cfg.program(x);
    prog.rollout = Some(&feedback);
    let res = prog.search(cutoff + GAP)?;
    Ok(res
        .best
        .map(|t| ReachValue::from_trajectory(cfg, t, res.node_count))
        .filter(|r| r.value < cutoff))
}

/// Exhaustive enumeration of all mode sequences (oracle for small horizons).
pub fn eval_bk_enumerate(cfg: &GeneratorConfig, x: &StateVec) -> Result<f64> {
    let best = cfg
        .program(x)
        .enumerate()?
        .ok_or_else(|| Error::Solver("no feasible mode sequence".into()))?;
    Ok(cfg.objective(&best.states))
}

/// `Q(x, u) = B_k(f(x, u))`.
pub fn eval_q(cfg: &GeneratorConfig, x: &StateVec, u: &InputVec) -> Result<f64> {
    let (next, _) = cfg.sys.step(x, u)?;
    Ok(eval_bk(cfg, &next)?.value)
}

/// `Q(x, u)` if it is below `cutoff`.
pub fn eval_q_below(
    cfg: &GeneratorConfig,
    x: &StateVec,
    u: &InputVec,
    cutoff: f64,
) -> Result<Option<f64>> {
    let (next, _) = cfg.sys.step(x, u)?;
    Ok(eval_bk_below(cfg, &next, cutoff)?.map(|r| r.value))
}

/// Minimum of `Q(x, u)` over a list of inputs, pruning against the running best.
pub fn min_q_over(
    cfg: &GeneratorConfig,
    x: &StateVec,
    inputs: &[InputVec],
) -> Result<(f64, InputVec)> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let guess = cfg.b0.feedback(x, &cfg.input);
    order.sort_by(|&a, &b| {
        (&inputs[a] - &guess)
            .norm()
            .total_cmp(&(&inputs[b] - &guess).norm())
    });
    let mut best = f64::INFINITY;
    let mut arg = inputs
        .first()
        .cloned()
        .unwrap_or_else(|| DVector::zeros(cfg.sys.n_u()));
    for i in order {
        let q = if best.is_finite() {
            eval_q_below(cfg, x, &inputs[i], best)?
        } else {
            Some(eval_q(cfg, x, &inputs[i])?)
        };
        if let Some(q) = q {
            if q < best {
                best = q;
                arg = inputs[i].clone();
            }
        }
    }
    Ok((best, arg))
}

/// Per-state outcome of the sampled decrease check.
#[derive(Clone, Debug)]
pub struct CbfSampleOutcome {
    pub state: StateVec,
    pub bk: f64,
    pub min_q: f64,
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct CbfCheckReport {
    pub threshold: f64,
    pub checked: Vec<CbfSampleOutcome>,
    /// States outside the safe set, which are not checked.
    pub skipped: usize,
    pub worst_margin: f64,
}

/// Uniform grid over a one-dimensional box input set.
pub fn input_grid(input: &Polytope, size: usize) -> Result<Vec<InputVec>> {
    let (lo, hi) = input.interval().ok_or_else(|| {
        Error::InvalidArgument("input grid requires a bounded one-dimensional input set".into())
    })?;
    if size < 2 {
        return Err(Error::InvalidArgument(
            "input grid needs at least two points".into(),
        ));
    }
    Ok((0..size)
        .map(|i| DVector::from_element(1, lo + (hi - lo) * i as f64 / (size - 1) as f64))
        .collect())
}

/// For safe states, `min_u Q(x, u)` over an input grid against the option's threshold.
pub fn check_cbf_sample(
    cfg: &GeneratorConfig,
    states: &[StateVec],
    u_grid_size: usize,
) -> Result<CbfCheckReport> {
    let grid = input_grid(&cfg.input, u_grid_size)?;
    let threshold = cfg.decrease_threshold();
    let results: Vec<Option<CbfSampleOutcome>> = states
        .par_iter()
        .map(|x| -> Result<Option<CbfSampleOutcome>> {
            let bk = eval_bk(cfg, x)?.value;
            if bk > 0.0 {
                return Ok(None);
            }
            let (min_q, _) = min_q_over(cfg, x, &grid)?;
            Ok(Some(CbfSampleOutcome {
                state: x.clone(),
                bk,
                min_q,
                margin: min_q - threshold,
            }))
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    let checked: Vec<CbfSampleOutcome> = results.into_iter().flatten().collect();
    let worst_margin = checked
        .iter()
        .map(|c| c.margin)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CbfCheckReport {
        threshold,
        checked,
        skipped,
        worst_margin,
    })
}

/// Labels many states in parallel.
pub fn eval_bk_batch(cfg: &GeneratorConfig, states: &[StateVec]) -> Result<Vec<f64>> {
    states
        .par_iter()
        .map(|x| eval_bk(cfg, x).map(|r| r.value))
        .collect()
}
