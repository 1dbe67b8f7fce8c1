//! Baseline policies: projected LQR, PWA model predictive control with a
//! Riccati terminal cost and invariant terminal set, its learned imitation,
//! and replay of externally supplied inputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::horizon::{StateRow, Trajectory, TrajectoryProgram};
use crate::learner::{split_indices, train_policy, Architecture, SacbfModel, TrainHyper};
use crate::optkit::polytope::{polytope_pre_reduce, remove_redundant, set_equal};
use crate::sysmodel::{ConstraintFn, InputVec, Polytope, PwaSystem, StateVec};

/// Riccati solution with `u = -K x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrGain {
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `A - B K`.
    pub a_cl: DMatrix<f64>,
    /// `‖P - DARE(P)‖_∞` at return.
    pub residual: f64,
    pub iterations: usize,
}

impl LqrGain {
    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a_cl)
    }
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// One Riccati map `Q + A'PA - A'PB (R + B'PB)^{-1} B'PA` and the gain.
fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let bp = b.transpose() * p;
    let s = r + &bp * b;
    let k = s
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("R + B'PB is not positive definite".into()))?
        .solve(&(&bp * a));
    let next = q + a.transpose() * p * a - a.transpose() * p * b * &k;
    Ok(((&next + next.transpose()) * 0.5, k))
}

/// Discrete algebraic Riccati equation by fixed-point iteration from `P = Q`.
pub fn dare_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrGain> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("Riccati matrix shapes".into()));
    }
    let mut p = q.clone();
    for it in 0..100_000 {
        let (next, _) = riccati_step(a, b, q, r, &p)?;
        let residual = (&next - &p).amax();
        if !residual.is_finite() {
            break;
        }
        p = next;
        if residual <= 1e-10 {
            let (check, k) = riccati_step(a, b, q, r, &p)?;
            let residual = (&check - &p).amax();
            if residual <= 1e-10 {
                let a_cl = a - b * &k;
                return Ok(LqrGain { k, p, a_cl, residual, iterations: it + 1 });
            }
        }
    }
    Err(Error::Solver("Riccati iteration did not converge in 100000 iterations".into()))
}

/// `{x | h(x) <= 0}` as a polytope.
pub fn state_polytope(cons: &ConstraintFn) -> Result<Polytope> {
    Polytope::new(cons.rows().clone(), cons.offsets().clone())
}

/// Maximal positively invariant subset of `X ∩ {x | -Kx ∈ U}` under `x+ = (A - BK) x`.
pub fn build_terminal_set(gain: &LqrGain, x_set: &Polytope, u_set: &Polytope) -> Result<Polytope> {
    let pulled = Polytope::new(-(&u_set.h_mat * &gain.k), u_set.h_vec.clone())?;
    let mut omega = remove_redundant(&x_set.intersect(&pulled)?)?;
    for _ in 0..500 {
        let next = polytope_pre_reduce(&gain.a_cl, &omega)?;
        if set_equal(&next, &omega)? {
            return Ok(next);
        }
        omega = next;
    }
    Err(Error::Solver("terminal set iteration did not converge in 500 steps".into()))
}

#[derive(Clone, Debug)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q_c: DMatrix<f64>,
    pub r_c: DMatrix<f64>,
    /// Terminal cost weight, the Riccati solution.
    pub q_t: DMatrix<f64>,
    pub terminal_set: Polytope,
    /// State constraints imposed at `t = 0..N-1`.
    pub state_set: Polytope,
    pub gain: LqrGain,
}

impl MpcConfig {
    /// Terminal ingredients from the mode containing the origin.
    pub fn new(
        sys: &PwaSystem,
        cons: &ConstraintFn,
        input: &Polytope,
        horizon: usize,
        q_c: DMatrix<f64>,
        r_c: DMatrix<f64>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("MPC horizon must be positive".into()));
        }
        let origin = sys
            .origin_mode()
            .ok_or_else(|| Error::InvalidArgument("no mode contains the origin".into()))?;
        let mode = sys.mode(origin);
        let gain = dare_solve(&mode.a, &mode.b, &q_c, &r_c)?;
        let state_set = state_polytope(cons)?;
        let terminal_set = build_terminal_set(&gain, &state_set, input)?;
        Ok(Self { horizon, q_c, r_c, q_t: gain.p.clone(), terminal_set, state_set, gain })
    }

    /// Stage weights `Q_c = diag(20, 1)` and `R_c = 1`.
    pub fn pendulum(sys: &PwaSystem, cons: &ConstraintFn, input: &Polytope, horizon: usize) -> Result<Self> {
        Self::new(
            sys,
            cons,
            input,
            horizon,
            DMatrix::from_diagonal(&DVector::from_vec(vec![20.0, 1.0])),
            DMatrix::identity(1, 1),
        )
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("MPC horizon must be positive".into()));
        }
        Ok(Self { horizon, ..self.clone() })
    }

    fn program<'a>(&'a self, sys: &'a PwaSystem, input: &'a Polytope, x: &StateVec) -> TrajectoryProgram<'a> {
        let n = self.horizon;
        let mut prog = TrajectoryProgram::new(sys, x.clone(), n, input);
        let rows: Vec<StateRow> = (0..self.state_set.n_faces())
            .map(|i| StateRow {
                a: self.state_set.h_mat.row(i).transpose(),
                rhs: self.state_set.h_vec[i],
                s_coef: 0.0,
            })
            .collect();
        for t in 0..n {
            prog.state_rows[t] = rows.clone();
            prog.state_cost[t] = Some(self.q_c.clone());
            prog.input_cost[t] = Some((self.r_c.clone(), DVector::zeros(self.r_c.nrows())));
        }
        prog.state_cost[n] = Some(self.q_t.clone());
        prog.terminal_set = Some(&self.terminal_set);
        prog
    }

    /// `-Kx` projected onto a box input set.
    pub fn lqr_input(&self, x: &StateVec, input: &Polytope) -> InputVec {
        let u = -(&self.gain.k * x);
        input.clamp_box(&u).unwrap_or(u)
    }
}

#[derive(Clone, Debug)]
pub struct MpcSolution {
    pub u: InputVec,
    pub cost: f64,
    pub trajectory: Trajectory,
    pub node_count: usize,
}

/// Exact PWA MPC by branch and bound over mode sequences; `None` when infeasible.
pub fn mpc_solve(cfg: &MpcConfig, sys: &PwaSystem, input: &Polytope, x: &StateVec) -> Result<Option<MpcSolution>> {
    if !sys.domain().contains(x, 0.0) {
        return Err(Error::Domain { state: x.iter().copied().collect() });
    }
    let feedback = |z: &StateVec| cfg.lqr_input(z, input);
    let mut prog = cfg.program(sys, input, x);
    prog.rollout = Some(&feedback);
    let res = prog.search(f64::INFINITY)?;
    Ok(res.best.map(|t| MpcSolution {
        u: t.inputs[0].clone(),
        cost: t.value,
        trajectory: t,
        node_count: res.node_count,
    }))
}

/// Optimal MPC cost by solving every mode sequence (oracle for short horizons).
pub fn mpc_enumerate(cfg: &MpcConfig, sys: &PwaSystem, input: &Polytope, x: &StateVec) -> Result<Option<f64>> {
    Ok(cfg.program(sys, input, x).enumerate()?.map(|t| t.value))
}

/// Uniform states from the state constraint box with their MPC inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcDataset {
    pub states: Vec<StateVec>,
    pub inputs: Vec<InputVec>,
    /// Candidates drawn to reach the requested count.
    pub drawn: usize,
}

/// Draws states uniformly from the state constraint box and keeps the first
/// `count` for which MPC is feasible; at most `budget` draws.
pub fn mpc_dataset(
    cfg: &MpcConfig,
    sys: &PwaSystem,
    input: &Polytope,
    count: usize,
    budget: usize,
    seed: u64,
) -> Result<MpcDataset> {
    let (lo, hi) = cfg
        .state_set
        .as_box()
        .ok_or_else(|| Error::InvalidArgument("state constraint set must be a box for sampling".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(count);
    let mut inputs = Vec::with_capacity(count);
    let mut drawn = 0usize;
    while states.len() < count && drawn < budget {
        let batch = (2 * (count - states.len())).max(16).min(budget - drawn);
        let cands: Vec<StateVec> = (0..batch)
            .map(|_| DVector::from_fn(lo.len(), |i, _| rng.random_range(lo[i]..=hi[i])))
            .collect();
        drawn += batch;
        let sols: Vec<Option<MpcSolution>> = cands
            .par_iter()
            .map(|x| mpc_solve(cfg, sys, input, x))
            .collect::<Result<_>>()?;
        for (x, s) in cands.into_iter().zip(sols) {
            if let (Some(s), true) = (s, states.len() < count) {
                states.push(x);
                inputs.push(s.u);
            }
        }
    }
    if states.len() < count {
        return Err(Error::Infeasible(format!(
            "only {} of {count} sampled states were MPC-feasible after {drawn} draws",
            states.len()
        )));
    }
    Ok(MpcDataset { states, inputs, drawn })
}

/// Training settings for the imitation policy: the dataset is small, so
/// smaller batches and more epochs than the barrier defaults.
pub fn learned_mpc_hyper() -> TrainHyper {
    TrainHyper { batch_size: 32, epochs: 600, ..TrainHyper::default() }
}

/// ReLU network with hidden widths 16, 32 and 8 fitted to MPC inputs, then
/// shifted so that the origin maps to the zero input as MPC does; the
/// recorded errors are those of the shifted network.
pub fn train_learned_mpc(data: &MpcDataset, hyper: &TrainHyper) -> Result<SacbfModel> {
    let mut model = train_policy(&data.states, &data.inputs, &Architecture::relu(&[16, 32, 8]), hyper)?;
    let origin = DVector::zeros(model.n_x);
    let offset = model.predict_input(&origin)?;
    let shift = DVector::from_fn(model.n_u, |i, _| -offset[i] / model.scaling.out_scale[i]);
    model.nets[0].shift_output(&shift)?;
    let mse = |idx: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for &i in idx {
            total += (model.predict_input(&data.states[i])? - &data.inputs[i]).norm_squared();
        }
        Ok(total / (idx.len().max(1) * model.n_u) as f64)
    };
    let (train, val) = split_indices(data.states.len(), hyper.validation_fraction, hyper.seed);
    let train_mse = mse(&train)?;
    let validation_mse = if val.is_empty() { train_mse } else { mse(&val)? };
    model.train_mse = train_mse;
    model.validation_mse = validation_mse;
    Ok(model)
}

pub fn save_mpc_dataset(data: &MpcDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_x = data.states.first().map_or(0, |x| x.len());
    let n_u = data.inputs.first().map_or(0, |u| u.len());
    let header: Vec<String> = (1..=n_x).map(|i| format!("x{i}")).chain((1..=n_u).map(|i| format!("u{i}"))).collect();
    w.write_record(&header)?;
    for (x, u) in data.states.iter().zip(&data.inputs) {
        w.write_record(x.iter().chain(u.iter()).map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by `save_mpc_dataset`; input columns are named `u*`.
pub fn load_mpc_dataset(path: &Path) -> Result<MpcDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let n_x = r.headers()?.iter().filter(|h| h.starts_with('x')).count();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    offset: line + 1,
                    message: format!("record {}: {e}", line + 1),
                })
            })
            .collect::<Result<_>>()?;
        states.push(DVector::from_column_slice(&vals[..n_x]));
        inputs.push(DVector::from_column_slice(&vals[n_x..]));
    }
    let drawn = states.len();
    Ok(MpcDataset { states, inputs, drawn })
}

/// Base policy `π₀`.
#[derive(Clone, Debug)]
pub enum Policy {
    /// `-Kx` projected onto the input box.
    Lqr { gain: LqrGain, input: Polytope },
    /// MPC; falls back to the projected LQR input where MPC is infeasible.
    Mpc { cfg: MpcConfig, sys: PwaSystem, input: Polytope },
    /// Learned MPC imitation, unprojected.
    Learned(SacbfModel),
    /// Inputs supplied out of band, indexed by time step.
    Stub(Vec<InputVec>),
}

impl Policy {
    pub fn tag(&self) -> &'static str {
        match self {
            Policy::Lqr { .. } => "lqr",
            Policy::Mpc { .. } => "mpc",
            Policy::Learned(_) => "learned-mpc",
            Policy::Stub(_) => "stub",
        }
    }
}

pub fn policy_eval(policy: &Policy, x: &StateVec, t: usize) -> Result<InputVec> {
    match policy {
        Policy::Lqr { gain, input } => {
            let u = -(&gain.k * x);
            Ok(input.clamp_box(&u).unwrap_or(u))
        }
        Policy::Mpc { cfg, sys, input } => Ok(match mpc_solve(cfg, sys, input, x)? {
            Some(s) => s.u,
            None => cfg.lqr_input(x, input),
        }),
        Policy::Learned(m) => m.predict_input(x),
        Policy::Stub(rows) => rows.get(t).cloned().ok_or(Error::StubExhausted(rows.len())),
    }
}

/// One input per line, components separated by commas; `#` starts a comment.
pub fn load_stub(path: &Path) -> Result<Vec<InputVec>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.split('#').next().unwrap_or("").trim();
        if !body.is_empty() {
            let vals: Vec<f64> = body
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|e| Error::Parse { offset, message: format!("{e}") })
                })
                .collect::<Result<_>>()?;
            rows.push(DVector::from_vec(vals));
        }
        offset += line.len();
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::pendulum_build;

    fn pendulum_mpc(n: usize) -> (PwaSystem, Polytope, MpcConfig) {
        let (sys, cons, input) = pendulum_build();
        let cfg = MpcConfig::pendulum(&sys, &cons, &input, n).unwrap();
        (sys, input, cfg)
    }

    #[test]
    fn dare_with_zero_dynamics_returns_stage_cost() {
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![20.0, 1.0]));
        let g = dare_solve(&DMatrix::zeros(2, 2), &DMatrix::from_row_slice(2, 1, &[0.0, 0.05]), &q, &DMatrix::identity(1, 1))
            .unwrap();
        assert_eq!(g.p, q);
        assert_eq!(g.k, DMatrix::zeros(1, 2));
    }

    #[test]
    fn pendulum_dare_residual_and_stability() {
        let (_, _, cfg) = pendulum_mpc(3);
        let g = &cfg.gain;
        assert!(g.residual <= 1e-10);
        let (sys, _, _) = pendulum_build();
        let mode = sys.mode(sys.origin_mode().unwrap());
        let (p_next, _) = riccati_step(&mode.a, &mode.b, &cfg.q_c, &cfg.r_c, &g.p).unwrap();
        assert!((&p_next - &g.p).amax() <= 1e-10);
        assert!(g.spectral_radius() < 1.0);
    }

    #[test]
    fn lqr_policy_is_projected() {
        let (_, input, cfg) = pendulum_mpc(3);
        let pol = Policy::Lqr { gain: cfg.gain.clone(), input };
        assert_eq!(policy_eval(&pol, &DVector::zeros(2), 0).unwrap()[0], 0.0);
        // choose x with -Kx = 9
        let k = &cfg.gain.k;
        let x = DVector::from_vec(vec![-9.0 * k[(0, 0)] / k.norm_squared(), -9.0 * k[(0, 1)] / k.norm_squared()]);
        assert!(((-(k * &x))[0] - 9.0).abs() < 1e-9);
        assert_eq!(policy_eval(&pol, &x, 0).unwrap()[0], 4.0);
    }

    #[test]
    fn mpc_at_origin_is_zero() {
        let (sys, input, cfg) = pendulum_mpc(5);
        let s = mpc_solve(&cfg, &sys, &input, &DVector::zeros(2)).unwrap().unwrap();
        assert!(s.u[0].abs() < 1e-9 && s.cost.abs() < 1e-9);
    }

    #[test]
    fn stub_replays_and_reports_exhaustion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stub.txt");
        std::fs::write(&path, "# inputs\n0.5\n-1.25\n").unwrap();
        let rows = load_stub(&path).unwrap();
        let pol = Policy::Stub(rows);
        let x = DVector::zeros(2);
        assert_eq!(policy_eval(&pol, &x, 1).unwrap()[0], -1.25);
        assert!(matches!(policy_eval(&pol, &x, 2), Err(Error::StubExhausted(2))));
    }

    #[test]
    fn mpc_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mpc.csv");
        let data = MpcDataset {
            states: vec![DVector::from_vec(vec![0.1, -0.2]), DVector::from_vec(vec![1.0 / 3.0, 0.0])],
            inputs: vec![DVector::from_vec(vec![0.7]), DVector::from_vec(vec![-2.0 / 7.0])],
            drawn: 2,
        };
        save_mpc_dataset(&data, &path).unwrap();
        assert_eq!(load_mpc_dataset(&path).unwrap(), data);
    }
}
