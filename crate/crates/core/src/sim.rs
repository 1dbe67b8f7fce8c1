//! Closed-loop simulation with optional safety filters, initial-state
//! selection, disturbance runs, trace files and metric tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{apply_filter, filter_exact, FilterSpec};
use crate::learner::ModelKind;
use crate::policies::{policy_eval, Policy};
use crate::reach_gen::{eval_bk, eval_bk_batch, GeneratorConfig};
use crate::sysmodel::{ConstraintFn, InputVec, PwaSystem, StateVec};

/// Filter applied to the base policy in closed loop.
#[derive(Clone, Debug)]
pub enum SafetyFilter {
    None,
    Learned(FilterSpec),
    /// Filter on the exact `Q = B_k(f(x, u))` with constraint `Q <= level`.
    Exact { cfg: Box<GeneratorConfig>, level: f64, bisections: usize },
}

impl SafetyFilter {
    pub fn tag(&self) -> &'static str {
        match self {
            SafetyFilter::None => "none",
            SafetyFilter::Learned(spec) => match spec.model.kind {
                ModelKind::Quadratic if spec.backend == crate::filter::Backend::QuadExact => "sacbf-quad",
                ModelKind::StandardCbf => "std-cbf",
                _ => "sacbf-nn",
            },
            SafetyFilter::Exact { .. } => "exact-q",
        }
    }
}

/// Per-step additive disturbance, uniform in `[-kappa, kappa]` per component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disturbance {
    pub kappa: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub x: StateVec,
    pub u: InputVec,
    pub mode: usize,
    pub h: f64,
    pub feasible: bool,
    pub relaxed: bool,
    pub solve_time_us: f64,
}

/// States `x_0..x_T` with the input applied at each (the input at `x_T` is
/// computed but not applied, so the cost has `T + 1` terms).
#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub policy: String,
    pub filter: String,
    pub steps: Vec<TraceStep>,
    /// Requested number of transitions `T`.
    pub horizon: usize,
    /// The state left the domain before `T` transitions.
    pub truncated: bool,
}

impl SimTrace {
    pub fn max_h(&self) -> f64 {
        self.steps.iter().map(|s| s.h).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `h(x_t) <= 0` for every recorded state and no truncation.
    pub fn safe(&self) -> bool {
        !self.truncated && self.steps.iter().all(|s| s.h <= 0.0)
    }

    pub fn infeasible_count(&self) -> usize {
        self.steps.iter().filter(|s| !s.feasible).count()
    }

    pub fn relaxed_count(&self) -> usize {
        self.steps.iter().filter(|s| s.relaxed).count()
    }

    /// `Σ_t x_t'Q x_t + u_t'R u_t` over the recorded steps.
    pub fn total_cost(&self, q_c: &DMatrix<f64>, r_c: &DMatrix<f64>) -> f64 {
        self.steps
            .iter()
            .map(|s| s.x.dot(&(q_c * &s.x)) + s.u.dot(&(r_c * &s.u)))
            .sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n_x = self.steps.first().map_or(2, |s| s.x.len());
        let n_u = self.steps.first().map_or(1, |s| s.u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=n_x).map(|i| format!("x{i}")));
        if n_u == 1 {
            header.push("u".into());
        } else {
            header.extend((1..=n_u).map(|i| format!("u{i}")));
        }
        header.extend(["mode", "h", "feasible", "relaxed", "solve_time_us"].map(String::from));
        w.write_record(&header)?;
        for s in &self.steps {
            let mut rec = vec![s.t.to_string()];
            rec.extend(s.x.iter().chain(s.u.iter()).map(|v| v.to_string()));
            rec.push(s.mode.to_string());
            rec.push(s.h.to_string());
            rec.push(u8::from(s.feasible).to_string());
            rec.push(u8::from(s.relaxed).to_string());
            rec.push(s.solve_time_us.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, policy: &str, filter: &str, horizon: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let n_x = headers.iter().filter(|h| h.starts_with('x')).count();
        let n_u = headers.iter().filter(|h| h.starts_with('u')).count();
        let parse_err = |row: usize, msg: String| Error::Parse { offset: row, message: format!("{}: row {row}: {msg}", path.display()) };
        let mut steps = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| parse_err(row, "missing column".into()))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(row, e.to_string()))
            };
            let x = DVector::from_fn(n_x, |i, _| num(1 + i).unwrap_or(f64::NAN));
            let u = DVector::from_fn(n_u, |i, _| num(1 + n_x + i).unwrap_or(f64::NAN));
            let at = 1 + n_x + n_u;
            let step = TraceStep {
                t: num(0)? as usize,
                x,
                u,
                mode: num(at)? as usize,
                h: num(at + 1)?,
                feasible: num(at + 2)? != 0.0,
                relaxed: num(at + 3)? != 0.0,
                solve_time_us: num(at + 4)?,
            };
            if step.x.iter().chain(step.u.iter()).any(|v| v.is_nan()) {
                return Err(parse_err(row, "malformed state or input".into()));
            }
            steps.push(step);
        }
        let truncated = steps.len() < horizon + 1;
        Ok(Self { policy: policy.into(), filter: filter.into(), steps, horizon, truncated })
    }
}

fn filtered_input(filter: &SafetyFilter, x: &StateVec, u_raw: &InputVec) -> Result<(InputVec, bool, bool, f64)> {
    Ok(match filter {
        SafetyFilter::None => (u_raw.clone(), true, false, 0.0),
        SafetyFilter::Learned(spec) => {
            let r = apply_filter(spec, x, u_raw)?;
            (r.u, r.feasible, r.relaxed, r.solve_time_us)
        }
        SafetyFilter::Exact { cfg, level, bisections } => {
            let r = filter_exact(cfg, *level, x, u_raw, *bisections)?;
            (r.u, r.feasible, r.relaxed, r.solve_time_us)
        }
    })
}

/// Closed loop from `x0` for `steps` transitions.
pub fn simulate(
    sys: &PwaSystem,
    cons: &ConstraintFn,
    policy: &Policy,
    filter: &SafetyFilter,
    x0: &StateVec,
    steps: usize,
    disturbance: Option<Disturbance>,
) -> Result<SimTrace> {
    if !sys.domain().contains(x0, 0.0) {
        return Err(Error::Domain { state: x0.iter().copied().collect() });
    }
    let mut rng = disturbance.map(|d| ChaCha8Rng::seed_from_u64(d.seed));
    let mut trace = SimTrace {
        policy: policy.tag().into(),
        filter: filter.tag().into(),
        steps: Vec::with_capacity(steps + 1),
        horizon: steps,
        truncated: false,
    };
    let mut x = x0.clone();
    for t in 0..=steps {
        let mode = sys.mode_of(&x).ok_or_else(|| Error::Domain { state: x.iter().copied().collect() })?;
        let u_raw = policy_eval(policy, &x, t)?;
        let (u, feasible, relaxed, solve_time_us) = filtered_input(filter, &x, &u_raw)?;
        trace.steps.push(TraceStep { t, x: x.clone(), u: u.clone(), mode, h: cons.eval(&x), feasible, relaxed, solve_time_us });
        if t == steps {
            break;
        }
        let mut next = sys.mode(mode).apply(&x, &u);
        if let (Some(d), Some(rng)) = (disturbance, rng.as_mut()) {
            if d.kappa > 0.0 {
                for v in next.iter_mut() {
                    *v += rng.random_range(-d.kappa..=d.kappa);
                }
            }
        }
        if !sys.domain().contains(&next, 0.0) || sys.mode_of(&next).is_none() {
            trace.truncated = true;
            break;
        }
        x = next;
    }
    Ok(trace)
}

/// Runs `simulate` from every initial state in parallel; trajectory `i` uses
/// disturbance seed `seed + i`.
pub fn simulate_batch(
    sys: &PwaSystem,
    cons: &ConstraintFn,
    policy: &Policy,
    filter: &SafetyFilter,
    x0s: &[StateVec],
    steps: usize,
    disturbance: Option<Disturbance>,
) -> Result<Vec<SimTrace>> {
    x0s.par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let d = disturbance.map(|d| Disturbance { kappa: d.kappa, seed: d.seed.wrapping_add(i as u64) });
            simulate(sys, cons, policy, filter, x0, steps, d)
        })
        .collect()
}

/// Grid states with their `B_k` values; the last coordinate varies fastest.
pub fn label_state_grid(cfg: &GeneratorConfig, counts: &[usize], lo: &[f64], hi: &[f64]) -> Result<Vec<(StateVec, f64)>> {
    let grid = crate::dataset::GridSpec::new(counts.to_vec(), lo.to_vec(), hi.to_vec())?;
    let states: Vec<StateVec> = grid.points().into_iter().map(DVector::from_vec).collect();
    let values = eval_bk_batch(cfg, &states)?;
    Ok(states.into_iter().zip(values).collect())
}

/// Seeded uniform choice of up to `count` pool states with `B_k` in the open band.
pub fn select_initial_states(pool: &[(StateVec, f64)], band: (f64, f64), count: usize, seed: u64) -> Result<Vec<StateVec>> {
    let mut inside: Vec<&StateVec> = pool.iter().filter(|(_, b)| *b > band.0 && *b < band.1).map(|(x, _)| x).collect();
    if inside.is_empty() {
        return Err(Error::InvalidArgument(format!("no pool state has B_k in ({}, {})", band.0, band.1)));
    }
    inside.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(inside.into_iter().take(count).cloned().collect())
}

/// Largest finite-difference slope `|B_k(x) - B_k(y)| / ‖x - y‖` over random
/// pairs at distance `radius`, with `x` uniform in the box.
pub fn estimate_lipschitz(cfg: &GeneratorConfig, lo: &[f64], hi: &[f64], pairs: usize, radius: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = lo.len();
    let draws: Vec<(StateVec, StateVec)> = (0..pairs)
        .map(|_| {
            let x = DVector::from_fn(n, |i, _| rng.random_range(lo[i]..=hi[i]));
            let dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            let y = &x + dir.normalize() * radius;
            (x, y)
        })
        .collect();
    let slopes: Vec<f64> = draws
        .par_iter()
        .map(|(x, y)| -> Result<f64> {
            let (bx, by) = (eval_bk(cfg, x)?.value, eval_bk(cfg, y)?.value);
            Ok((bx - by).abs() / (x - y).norm())
        })
        .collect::<Result<_>>()?;
    Ok(slopes.into_iter().fold(0.0, f64::max))
}

/// Largest `κ` with `λ >= 2Δ + L κ`, or `None` when `λ <= 2Δ`.
pub fn disturbance_budget(lambda_scaled: f64, delta: f64, lipschitz: f64) -> Option<f64> {
    let room = lambda_scaled - 2.0 * delta;
    (room > 0.0 && lipschitz > 0.0).then(|| room / lipschitz)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    pub policy: String,
    pub filter: String,
    pub trajectories: usize,
    pub safety_rate: f64,
    /// Mean filter solve time per step; zero without a filter.
    pub mean_cpu_us: f64,
    /// Mean over trajectories of the summed stage costs.
    pub mean_total_cost: f64,
    pub infeasible_steps: usize,
    pub relaxed_steps: usize,
    pub max_h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cells: Vec<CellMetrics>,
}

/// Groups traces by `(policy, filter)` in order of first appearance.
pub fn report_metrics(traces: &[SimTrace], q_c: &DMatrix<f64>, r_c: &DMatrix<f64>) -> MetricsReport {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&SimTrace>> = BTreeMap::new();
    for tr in traces {
        let key = (tr.policy.clone(), tr.filter.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(tr);
    }
    let cells = order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let n = g.len() as f64;
            let step_count: usize = g.iter().map(|t| t.steps.len()).sum();
            let time: f64 = g.iter().flat_map(|t| t.steps.iter().map(|s| s.solve_time_us)).sum();
            CellMetrics {
                policy: key.0.clone(),
                filter: key.1.clone(),
                trajectories: g.len(),
                safety_rate: g.iter().filter(|t| t.safe()).count() as f64 / n,
                mean_cpu_us: if step_count == 0 { 0.0 } else { time / step_count as f64 },
                mean_total_cost: g.iter().map(|t| t.total_cost(q_c, r_c)).sum::<f64>() / n,
                infeasible_steps: g.iter().map(|t| t.infeasible_count()).sum(),
                relaxed_steps: g.iter().map(|t| t.relaxed_count()).sum(),
                max_h: g.iter().map(|t| t.max_h()).fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    MetricsReport { cells }
}

const REPORT_NOTE: &str = "cost: mean over initial states of sum_{t=0}^{T} x'Qx + u'Ru; cpu: mean filter solve time per step; \
safety guarantees with a learned barrier assume its sampled error bound delta holds uniformly";

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let header = ["policy", "filter", "runs", "safety", "cpu_us", "cost", "infeasible", "relaxed", "max_h"];
        let rows: Vec<Vec<String>> = self
            .cells
            .iter()
            .map(|c| {
                vec![
                    c.policy.clone(),
                    c.filter.clone(),
                    c.trajectories.to_string(),
                    format!("{:.2}%", 100.0 * c.safety_rate),
                    format!("{:.1}", c.mean_cpu_us),
                    format!("{:.3}", c.mean_total_cost),
                    c.infeasible_steps.to_string(),
                    c.relaxed_steps.to_string(),
                    format!("{:.3e}", c.max_h),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        let _ = writeln!(s, "# {REPORT_NOTE}");
        let line = |cols: Vec<&str>| -> String {
            cols.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let _ = writeln!(s, "{}", line(header.to_vec()));
        for r in &rows {
            let _ = writeln!(s, "{}", line(r.iter().map(String::as_str).collect()));
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "policy",
            "filter",
            "trajectories",
            "safety_rate",
            "mean_cpu_us",
            "mean_total_cost",
            "infeasible_steps",
            "relaxed_steps",
            "max_h",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.policy.clone(),
                c.filter.clone(),
                c.trajectories.to_string(),
                c.safety_rate.to_string(),
                c.mean_cpu_us.to_string(),
                c.mean_total_cost.to_string(),
                c.infeasible_steps.to_string(),
                c.relaxed_steps.to_string(),
                c.max_h.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse { offset: e.utf8_error().valid_up_to(), message: "report is not UTF-8".into() })
    }
}

/// Writes each trace as a CSV file under `dir` and appends its policy,
/// filter and requested horizon to `dir/manifest.csv`.
pub fn write_traces(dir: &Path, traces: &[SimTrace]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.csv");
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    if manifest.exists() {
        let mut r = csv::Reader::from_path(&manifest)?;
        for rec in r.records() {
            rows.push(rec?);
        }
    }
    let first = rows.len();
    for (i, tr) in traces.iter().enumerate() {
        let name = format!("{}_{}_{:05}.csv", tr.policy, tr.filter, first + i);
        tr.write_csv(&dir.join(&name))?;
        rows.push(csv::StringRecord::from(vec![name, tr.policy.clone(), tr.filter.clone(), tr.horizon.to_string()]));
    }
    let mut m = csv::Writer::from_path(&manifest)?;
    m.write_record(["file", "policy", "filter", "steps"])?;
    for r in &rows {
        m.write_record(r)?;
    }
    m.flush()?;
    Ok(())
}

/// Reads every trace listed in `dir/manifest.csv`.
pub fn read_traces(dir: &Path) -> Result<Vec<SimTrace>> {
    let mut r = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Parse { offset: row, message: "manifest row is short".into() });
        let steps: usize = field(3)?
            .parse()
            .map_err(|e| Error::Parse { offset: row, message: format!("manifest steps: {e}") })?;
        out.push(SimTrace::read_csv(&dir.join(field(0)?), field(1)?, field(2)?, steps)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::MpcConfig;
    use crate::sysmodel::pendulum_build;

    fn lqr() -> (PwaSystem, ConstraintFn, Policy, MpcConfig) {
        let (sys, cons, input) = pendulum_build();
        let cfg = MpcConfig::pendulum(&sys, &cons, &input, 5).unwrap();
        let pol = Policy::Lqr { gain: cfg.gain.clone(), input };
        (sys, cons, pol, cfg)
    }

    #[test]
    fn origin_stays_put_under_lqr() {
        let (sys, cons, pol, cfg) = lqr();
        let tr = simulate(&sys, &cons, &pol, &SafetyFilter::None, &DVector::zeros(2), 50, None).unwrap();
        assert_eq!(tr.steps.len(), 51);
        assert!(tr.safe());
        assert_eq!(tr.total_cost(&cfg.q_c, &cfg.r_c), 0.0);
        assert!(tr.steps.iter().all(|s| s.x == DVector::zeros(2)));
    }

    #[test]
    fn zero_disturbance_matches_undisturbed_run() {
        let (sys, cons, pol, _) = lqr();
        let x0 = DVector::from_vec(vec![0.05, -0.3]);
        let a = simulate(&sys, &cons, &pol, &SafetyFilter::None, &x0, 30, None).unwrap();
        let b = simulate(&sys, &cons, &pol, &SafetyFilter::None, &x0, 30, Some(Disturbance { kappa: 0.0, seed: 9 })).unwrap();
        assert_eq!(a, b);
        let c = simulate(&sys, &cons, &pol, &SafetyFilter::None, &x0, 30, Some(Disturbance { kappa: 1e-3, seed: 9 })).unwrap();
        let d = simulate(&sys, &cons, &pol, &SafetyFilter::None, &x0, 30, Some(Disturbance { kappa: 1e-3, seed: 9 })).unwrap();
        assert_ne!(a, c);
        assert_eq!(c, d);
    }

    #[test]
    fn trace_follows_the_dynamics() {
        let (sys, cons, pol, _) = lqr();
        let tr = simulate(&sys, &cons, &pol, &SafetyFilter::None, &DVector::from_vec(vec![-0.11, 0.6]), 40, None).unwrap();
        for w in tr.steps.windows(2) {
            let (next, mode) = sys.step(&w[0].x, &w[0].u).unwrap();
            assert_eq!(mode, w[0].mode);
            assert_eq!(next, w[1].x);
        }
    }

    #[test]
    fn safety_flag_is_rechecked_from_h_values() {
        let (sys, cons, pol, _) = lqr();
        let mut tr = simulate(&sys, &cons, &pol, &SafetyFilter::None, &DVector::zeros(2), 5, None).unwrap();
        assert!(tr.safe());
        tr.steps[3].h = 1e-12;
        assert!(!tr.safe());
    }

    #[test]
    fn initial_state_selection_respects_the_band() {
        let pool: Vec<(StateVec, f64)> = (0..100).map(|i| (DVector::from_vec(vec![i as f64, 0.0]), i as f64 / 64.0 - 1.0)).collect();
        let picked = select_initial_states(&pool, (-0.1, 0.0), 3, 1).unwrap();
        assert_eq!(picked.len(), 3);
        for x in &picked {
            let b = x[0] / 64.0 - 1.0;
            assert!(b > -0.1 && b < 0.0);
        }
        let all = select_initial_states(&pool, (-0.1, 0.0), 1000, 1).unwrap();
        assert_eq!(all.len(), 6);
        assert!(select_initial_states(&pool, (5.0, 6.0), 3, 1).is_err());
        assert_eq!(select_initial_states(&pool, (-0.1, 0.0), 3, 1).unwrap(), picked);
    }

    #[test]
    fn report_counts_and_costs() {
        let (sys, cons, pol, cfg) = lqr();
        let x0s: Vec<StateVec> = (0..10).map(|i| DVector::from_vec(vec![0.01 * i as f64 - 0.05, 0.0])).collect();
        let traces = simulate_batch(&sys, &cons, &pol, &SafetyFilter::None, &x0s, 20, None).unwrap();
        let rep = report_metrics(&traces, &cfg.q_c, &cfg.r_c);
        assert_eq!(rep.cells.len(), 1);
        let c = &rep.cells[0];
        assert_eq!((c.trajectories, c.safety_rate), (10, 1.0));
        // independent recomputation of the cost
        let mut total = 0.0;
        for tr in &traces {
            for s in &tr.steps {
                total += 20.0 * s.x[0] * s.x[0] + s.x[1] * s.x[1] + s.u[0] * s.u[0];
            }
        }
        assert!((c.mean_total_cost - total / 10.0).abs() <= 1e-12 * (1.0 + total));
        assert!(rep.to_text().contains("lqr"));
        assert_eq!(rep.to_csv().unwrap().lines().count(), 2);
    }

    #[test]
    fn traces_round_trip_through_csv() {
        let (sys, cons, pol, _) = lqr();
        let tr = simulate(&sys, &cons, &pol, &SafetyFilter::None, &DVector::from_vec(vec![0.07, 0.2]), 10, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_traces(dir.path(), std::slice::from_ref(&tr)).unwrap();
        let back = read_traces(dir.path()).unwrap();
        assert_eq!(back, vec![tr.clone()]);
        write_traces(dir.path(), std::slice::from_ref(&tr)).unwrap();
        assert_eq!(read_traces(dir.path()).unwrap().len(), 2);
        let text = std::fs::read_to_string(dir.path().join("lqr_none_00000.csv")).unwrap();
        assert!(text.starts_with("t,x1,x2,u,mode,h,feasible,relaxed,solve_time_us"));
    }

    #[test]
    fn disturbance_budget_needs_room() {
        assert_eq!(disturbance_budget(0.1, 0.05, 2.0), None);
        assert!((disturbance_budget(0.1, 0.02, 2.0).unwrap() - 0.03).abs() < 1e-15);
    }
}
