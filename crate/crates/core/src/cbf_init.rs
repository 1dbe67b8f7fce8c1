//! Synthesis of the initial quadratic barrier `B0(x) = x'Px - 1` with a
//! linear feedback gain, and its sampling-based verification.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optkit::lp::{solve_lp, LinearProgram, LpStatus};
use crate::optkit::sdp::{solve_logdet_sdp, LmiProblem};
use crate::sysmodel::{ConstraintFn, Polytope, PwaSystem, StateVec};

/// Which barrier construction is used downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CbfOption {
    /// Plain reachability barrier (`lambda_t = 0`).
    Plain = 1,
    /// Barrier for the tightened constraint `h + lambda <= 0`.
    Tightened = 2,
    /// Contractive barrier with `lambda_t = t * lambda`.
    Contractive = 3,
}

impl TryFrom<u8> for CbfOption {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::Plain),
            2 => Ok(Self::Tightened),
            3 => Ok(Self::Contractive),
            other => Err(Error::InvalidArgument(format!(
                "option must be 1, 2 or 3 (got {other})"
            ))),
        }
    }
}

impl From<CbfOption> for u8 {
    fn from(o: CbfOption) -> u8 {
        o as u8
    }
}

impl std::fmt::Display for CbfOption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

#[derive(Clone, Debug)]
pub struct InitOptions {
    pub option: CbfOption,
    pub lambda: f64,
    /// Generator horizon; the contractive option tightens the ellipsoid by `k * lambda`.
    pub k: usize,
    /// Face normals of the inner state polytope; `None` means `[I; -I]`.
    pub h_x_template: Option<DMatrix<f64>>,
    /// Decay rate for exponential barriers; `None` means non-exponential.
    pub beta: Option<f64>,
    /// Strict decrease margin added to the Lyapunov condition so sampling can certify it.
    pub decrease_margin: f64,
    pub verify_samples: usize,
    pub gamma_factor: f64,
    pub gamma_floor: f64,
    pub seed: u64,
}

impl InitOptions {
    pub fn new(option: CbfOption, lambda: f64, k: usize) -> Self {
        Self {
            option,
            lambda,
            k,
            h_x_template: None,
            beta: None,
            decrease_margin: 1e-3,
            verify_samples: 100_000,
            gamma_factor: 0.9,
            gamma_floor: 1e-6,
            seed: 7,
        }
    }

    /// Study defaults: `lambda` = 0, 0.2, 0.05 for the three options.
    pub fn pendulum(option: CbfOption) -> Self {
        let lambda = match option {
            CbfOption::Plain => 0.0,
            CbfOption::Tightened => 0.2,
            CbfOption::Contractive => 0.05,
        };
        Self::new(option, lambda, 7)
    }

    fn validate(&self) -> Result<()> {
        if self.option != CbfOption::Plain && self.lambda <= 0.0 {
            return Err(Error::InvalidArgument(
                "options 2 and 3 need lambda > 0".into(),
            ));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(
                "lambda must be finite and nonnegative".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument(
                "generator horizon must be positive".into(),
            ));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument("beta must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Level of `h` the inner polytope must respect.
    fn h_target(&self) -> f64 {
        match self.option {
            CbfOption::Tightened => -self.lambda,
            _ => 0.0,
        }
    }

    /// Ellipsoid tightening `q` of the state-constraint LMI.
    fn q_margin(&self) -> f64 {
        match self.option {
            CbfOption::Contractive => self.k as f64 * self.lambda,
            _ => 0.0,
        }
    }

    /// Lyapunov rate `p` of the decrease LMI (solved at unit level).
    fn decrease_rate(&self) -> f64 {
        let base = self.beta.unwrap_or(1.0);
        let contraction = if self.option == CbfOption::Contractive {
            self.lambda
        } else {
            0.0
        };
        base - contraction - self.decrease_margin
    }
}

/// Quadratic barrier `B0(x) = x'Px - 1` with feedback `u = K x`, `K = Y E^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCbf {
    pub p: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub k_gain: DMatrix<f64>,
    /// Level at which verification passed, relative to the unit level the LMIs were solved at.
    pub gamma_raw: f64,
    pub option: CbfOption,
    pub lambda: f64,
    /// Contraction constant in the units of the normalized barrier.
    pub lambda_scaled: f64,
    pub k_budget: usize,
    pub beta: Option<f64>,
    pub decrease_margin: f64,
}

impl QuadraticCbf {
    pub fn eval(&self, x: &StateVec) -> f64 {
        x.dot(&(&self.p * x)) - 1.0
    }

    pub fn n_x(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.k_gain.nrows()
    }

    /// Linear feedback, optionally projected onto a box input set.
    pub fn feedback(&self, x: &StateVec, input: &Polytope) -> DVector<f64> {
        let u = &self.k_gain * x;
        input.clamp_box(&u).unwrap_or(u)
    }

    /// Threshold `r` used when verifying the decrease condition.
    pub fn decrease_target(&self) -> f64 {
        match self.option {
            CbfOption::Contractive => -self.lambda_scaled,
            _ => 0.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let row = |m: &DMatrix<f64>| {
            let mut out = String::new();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    let _ = write!(out, " {}", m[(i, j)]);
                }
            }
            out
        };
        let _ = writeln!(s, "{B0_MAGIC} {B0_VERSION}");
        let _ = writeln!(s, "option {}", self.option);
        let _ = writeln!(s, "lambda {}", self.lambda);
        let _ = writeln!(s, "lambda_scaled {}", self.lambda_scaled);
        let _ = writeln!(s, "k_budget {}", self.k_budget);
        let _ = writeln!(s, "gamma_raw {}", self.gamma_raw);
        let _ = writeln!(s, "decrease_margin {}", self.decrease_margin);
        match self.beta {
            Some(b) => {
                let _ = writeln!(s, "beta {b}");
            }
            None => {
                let _ = writeln!(s, "beta none");
            }
        }
        let _ = writeln!(s, "n_x {}", self.n_x());
        let _ = writeln!(s, "n_u {}", self.n_u());
        let _ = writeln!(s, "P{}", row(&self.p));
        let _ = writeln!(s, "E{}", row(&self.e));
        let _ = writeln!(s, "Y{}", row(&self.y));
        let _ = writeln!(s, "K{}", row(&self.k_gain));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fields = KeyedLines::parse(text, B0_MAGIC, B0_VERSION)?;
        let n_x: usize = fields.scalar("n_x")?;
        let n_u: usize = fields.scalar("n_u")?;
        let option = CbfOption::try_from(fields.scalar::<u8>("option")?)?;
        let beta = match fields.raw("beta")?.0.trim() {
            "none" => None,
            v => Some(
                v.parse::<f64>()
                    .map_err(|e| fields.error("beta", e.to_string()))?,
            ),
        };
        Ok(Self {
            p: fields.matrix("P", n_x, n_x)?,
            e: fields.matrix("E", n_x, n_x)?,
            y: fields.matrix("Y", n_u, n_x)?,
            k_gain: fields.matrix("K", n_u, n_x)?,
            gamma_raw: fields.scalar("gamma_raw")?,
            option,
            lambda: fields.scalar("lambda")?,
            lambda_scaled: fields.scalar("lambda_scaled")?,
            k_budget: fields.scalar("k_budget")?,
            beta,
            decrease_margin: fields.scalar("decrease_margin")?,
        })
    }
}

const B0_MAGIC: &str = "sacbf-b0";
const B0_VERSION: u32 = 1;

/// `key value...` lines with byte offsets for error reporting.
pub(crate) struct KeyedLines<'a> {
    entries: Vec<(&'a str, &'a str, usize)>,
}

impl<'a> KeyedLines<'a> {
    pub(crate) fn parse(text: &'a str, magic: &str, version: u32) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut header_seen = false;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim();
            let at = offset;
            offset += line.len();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, rest) = trimmed
                .split_once(char::is_whitespace)
                .unwrap_or((trimmed, ""));
            if !header_seen {
                if key != magic {
                    return Err(Error::Parse {
                        offset: at,
                        message: format!("expected header '{magic}'"),
                    });
                }
                let found: u32 = rest.trim().parse().map_err(|_| Error::Parse {
                    offset: at,
                    message: "unreadable version".into(),
                })?;
                if found != version {
                    return Err(Error::Version {
                        found,
                        expected: version,
                    });
                }
                header_seen = true;
                continue;
            }
            entries.push((key, rest, at));
        }
        if !header_seen {
            return Err(Error::Parse {
                offset: 0,
                message: "empty file".into(),
            });
        }
        Ok(Self { entries })
    }

    pub(crate) fn raw(&self, key: &str) -> Result<(&'a str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| *k == key)
            .map(|(_, v, at)| (*v, *at))
            .ok_or_else(|| Error::Parse {
                offset: self.end(),
                message: format!("missing key '{key}'"),
            })
    }

    fn end(&self) -> usize {
        self.entries.last().map_or(0, |e| e.2)
    }

    pub(crate) fn error(&self, key: &str, message: String) -> Error {
        let offset = self.raw(key).map_or(0, |r| r.1);
        Error::Parse {
            offset,
            message: format!("{key}: {message}"),
        }
    }

    pub(crate) fn scalar<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (v, at) = self.raw(key)?;
        v.trim().parse().map_err(|e: T::Err| Error::Parse {
            offset: at,
            message: format!("{key}: {e}"),
        })
    }

    pub(crate) fn matrix(&self, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let (v, at) = self.raw(key)?;
        let vals = parse_floats(v, at)?;
        if vals.len() != rows * cols {
            return Err(Error::Parse {
                offset: at,
                message: format!(
                    "{key}: expected {} entries, found {}",
                    rows * cols,
                    vals.len()
                ),
            });
        }
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }
}

pub(crate) fn parse_floats(v: &str, at: usize) -> Result<Vec<f64>> {
    v.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Parse {
                offset: at,
                message: format!("'{t}': {e}"),
            })
        })
        .collect()
}

/// Result of the sampling verifier.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub pass: bool,
    /// Estimated maximum of `B0(f(x, Kx))` over `{B0 <= 0}`.
    pub worst_value: f64,
    pub worst_point: StateVec,
    pub worst_mode: usize,
    pub target: f64,
}

#[derive(Clone, Debug)]
pub struct B0Synthesis {
    pub cbf: QuadraticCbf,
    pub state_polytope: Polytope,
    pub lmi: LmiProblem,
    pub block_min_eigs: Vec<f64>,
    pub verify: VerifyReport,
    pub gamma_steps: usize,
}

fn default_template(n: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        t[(i, i)] = 1.0;
        t[(n + i, i)] = -1.0;
    }
    t
}

/// Rescales each template row to the norm of the most parallel constraint piece.
fn normalize_template(cons: &ConstraintFn, template: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = template.clone();
    for i in 0..template.nrows() {
        let r = template.row(i);
        let rn = r.norm();
        if rn == 0.0 {
            continue;
        }
        let (_, scale) = (0..cons.n_pieces())
            .map(|j| {
                let a = cons.rows().row(j);
                (r.dot(&a) / (rn * a.norm()), a.norm())
            })
            .fold((f64::NEG_INFINITY, 1.0), |best, c| {
                if c.0 > best.0 {
                    c
                } else {
                    best
                }
            });
        out.row_mut(i).copy_from(&(r * (scale / rn)));
    }
    out
}

/// `max_j max_{x in P} h_j(x)` by one LP per piece.
fn max_h_over(cons: &ConstraintFn, poly: &Polytope) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for j in 0..cons.n_pieces() {
        let c = -cons.rows().row(j).transpose();
        let sol = solve_lp(&LinearProgram::new(
            c,
            poly.h_mat.clone(),
            poly.h_vec.clone(),
        ))?;
        match sol.status {
            LpStatus::Optimal => worst = worst.max(-sol.objective - cons.offsets()[j]),
            LpStatus::Unbounded => return Ok(f64::INFINITY),
            LpStatus::Infeasible => return Err(Error::Synthesis("inner polytope is empty".into())),
        }
    }
    Ok(worst)
}

/// Inner polytope `{x | H_x x <= h_x}` of the (possibly tightened) constraint set.
pub fn shrink_state_polytope(
    cons: &ConstraintFn,
    template: Option<&DMatrix<f64>>,
    opts: &InitOptions,
) -> Result<Polytope> {
    opts.validate()?;
    let n = cons.n_x();
    let target = opts.h_target();
    let origin = DVector::zeros(n);
    if cons.eval(&origin) >= target {
        return Err(Error::Synthesis(format!(
            "origin is not strictly inside the required set (h(0) = {}, level {target})",
            cons.eval(&origin)
        )));
    }
    let h_mat = normalize_template(
        cons,
        &template.cloned().unwrap_or_else(|| default_template(n)),
    );
    // start from the support function of {h <= target}
    let level = Polytope::new(cons.rows().clone(), cons.offsets().add_scalar(target))?;
    let mut h_vec = DVector::zeros(h_mat.nrows());
    for i in 0..h_mat.nrows() {
        let sol = solve_lp(&LinearProgram::new(
            -h_mat.row(i).transpose(),
            level.h_mat.clone(),
            level.h_vec.clone(),
        ))?;
        h_vec[i] = match sol.status {
            LpStatus::Optimal => -sol.objective,
            _ => {
                return Err(Error::Synthesis(
                    "constraint set is unbounded along a template direction".into(),
                ))
            }
        };
    }
    for _ in 0..2000 {
        if h_vec.iter().any(|v| *v <= 0.0) {
            break;
        }
        let poly = Polytope::new(h_mat.clone(), h_vec.clone())?;
        if max_h_over(cons, &poly)? <= target + 1e-12 {
            return Ok(poly);
        }
        h_vec *= 0.99;
    }
    Err(Error::Synthesis(
        "no positive offsets place the template inside the constraint set".into(),
    ))
}

/// Builds the decrease, input and state LMIs at unit level.
pub fn build_lmis(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    input: &Polytope,
    state: &Polytope,
    rate: f64,
    q: f64,
) -> Result<LmiProblem> {
    let n_x = a.nrows();
    let n_u = b.ncols();
    let hu = input.h_mat.clone();
    let hu_v = input.h_vec.clone();
    let hx = state.h_mat.clone();
    let hx_v = state.h_vec.clone();
    let (a, b) = (a.clone(), b.clone());
    LmiProblem::from_fn(n_x, n_u, move |e, y| {
        let mut blocks = Vec::new();
        let cl = &a * e + &b * y;
        let mut m = DMatrix::zeros(2 * n_x, 2 * n_x);
        m.view_mut((0, 0), (n_x, n_x)).copy_from(&(rate * e));
        m.view_mut((0, n_x), (n_x, n_x)).copy_from(&cl.transpose());
        m.view_mut((n_x, 0), (n_x, n_x)).copy_from(&cl);
        m.view_mut((n_x, n_x), (n_x, n_x)).copy_from(e);
        blocks.push(m);
        let schur = |c: f64, row: DMatrix<f64>| {
            let mut m = DMatrix::zeros(n_x + 1, n_x + 1);
            m[(0, 0)] = c * c;
            m.view_mut((0, 1), (1, n_x)).copy_from(&row);
            m.view_mut((1, 0), (n_x, 1)).copy_from(&row.transpose());
            m.view_mut((1, 1), (n_x, n_x)).copy_from(e);
            m
        };
        for i in 0..hu.nrows() {
            blocks.push(schur(hu_v[i], hu.rows(i, 1) * y));
        }
        for i in 0..hx.nrows() {
            blocks.push(schur(hx_v[i] - q, hx.rows(i, 1) * e));
        }
        blocks
    })
}

pub fn synthesize_b0(
    sys: &PwaSystem,
    cons: &ConstraintFn,
    input: &Polytope,
    opts: &InitOptions,
) -> Result<B0Synthesis> {
    opts.validate()?;
    let origin = sys
        .origin_mode()
        .ok_or_else(|| Error::Synthesis("no mode contains the origin with zero offset".into()))?;
    let state = shrink_state_polytope(cons, opts.h_x_template.as_ref(), opts)?;
    let q = opts.q_margin();
    let min_hx = state.h_vec.iter().copied().fold(f64::INFINITY, f64::min);
    if q >= min_hx {
        return Err(Error::Synthesis(format!(
            "tightening k*lambda = {q} is not below min h_x = {min_hx}"
        )));
    }
    if q > 0.0 {
        let tightened = Polytope::new(state.h_mat.clone(), state.h_vec.add_scalar(-q))?;
        let worst = max_h_over(cons, &tightened)?;
        if worst > -q + 1e-12 {
            return Err(Error::Synthesis(format!(
                "tightened polytope does not certify h + k*lambda <= 0 (max h = {worst})"
            )));
        }
    }
    let rate = opts.decrease_rate();
    if rate <= 0.0 {
        return Err(Error::Synthesis(format!(
            "decrease rate {rate} is not positive"
        )));
    }
    let mode = sys.mode(origin);
    let lmi = build_lmis(&mode.a, &mode.b, input, &state, rate, q)?;
    let sol = solve_logdet_sdp(&lmi)?;
    let e_inv = sol
        .e
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Synthesis("synthesized E is singular".into()))?;
    let k_gain = &sol.y * &e_inv;
    let lambda_scaled = if opts.option == CbfOption::Contractive {
        opts.lambda
    } else {
        0.0
    };
    let mut gamma_raw = 1.0;
    let mut steps = 0;
    loop {
        let p = &e_inv / gamma_raw;
        let cbf = QuadraticCbf {
            p: 0.5 * (&p + p.transpose()),
            e: sol.e.clone(),
            y: sol.y.clone(),
            k_gain: k_gain.clone(),
            gamma_raw,
            option: opts.option,
            lambda: opts.lambda,
            lambda_scaled,
            k_budget: opts.k,
            beta: opts.beta,
            decrease_margin: opts.decrease_margin,
        };
        let report = verify_b0(
            sys,
            input,
            &cbf,
            cbf.decrease_target(),
            opts.verify_samples,
            opts.seed,
        )?;
        if report.pass {
            return Ok(B0Synthesis {
                cbf,
                state_polytope: state,
                block_min_eigs: sol.block_min_eigs.clone(),
                lmi,
                verify: report,
                gamma_steps: steps,
            });
        }
        gamma_raw *= opts.gamma_factor;
        steps += 1;
        if gamma_raw < opts.gamma_floor {
            return Err(Error::Synthesis(format!(
                "level shrink reached {gamma_raw:.3e} without verification (worst {:.3e} at {:?})",
                report.worst_value,
                report.worst_point.as_slice()
            )));
        }
    }
}

/// Points on concentric shells of `{x'Px <= 1}`.
fn shell_samples(p: &DMatrix<f64>, count: usize, seed: u64) -> Result<Vec<StateVec>> {
    let n = p.nrows();
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("P is not positive definite".into()))?;
    let l_inv_t = chol
        .l()
        .transpose()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("P is singular".into()))?;
    let shells = 40usize;
    let per = count.div_ceil(shells).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(shells * per + 1);
    out.push(DVector::zeros(n));
    for s in 1..=shells {
        let rho = s as f64 / shells as f64;
        for k in 0..per {
            let dir = if n == 2 {
                let th = std::f64::consts::TAU * (k as f64 + 0.5 * (s % 2) as f64) / per as f64;
                DVector::from_vec(vec![th.cos(), th.sin()])
            } else {
                let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
                let nrm = g.norm().max(1e-12);
                g / nrm
            };
            out.push(&l_inv_t * dir * rho);
        }
    }
    Ok(out)
}

/// Sampling estimate of `max_{B0(x) <= 0} B0(f(x, Kx))` compared against `target`.
pub fn verify_b0(
    sys: &PwaSystem,
    input: &Polytope,
    cbf: &QuadraticCbf,
    target: f64,
    samples: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let value = |x: &StateVec| -> Option<(f64, usize)> {
        let u = cbf.feedback(x, input);
        let (next, mode) = sys.step(x, &u).ok()?;
        Some((cbf.eval(&next), mode))
    };
    let points = shell_samples(&cbf.p, samples, seed)?;
    let mut scored: Vec<(f64, usize, usize)> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| value(x).map_or((f64::INFINITY, usize::MAX, i), |(v, m)| (v, m, i)))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let project = |x: StateVec| -> StateVec {
        let r = x.dot(&(&cbf.p * &x));
        if r > 1.0 {
            x / r.sqrt()
        } else {
            x
        }
    };
    let scale = 1.0 / cbf.p.diagonal().amax().sqrt();
    let ascended: Vec<(f64, usize, StateVec)> = scored
        .iter()
        .take(100)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&(v0, m0, i)| {
            let mut x = points[i].clone();
            let (mut v, mut m) = (v0, m0);
            if !v.is_finite() {
                return (v, m, x);
            }
            let mut step = 0.05 * scale;
            let h = 1e-7 * scale;
            for _ in 0..60 {
                let grad = DVector::from_fn(x.len(), |j, _| {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fp = value(&project(xp)).map_or(v, |r| r.0);
                    let fm = value(&project(xm)).map_or(v, |r| r.0);
                    (fp - fm) / (2.0 * h)
                });
                let gn = grad.norm();
                if gn < 1e-14 {
                    break;
                }
                let mut improved = false;
                while step > 1e-9 * scale {
                    let trial = project(&x + &grad * (step / gn));
                    if let Some((vt, mt)) = value(&trial) {
                        if vt > v {
                            x = trial;
                            v = vt;
                            m = mt;
                            improved = true;
                            step *= 1.5;
                            break;
                        }
                    }
                    step *= 0.5;
                }
                if !improved {
                    break;
                }
            }
            (v, m, x)
        })
        .collect();
    let (worst_value, worst_mode, worst_point) = ascended
        .into_iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap_or((f64::NEG_INFINITY, usize::MAX, DVector::zeros(cbf.n_x())));
    Ok(VerifyReport {
        pass: worst_value <= target - 1e-6,
        worst_value,
        worst_point,
        worst_mode,
        target,
    })
}
