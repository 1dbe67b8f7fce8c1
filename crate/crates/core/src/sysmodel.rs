//! Piecewise-affine dynamics, constraint functions and the inverted-pendulum
//! instance with soft walls.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateVec = DVector<f64>;
pub type InputVec = DVector<f64>;

/// Tolerance used when deciding region membership for mode selection.
pub const REGION_TOL: f64 = 1e-12;

/// Half-space representation `{z | H z <= h}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
    empty: bool,
}

impl Polytope {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::Dimension(format!(
                "polytope has {} rows but {} offsets",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        if h_mat.iter().chain(h_vec.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("polytope data"));
        }
        Ok(Self {
            h_mat,
            h_vec,
            empty: false,
        })
    }

    /// Polytope known to contain no point.
    pub fn empty(dim: usize) -> Self {
        Self {
            h_mat: DMatrix::zeros(0, dim),
            h_vec: DVector::zeros(0),
            empty: true,
        }
    }

    /// Axis-aligned box `lo <= z <= hi` written as `[I; -I] z <= [hi; -lo]`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("box bounds differ in length".into()));
        }
        if lo.iter().zip(hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidArgument(
                "box lower bound exceeds upper bound".into(),
            ));
        }
        let n = lo.len();
        let mut h_mat = DMatrix::zeros(2 * n, n);
        let mut h_vec = DVector::zeros(2 * n);
        for i in 0..n {
            h_mat[(i, i)] = 1.0;
            h_vec[i] = hi[i];
            h_mat[(n + i, i)] = -1.0;
            h_vec[n + i] = -lo[i];
        }
        Self::new(h_mat, h_vec)
    }

    /// Symmetric box `|z_i| <= r_i`.
    pub fn symmetric_box(radius: &[f64]) -> Result<Self> {
        let lo: Vec<f64> = radius.iter().map(|r| -r).collect();
        Self::from_box(&lo, radius)
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn n_faces(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn is_flagged_empty(&self) -> bool {
        self.empty
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        !self.empty && self.max_violation(z) <= tol
    }

    /// Largest value of `H_i z - h_i` over the faces (negative inside).
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        if self.empty {
            return f64::INFINITY;
        }
        (0..self.n_faces())
            .map(|i| self.h_mat.row(i).dot(&z.transpose()) - self.h_vec[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-wise stacking of the two inequality systems.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(
                "intersecting polytopes of different dimension".into(),
            ));
        }
        if self.empty || other.empty {
            return Ok(Polytope::empty(self.dim()));
        }
        let m = self.n_faces() + other.n_faces();
        let mut h_mat = DMatrix::zeros(m, self.dim());
        h_mat.rows_mut(0, self.n_faces()).copy_from(&self.h_mat);
        h_mat
            .rows_mut(self.n_faces(), other.n_faces())
            .copy_from(&other.h_mat);
        let mut h_vec = DVector::zeros(m);
        h_vec.rows_mut(0, self.n_faces()).copy_from(&self.h_vec);
        h_vec
            .rows_mut(self.n_faces(), other.n_faces())
            .copy_from(&other.h_vec);
        Polytope::new(h_mat, h_vec)
    }

    /// Interval `[lo, hi]` of a one-dimensional polytope, `None` when empty.
    pub fn interval(&self) -> Option<(f64, f64)> {
        if self.empty || self.dim() != 1 {
            return None;
        }
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..self.n_faces() {
            let a = self.h_mat[(i, 0)];
            let b = self.h_vec[i];
            if a > 0.0 {
                hi = hi.min(b / a);
            } else if a < 0.0 {
                lo = lo.max(b / a);
            } else if b < 0.0 {
                return None;
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Bounds of an axis-aligned box written with `from_box`, if it is one.
    pub fn as_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.empty {
            return None;
        }
        let n = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for i in 0..self.n_faces() {
            let row = self.h_mat.row(i);
            let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
            if nz.len() != 1 {
                return None;
            }
            let j = nz[0];
            let bound = self.h_vec[i] / row[j];
            if row[j] > 0.0 {
                hi[j] = hi[j].min(bound);
            } else {
                lo[j] = lo[j].max(bound);
            }
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some((lo, hi))
    }

    /// Euclidean projection onto an axis-aligned box polytope.
    pub fn clamp_box(&self, z: &DVector<f64>) -> Option<DVector<f64>> {
        let (lo, hi) = self.as_box()?;
        Some(DVector::from_iterator(
            z.len(),
            z.iter().enumerate().map(|(i, v)| v.clamp(lo[i], hi[i])),
        ))
    }
}

/// One affine mode `x+ = A x + B u + f` active on `region`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DVector<f64>,
    pub region: Polytope,
}

impl Mode {
    pub fn apply(&self, x: &StateVec, u: &InputVec) -> StateVec {
        &self.a * x + &self.b * u + &self.f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PwaSystem {
    modes: Vec<Mode>,
    domain: Polytope,
    n_x: usize,
    n_u: usize,
}

impl PwaSystem {
    pub fn new(modes: Vec<Mode>, domain: Polytope) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidArgument("system needs at least one mode".into()))?;
        let n_x = first.a.nrows();
        let n_u = first.b.ncols();
        for (i, m) in modes.iter().enumerate() {
            let ok = m.a.shape() == (n_x, n_x)
                && m.b.shape() == (n_x, n_u)
                && m.f.len() == n_x
                && m.region.dim() == n_x;
            if !ok {
                return Err(Error::Dimension(format!(
                    "mode {i} has inconsistent shapes"
                )));
            }
            if m.a
                .iter()
                .chain(m.b.iter())
                .chain(m.f.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite("mode matrices"));
            }
        }
        if domain.dim() != n_x {
            return Err(Error::Dimension("domain box dimension".into()));
        }
        Ok(Self {
            modes,
            domain,
            n_x,
            n_u,
        })
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> &Mode {
        &self.modes[i]
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn domain(&self) -> &Polytope {
        &self.domain
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    /// Lowest-index mode whose region contains `x`.
    pub fn mode_of(&self, x: &StateVec) -> Option<usize> {
        self.modes
            .iter()
            .position(|m| m.region.contains(x, REGION_TOL))
    }

    /// Mode whose region contains the origin and whose offset vanishes.
    pub fn origin_mode(&self) -> Option<usize> {
        let origin = DVector::zeros(self.n_x);
        self.mode_of(&origin)
            .filter(|&i| self.modes[i].f.iter().all(|v| *v == 0.0))
    }

    /// One step of the dynamics together with the selected mode.
    pub fn step(&self, x: &StateVec, u: &InputVec) -> Result<(StateVec, usize)> {
        if x.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::Dimension("state or input length".into()));
        }
        if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state or input"));
        }
        let i = self.mode_of(x).ok_or_else(|| Error::Domain {
            state: x.iter().copied().collect(),
        })?;
        Ok((self.modes[i].apply(x, u), i))
    }

    /// Same as [`PwaSystem::step`] but additionally requires `x` in the domain box.
    pub fn step_in_domain(&self, x: &StateVec, u: &InputVec) -> Result<(StateVec, usize)> {
        if !self.domain.contains(x, REGION_TOL) {
            return Err(Error::Domain {
                state: x.iter().copied().collect(),
            });
        }
        self.step(x, u)
    }

    pub fn load(path: &Path) -> Result<(PwaSystem, ConstraintFn, Polytope)> {
        let text = std::fs::read_to_string(path)?;
        SystemFile::parse(&text)?.build()
    }
}

/// Convenience free function mirroring [`PwaSystem::step`].
pub fn pwa_step(sys: &PwaSystem, x: &StateVec, u: &InputVec) -> Result<(StateVec, usize)> {
    sys.step(x, u)
}

/// Max-affine state constraint `h(x) = max_j (a_j' x - b_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintFn {
    rows: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl ConstraintFn {
    pub fn new(rows: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if rows.nrows() != offsets.len() || rows.nrows() == 0 {
            return Err(Error::Dimension("constraint pieces".into()));
        }
        if rows.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("constraint pieces"));
        }
        Ok(Self { rows, offsets })
    }

    /// `h(x) = max_i s_i (|x_i| - r_i)` for a symmetric box with per-axis scales.
    pub fn scaled_box(radius: &[f64], scale: &[f64]) -> Result<Self> {
        if radius.len() != scale.len() {
            return Err(Error::Dimension("box radius and scale lengths".into()));
        }
        let n = radius.len();
        let mut rows = DMatrix::zeros(2 * n, n);
        let mut offsets = DVector::zeros(2 * n);
        for i in 0..n {
            rows[(2 * i, i)] = scale[i];
            rows[(2 * i + 1, i)] = -scale[i];
            offsets[2 * i] = scale[i] * radius[i];
            offsets[2 * i + 1] = scale[i] * radius[i];
        }
        Self::new(rows, offsets)
    }

    pub fn n_pieces(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_x(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    /// Euclidean norm of each piece's gradient.
    pub fn scales(&self) -> Vec<f64> {
        (0..self.n_pieces())
            .map(|j| self.rows.row(j).norm())
            .collect()
    }

    pub fn piece(&self, j: usize, x: &StateVec) -> f64 {
        self.rows.row(j).transpose().dot(x) - self.offsets[j]
    }

    pub fn eval(&self, x: &StateVec) -> f64 {
        (0..self.n_pieces())
            .map(|j| self.piece(j, x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Lipschitz constant of `h` in the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        self.scales().into_iter().fold(0.0, f64::max)
    }
}

pub fn h_eval(cons: &ConstraintFn, x: &StateVec) -> f64 {
    cons.eval(x)
}

/// Inverted pendulum between two soft walls sampled at 0.05 s.
pub fn pendulum_build() -> (PwaSystem, ConstraintFn, Polytope) {
    let dt = 0.05;
    let stiffness = [-29.5, -14.5, 0.5, -24.5];
    let offsets = [-3.3, -1.5, 0.0, 2.5];
    let edges = [f64::NEG_INFINITY, -0.12, -0.1, 0.1, f64::INFINITY];
    let modes = (0..4)
        .map(|i| {
            let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, stiffness[i], 1.0]);
            let b = DMatrix::from_row_slice(2, 1, &[0.0, dt]);
            let f = DVector::from_vec(vec![0.0, offsets[i]]);
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            if edges[i + 1].is_finite() {
                rows.extend_from_slice(&[1.0, 0.0]);
                rhs.push(edges[i + 1]);
            }
            if edges[i].is_finite() {
                rows.extend_from_slice(&[-1.0, 0.0]);
                rhs.push(-edges[i]);
            }
            let region = Polytope::new(
                DMatrix::from_row_slice(rhs.len(), 2, &rows),
                DVector::from_vec(rhs),
            )
            .expect("pendulum region");
            Mode { a, b, f, region }
        })
        .collect();
    let domain = Polytope::symmetric_box(&[1.0, 5.0]).expect("pendulum domain");
    let sys = PwaSystem::new(modes, domain).expect("pendulum system");
    let cons = ConstraintFn::scaled_box(&[0.15, 1.0], &[20.0, 2.0]).expect("pendulum constraint");
    let input = Polytope::symmetric_box(&[4.0]).expect("pendulum input box");
    (sys, cons, input)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModeEntry {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    f: Vec<f64>,
    region_h: Vec<Vec<f64>>,
    region_b: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HalfSpaces {
    h: Vec<Vec<f64>>,
    b: Vec<f64>,
}

/// On-disk description of a PWA system (TOML).
#[derive(Debug, Serialize, Deserialize)]
pub struct SystemFile {
    modes: Vec<ModeEntry>,
    domain: HalfSpaces,
    constraints: HalfSpaces,
    input: HalfSpaces,
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("{what}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

impl HalfSpaces {
    fn polytope(&self, n: usize, what: &str) -> Result<Polytope> {
        Polytope::new(
            matrix_from_rows(&self.h, n, what)?,
            DVector::from_vec(self.b.clone()),
        )
    }

    fn of(h_mat: &DMatrix<f64>, h_vec: &DVector<f64>) -> Self {
        Self {
            h: rows_of(h_mat),
            b: h_vec.iter().copied().collect(),
        }
    }
}

impl SystemFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_parts(sys: &PwaSystem, cons: &ConstraintFn, input: &Polytope) -> Self {
        let modes = sys
            .modes()
            .iter()
            .map(|m| ModeEntry {
                a: rows_of(&m.a),
                b: rows_of(&m.b),
                f: m.f.iter().copied().collect(),
                region_h: rows_of(&m.region.h_mat),
                region_b: m.region.h_vec.iter().copied().collect(),
            })
            .collect();
        Self {
            modes,
            domain: HalfSpaces::of(&sys.domain().h_mat, &sys.domain().h_vec),
            constraints: HalfSpaces::of(cons.rows(), cons.offsets()),
            input: HalfSpaces::of(&input.h_mat, &input.h_vec),
        }
    }

    pub fn build(&self) -> Result<(PwaSystem, ConstraintFn, Polytope)> {
        let first = self
            .modes
            .first()
            .ok_or_else(|| Error::InvalidArgument("no modes".into()))?;
        let n_x = first.f.len();
        let n_u = first.b.first().map_or(0, Vec::len);
        let modes = self
            .modes
            .iter()
            .map(|m| {
                Ok(Mode {
                    a: matrix_from_rows(&m.a, n_x, "mode A")?,
                    b: matrix_from_rows(&m.b, n_u, "mode B")?,
                    f: DVector::from_vec(m.f.clone()),
                    region: Polytope::new(
                        matrix_from_rows(&m.region_h, n_x, "mode region")?,
                        DVector::from_vec(m.region_b.clone()),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sys = PwaSystem::new(modes, self.domain.polytope(n_x, "domain")?)?;
        let cons = ConstraintFn::new(
            matrix_from_rows(&self.constraints.h, n_x, "constraints")?,
            DVector::from_vec(self.constraints.b.clone()),
        )?;
        let input = self.input.polytope(n_u, "input")?;
        Ok((sys, cons, input))
    }
}
