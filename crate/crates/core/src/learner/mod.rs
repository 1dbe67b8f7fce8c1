//! Learned state-action barriers `Q_θ(x, u)`, standard barrier surrogates
//! `B_θ(x)` and imitation policies, trained by mean squared error.

pub mod mlp;
pub mod train;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cbf_init::{parse_floats, KeyedLines};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::sysmodel::{InputVec, PwaSystem, StateVec};

pub use mlp::{Activation, ForwardCache, MlpNet};
pub use train::{adam_fit, split_indices, FitReport, TrainHyper};

const MODEL_MAGIC: &str = "sacbf-model";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// `q1(x) + q2(x)'u + u'L(x)L(x)'u`.
    Quadratic,
    /// One network on `(x, u)`.
    FullNn,
    /// One network on `x` approximating `B_k`.
    StandardCbf,
    /// One network from `x` to an input.
    Policy,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Quadratic => "quad",
            ModelKind::FullNn => "full-nn",
            ModelKind::StandardCbf => "std-cbf",
            ModelKind::Policy => "policy",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "quad" => Some(ModelKind::Quadratic),
            "full-nn" => Some(ModelKind::FullNn),
            "std-cbf" => Some(ModelKind::StandardCbf),
            "policy" => Some(ModelKind::Policy),
            _ => None,
        }
    }
}

/// Affine feature and target normalization: `(z - shift) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaling {
    pub in_shift: Vec<f64>,
    pub in_scale: Vec<f64>,
    pub out_shift: Vec<f64>,
    pub out_scale: Vec<f64>,
}

impl Scaling {
    /// Column statistics; columns flagged in `centered == false` keep shift zero
    /// and use the root mean square as scale.
    fn fit(inputs: &DMatrix<f64>, centered: &[bool], targets: &DMatrix<f64>) -> Self {
        let stats = |m: &DMatrix<f64>, center: &dyn Fn(usize) -> bool| -> (Vec<f64>, Vec<f64>) {
            let n = m.ncols().max(1) as f64;
            (0..m.nrows())
                .map(|r| {
                    let row = m.row(r);
                    let shift = if center(r) { row.sum() / n } else { 0.0 };
                    let var = row.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n;
                    let scale = var.sqrt();
                    (shift, if scale > 1e-12 { scale } else { 1.0 })
                })
                .unzip()
        };
        let (in_shift, in_scale) = stats(inputs, &|r| centered[r]);
        let (out_shift, out_scale) = stats(targets, &|_| true);
        Self { in_shift, in_scale, out_shift, out_scale }
    }

    fn inputs(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] - self.in_shift[r]) / self.in_scale[r])
    }

    fn targets(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| (m[(r, c)] - self.out_shift[r]) / self.out_scale[r])
    }

    fn input(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(i, v)| (v - self.in_shift[i]) / self.in_scale[i]).collect()
    }
}

/// Layer sizes and activation choice of the hidden part of every network.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn tanh(hidden: &[usize]) -> Self {
        Self { hidden: hidden.to_vec(), activation: Activation::Tanh }
    }

    pub fn relu(hidden: &[usize]) -> Self {
        Self { hidden: hidden.to_vec(), activation: Activation::Relu }
    }

    fn widths(&self, n_in: usize, n_out: usize) -> Vec<usize> {
        std::iter::once(n_in).chain(self.hidden.iter().copied()).chain(std::iter::once(n_out)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacbfModel {
    pub kind: ModelKind,
    pub n_x: usize,
    pub n_u: usize,
    pub scaling: Scaling,
    /// `[q1, q2, L]` for the quadratic kind, a single network otherwise.
    pub nets: Vec<MlpNet>,
    /// Sampled approximation error bound; the true uniform bound may be larger.
    pub delta: Option<f64>,
    /// Digest of the generator configuration the training labels came from.
    pub digest: u64,
    pub train_mse: f64,
    pub validation_mse: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn softplus_inverse(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Row-major index pairs `(i, j)`, `i >= j`, of a lower triangle.
fn tril_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
}

impl SacbfModel {
    fn new(kind: ModelKind, n_x: usize, n_u: usize, scaling: Scaling, arch: &Architecture, seed: u64) -> Result<Self> {
        let net = |n_in: usize, n_out: usize, s: u64| {
            MlpNet::new(&arch.widths(n_in, n_out), arch.activation, Activation::Identity, s)
        };
        let nets = match kind {
            ModelKind::Quadratic => vec![
                net(n_x, 1, seed)?,
                net(n_x, n_u, seed.wrapping_add(1))?,
                net(n_x, n_u * (n_u + 1) / 2, seed.wrapping_add(2))?,
            ],
            ModelKind::FullNn => vec![net(n_x + n_u, 1, seed)?],
            ModelKind::StandardCbf => vec![net(n_x, 1, seed)?],
            ModelKind::Policy => vec![net(n_x, n_u, seed)?],
        };
        Ok(Self {
            kind,
            n_x,
            n_u,
            scaling,
            nets,
            delta: None,
            digest: 0,
            train_mse: f64::NAN,
            validation_mse: f64::NAN,
        })
    }

    /// Quadratic model whose coefficients do not depend on `x`; `l` must be
    /// lower triangular with a positive diagonal.
    pub fn constant_quadratic(n_x: usize, q1: f64, q2: &DVector<f64>, l: &DMatrix<f64>) -> Result<Self> {
        let n_u = q2.len();
        if l.shape() != (n_u, n_u) || n_x == 0 || n_u == 0 {
            return Err(Error::Dimension("coefficient shapes".into()));
        }
        let pairs = tril_pairs(n_u);
        if (0..n_u).any(|i| l[(i, i)] <= 0.0) || (0..n_u).any(|i| (i + 1..n_u).any(|j| l[(i, j)] != 0.0)) {
            return Err(Error::InvalidArgument("L must be lower triangular with a positive diagonal".into()));
        }
        let lraw: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| if i == j { softplus_inverse(l[(i, j)]) } else { l[(i, j)] })
            .collect();
        let constant = |bias: Vec<f64>| {
            let out = bias.len();
            MlpNet::from_parts(
                vec![n_x, out],
                vec![Activation::Identity],
                vec![DMatrix::zeros(out, n_x)],
                vec![DVector::from_vec(bias)],
                0,
            )
        };
        let scaling = Scaling {
            in_shift: vec![0.0; n_x + n_u],
            in_scale: vec![1.0; n_x + n_u],
            out_shift: vec![0.0],
            out_scale: vec![1.0],
        };
        Ok(Self {
            kind: ModelKind::Quadratic,
            n_x,
            n_u,
            scaling,
            nets: vec![constant(vec![q1])?, constant(q2.as_slice().to_vec())?, constant(lraw)?],
            delta: None,
            digest: 0,
            train_mse: 0.0,
            validation_mse: 0.0,
        })
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for n in &self.nets {
            n.write_params(&mut p);
        }
        p
    }

    fn load_params(&mut self, p: &[f64]) {
        let mut at = 0;
        for n in &mut self.nets {
            at += n.read_params(&p[at..]);
        }
    }

    fn expect(&self, kinds: &[ModelKind], what: &str) -> Result<()> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{what} is not defined for {} models", self.kind.tag())))
        }
    }

    /// Prediction and loss gradient on standardized columns `idx` of `(inputs, targets)`.
    fn batch_loss(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>, idx: &[usize], want_grad: bool) -> (f64, Vec<f64>) {
        let feats = inputs.select_columns(idx);
        let y = targets.select_columns(idx);
        let count = (y.len()).max(1) as f64;
        match self.kind {
            ModelKind::Quadratic => {
                let (n_x, n_u) = (self.n_x, self.n_u);
                let x = feats.rows(0, n_x).into_owned();
                let u = feats.rows(n_x, n_u).into_owned();
                let caches: Vec<ForwardCache> = self.nets.iter().map(|n| n.forward_cached(x.clone())).collect();
                let (a, b, lraw) = (caches[0].output(), caches[1].output(), caches[2].output());
                let pairs = tril_pairs(n_u);
                let b_cols = idx.len();
                let mut pred = DMatrix::zeros(1, b_cols);
                let mut w_all = DMatrix::<f64>::zeros(n_u, b_cols);
                for c in 0..b_cols {
                    let mut w = DVector::<f64>::zeros(n_u);
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let l = if i == j { softplus(lraw[(k, c)]) } else { lraw[(k, c)] };
                        w[j] += l * u[(i, c)];
                    }
                    pred[(0, c)] = a[(0, c)] + b.column(c).dot(&u.column(c)) + w.norm_squared();
                    w_all.set_column(c, &w);
                }
                let resid = &pred - &y;
                let loss = resid.norm_squared() / count;
                if !want_grad {
                    return (loss, Vec::new());
                }
                let g = resid * (2.0 / count);
                let mut gb = DMatrix::zeros(n_u, b_cols);
                let mut gl = DMatrix::zeros(pairs.len(), b_cols);
                for c in 0..b_cols {
                    for i in 0..n_u {
                        gb[(i, c)] = g[(0, c)] * u[(i, c)];
                    }
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let d = 2.0 * g[(0, c)] * w_all[(j, c)] * u[(i, c)];
                        gl[(k, c)] = if i == j { d * sigmoid(lraw[(k, c)]) } else { d };
                    }
                }
                let mut grad = self.nets[0].backward(&caches[0], &g).0;
                grad.extend(self.nets[1].backward(&caches[1], &gb).0);
                grad.extend(self.nets[2].backward(&caches[2], &gl).0);
                (loss, grad)
            }
            _ => {
                let net = &self.nets[0];
                if !want_grad {
                    let resid = net.forward(&feats) - &y;
                    return (resid.norm_squared() / count, Vec::new());
                }
                let cache = net.forward_cached(feats);
                let resid = cache.output() - &y;
                let loss = resid.norm_squared() / count;
                let g = resid * (2.0 / count);
                (loss, net.backward(&cache, &g).0)
            }
        }
    }

    /// Raw-unit coefficients `(q1, q2, L)` with `Q(x, u) = q1 + q2'u + u'LL'u`.
    pub fn coefficients(&self, x: &StateVec) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        self.expect(&[ModelKind::Quadratic], "coefficient extraction")?;
        let xs = self.scaling.input(x.as_slice());
        let a = self.nets[0].eval(&xs)[0];
        let b = self.nets[1].eval(&xs);
        let lraw = self.nets[2].eval(&xs);
        let (ys, yc) = (self.scaling.out_shift[0], self.scaling.out_scale[0]);
        let us = &self.scaling.in_scale[self.n_x..];
        let q1 = ys + yc * a;
        let q2 = DVector::from_fn(self.n_u, |i, _| yc * b[i] / us[i]);
        let mut l = DMatrix::zeros(self.n_u, self.n_u);
        for (k, (i, j)) in tril_pairs(self.n_u).into_iter().enumerate() {
            let v = if i == j { softplus(lraw[k]) } else { lraw[k] };
            l[(i, j)] = yc.sqrt() * v / us[i];
        }
        Ok((q1, q2, l))
    }

    /// `Q3(x) = L(x) L(x)'`.
    pub fn curvature(&self, x: &StateVec) -> Result<DMatrix<f64>> {
        let (_, _, l) = self.coefficients(x)?;
        Ok(&l * l.transpose())
    }

    pub fn predict_q(&self, x: &StateVec, u: &InputVec) -> Result<f64> {
        Ok(self.q_and_grad_u(x, u)?.0)
    }

    /// `Q_θ(x, u)` and its gradient in `u`.
    pub fn q_and_grad_u(&self, x: &StateVec, u: &InputVec) -> Result<(f64, DVector<f64>)> {
        self.expect(&[ModelKind::Quadratic, ModelKind::FullNn], "a state-action prediction")?;
        if x.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::Dimension("model input size".into()));
        }
        match self.kind {
            ModelKind::Quadratic => {
                let (q1, q2, l) = self.coefficients(x)?;
                let w = l.transpose() * u;
                Ok((q1 + q2.dot(u) + w.norm_squared(), q2 + 2.0 * &l * w))
            }
            _ => {
                let z: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
                let (v, g) = self.nets[0].value_and_input_grad(&self.scaling.input(&z));
                let (ys, yc) = (self.scaling.out_shift[0], self.scaling.out_scale[0]);
                let grad = DVector::from_fn(self.n_u, |i, _| yc * g[self.n_x + i] / self.scaling.in_scale[self.n_x + i]);
                Ok((ys + yc * v, grad))
            }
        }
    }

    /// `B_θ(x)` and its gradient for the standard barrier surrogate.
    pub fn b_and_grad(&self, x: &StateVec) -> Result<(f64, DVector<f64>)> {
        self.expect(&[ModelKind::StandardCbf], "a state barrier prediction")?;
        let (v, g) = self.nets[0].value_and_input_grad(&self.scaling.input(x.as_slice()));
        let (ys, yc) = (self.scaling.out_shift[0], self.scaling.out_scale[0]);
        let grad = DVector::from_fn(self.n_x, |i, _| yc * g[i] / self.scaling.in_scale[i]);
        Ok((ys + yc * v, grad))
    }

    pub fn predict_b(&self, x: &StateVec) -> Result<f64> {
        Ok(self.b_and_grad(x)?.0)
    }

    /// Policy output, unprojected.
    pub fn predict_input(&self, x: &StateVec) -> Result<InputVec> {
        self.expect(&[ModelKind::Policy], "an input prediction")?;
        let y = self.nets[0].eval(&self.scaling.input(x.as_slice()));
        Ok(DVector::from_fn(self.n_u, |i, _| self.scaling.out_shift[i] + self.scaling.out_scale[i] * y[i]))
    }

    /// Prediction of the label `Q(x, u)`; the standard surrogate is evaluated at the successor.
    pub fn predict_label(&self, sys: &PwaSystem, x: &StateVec, u: &InputVec) -> Result<f64> {
        match self.kind {
            ModelKind::StandardCbf => self.predict_b(&sys.step(x, u)?.0),
            _ => self.predict_q(x, u),
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
        let join = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_MAGIC} {MODEL_VERSION}");
        let _ = writeln!(s, "kind {}", self.kind.tag());
        let _ = writeln!(s, "n_x {}", self.n_x);
        let _ = writeln!(s, "n_u {}", self.n_u);
        let _ = writeln!(s, "digest {:016x}", self.digest);
        match self.delta {
            Some(d) => {
                let _ = writeln!(s, "delta {d}");
            }
            None => {
                let _ = writeln!(s, "delta none");
            }
        }
        let _ = writeln!(s, "train_mse {}", self.train_mse);
        let _ = writeln!(s, "validation_mse {}", self.validation_mse);
        let sc = &self.scaling;
        let _ = writeln!(s, "in_shift {}", join(&mut sc.in_shift.iter().copied()));
        let _ = writeln!(s, "in_scale {}", join(&mut sc.in_scale.iter().copied()));
        let _ = writeln!(s, "out_shift {}", join(&mut sc.out_shift.iter().copied()));
        let _ = writeln!(s, "out_scale {}", join(&mut sc.out_scale.iter().copied()));
        let _ = writeln!(s, "nets {}", self.nets.len());
        for (k, net) in self.nets.iter().enumerate() {
            let widths: Vec<String> = net.widths().iter().map(|w| w.to_string()).collect();
            let acts: Vec<&str> = net.activations().iter().map(|a| a.tag()).collect();
            let _ = writeln!(s, "net{k}.widths {}", widths.join(" "));
            let _ = writeln!(s, "net{k}.activations {}", acts.join(" "));
            let _ = writeln!(s, "net{k}.seed {}", net.seed());
            for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
                let rows = (0..w.nrows()).flat_map(|i| (0..w.ncols()).map(move |j| (i, j)));
                let _ = writeln!(s, "net{k}.w{l} {}", join(&mut rows.map(|(i, j)| w[(i, j)])));
                let _ = writeln!(s, "net{k}.b{l} {}", join(&mut b.iter().copied()));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let f = KeyedLines::parse(text, MODEL_MAGIC, MODEL_VERSION)?;
        let (kind_raw, at) = f.raw("kind")?;
        let kind = ModelKind::parse(kind_raw.trim())
            .ok_or_else(|| Error::Parse { offset: at, message: format!("unknown model kind '{}'", kind_raw.trim()) })?;
        let (digest_raw, at) = f.raw("digest")?;
        let digest = u64::from_str_radix(digest_raw.trim(), 16)
            .map_err(|e| Error::Parse { offset: at, message: format!("digest: {e}") })?;
        let delta = match f.raw("delta")?.0.trim() {
            "none" => None,
            v => Some(v.parse::<f64>().map_err(|e| f.error("delta", e.to_string()))?),
        };
        let floats = |key: &str| -> Result<Vec<f64>> {
            let (v, at) = f.raw(key)?;
            parse_floats(v, at)
        };
        let scaling = Scaling {
            in_shift: floats("in_shift")?,
            in_scale: floats("in_scale")?,
            out_shift: floats("out_shift")?,
            out_scale: floats("out_scale")?,
        };
        let n_nets: usize = f.scalar("nets")?;
        let mut nets = Vec::with_capacity(n_nets);
        for k in 0..n_nets {
            let key = format!("net{k}.widths");
            let (wv, at) = f.raw(&key)?;
            let widths: Vec<usize> = wv
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| Error::Parse { offset: at, message: format!("{key}: {e}") }))
                .collect::<Result<_>>()?;
            let key = format!("net{k}.activations");
            let (av, at) = f.raw(&key)?;
            let activations: Vec<Activation> = av
                .split_whitespace()
                .map(|t| Activation::parse(t).ok_or_else(|| Error::Parse { offset: at, message: format!("unknown activation '{t}'") }))
                .collect::<Result<_>>()?;
            let seed: u64 = f.scalar(&format!("net{k}.seed"))?;
            let layers = widths.len().saturating_sub(1);
            let mut weights = Vec::with_capacity(layers);
            let mut biases = Vec::with_capacity(layers);
            for l in 0..layers {
                weights.push(f.matrix(&format!("net{k}.w{l}"), widths[l + 1], widths[l])?);
                biases.push(DVector::from_vec(floats(&format!("net{k}.b{l}"))?));
            }
            nets.push(MlpNet::from_parts(widths, activations, weights, biases, seed)?);
        }
        let model = Self {
            kind,
            n_x: f.scalar("n_x")?,
            n_u: f.scalar("n_u")?,
            scaling,
            nets,
            delta,
            digest,
            train_mse: f.scalar("train_mse")?,
            validation_mse: f.scalar("validation_mse")?,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let (n_x, n_u) = (self.n_x, self.n_u);
        let expected: Vec<(usize, usize)> = match self.kind {
            ModelKind::Quadratic => vec![(n_x, 1), (n_x, n_u), (n_x, n_u * (n_u + 1) / 2)],
            ModelKind::FullNn => vec![(n_x + n_u, 1)],
            ModelKind::StandardCbf => vec![(n_x, 1)],
            ModelKind::Policy => vec![(n_x, n_u)],
        };
        let n_in = match self.kind {
            ModelKind::Quadratic | ModelKind::FullNn => n_x + n_u,
            _ => n_x,
        };
        let n_out = if self.kind == ModelKind::Policy { n_u } else { 1 };
        let sc = &self.scaling;
        let shapes_ok = self.nets.len() == expected.len()
            && self.nets.iter().zip(&expected).all(|(n, &(i, o))| n.n_in() == i && n.n_out() == o)
            && sc.in_shift.len() == n_in
            && sc.in_scale.len() == n_in
            && sc.out_shift.len() == n_out
            && sc.out_scale.len() == n_out;
        if !shapes_ok {
            return Err(Error::Dimension(format!("{} model networks do not match n_x={n_x}, n_u={n_u}", self.kind.tag())));
        }
        Ok(())
    }
}

/// Fits a model of the given kind to `(inputs, targets)` given as columns.
fn fit(
    kind: ModelKind,
    n_x: usize,
    n_u: usize,
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    arch: &Architecture,
    hyper: &TrainHyper,
) -> Result<SacbfModel> {
    let n = inputs.ncols();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let centered: Vec<bool> = (0..inputs.nrows())
        .map(|r| !(matches!(kind, ModelKind::Quadratic | ModelKind::FullNn) && r >= n_x))
        .collect();
    let scaling = Scaling::fit(&inputs, &centered, &targets);
    let xs = scaling.inputs(&inputs);
    let ys = scaling.targets(&targets);
    let mut model = SacbfModel::new(kind, n_x, n_u, scaling, arch, hyper.seed)?;
    let (train, val) = split_indices(n, hyper.validation_fraction, hyper.seed);
    let mut params = model.params();
    let template = model.clone();
    let report = adam_fit(&mut params, &train, &val, hyper, |p, idx, want| {
        let mut m = template.clone();
        m.load_params(p);
        m.batch_loss(&xs, &ys, idx, want)
    })?;
    model.load_params(&params);
    // losses are in standardized units; report raw-unit mean squared errors
    let raw = model.scaling.out_scale.iter().map(|s| s * s).sum::<f64>() / model.scaling.out_scale.len() as f64;
    model.train_mse = report.train_loss * raw;
    model.validation_mse = report.validation_loss * raw;
    Ok(model)
}

/// Trains a state-action barrier (quadratic or full network) or the standard
/// barrier surrogate on a labeled dataset.
pub fn train_model(d: &LabeledDataset, kind: ModelKind, arch: &Architecture, hyper: &TrainHyper) -> Result<SacbfModel> {
    let n = d.admitted();
    let (n_x, n_u) = (d.n_x, d.n_u);
    let targets = DMatrix::from_fn(1, n, |_, c| d.samples[c].q);
    let inputs = match kind {
        ModelKind::Quadratic | ModelKind::FullNn => DMatrix::from_fn(n_x + n_u, n, |r, c| {
            let s = &d.samples[c];
            if r < n_x {
                s.x[r]
            } else {
                s.u[r - n_x]
            }
        }),
        ModelKind::StandardCbf => {
            // Q(x, u) = B_k(f(x, u)): successors with their labels sample B_k
            let sys = d.generator()?.sys;
            let mut m = DMatrix::zeros(n_x, n);
            for (c, s) in d.samples.iter().enumerate() {
                m.set_column(c, &sys.step(&s.x, &s.u)?.0);
            }
            m
        }
        ModelKind::Policy => {
            return Err(Error::InvalidArgument("policies are trained with train_policy".into()));
        }
    };
    let mut model = fit(kind, n_x, n_u, inputs, targets, arch, hyper)?;
    model.digest = d.digest;
    Ok(model)
}

/// Fits a policy network to state/input pairs.
pub fn train_policy(states: &[StateVec], inputs: &[InputVec], arch: &Architecture, hyper: &TrainHyper) -> Result<SacbfModel> {
    if states.len() != inputs.len() || states.is_empty() {
        return Err(Error::InvalidArgument("policy data must be nonempty and paired".into()));
    }
    let (n_x, n_u) = (states[0].len(), inputs[0].len());
    let xs = DMatrix::from_fn(n_x, states.len(), |r, c| states[c][r]);
    let us = DMatrix::from_fn(n_u, inputs.len(), |r, c| inputs[c][r]);
    fit(ModelKind::Policy, n_x, n_u, xs, us, arch, hyper)
}

/// Predictions of every dataset label, in sample order.
pub fn predict_labels(m: &SacbfModel, d: &LabeledDataset) -> Result<Vec<f64>> {
    if m.kind == ModelKind::StandardCbf {
        let sys = d.generator()?.sys;
        d.samples.par_iter().map(|s| m.predict_label(&sys, &s.x, &s.u)).collect()
    } else {
        d.samples.par_iter().map(|s| m.predict_q(&s.x, &s.u)).collect()
    }
}

/// `max_i |Q_θ(x_i, u_i) - q_i|` over the dataset, stored into the model.
pub fn estimate_delta(m: &mut SacbfModel, d: &LabeledDataset) -> Result<f64> {
    if m.digest != d.digest {
        return Err(Error::DigestMismatch { model: m.digest, dataset: d.digest });
    }
    let preds = predict_labels(m, d)?;
    let delta = preds.iter().zip(&d.samples).map(|(p, s)| (p - s.q).abs()).fold(0.0, f64::max);
    m.delta = Some(delta);
    Ok(delta)
}
