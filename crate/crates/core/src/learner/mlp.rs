//! Dense feed-forward networks with batched backpropagation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Multilayer perceptron; samples are matrix columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNet {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    seed: u64,
}

/// Pre- and post-activation values of every layer for one batch.
pub struct ForwardCache {
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.post.last().expect("network has at least one layer")
    }
}

impl MlpNet {
    /// Hidden layers use `hidden`, the last layer `output`; weights are
    /// `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, biases zero.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let bound = (3.0 / widths[l] as f64).sqrt();
            weights.push(DMatrix::from_fn(widths[l + 1], widths[l], |_, _| rng.random_range(-bound..bound)));
            biases.push(DVector::zeros(widths[l + 1]));
        }
        let activations = (0..layers).map(|l| if l + 1 == layers { output } else { hidden }).collect();
        Ok(Self { widths: widths.to_vec(), activations, weights, biases, seed })
    }

    pub fn from_parts(
        widths: Vec<usize>,
        activations: Vec<Activation>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        seed: u64,
    ) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        if layers == 0 || activations.len() != layers || weights.len() != layers || biases.len() != layers {
            return Err(Error::Dimension("network layer counts differ".into()));
        }
        for l in 0..layers {
            if weights[l].shape() != (widths[l + 1], widths[l]) || biases[l].len() != widths[l + 1] {
                return Err(Error::Dimension(format!("layer {l} does not chain")));
            }
        }
        if weights.iter().flat_map(|w| w.iter()).chain(biases.iter().flat_map(|b| b.iter())).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network weights"));
        }
        Ok(Self { widths, activations, weights, biases, seed })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_in(&self) -> usize {
        self.widths[0]
    }

    pub fn n_out(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Appends parameters: per layer the weights column-major, then the biases.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
    }

    /// Reads parameters in the layout of `write_params`; returns the count consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.len();
            w.as_mut_slice().copy_from_slice(&src[at..at + nw]);
            at += nw;
            let nb = b.len();
            b.as_mut_slice().copy_from_slice(&src[at..at + nb]);
            at += nb;
        }
        at
    }

    /// Adds `delta` to the output bias; the output layer must be affine.
    pub fn shift_output(&mut self, delta: &DVector<f64>) -> Result<()> {
        if self.activations.last() != Some(&Activation::Identity) || delta.len() != self.n_out() {
            return Err(Error::InvalidArgument("output shift needs an identity output layer of matching size".into()));
        }
        *self.biases.last_mut().expect("validated layers") += delta;
        Ok(())
    }

    pub fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = input.clone();
        for l in 0..self.weights.len() {
            let mut z = &self.weights[l] * &a;
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            let act = self.activations[l];
            z.apply(|v| *v = act.apply(*v));
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, input: DMatrix<f64>) -> ForwardCache {
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut post = Vec::with_capacity(self.weights.len() + 1);
        post.push(input);
        for l in 0..self.weights.len() {
            let mut z = &self.weights[l] * post.last().expect("input pushed");
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
            }
            let act = self.activations[l];
            let a = z.map(|v| act.apply(v));
            pre.push(z);
            post.push(a);
        }
        ForwardCache { pre, post }
    }

    /// Gradients of `sum(grad_out .* output)`: parameters in `write_params`
    /// layout, and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let layers = self.weights.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(layers);
        let mut delta = grad_out.clone();
        for l in (0..layers).rev() {
            let act = self.activations[l];
            delta.zip_zip_apply(&cache.pre[l], &cache.post[l + 1], |d, z, a| *d *= act.slope(z, a));
            let gw = &delta * cache.post[l].transpose();
            let gb = delta.column_sum();
            let next = self.weights[l].transpose() * &delta;
            grads.push((gw, gb));
            delta = next;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in &grads {
            flat.extend_from_slice(gw.as_slice());
            flat.extend_from_slice(gb.as_slice());
        }
        (flat, delta)
    }

    pub fn eval(&self, input: &[f64]) -> DVector<f64> {
        let out = self.forward(&DMatrix::from_column_slice(input.len(), 1, input));
        out.column(0).into_owned()
    }

    /// First output and its gradient with respect to the input.
    pub fn value_and_input_grad(&self, input: &[f64]) -> (f64, DVector<f64>) {
        let cache = self.forward_cached(DMatrix::from_column_slice(input.len(), 1, input));
        let mut seed = DMatrix::zeros(self.n_out(), 1);
        seed[(0, 0)] = 1.0;
        let (_, g) = self.backward(&cache, &seed);
        (cache.output()[(0, 0)], g.column(0).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `0.5 * |forward|^2` against backpropagation.
    fn check_gradients(net: &MlpNet, input: &DMatrix<f64>) {
        let loss = |n: &MlpNet| 0.5 * n.forward(input).norm_squared();
        let cache = net.forward_cached(input.clone());
        let (grad, _) = net.backward(&cache, cache.output());
        let mut params = Vec::new();
        net.write_params(&mut params);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let i = rng.random_range(0..params.len());
            let h = 1e-6 * (1.0 + params[i].abs());
            let mut plus = net.clone();
            let mut p = params.clone();
            p[i] += h;
            plus.read_params(&p);
            let mut minus = net.clone();
            p[i] -= 2.0 * h;
            minus.read_params(&p);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / (fd.abs().max(grad[i].abs()).max(1e-6));
            assert!(rel <= 1e-5, "param {i}: fd {fd} backprop {}", grad[i]);
        }
    }

    #[test]
    fn backprop_matches_finite_differences_for_each_activation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        for (hidden, out) in [
            (Activation::Tanh, Activation::Identity),
            (Activation::Relu, Activation::Identity),
            (Activation::Tanh, Activation::Tanh),
        ] {
            let net = MlpNet::new(&[3, 6, 4, 2], hidden, out, 17).unwrap();
            check_gradients(&net, &input);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = MlpNet::new(&[2, 8, 1], Activation::Tanh, Activation::Identity, 4).unwrap();
        let x = [0.3, -0.7];
        let (v, g) = net.value_and_input_grad(&x);
        assert_eq!(v, net.eval(&x)[0]);
        for i in 0..2 {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (net.eval(&p)[0] - net.eval(&m)[0]) / 2e-6;
            assert!((fd - g[i]).abs() <= 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn parameter_round_trip_and_validation() {
        let net = MlpNet::new(&[2, 3, 1], Activation::Relu, Activation::Identity, 1).unwrap();
        let mut p = Vec::new();
        net.write_params(&mut p);
        assert_eq!(p.len(), net.n_params());
        let mut other = MlpNet::new(&[2, 3, 1], Activation::Relu, Activation::Identity, 2).unwrap();
        assert_eq!(other.read_params(&p), p.len());
        assert_eq!(other.weights(), net.weights());
        assert!(MlpNet::new(&[2], Activation::Relu, Activation::Identity, 0).is_err());
        let bad = MlpNet::from_parts(
            vec![2, 1],
            vec![Activation::Identity],
            vec![DMatrix::zeros(2, 1)],
            vec![DVector::zeros(1)],
            0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = MlpNet::new(&[2, 16, 64, 8, 1], Activation::Tanh, Activation::Identity, 42).unwrap();
        let b = MlpNet::new(&[2, 16, 64, 8, 1], Activation::Tanh, Activation::Identity, 42).unwrap();
        assert_eq!(a, b);
        let bound = (3.0f64 / 16.0).sqrt();
        assert!(a.weights()[1].iter().all(|w| w.abs() <= bound));
    }
}
