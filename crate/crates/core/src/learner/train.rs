//! Mini-batch Adam with plateau step-size decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Step-size factor applied after `patience` epochs without validation improvement.
    pub decay: f64,
    pub patience: usize,
    pub min_learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 200,
            decay: 0.5,
            patience: 10,
            min_learning_rate: 1e-6,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.decay > 0.0
            && self.decay <= 1.0
            && (0.0..1.0).contains(&self.validation_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub train_loss: f64,
    pub validation_loss: f64,
    pub epochs: usize,
    pub steps: usize,
    pub final_learning_rate: f64,
}

/// Seeded shuffle into `(train, validation)` index sets.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * validation_fraction).floor() as usize;
    let n_val = if n - n_val == 0 { 0 } else { n_val };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Minimizes the mean loss returned by `loss_grad(params, batch, want_grad)`;
/// restores the parameters with the best validation loss.
pub fn adam_fit<F>(
    params: &mut [f64],
    train: &[usize],
    validation: &[usize],
    hyper: &TrainHyper,
    mut loss_grad: F,
) -> Result<FitReport>
where
    F: FnMut(&[f64], &[usize], bool) -> (f64, Vec<f64>),
{
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let monitor = if validation.is_empty() { train } else { validation };
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let n = params.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order = train.to_vec();
    let mut lr = hyper.learning_rate;
    let mut step = 0usize;
    let mut best = loss_grad(params, monitor, false).0;
    if !best.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let mut best_params = params.to_vec();
    let mut stall = 0usize;
    let mut epochs = 0usize;
    for _ in 0..hyper.epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            step += 1;
            let (loss, grad) = loss_grad(params, batch, true);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step });
            }
            let c1 = 1.0 - b1.powi(step as i32);
            let c2 = 1.0 - b2.powi(step as i32);
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        let monitored = loss_grad(params, monitor, false).0;
        if !monitored.is_finite() {
            return Err(Error::Diverged { step });
        }
        if monitored < best * (1.0 - 1e-4) || (best == 0.0 && monitored == 0.0) {
            best = monitored;
            best_params.copy_from_slice(params);
            stall = 0;
        } else {
            stall += 1;
            if stall >= hyper.patience {
                lr = (lr * hyper.decay).max(hyper.min_learning_rate);
                stall = 0;
            }
        }
        if monitored < best {
            best = monitored;
            best_params.copy_from_slice(params);
        }
    }
    params.copy_from_slice(&best_params);
    let train_loss = loss_grad(params, train, false).0;
    let validation_loss = if validation.is_empty() { train_loss } else { best };
    Ok(FitReport { train_loss, validation_loss, epochs, steps: step, final_learning_rate: lr })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_complete() {
        let (t, v) = split_indices(100, 0.1, 3);
        assert_eq!((t.len(), v.len()), (90, 10));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.5, 0).1.len(), 0);
    }

    #[test]
    fn fits_least_squares_line() {
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 100.0 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 0.5).collect();
        let mut p = vec![0.0, 0.0];
        let hyper = TrainHyper { learning_rate: 0.05, batch_size: 32, epochs: 300, ..Default::default() };
        let (train, val) = split_indices(xs.len(), 0.1, 0);
        let report = adam_fit(&mut p, &train, &val, &hyper, |p, idx, _| {
            let mut g = vec![0.0; 2];
            let mut loss = 0.0;
            for &i in idx {
                let r = p[0] * xs[i] + p[1] - ys[i];
                loss += r * r;
                g[0] += 2.0 * r * xs[i];
                g[1] += 2.0 * r;
            }
            let k = idx.len() as f64;
            (loss / k, g.into_iter().map(|v| v / k).collect())
        })
        .unwrap();
        assert!((p[0] - 3.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
        assert!(report.validation_loss < 1e-6);
    }

    #[test]
    fn reports_divergence_step() {
        let mut p = vec![1.0];
        let hyper = TrainHyper { epochs: 3, batch_size: 1, ..Default::default() };
        let err = adam_fit(&mut p, &[0, 1], &[], &hyper, |_, _, want| {
            if want {
                (f64::NAN, vec![0.0])
            } else {
                (1.0, vec![])
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1 }));
    }
}
