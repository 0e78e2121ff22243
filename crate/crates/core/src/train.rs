//! Mean-squared-error training with AdamW and a cosine learning rate.
//!
//! Per-sample gradients may be computed in parallel but are always summed in
//! batch order, so a run is bit-reproducible for a given seed regardless of
//! the thread count.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Sample;
use crate::error::{BsaError, Result};
use crate::geom::BallTree;
use crate::model::{input_matrix, Model, ModelOptions};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate on the test set every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Seeds batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 50,
            seed: 0,
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW over a flat parameter vector, decoupled weight decay on every
/// parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i].to_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            let p = params[i].to_f64();
            let next = p - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p);
            params[i] = T::c(next);
        }
    }
}

/// A sample with its tree and model input precomputed.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub tree: BallTree,
    pub input: Array2<T>,
    pub target: Vec<T>,
}

pub fn prepare<T: Real>(model: &Model<T>, samples: &[Sample]) -> Result<Vec<Prepared<T>>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                tree: model.build_tree(&s.points)?,
                input: input_matrix(&s.points, None)?,
                target: s.target.iter().map(|&v| T::c(v)).collect(),
            })
        })
        .collect()
}

fn sample_mse<T: Real>(model: &Model<T>, s: &Prepared<T>) -> Result<f64> {
    let pred = model.predict(&s.tree, s.input.view())?;
    let n = s.target.len() as f64;
    Ok(pred
        .iter()
        .zip(&s.target)
        .map(|(p, t)| (*p - *t).to_f64().powi(2))
        .sum::<f64>()
        / n)
}

/// Mean over samples of the per-cloud MSE.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Prepared<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(BsaError::InvalidArgument("nothing to evaluate".into()));
    }
    let per: Vec<f64> = samples
        .par_iter()
        .map(|s| sample_mse(model, s))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Loss and flat parameter gradient of one sample.
fn sample_grad<T: Real>(model: &Model<T>, s: &Prepared<T>, scale: f64) -> Result<(f64, Vec<T>)> {
    let (pred, ws) = model.forward(&s.tree, s.input.view(), ModelOptions::default())?;
    let n = s.target.len() as f64;
    let mut loss = 0.0;
    let g = ndarray::Array1::from_iter(pred.iter().zip(&s.target).map(|(p, t)| {
        let e = (*p - *t).to_f64();
        loss += e * e;
        T::c(2.0 * e * scale / n)
    }));
    let (grads, _) = model.backward(&s.tree, &ws, g.view())?;
    Ok((loss / n, grads.flatten()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    /// Batch loss for training steps; full training-set MSE for step 0.
    pub train_loss: f64,
    pub test_mse: Option<f64>,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,lr,train_loss,test_mse";

    pub fn to_csv_row(&self) -> String {
        let test = self.test_mse.map(|v| format!("{v:.9e}")).unwrap_or_default();
        format!("{},{:.9e},{:.9e},{}", self.step, self.lr, self.train_loss, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub final_train_mse: f64,
    pub final_test_mse: f64,
}

/// Trains `model` in place. `on_step` sees every metrics row as it is
/// produced; row 0 is the untrained model.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Prepared<T>],
    test_set: &[Prepared<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || train_set.is_empty() || test_set.is_empty() {
        return Err(BsaError::InvalidArgument(
            "batch size and both splits must be nonempty".into(),
        ));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(BsaError::InvalidArgument(format!(
            "learning rate {} must be positive",
            cfg.lr
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params.n_params(), cfg);
    let mut metrics = Vec::with_capacity(cfg.steps + 1);
    let first = StepMetrics {
        step: 0,
        lr: cosine_lr(cfg.lr, 0, cfg.steps),
        train_loss: evaluate(model, train_set)?,
        test_mse: Some(evaluate(model, test_set)?),
    };
    on_step(&first);
    metrics.push(first);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.min(train_set.len());
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let scale = 1.0 / batch as f64;
        let per: Vec<(f64, Vec<T>)> = idx
            .par_iter()
            .map(|&i| sample_grad(model, &train_set[i], scale))
            .collect::<Result<_>>()?;
        let mut grad = vec![T::zero(); opt.m.len()];
        let mut loss = 0.0;
        for (l, g) in &per {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += *b;
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(BsaError::InvalidInput(format!("training diverged at step {step}")));
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        let mut flat = model.params.flatten();
        opt.step(&mut flat, &grad, lr);
        model.params.assign_flat(&flat)?;
        let done = step + 1;
        let eval_due = done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let row = StepMetrics {
            step: done,
            lr,
            train_loss: loss,
            test_mse: if eval_due {
                Some(evaluate(model, test_set)?)
            } else {
                None
            },
        };
        on_step(&row);
        metrics.push(row);
    }
    let final_test_mse = metrics.last().and_then(|m| m.test_mse).expect("last row is evaluated");
    Ok(TrainOutcome {
        final_train_mse: evaluate(model, train_set)?,
        final_test_mse,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert_eq!(cosine_lr(1e-3, 5, 0), 1e-3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(2, &cfg);
        let mut p = [1.0f64, -1.0];
        opt.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        let mut decay = AdamW::new(1, &TrainConfig::default());
        let mut q = [2.0f64];
        decay.step(&mut q, &[0.0], 0.1);
        assert!((q[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-12);
    }
}
