//! Maximum-likelihood training with Adam, and finite-difference gradient
//! checking.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::Sample;
use crate::error::ModelError;
use crate::model::HcsaModel;
use crate::params::ParamStore;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("parameter {0} has no gradient buffer")]
    MissingGrad(String),
    #[error("loss became non-finite at step {0}")]
    Diverged(usize),
    #[error("optimizer state does not match the parameter store")]
    StateMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            clip_norm: Some(5.0),
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<(), TrainError> {
        if self.m.len() != params.len() {
            return Err(TrainError::StateMismatch);
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let name = params.name(id).to_owned();
            let t = params.get_mut(id);
            let grad = t.grad().ok_or(TrainError::MissingGrad(name))?.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != grad.len() {
                return Err(TrainError::StateMismatch);
            }
            for (k, (w, g)) in t.data_mut().iter_mut().zip(&grad).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for id in params.ids().collect::<Vec<_>>() {
            if let Some(g) = params.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Forward, backward and one Adam update on `batch`; returns the batch loss.
pub fn train_step(model: &mut HcsaModel, adam: &mut Adam, batch: &[Sample], clip: Option<f64>) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, batch)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(TrainError::Diverged(adam.step as usize));
    }
    tape.backward(loss).map_err(ModelError::from)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&tape);
    if let Some(c) = clip {
        clip_grad_norm(&mut model.params, c);
    }
    adam.step(&mut model.params)?;
    Ok(value)
}

/// Trains `model` in place. The shuffle order is drawn from the model's
/// seed, so a fixed config yields a bitwise-identical loss trace.
/// `on_epoch` runs after every completed (or truncated) epoch.
pub fn train(
    model: &mut HcsaModel,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &HcsaModel, &TrainReport) -> Result<(), TrainError>,
) -> Result<TrainReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let seed = model.config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.params, model.config.learning_rate);
    let mut report = TrainReport {
        seed,
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        epoch_seconds: Vec::new(),
    };
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps() >= m) {
                break;
            }
            let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let loss = train_step(model, &mut adam, &batch, cfg.clip_norm)?;
            log::debug!("step {} loss {loss:.6}", report.steps());
            report.step_losses.push(loss);
            sum += loss;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        report.epoch_losses.push(sum / batches as f64);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
        log::info!("epoch {epoch} mean loss {:.6} ({batches} steps)", sum / batches as f64);
        on_epoch(epoch, model, &report)?;
    }
    Ok(report)
}

/// Fraction of samples whose greedy answer equals the reference exactly.
pub fn exact_match_accuracy(model: &HcsaModel, data: &[Sample]) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in data {
        if model.predict(s)? == s.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter holding the worst entry.
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor for [`relative_error`]. Central differences at
/// `ε = 1e-5` carry roughly `1e-10` of roundoff for losses of order one, so
/// entries below the floor are judged by absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn loss_of(model: &HcsaModel, sample: &Sample) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, sample)?;
    Ok(tape.value(loss).item())
}

/// Compares every parameter's analytic gradient of the sample loss with a
/// central difference of step `eps`.
pub fn gradient_check(model: &HcsaModel, sample: &Sample, eps: f64) -> Result<GradCheckReport, ModelError> {
    let mut tape = Tape::new();
    let loss = model.sample_loss(&mut tape, sample)?;
    tape.backward(loss)?;
    let mut probe = model.clone();
    probe.params.zero_grad();
    probe.params.accumulate_grads(&tape);
    let analytic = probe.params.clone();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in analytic.ids() {
        let grads = analytic.get(id).grad().unwrap_or(&[]).to_vec();
        for (k, &a) in grads.iter().enumerate() {
            let orig = probe.params.get(id).data()[k];
            probe.params.get_mut(id).data_mut()[k] = orig + eps;
            let up = loss_of(&probe, sample)?;
            probe.params.get_mut(id).data_mut()[k] = orig - eps;
            let down = loss_of(&probe, sample)?;
            probe.params.get_mut(id).data_mut()[k] = orig;
            let err = relative_error(a, (up - down) / (2.0 * eps));
            if err > report.max_relative_error || report.checked == 0 {
                report.max_relative_error = err;
                report.worst_parameter = analytic.name(id).to_owned();
                report.worst_index = k;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> (ParamStore, crate::params::ParamId) {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::vector(vec![w]).unwrap());
        (ps, id)
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut ps = ParamStore::new();
        ps.add("a", Tensor::vector(vec![0.3, -2.0]).unwrap());
        ps.add("b", Tensor::zeros(&[2, 2]));
        let before = ps.clone();
        let mut adam = Adam::new(&ps, 0.001);
        for _ in 0..3 {
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps, before);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g and v̂ = g² after one step, so Δ = −lr·g/(|g| + ε)
        for g in [0.37, -4.2, 1e-3] {
            let (mut ps, id) = scalar_store(1.0);
            ps.get_mut(id).grad_mut().unwrap()[0] = g;
            let mut adam = Adam::new(&ps, 0.01);
            adam.step(&mut ps).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((ps.get(id).data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_descend_quadratic() {
        // f(w) = (w − 3)², f' = 2(w − 3)
        let (mut ps, id) = scalar_store(0.0);
        let mut adam = Adam::new(&ps, 0.1);
        let f = |w: f64| (w - 3.0).powi(2);
        let start = f(0.0);
        for _ in 0..2 {
            let w = ps.get(id).data()[0];
            ps.get_mut(id).grad_mut().unwrap()[0] = 2.0 * (w - 3.0);
            adam.step(&mut ps).unwrap();
        }
        let w = ps.get(id).data()[0];
        assert!(f(w) < start);
        // the two updates written out by hand
        let (g1, m1, v1) = (-6.0, -0.6, 0.036);
        let w1: f64 = -0.1 * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
        let g2 = 2.0 * (w1 - 3.0);
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let w2 = w1 - 0.1 * (m2 / 0.19) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert!(g1 < 0.0 && (w - w2).abs() < 1e-14, "{w} vs {w2}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::vector(vec![1.0]).unwrap());
        let mut adam = Adam::new(&ps, 0.1);
        ps.get_mut(id).set_requires_grad(false);
        assert!(matches!(adam.step(&mut ps), Err(TrainError::MissingGrad(n)) if n == "w"));
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::vector(vec![0.0, 0.0]).unwrap());
        ps.get_mut(id).grad_mut().unwrap().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut ps, 10.0), 5.0);
        assert_eq!(ps.get(id).grad().unwrap(), &[3.0, 4.0]);
        clip_grad_norm(&mut ps, 1.0);
        let g = ps.get(id).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-4).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
