use alloc::vec::Vec;

use super::config::TrainConfig;
use super::loss::{sequence_loss, LossWeights};
use super::model::FlowMambaModel;
use crate::error::{Error, Result};
use crate::math;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Cosine decay from `base` to `min` over `total` steps, then flat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.base;
        }
        let t = step.min(self.total) as f64 / self.total as f64;
        self.min + 0.5 * (self.base - self.min) * (1.0 + math::cos(core::f64::consts::PI * t))
    }
}

/// One training example.
#[derive(Debug, Clone, Copy)]
pub struct SceneRef<'a> {
    pub source: &'a Tensor,
    pub target: &'a Tensor,
    pub flow: &'a Tensor,
    /// Reported if the step diverges.
    pub seed: u64,
}

/// Model parameters together with AdamW moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: FlowMambaModel,
    pub config: TrainConfig,
    pub schedule: CosineSchedule,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: FlowMambaModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(TrainState {
            schedule: CosineSchedule {
                base: config.lr,
                min: config.lr_min,
                total: config.total_steps,
            },
            model,
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// One decoupled-weight-decay Adam update.
    pub fn apply_gradients(&mut self, grads: &[Tensor]) -> Result<()> {
        let params = self.model.params.tensors_mut();
        if grads.len() != params.len() {
            return Err(Error::dim("apply_gradients", &[params.len()], &[grads.len()]));
        }
        let lr = self.schedule.lr(self.step);
        let t = (self.step + 1) as i32;
        let c = &self.config;
        let bc1 = 1.0 - math::powi(c.beta1, t);
        let bc2 = 1.0 - math::powi(c.beta2, t);
        for (i, (w, g)) in params.iter_mut().zip(grads).enumerate() {
            if w.shape() != g.shape() {
                return Err(Error::dim("apply_gradients", w.shape(), g.shape()));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (wj, &gj)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *wj -= lr * (mhat / (math::sqrt(vhat) + c.adam_eps) + c.weight_decay * *wj);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Forward, backward and update on a batch; returns the mean loss.
/// Gradients are summed over scenes in batch order and divided by the batch
/// size, so results do not depend on anything but the inputs.
pub fn train_step(state: &mut TrainState, batch: &[SceneRef<'_>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let weights = LossWeights(state.model.config.alpha.clone());
    let mut acc: Vec<Tensor> = state
        .model
        .params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut loss_sum = 0.0;
    for scene in batch {
        let mut tape = Tape::new();
        let p = state.model.params.bind(&mut tape);
        let out = state.model.forward(&mut tape, &p, scene.source, scene.target)?;
        let loss = sequence_loss(&mut tape, &out, scene.flow, &weights)?;
        let value = tape.value(loss).item()?;
        let diverged = || Error::Training {
            step: state.step,
            scene_seed: scene.seed,
            loss: value,
        };
        if !value.is_finite() {
            return Err(diverged());
        }
        let grads = tape.backward(loss)?;
        for (a, &var) in acc.iter_mut().zip(p.vars()) {
            if let Some(g) = grads.get(var) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(diverged());
                }
                for (x, y) in a.data_mut().iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        loss_sum += value;
    }
    let scale = 1.0 / batch.len() as f64;
    for a in &mut acc {
        for x in a.data_mut() {
            *x *= scale;
        }
    }
    state.apply_gradients(&acc)?;
    Ok(loss_sum * scale)
}
