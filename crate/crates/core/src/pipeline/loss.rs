use alloc::vec::Vec;

use super::model::ForwardOutput;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-level loss weights, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(pub Vec<f64>);

impl LossWeights {
    pub fn weight(&self, level: usize) -> Result<f64> {
        self.0
            .get(level)
            .copied()
            .ok_or_else(|| Error::Config(alloc::format!("no loss weight for level {level}")))
    }
}

/// `Σ_l α_l Σ_i mean_points ‖sf_{l,i} - gt_l‖₂` over every level and
/// iteration, with ground truth gathered at each level's points.
pub fn sequence_loss(tape: &mut Tape, out: &ForwardOutput, gt: &Tensor, weights: &LossWeights) -> Result<Var> {
    if gt.rank() != 2 || gt.cols() != 3 {
        return Err(Error::dim("sequence_loss", &[0, 3], gt.shape()));
    }
    let mut total: Option<Var> = None;
    for level in &out.levels {
        if let Some(&bad) = level.input_indices.iter().find(|&&i| i >= gt.rows()) {
            return Err(Error::dim("sequence_loss", &[bad], gt.shape()));
        }
        let alpha = weights.weight(level.level)?;
        let target = tape.constant(gt.gather_rows(&level.input_indices));
        for &flow in &level.flows {
            let diff = tape.sub(flow, target)?;
            let norms = tape.row_norm(diff)?;
            let mean = tape.mean(norms);
            let term = tape.scale(mean, alpha);
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::Contract("forward output has no predictions".into()))
}
