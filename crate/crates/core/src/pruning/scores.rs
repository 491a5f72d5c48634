use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::Real;

/// How per-weight movement terms combine into one group statistic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

/// Movement statistic `agg_i(W_i · ∂L/∂W_i)` of one group.
pub fn group_movement(weights: &[Real], grads: &[Real], agg: Aggregation) -> Result<Real> {
    if weights.len() != grads.len() {
        return Err(Error::ShapeMismatch {
            op: "group_movement",
            left: vec![weights.len()],
            right: vec![grads.len()],
        });
    }
    let sum: Real = weights.iter().zip(grads).map(|(w, g)| w * g).sum();
    Ok(match agg {
        Aggregation::Sum => sum,
        Aggregation::Mean if weights.is_empty() => 0.0,
        Aggregation::Mean => sum / weights.len() as Real,
    })
}

/// Per-layer movement statistics for every neuron group. `grads` lines up
/// with [`TransformerModel::named_params`]; the MLP entries must be present.
pub fn movement_score_grads(
    model: &TransformerModel,
    grads: &[Option<&[Real]>],
    agg: Aggregation,
) -> Result<Vec<Vec<Real>>> {
    let params = model.named_params();
    if grads.len() != params.len() {
        return Err(Error::Pruning(format!(
            "movement scores need {} gradient slots, got {}",
            params.len(),
            grads.len()
        )));
    }
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(model.n_layers());
    for l in 0..model.n_layers() {
        let (i1, ib, i2) = model.mlp_param_indices(l);
        let fetch = |i: usize| {
            let g = grads[i]
                .ok_or_else(|| Error::Pruning(format!("missing gradient for {}", params[i].0)))?;
            if g.len() != params[i].1.numel() {
                return Err(Error::Pruning(format!(
                    "gradient for {} has wrong length",
                    params[i].0
                )));
            }
            Ok(g)
        };
        let (g1, gb, g2) = (fetch(i1)?, fetch(ib)?, fetch(i2)?);
        let (w1, b1, w2) = (
            params[i1].1.data(),
            params[ib].1.data(),
            params[i2].1.data(),
        );
        let m = b1.len();
        let count = (2 * d + 1) as Real;
        let layer = (0..m)
            .map(|j| {
                let mut s: Real = 0.0;
                for k in 0..d {
                    s += w1[j * d + k] * g1[j * d + k];
                }
                s += b1[j] * gb[j];
                for k in 0..d {
                    s += w2[k * m + j] * g2[k * m + j];
                }
                match agg {
                    Aggregation::Sum => s,
                    Aggregation::Mean => s / count,
                }
            })
            .collect();
        out.push(layer);
    }
    Ok(out)
}

/// L2 norm of each group (W1 row, bias, W2 column).
pub fn magnitude_scores(model: &TransformerModel) -> Vec<Vec<Real>> {
    let d = model.config.d_model;
    model
        .blocks
        .iter()
        .map(|b| {
            let m = b.width();
            let (w1, b1, w2) = (b.w1.data(), b.b1.data(), b.w2.data());
            (0..m)
                .map(|j| {
                    let mut s = b1[j] * b1[j];
                    for k in 0..d {
                        s += w1[j * d + k] * w1[j * d + k] + w2[k * m + j] * w2[k * m + j];
                    }
                    s.sqrt()
                })
                .collect()
        })
        .collect()
}
