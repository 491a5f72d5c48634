use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::tensor::Tensor;

/// Summary of a compaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Compaction {
    pub widths_before: Vec<usize>,
    pub widths_after: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    /// Layers whose MLP now has no neurons.
    pub empty_layers: Vec<usize>,
}

/// Physically drops masked groups: rows of W1, bias entries, columns of W2.
pub fn compact(
    model: &TransformerModel,
    masks: &[Vec<bool>],
) -> Result<(TransformerModel, Compaction)> {
    let widths_before = model.layer_widths();
    let right: Vec<usize> = masks.iter().map(Vec::len).collect();
    if right != widths_before {
        return Err(Error::ShapeMismatch {
            op: "compact",
            left: widths_before,
            right,
        });
    }
    let d = model.config.d_model;
    let mut out = model.clone();
    let mut widths_after = Vec::with_capacity(masks.len());
    for (b, mask) in out.blocks.iter_mut().zip(masks) {
        let m = b.width();
        let keep: Vec<usize> = (0..m).filter(|&j| mask[j]).collect();
        let n = keep.len();
        let w1: Vec<_> = keep.iter().flat_map(|&j| b.w1.row(j).to_vec()).collect();
        let b1: Vec<_> = keep.iter().map(|&j| b.b1.data()[j]).collect();
        let w2: Vec<_> = (0..d)
            .flat_map(|k| keep.iter().map(move |&j| (k, j)))
            .map(|(k, j)| b.w2.data()[k * m + j])
            .collect();
        b.w1 = Tensor::new(vec![n, d], w1)?;
        b.b1 = Tensor::new(vec![n], b1)?;
        b.w2 = Tensor::new(vec![d, n], w2)?;
        b.mask = None;
        widths_after.push(n);
    }
    out.config = ModelConfig {
        mlp_widths: Some(widths_after.clone()),
        ..model.config.clone()
    };
    let empty_layers: Vec<usize> = (0..widths_after.len())
        .filter(|&l| widths_after[l] == 0)
        .collect();
    for &l in &empty_layers {
        log::warn!("layer {l} compacted to zero neurons; its MLP is now the identity");
    }
    let summary = Compaction {
        widths_before,
        params_before: model.param_count(),
        params_after: out.param_count(),
        widths_after,
        empty_layers,
    };
    Ok((out, summary))
}

/// Closed-form parameter count for a model with the given MLP widths.
pub fn compacted_param_count(config: &ModelConfig, widths: &[usize]) -> usize {
    let (v, d, t) = (config.vocab_size, config.d_model, config.max_seq_len);
    let per_layer_fixed = 4 * d + 4 * (d * d + d);
    let mlp: usize = widths.iter().map(|&m| 2 * m * d + m).sum();
    let head = if config.tie_embeddings { 0 } else { v * d };
    v * d + t * d + widths.len() * per_layer_fixed + mlp + 2 * d + head
}
