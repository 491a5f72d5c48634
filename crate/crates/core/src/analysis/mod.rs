//! Redundancy measurements on trained models: sensitivity, uniqueness,
//! similarity histograms and per-layer leftover.

mod report;

pub use report::{
    read_report, read_similarity_bin, write_report_bundle, Ratio, Ratios, RedundancyReport,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{lm_loss, next_token_targets, ForwardOptions, TransformerModel};
use crate::similarity::SimilarityTracker;
use crate::tensor::Real;

/// Default similarity above which a neuron counts as non-unique.
pub const UNIQUENESS_THRESHOLD: Real = 0.8;

/// Σ |h · ∂L/∂h| over neurons and token positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    /// `raw_total` divided by the number of sequences.
    pub total: Real,
    pub per_layer: Vec<Real>,
    pub raw_total: Real,
    pub raw_per_layer: Vec<Real>,
    /// Raw per-neuron sums.
    pub per_neuron: Vec<Vec<Real>>,
    pub examples: usize,
}

/// Adds `|h·g|` of each `[rows, m]` entry into its neuron's slot.
pub fn accumulate_sensitivity(h: &[Real], grad: &[Real], per_neuron: &mut [Real]) {
    let m = per_neuron.len().max(1);
    for (row_h, row_g) in h.chunks_exact(m).zip(grad.chunks_exact(m)) {
        for (j, acc) in per_neuron.iter_mut().enumerate() {
            *acc += (row_h[j] * row_g[j]).abs();
        }
    }
}

/// Sensitivity of every intermediate neuron, summed over `batches`
/// (each `[batch][seq]`) with one backward pass per batch.
pub fn sensitivity(
    model: &TransformerModel,
    batches: &[Vec<Vec<usize>>],
    label_smoothing: Real,
) -> Result<Sensitivity> {
    if batches.is_empty() || batches.iter().all(Vec::is_empty) {
        return Err(Error::Data("sensitivity needs a non-empty dataset".into()));
    }
    let widths = model.layer_widths();
    let mut per_neuron: Vec<Vec<Real>> = widths.iter().map(|&m| vec![0.0; m]).collect();
    let mut examples = 0;
    let mut tape = Tape::new();
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        tape.clear();
        let f = model.forward(
            &mut tape,
            batch,
            ForwardOptions {
                capture: true,
                ..Default::default()
            },
        )?;
        let loss = lm_loss(
            &mut tape,
            f.logits,
            &next_token_targets(batch),
            label_smoothing,
        )?;
        tape.backward(loss)?;
        for (l, &h) in f.h.iter().enumerate() {
            let m = widths[l];
            if m == 0 {
                continue;
            }
            let grad = tape
                .grad(h)
                .ok_or_else(|| Error::invalid("sensitivity", "activation gradient missing"))?;
            accumulate_sensitivity(tape.data(h), grad, &mut per_neuron[l]);
        }
        examples += batch.len();
    }
    let raw_per_layer: Vec<Real> = per_neuron.iter().map(|l| l.iter().sum()).collect();
    let raw_total: Real = raw_per_layer.iter().sum();
    let n = examples as Real;
    Ok(Sensitivity {
        total: raw_total / n,
        per_layer: raw_per_layer.iter().map(|s| s / n).collect(),
        raw_total,
        raw_per_layer,
        per_neuron,
        examples,
    })
}

/// Exact (decay-free) similarity of every layer over `batches`.
pub fn exact_similarity(
    model: &TransformerModel,
    batches: &[Vec<Vec<usize>>],
) -> Result<SimilarityTracker> {
    let mut tracker = SimilarityTracker::exact(&model.layer_widths());
    let mut tape = Tape::new();
    for batch in batches.iter().filter(|b| !b.is_empty()) {
        tape.clear();
        let f = model.forward(&mut tape, batch, ForwardOptions::default())?;
        let acts: Vec<&[Real]> = f.h.iter().map(|&h| tape.data(h)).collect();
        tracker.update(&acts)?;
    }
    Ok(tracker)
}

/// Largest `|sim|` between each surviving neuron and any other survivor.
/// Pruned neurons get `None`.
pub fn max_offdiag_similarity(matrix: &[Real], mask: &[bool]) -> Vec<Option<Real>> {
    let m = mask.len();
    (0..m)
        .map(|j| {
            mask[j].then(|| {
                (0..m)
                    .filter(|&i| i != j && mask[i])
                    .map(|i| matrix[j * m + i].abs())
                    .fold(0.0, Real::max)
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uniqueness {
    /// Share of survivors with some `|sim|` above the threshold.
    pub non_unique_fraction: Real,
    /// `1 − non_unique_fraction`.
    pub uniqueness: Real,
    pub non_unique_per_layer: Vec<usize>,
    pub survivors_per_layer: Vec<usize>,
    pub threshold: Real,
}

/// Classifies survivors as non-unique when their maximum off-diagonal
/// `|sim|` exceeds `threshold`. `matrices[l]` is `m_l × m_l`.
pub fn uniqueness_fraction(
    matrices: &[Vec<Real>],
    masks: &[Vec<bool>],
    threshold: Real,
) -> Result<Uniqueness> {
    check_matrices(matrices, masks)?;
    let mut non_unique_per_layer = Vec::with_capacity(masks.len());
    let mut survivors_per_layer = Vec::with_capacity(masks.len());
    for (mat, mask) in matrices.iter().zip(masks) {
        let maxes = max_offdiag_similarity(mat, mask);
        survivors_per_layer.push(maxes.iter().flatten().count());
        non_unique_per_layer.push(maxes.iter().flatten().filter(|&&s| s > threshold).count());
    }
    let survivors: usize = survivors_per_layer.iter().sum();
    let non_unique: usize = non_unique_per_layer.iter().sum();
    let frac = if survivors == 0 {
        0.0
    } else {
        non_unique as Real / survivors as Real
    };
    Ok(Uniqueness {
        non_unique_fraction: frac,
        uniqueness: 1.0 - frac,
        non_unique_per_layer,
        survivors_per_layer,
        threshold,
    })
}

fn check_matrices(matrices: &[Vec<Real>], masks: &[Vec<bool>]) -> Result<()> {
    if matrices.len() != masks.len()
        || matrices
            .iter()
            .zip(masks)
            .any(|(s, m)| s.len() != m.len() * m.len())
    {
        return Err(Error::ShapeMismatch {
            op: "similarity analysis",
            left: masks.iter().map(Vec::len).collect(),
            right: matrices.iter().map(Vec::len).collect(),
        });
    }
    Ok(())
}

/// Distribution of survivors' maximum off-diagonal `|sim|` in one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub counts: Vec<usize>,
    pub shares: Vec<Real>,
    pub survivors: usize,
}

/// Per-layer histograms over `bins` uniform bins on `[0, 1]`.
pub fn similarity_histogram(
    matrices: &[Vec<Real>],
    masks: &[Vec<bool>],
    bins: usize,
) -> Result<Vec<LayerHistogram>> {
    check_matrices(matrices, masks)?;
    if bins == 0 {
        return Err(Error::invalid(
            "similarity_histogram",
            "need at least one bin",
        ));
    }
    Ok(matrices
        .iter()
        .zip(masks)
        .map(|(mat, mask)| {
            let mut counts = vec![0; bins];
            for s in max_offdiag_similarity(mat, mask).into_iter().flatten() {
                let b = ((s.min(1.0) * bins as Real).floor() as usize).min(bins - 1);
                counts[b] += 1;
            }
            let survivors: usize = counts.iter().sum();
            let shares = counts
                .iter()
                .map(|&c| {
                    if survivors == 0 {
                        0.0
                    } else {
                        c as Real / survivors as Real
                    }
                })
                .collect();
            LayerHistogram {
                counts,
                shares,
                survivors,
            }
        })
        .collect())
}

/// Surviving fraction of each layer (1 for an empty layer).
pub fn per_layer_leftover(masks: &[Vec<bool>]) -> Vec<Real> {
    masks
        .iter()
        .map(|m| {
            if m.is_empty() {
                1.0
            } else {
                m.iter().filter(|&&k| k).count() as Real / m.len() as Real
            }
        })
        .collect()
}

/// Options for [`analyze`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub threshold: Real,
    pub bins: usize,
    pub label_smoothing: Real,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            threshold: UNIQUENESS_THRESHOLD,
            bins: 10,
            label_smoothing: 0.0,
        }
    }
}

/// Full redundancy report of `model` (with its current masks) over `batches`.
pub fn analyze(
    model: &TransformerModel,
    batches: &[Vec<Vec<usize>>],
    opts: AnalysisOptions,
) -> Result<(RedundancyReport, SimilarityTracker)> {
    let masks = model.masks();
    let sens = sensitivity(model, batches, opts.label_smoothing)?;
    let tracker = exact_similarity(model, batches)?;
    let matrices: Vec<Vec<Real>> = (0..tracker.layers.len())
        .map(|l| tracker.pairwise_matrix(l))
        .collect();
    let uniq = uniqueness_fraction(&matrices, &masks, opts.threshold)?;
    let histograms = similarity_histogram(&matrices, &masks, opts.bins)?;
    let report = RedundancyReport {
        sensitivity_total: sens.total,
        sensitivity_raw: sens.raw_total,
        sensitivity_per_layer: sens.per_layer,
        examples: sens.examples,
        uniqueness: uniq.uniqueness,
        non_unique_fraction: uniq.non_unique_fraction,
        threshold: opts.threshold,
        layer_widths: model.layer_widths(),
        kept_per_layer: masks
            .iter()
            .map(|m| m.iter().filter(|&&k| k).count())
            .collect(),
        per_layer_leftover: per_layer_leftover(&masks),
        non_unique_per_layer: uniq.non_unique_per_layer,
        histograms,
        ratios: None,
    };
    Ok((report, tracker))
}

#[cfg(test)]
mod tests;
