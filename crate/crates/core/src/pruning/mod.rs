//! Neuron-group scoring, mask selection, score regularizers and compaction.

mod compact;
mod scores;
mod select;

pub use compact::{compact, compacted_param_count, Compaction};
pub use scores::{group_movement, magnitude_scores, movement_score_grads, Aggregation};
pub use select::{
    round_half_up, select_global_topv, select_local_topv, select_threshold, target_count,
    ThresholdSelection,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::{Real, Tensor};

/// Scoring criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Magnitude,
    Random,
    #[serde(rename = "hard", alias = "hard_movement")]
    HardMovement,
    #[serde(rename = "soft", alias = "soft_movement")]
    SoftMovement,
    Gum,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Magnitude,
        Method::Random,
        Method::HardMovement,
        Method::SoftMovement,
        Method::Gum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::Random => "random",
            Method::HardMovement => "hard",
            Method::SoftMovement => "soft",
            Method::Gum => "gum",
        }
    }

    /// Scores learned from weight movement (hard, soft, GUM).
    pub fn is_movement(self) -> bool {
        matches!(
            self,
            Method::HardMovement | Method::SoftMovement | Method::Gum
        )
    }

    pub fn default_selection(self) -> Selection {
        match self {
            Method::SoftMovement => Selection::Threshold,
            Method::Gum => Selection::GlobalTopv,
            _ => Selection::LocalTopv,
        }
    }

    /// Mask learning rate used when none is configured.
    pub fn default_mask_lr(self) -> Real {
        match self {
            Method::SoftMovement => 1e1,
            _ => 1e-2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Method::Magnitude),
            "random" => Ok(Method::Random),
            "hard" | "hard_movement" => Ok(Method::HardMovement),
            "soft" | "soft_movement" => Ok(Method::SoftMovement),
            "gum" => Ok(Method::Gum),
            other => Err(Error::Pruning(format!(
                "unknown pruning method {other:?} (expected magnitude, random, hard, soft or gum)"
            ))),
        }
    }
}

/// How scores become a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    LocalTopv,
    GlobalTopv,
    Threshold,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::LocalTopv => "local_topv",
            Selection::GlobalTopv => "global_topv",
            Selection::Threshold => "threshold",
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of one mask recompute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionOutcome {
    pub kept: usize,
    pub target: usize,
    /// Threshold selection over-pruned and fell back to global top scores.
    pub fallback: bool,
    /// Threshold selection kept more than the target.
    pub under_pruned: bool,
}

/// Per-layer scores and masks plus the settings that govern them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub method: Method,
    pub selection: Selection,
    pub scores: Vec<Vec<Real>>,
    pub masks: Vec<Vec<bool>>,
    pub mask_lr: Real,
    /// Sigmoid threshold for [`Selection::Threshold`].
    pub threshold: Real,
}

impl MaskState {
    /// Initial scores for `method`: zeros for movement methods, frozen
    /// U(0, 1) draws for random, group norms for magnitude. Masks start all-ones.
    pub fn init(method: Method, model: &TransformerModel, seed: u64) -> Self {
        let widths = model.layer_widths();
        let scores = match method {
            Method::Magnitude => magnitude_scores(model),
            Method::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5c0e);
                widths
                    .iter()
                    .map(|&m| (0..m).map(|_| rng.random::<Real>()).collect())
                    .collect()
            }
            _ => widths.iter().map(|&m| vec![0.0; m]).collect(),
        };
        MaskState {
            method,
            selection: method.default_selection(),
            masks: widths.iter().map(|&m| vec![true; m]).collect(),
            scores,
            mask_lr: method.default_mask_lr(),
            threshold: 0.5,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.masks.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.masks.iter().map(Vec::len).sum()
    }

    pub fn kept_per_layer(&self) -> Vec<usize> {
        self.masks
            .iter()
            .map(|m| m.iter().filter(|&&k| k).count())
            .collect()
    }

    pub fn kept(&self) -> usize {
        self.kept_per_layer().iter().sum()
    }

    /// Overall surviving fraction.
    pub fn leftover(&self) -> Real {
        let total = self.total();
        if total == 0 {
            return 1.0;
        }
        self.kept() as Real / total as Real
    }

    /// Recomputes masks at leftover target `v` using the configured selection.
    pub fn select(&mut self, v: Real) -> Result<SelectionOutcome> {
        let (masks, fallback, under_pruned) = match self.selection {
            Selection::LocalTopv => (select_local_topv(&self.scores, v)?, false, false),
            Selection::GlobalTopv => (select_global_topv(&self.scores, v)?, false, false),
            Selection::Threshold => {
                let t = select_threshold(&self.scores, self.threshold, v)?;
                (t.masks, t.fallback, t.under_pruned)
            }
        };
        self.masks = masks;
        let target = match self.selection {
            Selection::LocalTopv => self.widths().iter().map(|&m| round_half_up(v, m)).sum(),
            _ => round_half_up(v, self.total()),
        };
        Ok(SelectionOutcome {
            kept: self.kept(),
            target,
            fallback,
            under_pruned,
        })
    }

    /// Replaces magnitude scores with the model's current group norms.
    pub fn refresh_magnitude(&mut self, model: &TransformerModel) {
        if self.method == Method::Magnitude {
            self.scores = magnitude_scores(model);
        }
    }

    /// Plain score descent `S ← S − η_S·grad`. Random scores never move.
    pub fn sgd_step(&mut self, grads: &[Vec<Real>]) -> Result<()> {
        self.check_layout("sgd_step", grads)?;
        if self.method == Method::Random || self.method == Method::Magnitude {
            return Ok(());
        }
        for (s, g) in self.scores.iter_mut().zip(grads) {
            for (s, g) in s.iter_mut().zip(g) {
                *s -= self.mask_lr * g;
            }
        }
        Ok(())
    }

    pub(crate) fn check_layout(&self, op: &'static str, other: &[Vec<Real>]) -> Result<()> {
        let right: Vec<usize> = other.iter().map(Vec::len).collect();
        if right != self.widths() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.widths(),
                right,
            });
        }
        Ok(())
    }

    /// Installs the current masks into `model`.
    pub fn apply(&self, model: &mut TransformerModel) -> Result<()> {
        apply_masks(model, self)
    }

    /// Records each layer's scores as a requires-grad leaf.
    pub fn score_leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.scores
            .iter()
            .map(|s| tape.leaf(Tensor::from_vec(s.clone()).with_grad()))
            .collect()
    }

    /// Structured text listing scores, masks and kept counts per layer.
    pub fn to_dump(&self) -> Result<String> {
        let dump = MaskDump {
            method: self.method,
            selection: self.selection,
            leftover: self.leftover(),
            layers: self
                .scores
                .iter()
                .zip(&self.masks)
                .enumerate()
                .map(|(index, (s, m))| LayerDump {
                    index,
                    width: m.len(),
                    kept: m.iter().filter(|&&k| k).count(),
                    scores: s.iter().map(|&x| x as f64).collect(),
                    mask: m.iter().map(|&k| u8::from(k)).collect(),
                })
                .collect(),
        };
        Ok(toml::to_string(&dump)?)
    }

    /// Parses a dump written by [`to_dump`](Self::to_dump).
    pub fn from_dump(text: &str) -> Result<MaskDump> {
        let dump: MaskDump = toml::from_str(text)?;
        for l in &dump.layers {
            if l.scores.len() != l.width || l.mask.len() != l.width {
                return Err(Error::Pruning(format!(
                    "layer {} dump has inconsistent lengths",
                    l.index
                )));
            }
        }
        Ok(dump)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDump {
    pub method: Method,
    pub selection: Selection,
    pub leftover: f64,
    pub layers: Vec<LayerDump>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDump {
    pub index: usize,
    pub width: usize,
    pub kept: usize,
    pub scores: Vec<f64>,
    pub mask: Vec<u8>,
}

impl MaskDump {
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.layers
            .iter()
            .map(|l| l.mask.iter().map(|&k| k != 0).collect())
            .collect()
    }
}

/// Makes `model` use the masks in `state`.
pub fn apply_masks(model: &mut TransformerModel, state: &MaskState) -> Result<()> {
    model.set_masks(Some(&state.masks))
}

/// `λ · Σ sigmoid(S)` over every group of every layer.
pub fn score_regularization(tape: &mut Tape, scores: &[Var], weight: Real) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &s in scores {
        let sig = tape.sigmoid(s);
        let sum = tape.sum(sig);
        total = Some(match total {
            Some(t) => tape.add(t, sum)?,
            None => sum,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("score_regularization", "no score layers"))?;
    Ok(tape.scale(total, weight))
}

/// `λ · Σ_j U_j · sigmoid(S_j)` with `U` held constant.
pub fn gum_regularization(
    tape: &mut Tape,
    scores: &[Var],
    uniqueness: &[Vec<Real>],
    weight: Real,
) -> Result<Var> {
    if scores.len() != uniqueness.len() {
        return Err(Error::invalid(
            "gum_regularization",
            "one U vector per layer required",
        ));
    }
    let mut total: Option<Var> = None;
    for (&s, u) in scores.iter().zip(uniqueness) {
        let sig = tape.sigmoid(s);
        let u = tape.constant(Tensor::from_vec(u.clone()));
        let weighted = tape.mul(sig, u)?;
        let sum = tape.sum(weighted);
        total = Some(match total {
            Some(t) => tape.add(t, sum)?,
            None => sum,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("gum_regularization", "no score layers"))?;
    Ok(tape.scale(total, weight))
}
