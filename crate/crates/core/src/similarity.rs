//! Running cosine similarity between the intermediate neurons of each layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Real;

/// How new batches are blended into the accumulators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Exponential moving average: `C ← ρ·C + (1 − ρ)·hᵀh`.
    #[default]
    Running,
    /// Plain sums, no decay.
    #[serde(rename = "exact_no_decay", alias = "exact")]
    Exact,
}

/// Which neurons count as "left" when normalizing mean similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeftoverScope {
    /// Unmasked neurons across the whole network.
    #[default]
    Global,
    /// Unmasked neurons in the neuron's own layer.
    PerLayer,
}

/// Accumulators for one layer: `c` is `m × m`, `q` is its diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAccumulator {
    pub width: usize,
    pub c: Vec<Real>,
    pub q: Vec<Real>,
}

impl LayerAccumulator {
    fn new(width: usize) -> Self {
        LayerAccumulator {
            width,
            c: vec![0.0; width * width],
            q: vec![0.0; width],
        }
    }

    pub fn similarity(&self, i: usize, j: usize) -> Real {
        let (qi, qj) = (self.q[i], self.q[j]);
        if qi <= 0.0 || qj <= 0.0 {
            return 0.0;
        }
        if i == j {
            return 1.0;
        }
        self.c[i * self.width + j] / (qi * qj).sqrt()
    }

    /// Dense `m × m` similarity matrix.
    pub fn matrix(&self) -> Vec<Real> {
        let m = self.width;
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                out[i * m + j] = self.similarity(i, j);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTracker {
    pub mode: SimilarityMode,
    /// Weight kept on old state per running update.
    pub retention: Real,
    pub layers: Vec<LayerAccumulator>,
    pub updates: u64,
}

impl SimilarityTracker {
    pub fn new(widths: &[usize], mode: SimilarityMode, retention: Real) -> Result<Self> {
        if !(0.0..1.0).contains(&retention) {
            return Err(Error::invalid(
                "similarity",
                format!("retention {retention} outside [0, 1)"),
            ));
        }
        Ok(SimilarityTracker {
            mode,
            retention,
            layers: widths.iter().map(|&m| LayerAccumulator::new(m)).collect(),
            updates: 0,
        })
    }

    pub fn exact(widths: &[usize]) -> Self {
        Self::new(widths, SimilarityMode::Exact, 0.0).expect("valid retention")
    }

    /// Folds one batch into every layer. `acts[l]` is `[rows, m_l]`, row-major.
    pub fn update(&mut self, acts: &[&[Real]]) -> Result<()> {
        if acts.len() != self.layers.len() {
            return Err(Error::invalid(
                "similarity update",
                format!(
                    "{} activation blocks for {} layers",
                    acts.len(),
                    self.layers.len()
                ),
            ));
        }
        for (l, h) in acts.iter().enumerate() {
            let m = self.layers[l].width;
            if m == 0 {
                continue;
            }
            if h.len() % m != 0 {
                return Err(Error::ShapeMismatch {
                    op: "similarity update",
                    left: vec![m],
                    right: vec![h.len()],
                });
            }
        }
        let (keep, fresh) = match self.mode {
            SimilarityMode::Running => (self.retention, 1.0 - self.retention),
            SimilarityMode::Exact => (1.0, 1.0),
        };
        for (layer, h) in self.layers.iter_mut().zip(acts) {
            let m = layer.width;
            if m == 0 {
                continue;
            }
            let gram = kernels::gram(h, h.len() / m, m);
            for (c, g) in layer.c.iter_mut().zip(&gram) {
                *c = keep * *c + fresh * g;
            }
            for (i, q) in layer.q.iter_mut().enumerate() {
                *q = keep * *q + fresh * gram[i * m + i];
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Current similarity matrix of layer `l`.
    pub fn pairwise_matrix(&self, l: usize) -> Vec<Real> {
        self.layers[l].matrix()
    }

    /// `U_j = (1/N_left)·Σ_{i≠j} |sim(j, i)|` per layer, where `N_left`
    /// counts unmasked neurons according to `scope`.
    pub fn mean_abs_similarity(
        &self,
        masks: &[Vec<bool>],
        scope: LeftoverScope,
    ) -> Result<Vec<Vec<Real>>> {
        let widths: Vec<usize> = self.layers.iter().map(|l| l.width).collect();
        let right: Vec<usize> = masks.iter().map(Vec::len).collect();
        if widths != right {
            return Err(Error::ShapeMismatch {
                op: "mean_abs_similarity",
                left: widths,
                right,
            });
        }
        if self.updates == 0 {
            return Err(Error::invalid(
                "mean_abs_similarity",
                "no updates recorded yet",
            ));
        }
        let global_left = masks.iter().flatten().filter(|&&k| k).count();
        self.layers
            .iter()
            .zip(masks)
            .map(|(layer, mask)| {
                let n_left = match scope {
                    LeftoverScope::Global => global_left,
                    LeftoverScope::PerLayer => mask.iter().filter(|&&k| k).count(),
                };
                if n_left == 0 {
                    return Err(Error::Pruning(
                        "no unmasked neurons left to normalize similarity".into(),
                    ));
                }
                let m = layer.width;
                Ok((0..m)
                    .map(|j| {
                        let s: Real = (0..m)
                            .filter(|&i| i != j)
                            .map(|i| layer.similarity(j, i).abs())
                            .sum();
                        s / n_left as Real
                    })
                    .collect())
            })
            .collect()
    }

    /// Dense little-endian dump: magic, `u32` layer count, then per layer a
    /// `u64` width followed by the `m × m` matrix as f64.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.width as u64).to_le_bytes());
            for v in layer.matrix() {
                out.extend_from_slice(&(v as f64).to_le_bytes());
            }
        }
        out
    }
}

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"FPSIM\0\0\x01";

/// Parses [`SimilarityTracker::snapshot_bytes`] back into per-layer matrices.
pub fn read_snapshot(bytes: &[u8]) -> Result<Vec<(usize, Vec<f64>)>> {
    let bad = || Error::Data("malformed similarity snapshot".into());
    if bytes.len() < 12 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(bad());
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let w = bytes.get(pos..pos + 8).ok_or_else(bad)?;
        let m = u64::from_le_bytes(w.try_into().unwrap()) as usize;
        pos += 8;
        let len = m
            .checked_mul(m)
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(bad)?;
        let block = bytes.get(pos..pos + len).ok_or_else(bad)?;
        out.push((
            m,
            block
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ));
        pos += len;
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(out)
}
