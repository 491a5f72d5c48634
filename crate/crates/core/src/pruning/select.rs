use std::cmp::Ordering;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// `round(v·n)` with halves rounded up, clamped to `n`.
pub fn round_half_up(v: Real, n: usize) -> usize {
    ((v * n as Real + 0.5).floor() as usize).min(n)
}

fn check_leftover(op: &'static str, v: Real) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("leftover {v} outside (0, 1]")))
    }
}

/// Number of groups kept out of `n` at leftover `v`.
pub fn target_count(v: Real, n: usize) -> Result<usize> {
    check_leftover("target_count", v)?;
    Ok(round_half_up(v, n))
}

/// Higher score first; equal scores keep the lower (layer, index) first.
/// NaN ranks below everything.
fn ranking(scores: &[(usize, usize, Real)]) -> Vec<usize> {
    let key = |x: Real| if x.is_nan() { Real::NEG_INFINITY } else { x };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (la, ia, sa) = scores[a];
        let (lb, ib, sb) = scores[b];
        key(sb)
            .partial_cmp(&key(sa))
            .unwrap_or(Ordering::Equal)
            .then(la.cmp(&lb))
            .then(ia.cmp(&ib))
    });
    order
}

fn keep_top(scores: &[Vec<Real>], k: usize) -> Vec<Vec<bool>> {
    let flat: Vec<(usize, usize, Real)> = scores
        .iter()
        .enumerate()
        .flat_map(|(l, s)| s.iter().enumerate().map(move |(i, &x)| (l, i, x)))
        .collect();
    let mut masks: Vec<Vec<bool>> = scores.iter().map(|s| vec![false; s.len()]).collect();
    for &idx in ranking(&flat).iter().take(k) {
        let (l, i, _) = flat[idx];
        masks[l][i] = true;
    }
    masks
}

/// Keeps the `round(v·m)` highest scores in each layer independently.
pub fn select_local_topv(scores: &[Vec<Real>], v: Real) -> Result<Vec<Vec<bool>>> {
    check_leftover("select_local_topv", v)?;
    Ok(scores
        .iter()
        .map(|s| keep_top(std::slice::from_ref(s), round_half_up(v, s.len())).remove(0))
        .collect())
}

/// Keeps the `round(v·total)` highest scores across all layers jointly.
pub fn select_global_topv(scores: &[Vec<Real>], v: Real) -> Result<Vec<Vec<bool>>> {
    check_leftover("select_global_topv", v)?;
    let total = scores.iter().map(Vec::len).sum();
    Ok(keep_top(scores, round_half_up(v, total)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSelection {
    pub masks: Vec<Vec<bool>>,
    /// The threshold kept fewer than the target, so global top scores were used.
    pub fallback: bool,
    /// The threshold kept more than the target.
    pub under_pruned: bool,
}

/// Keeps groups with `sigmoid(S) > τ`, falling back to global top-v when
/// that would leave fewer than `round(v·total)`.
pub fn select_threshold(scores: &[Vec<Real>], tau: Real, v: Real) -> Result<ThresholdSelection> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(
            "select_threshold",
            format!("threshold {tau} outside (0, 1)"),
        ));
    }
    check_leftover("select_threshold", v)?;
    let masks: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| s.iter().map(|&x| sigmoid(x) > tau).collect())
        .collect();
    let total: usize = scores.iter().map(Vec::len).sum();
    let kept: usize = masks.iter().flatten().filter(|&&k| k).count();
    let target = round_half_up(v, total);
    if kept < target {
        return Ok(ThresholdSelection {
            masks: keep_top(scores, target),
            fallback: true,
            under_pruned: false,
        });
    }
    Ok(ThresholdSelection {
        masks,
        fallback: false,
        under_pruned: kept > target,
    })
}
