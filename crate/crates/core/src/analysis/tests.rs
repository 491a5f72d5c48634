use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::central_difference;
use crate::model::ModelConfig;
use crate::pruning::{select_global_topv, select_local_topv};
use crate::tensor::Tensor;

fn toy(seed: u64) -> TransformerModel {
    TransformerModel::new(ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        max_seq_len: 6,
        init_std: 0.4,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn batches(seed: u64, n: usize, batch: usize, seq: usize) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..batch)
                .map(|_| (0..seq).map(|_| rng.random_range(0..7)).collect())
                .collect()
        })
        .collect()
}

#[test]
fn quadratic_single_neuron() {
    let mut tape = Tape::new();
    let h = tape.leaf(Tensor::from_vec(vec![2.0]).with_grad());
    let sq = tape.mul(h, h).unwrap();
    let half = tape.scale(sq, 0.5);
    let loss = tape.sum(half);
    tape.backward(loss).unwrap();
    let mut acc = vec![0.0];
    accumulate_sensitivity(tape.data(h), tape.grad(h).unwrap(), &mut acc);
    assert_eq!(acc, vec![4.0]);
}

#[test]
fn sensitivity_matches_per_token_gain_oracle() {
    let mut model = toy(1);
    let mut masks = model.masks();
    masks[0][2] = false;
    model.set_masks(Some(&masks)).unwrap();
    let data = batches(2, 2, 1, 4);
    let sens = sensitivity(&model, &data, 0.0).unwrap();
    assert_eq!(sens.per_neuron[0][2], 0.0);

    // h·∂L/∂h at one (token, neuron) equals ∂L/∂g for a multiplicative gain g on it
    let widths = model.layer_widths();
    let mut oracle: Vec<Vec<Real>> = widths.iter().map(|&m| vec![0.0; m]).collect();
    for batch in &data {
        let tokens = batch.len() * batch[0].len();
        for (l, &m) in widths.iter().enumerate() {
            for t in 0..tokens {
                for j in 0..m {
                    let d = central_difference(
                        |g| {
                            let mut gains: Vec<Vec<Real>> =
                                widths.iter().map(|&w| vec![1.0; tokens * w]).collect();
                            gains[l][t * m + j] = g[0];
                            let mut tape = Tape::new();
                            let f = model
                                .forward(
                                    &mut tape,
                                    batch,
                                    ForwardOptions {
                                        gains: Some(&gains),
                                        ..Default::default()
                                    },
                                )
                                .unwrap();
                            let loss =
                                lm_loss(&mut tape, f.logits, &next_token_targets(batch), 0.0)
                                    .unwrap();
                            Ok(tape.value(loss).item())
                        },
                        &[1.0],
                        &[0],
                        1e-5,
                    )
                    .unwrap()[0];
                    oracle[l][j] += d.abs();
                }
            }
        }
    }
    for l in 0..2 {
        for j in 0..widths[l] {
            assert!(
                (sens.per_neuron[l][j] - oracle[l][j]).abs() <= 1e-8,
                "layer {l} neuron {j}"
            );
        }
    }
    let raw: Real = oracle.iter().flatten().sum();
    assert!((sens.raw_total - raw).abs() <= 1e-8);
    assert!((sens.total - raw / 2.0).abs() <= 1e-8);
}

#[test]
fn sensitivity_ignores_neuron_order() {
    let model = toy(3);
    let mut permuted = model.clone();
    let (d, m) = (8, 16);
    let perm: Vec<usize> = (0..m).rev().collect();
    let b = &model.blocks[1];
    let p = &mut permuted.blocks[1];
    for (new, &old) in perm.iter().enumerate() {
        p.w1.data_mut()[new * d..(new + 1) * d].copy_from_slice(b.w1.row(old));
        p.b1.data_mut()[new] = b.b1.data()[old];
        for k in 0..d {
            p.w2.data_mut()[k * m + new] = b.w2.data()[k * m + old];
        }
    }
    let data = batches(4, 2, 2, 5);
    let a = sensitivity(&model, &data, 0.0).unwrap();
    let c = sensitivity(&permuted, &data, 0.0).unwrap();
    assert!((a.total - c.total).abs() <= 1e-12 * a.total.max(1.0));
    assert!(sensitivity(&model, &[], 0.0).is_err());
}

fn orthogonal(m: usize) -> Vec<Real> {
    let mut s = vec![0.0; m * m];
    for i in 0..m {
        s[i * m + i] = 1.0;
    }
    s
}

#[test]
fn uniqueness_counts() {
    let u = uniqueness_fraction(&[orthogonal(10)], &[vec![true; 10]], 0.8).unwrap();
    assert_eq!(u.non_unique_fraction, 0.0);
    assert_eq!(u.uniqueness, 1.0);

    let mut s = orthogonal(10);
    s[3 * 10 + 7] = 1.0;
    s[7 * 10 + 3] = 1.0;
    let u = uniqueness_fraction(&[s.clone()], &[vec![true; 10]], 0.8).unwrap();
    assert_eq!(u.non_unique_fraction, 0.2);
    assert_eq!(u.non_unique_per_layer, vec![2]);

    // pruning one member leaves the other unique
    let mut mask = vec![true; 10];
    mask[7] = false;
    let u = uniqueness_fraction(&[s], &[mask], 0.8).unwrap();
    assert_eq!(u.non_unique_fraction, 0.0);
    assert_eq!(u.survivors_per_layer, vec![9]);
}

#[test]
fn uniqueness_matches_direct_scan_and_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (rows, m) = (6, 12);
    let mut h: Vec<Real> = (0..rows * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    for r in 0..rows {
        h[r * m + 5] = 0.9 * h[r * m + 4] + 0.1 * h[r * m + 5];
    }
    let mut t = SimilarityTracker::exact(&[m]);
    t.update(&[&h]).unwrap();
    let mask = vec![true; m];
    let s = t.pairwise_matrix(0);
    let u = uniqueness_fraction(&[s.clone()], &[mask.clone()], 0.8).unwrap();
    let mut count = 0;
    for j in 0..m {
        let mut hit = false;
        for i in 0..m {
            if i == j {
                continue;
            }
            let (mut dot, mut a, mut b) = (0.0, 0.0, 0.0);
            for r in 0..rows {
                dot += h[r * m + i] * h[r * m + j];
                a += h[r * m + i] * h[r * m + i];
                b += h[r * m + j] * h[r * m + j];
            }
            hit |= (dot / (a * b).sqrt()).abs() > 0.8;
        }
        count += usize::from(hit);
    }
    assert!(count >= 2);
    assert_eq!(u.non_unique_per_layer[0], count);

    let mut scaled = h.clone();
    for r in 0..rows {
        for j in 0..m {
            scaled[r * m + j] *= 1.0 + j as Real;
        }
    }
    let mut t2 = SimilarityTracker::exact(&[m]);
    t2.update(&[&scaled]).unwrap();
    let u2 = uniqueness_fraction(&[t2.pairwise_matrix(0)], &[mask], 0.8).unwrap();
    assert_eq!(u, u2);
}

#[test]
fn histogram_partitions_survivors() {
    let mut s = orthogonal(6);
    s[1] = 0.95;
    s[6] = 0.95;
    s[2 * 6 + 3] = -0.45;
    s[3 * 6 + 2] = -0.45;
    let h = similarity_histogram(
        &[s, orthogonal(4)],
        &[vec![true; 6], vec![true, false, true, true]],
        10,
    )
    .unwrap();
    assert_eq!(h[0].counts, vec![2, 0, 0, 0, 2, 0, 0, 0, 0, 2]);
    assert_eq!(h[1].counts[0], 3);
    assert_eq!(h[1].survivors, 3);
    for layer in &h {
        assert!((layer.shares.iter().sum::<Real>() - 1.0).abs() <= 1e-12);
    }
    assert!(similarity_histogram(&[orthogonal(2)], &[vec![true; 3]], 10).is_err());
}

#[test]
fn leftover_per_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scores: Vec<Vec<Real>> = (0..4)
        .map(|_| (0..20).map(|_| rng.random::<Real>()).collect())
        .collect();
    let local = select_local_topv(&scores, 0.25).unwrap();
    assert_eq!(per_layer_leftover(&local), vec![0.25; 4]);

    let rising: Vec<Vec<Real>> = (0..4)
        .map(|l| {
            (0..20)
                .map(|_| rng.random::<Real>() + l as Real * 0.3)
                .collect()
        })
        .collect();
    let global = select_global_topv(&rising, 0.4).unwrap();
    let left = per_layer_leftover(&global);
    assert!(left.windows(2).all(|w| w[0] <= w[1]), "{left:?}");
    let kept: Real = left.iter().map(|v| v * 20.0).sum();
    assert_eq!(kept.round() as usize, 32);
}

fn report(sens: Real, uniq: Real) -> RedundancyReport {
    RedundancyReport {
        sensitivity_total: sens,
        sensitivity_raw: sens * 10.0,
        sensitivity_per_layer: vec![sens],
        examples: 10,
        uniqueness: uniq,
        non_unique_fraction: 1.0 - uniq,
        threshold: 0.8,
        layer_widths: vec![4],
        kept_per_layer: vec![4],
        per_layer_leftover: vec![1.0],
        non_unique_per_layer: vec![0],
        histograms: vec![LayerHistogram {
            counts: vec![4, 0],
            shares: vec![1.0, 0.0],
            survivors: 4,
        }],
        ratios: None,
    }
}

#[test]
fn ratios_are_capped() {
    let base = report(2.0, 0.9);
    let same = report(2.0, 0.9)
        .ratio_report(&base, "base")
        .unwrap()
        .ratios
        .unwrap();
    assert_eq!(same.sensitivity.capped, 1.0);
    let half = report(1.0, 0.45)
        .ratio_report(&base, "base")
        .unwrap()
        .ratios
        .unwrap();
    assert_eq!(half.sensitivity.capped, 0.5);
    assert_eq!(half.uniqueness.capped, 0.5);
    let over = report(2.6, 0.9)
        .ratio_report(&base, "base")
        .unwrap()
        .ratios
        .unwrap();
    assert_eq!(over.sensitivity.capped, 1.0);
    assert!((over.sensitivity.raw - 1.3).abs() < 1e-15);
    assert!(report(1.0, 1.0)
        .ratio_report(&report(0.0, 1.0), "zero")
        .is_err());
}

#[test]
fn analyze_and_bundle_round_trip() {
    let model = toy(7);
    let data = batches(8, 2, 2, 6);
    let (rep, tracker) = analyze(&model, &data, AnalysisOptions::default()).unwrap();
    assert_eq!(rep.layer_widths, vec![16, 16]);
    assert_eq!(rep.histograms[0].counts.iter().sum::<usize>(), 16);
    let dir = tempfile::tempdir().unwrap();
    write_report_bundle(dir.path(), &rep, Some(&tracker), "abc123").unwrap();
    let (back, hash) = read_report(dir.path()).unwrap();
    assert_eq!(back, rep);
    assert_eq!(hash, "abc123");
    let csv = std::fs::read_to_string(dir.path().join("layers.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",abc123")));
    let bin = std::fs::read(dir.path().join("similarity.bin")).unwrap();
    let (h, mats) = read_similarity_bin(&bin).unwrap();
    assert_eq!(h, "abc123");
    assert_eq!(mats[1].1, tracker.pairwise_matrix(1));
}
