use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{central_difference, relative_error, Tape};
use crate::tensor::{Real, Tensor};

fn small(d: usize, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        mlp_ratio: 4,
        max_seq_len: 8,
        seed,
        ..ModelConfig::default()
    }
}

fn tokens(seed: u64, batch: usize, seq: usize, vocab: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| (0..seq).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Real {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}

#[test]
fn width_is_ratio_times_d() {
    let m = TransformerModel::new(ModelConfig {
        d_model: 32,
        n_heads: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(m.layer_widths().iter().all(|&w| w == 128));
    assert_eq!(m.blocks[0].w1.shape(), &[128, 32]);
    assert_eq!(m.blocks[0].w2.shape(), &[32, 128]);
}

#[test]
fn same_seed_same_parameters() {
    let a = TransformerModel::new(small(16, 2, 9)).unwrap();
    let b = TransformerModel::new(small(16, 2, 9)).unwrap();
    assert_eq!(a, b);
    let c = TransformerModel::new(small(16, 2, 10)).unwrap();
    assert_ne!(a.token_emb, c.token_emb);
}

#[test]
fn heads_must_divide_width() {
    let cfg = ModelConfig {
        d_model: 32,
        n_heads: 3,
        ..ModelConfig::default()
    };
    assert!(TransformerModel::new(cfg).is_err());
}

#[test]
fn out_of_range_token_is_an_error() {
    let m = TransformerModel::new(small(16, 1, 0)).unwrap();
    let err = m.logits(&[vec![1, 11]]).unwrap_err();
    assert!(matches!(
        err,
        crate::Error::TokenOutOfRange {
            token: 11,
            vocab: 11
        }
    ));
    assert!(m.logits(&[vec![0; 9]]).is_err());
}

#[test]
fn all_ones_mask_is_identity() {
    let mut m = TransformerModel::new(small(16, 2, 1)).unwrap();
    let x = tokens(0, 3, 8, 11);
    let plain = m.logits(&x).unwrap();
    let ones: Vec<Vec<bool>> = m.layer_widths().iter().map(|&w| vec![true; w]).collect();
    m.set_masks(Some(&ones)).unwrap();
    assert_eq!(plain.data(), m.logits(&x).unwrap().data());
}

#[test]
fn masked_neuron_weights_are_dead() {
    let mut m = TransformerModel::new(small(16, 2, 2)).unwrap();
    let mut masks = m.masks();
    masks[1][5] = false;
    m.set_masks(Some(&masks)).unwrap();
    let x = tokens(1, 2, 8, 11);
    let before = m.logits(&x).unwrap();
    let b = &mut m.blocks[1];
    for k in 0..16 {
        b.w1.data_mut()[5 * 16 + k] += 3.0;
        b.w2.data_mut()[k * 64 + 5] -= 7.0;
    }
    b.b1.data_mut()[5] = 100.0;
    assert_eq!(before.data(), m.logits(&x).unwrap().data());
}

#[test]
fn masking_equals_zeroing_the_group() {
    let base = TransformerModel::new(small(16, 2, 3)).unwrap();
    let mut masked = base.clone();
    let mut zeroed = base.clone();
    let mut masks = base.masks();
    for j in [0, 7, 33] {
        masks[0][j] = false;
        let b = &mut zeroed.blocks[0];
        b.w1.data_mut()[j * 16..(j + 1) * 16].fill(0.0);
        b.b1.data_mut()[j] = 0.0;
        for k in 0..16 {
            b.w2.data_mut()[k * 64 + j] = 0.0;
        }
    }
    masked.set_masks(Some(&masks)).unwrap();
    let x = tokens(2, 4, 8, 11);
    assert!(max_abs_diff(&masked.logits(&x).unwrap(), &zeroed.logits(&x).unwrap()) <= 1e-12);
}

#[test]
fn all_zero_mask_leaves_residual_path() {
    let base = TransformerModel::new(small(16, 2, 4)).unwrap();
    let mut masked = base.clone();
    let zeros: Vec<Vec<bool>> = base
        .layer_widths()
        .iter()
        .map(|&w| vec![false; w])
        .collect();
    masked.set_masks(Some(&zeros)).unwrap();
    let mut no_mlp = base.clone();
    for b in &mut no_mlp.blocks {
        b.w2.data_mut().fill(0.0);
    }
    let x = tokens(3, 2, 8, 11);
    assert_eq!(
        masked.logits(&x).unwrap().data(),
        no_mlp.logits(&x).unwrap().data()
    );
}

#[test]
fn future_tokens_do_not_leak() {
    let m = TransformerModel::new(small(16, 2, 5)).unwrap();
    let mut x = tokens(4, 1, 8, 11);
    let a = m.logits(&x).unwrap();
    x[0][5] = (x[0][5] + 1) % 11;
    let b = m.logits(&x).unwrap();
    for pos in 0..8 {
        let same = a.row(pos) == b.row(pos);
        assert_eq!(same, pos < 5, "position {pos}");
    }
}

#[test]
fn targets_shift_and_ignore_last() {
    assert_eq!(
        next_token_targets(&[vec![1, 2, 3], vec![4, 5, 6]]),
        vec![Some(2), Some(3), None, Some(5), Some(6), None]
    );
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[3, 7]));
    let loss = lm_loss(&mut tape, logits, &[Some(0), Some(6), None], 0.0).unwrap();
    assert!((tape.value(loss).item() - (7.0 as Real).ln()).abs() < 1e-12);
}

#[test]
fn confident_logits_approach_zero_loss() {
    let mut prev = Real::INFINITY;
    for gap in [1.0, 5.0, 20.0, 40.0] {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::new(vec![1, 3], vec![gap, 0.0, 0.0]).unwrap());
        let loss = lm_loss(&mut tape, logits, &[Some(0)], 0.0).unwrap();
        let loss = tape.value(loss).item();
        assert!(loss < prev);
        prev = loss;
    }
    assert!(prev < 1e-16);
}

#[test]
fn smoothed_loss_matches_closed_form() {
    let (z0, z1, eps) = (1.3, -0.4, 0.05);
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::new(vec![1, 2], vec![z0, z1]).unwrap());
    let loss = lm_loss(&mut tape, logits, &[Some(1)], eps).unwrap();
    let loss = tape.value(loss).item();
    let lse = (z0.exp() + z1.exp()).ln();
    let (lp0, lp1) = (z0 - lse, z1 - lse);
    let expected = -((1.0 - eps + eps / 2.0) * lp1 + (eps / 2.0) * lp0);
    assert!((loss - expected).abs() < 1e-14);
}

#[test]
fn all_ignored_targets_error() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(lm_loss(&mut tape, logits, &[None, None], 0.0).is_err());
}

fn model_loss(model: &TransformerModel, x: &[Vec<usize>]) -> Real {
    let mut tape = Tape::new();
    let f = model
        .forward(&mut tape, x, ForwardOptions::default())
        .unwrap();
    let loss = lm_loss(&mut tape, f.logits, &next_token_targets(x), 0.1).unwrap();
    tape.value(loss).item()
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let mut model = TransformerModel::new(ModelConfig {
        init_std: 0.3,
        ..small(16, 2, 6)
    })
    .unwrap();
    let mut masks = model.masks();
    masks[0][3] = false;
    model.set_masks(Some(&masks)).unwrap();
    let x = tokens(5, 2, 6, 11);
    let mut tape = Tape::new();
    let f = model
        .forward(
            &mut tape,
            &x,
            ForwardOptions {
                grad: true,
                ..Default::default()
            },
        )
        .unwrap();
    let loss = lm_loss(&mut tape, f.logits, &next_token_targets(&x), 0.1).unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Vec<Real>> = f
        .params
        .iter()
        .map(|&p| tape.grad(p).unwrap().to_vec())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n_params = grads.len();
    let mut worst: Real = 0.0;
    for _ in 0..20 {
        let p = rng.random_range(0..n_params);
        let i = rng.random_range(0..grads[p].len());
        let base = model.named_params()[p].1.data()[i];
        let numeric = central_difference(
            |v| {
                let mut probe = model.clone();
                probe.named_params_mut()[p].1.data_mut()[i] = v[0];
                Ok(model_loss(&probe, &x))
            },
            &[base],
            &[0],
            1e-5,
        )
        .unwrap()[0];
        if grads[p][i] == 0.0 && numeric.abs() < 1e-10 {
            continue;
        }
        worst = worst.max(relative_error(grads[p][i], numeric));
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn captured_activations_have_gradients() {
    let model = TransformerModel::new(small(16, 2, 7)).unwrap();
    let x = tokens(6, 2, 8, 11);
    let mut tape = Tape::new();
    let f = model
        .forward(
            &mut tape,
            &x,
            ForwardOptions {
                capture: true,
                ..Default::default()
            },
        )
        .unwrap();
    let loss = lm_loss(&mut tape, f.logits, &next_token_targets(&x), 0.0).unwrap();
    tape.backward(loss).unwrap();
    for &h in &f.h {
        assert_eq!(tape.shape(h), &[16, 64]);
        assert!(tape.grad(h).unwrap().iter().any(|&g| g != 0.0));
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut model = TransformerModel::new(ModelConfig {
        tie_embeddings: false,
        ..small(16, 2, 8)
    })
    .unwrap();
    let mut masks = model.masks();
    masks[1][0] = false;
    model.set_masks(Some(&masks)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut meta = toml::Table::new();
    meta.insert("step".into(), toml::Value::Integer(12));
    model.save(&path, meta.clone()).unwrap();
    let (back, meta_back) = TransformerModel::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(meta_back, meta);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = TransformerModel::new(small(16, 1, 0)).unwrap();
    let bytes = model
        .to_checkpoint(toml::Table::new())
        .unwrap()
        .to_bytes()
        .unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());

    let mut ckpt = model.to_checkpoint(toml::Table::new()).unwrap();
    ckpt.tensors[3].1 = Tensor::zeros(&[2, 2]);
    let err = TransformerModel::from_checkpoint(&ckpt)
        .unwrap_err()
        .to_string();
    assert!(err.contains("expected shape"), "{err}");
}
