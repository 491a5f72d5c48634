use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::ModelConfig;

/// One transformer layer. The MLP computes `x + W2·(M ⊙ gelu(W1·LN(x) + b1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// `[m, d]`, one row per intermediate neuron.
    pub w1: Tensor,
    /// `[m]`.
    pub b1: Tensor,
    /// `[d, m]`, one column per intermediate neuron.
    pub w2: Tensor,
    /// Multiplier on the intermediate activation, one 0/1 entry per neuron.
    pub mask: Option<Vec<Real>>,
}

impl Block {
    pub fn width(&self) -> usize {
        self.b1.numel()
    }

    fn params(&self) -> [(&'static str, &Tensor); 15] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
        ]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 15] {
        [
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln1.beta", &mut self.ln1_beta),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    /// `[vocab, d]`.
    pub token_emb: Tensor,
    /// `[max_seq_len, d]`.
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    /// Separate `[vocab, d]` output projection when embeddings are untied.
    pub lm_head: Option<Tensor>,
}

/// What a forward pass should record beyond the logits.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Record parameters as requires-grad leaves.
    pub grad: bool,
    /// Retain gradients of the per-layer intermediate outputs `h`.
    pub capture: bool,
    /// Per-layer `[tokens, m]` multipliers applied to `h` after the mask.
    pub gains: Option<&'a [Vec<Real>]>,
}

/// Handles produced by [`TransformerModel::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch·seq, vocab]`.
    pub logits: Var,
    /// Masked intermediate output per layer, `[batch·seq, m]`.
    pub h: Vec<Var>,
    /// Parameter leaves in [`TransformerModel::named_params`] order.
    pub params: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: Real) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl TransformerModel {
    /// Initializes every weight from N(0, init_std²); biases zero, LN gains one.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, v, std) = (config.d_model, config.vocab_size, config.init_std);
        let token_emb = normal(&mut rng, &[v, d], std);
        let pos_emb = normal(&mut rng, &[config.max_seq_len, d], std);
        let blocks = config
            .layer_widths()
            .into_iter()
            .map(|m| Block {
                ln1_gamma: Tensor::full(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                wq: normal(&mut rng, &[d, d], std),
                bq: Tensor::zeros(&[d]),
                wk: normal(&mut rng, &[d, d], std),
                bk: Tensor::zeros(&[d]),
                wv: normal(&mut rng, &[d, d], std),
                bv: Tensor::zeros(&[d]),
                wo: normal(&mut rng, &[d, d], std),
                bo: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::full(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                w1: normal(&mut rng, &[m, d], std),
                b1: Tensor::zeros(&[m]),
                w2: normal(&mut rng, &[d, m], std),
                mask: None,
            })
            .collect();
        let lm_head = (!config.tie_embeddings).then(|| normal(&mut rng, &[v, d], std));
        Ok(TransformerModel {
            token_emb,
            pos_emb,
            blocks,
            lnf_gamma: Tensor::full(&[d], 1.0),
            lnf_beta: Tensor::zeros(&[d]),
            lm_head,
            config,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::width).collect()
    }

    /// Every parameter with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.params()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{l}.{n}"), t)),
            );
        }
        out.push(("lnf.gamma".into(), &self.lnf_gamma));
        out.push(("lnf.beta".into(), &self.lnf_beta));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    /// Mutable counterpart of [`named_params`](Self::named_params), same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), &mut self.token_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.params_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{l}.{n}"), t)),
            );
        }
        out.push(("lnf.gamma".into(), &mut self.lnf_gamma));
        out.push(("lnf.beta".into(), &mut self.lnf_beta));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Index into [`named_params`](Self::named_params) of a layer's `w1`, `b1`, `w2`.
    pub fn mlp_param_indices(&self, layer: usize) -> (usize, usize, usize) {
        let base = 2 + layer * 15 + 12;
        (base, base + 1, base + 2)
    }

    /// Sets per-layer neuron masks; `None` removes masking from every layer.
    pub fn set_masks(&mut self, masks: Option<&[Vec<bool>]>) -> Result<()> {
        match masks {
            None => self.blocks.iter_mut().for_each(|b| b.mask = None),
            Some(masks) => {
                if masks.len() != self.blocks.len() {
                    return Err(Error::ShapeMismatch {
                        op: "set_masks",
                        left: self.layer_widths(),
                        right: masks.iter().map(Vec::len).collect(),
                    });
                }
                for (b, m) in self.blocks.iter().zip(masks) {
                    if m.len() != b.width() {
                        return Err(Error::ShapeMismatch {
                            op: "set_masks",
                            left: self.layer_widths(),
                            right: masks.iter().map(Vec::len).collect(),
                        });
                    }
                }
                for (b, m) in self.blocks.iter_mut().zip(masks) {
                    b.mask = Some(m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect());
                }
            }
        }
        Ok(())
    }

    /// Current masks as booleans (all kept when a layer is unmasked).
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.blocks
            .iter()
            .map(|b| match &b.mask {
                Some(m) => m.iter().map(|&v| v != 0.0).collect(),
                None => vec![true; b.width()],
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if batch == 0 || seq == 0 {
            return Err(Error::invalid("forward", "empty token batch"));
        }
        if tokens.iter().any(|r| r.len() != seq) {
            return Err(Error::invalid("forward", "ragged token batch"));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::invalid(
                "forward",
                format!(
                    "sequence length {seq} exceeds max_seq_len {}",
                    self.config.max_seq_len
                ),
            ));
        }
        let vocab = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
        Ok((batch, seq))
    }

    /// Records the full model on `tape` for a `[batch][seq]` token batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[Vec<usize>],
        opts: ForwardOptions<'_>,
    ) -> Result<Forward> {
        let (batch, seq) = self.check_tokens(tokens)?;
        let n = batch * seq;
        let params: Vec<Var> = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if opts.grad {
                    tape.leaf(t.clone().with_grad())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        if let Some(g) = opts.gains {
            if g.len() != self.blocks.len() {
                return Err(Error::invalid(
                    "forward",
                    "gains must have one entry per layer",
                ));
            }
        }
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(params[0], &ids)?;
        let pos = tape.embedding(params[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let heads = self.config.n_heads;
        let mut hs = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let p = &params[2 + l * 15..2 + (l + 1) * 15];
            let a = tape.layer_norm(x, p[0], p[1])?;
            let q = tape.matmul_nt(a, p[2])?;
            let q = tape.add_row(q, p[3])?;
            let k = tape.matmul_nt(a, p[4])?;
            let k = tape.add_row(k, p[5])?;
            let v = tape.matmul_nt(a, p[6])?;
            let v = tape.add_row(v, p[7])?;
            let att = tape.causal_attention(q, k, v, batch, seq, heads)?;
            let o = tape.matmul_nt(att, p[8])?;
            let o = tape.add_row(o, p[9])?;
            x = tape.add(x, o)?;

            let a = tape.layer_norm(x, p[10], p[11])?;
            let z = tape.matmul_nt(a, p[12])?;
            let z = tape.add_row(z, p[13])?;
            let mut h = tape.gelu(z);
            if let Some(mask) = &block.mask {
                let m = tape.constant(Tensor::from_vec(mask.clone()));
                h = tape.mul_row(h, m)?;
            }
            if let Some(gains) = opts.gains {
                let g = tape.constant(Tensor::new(vec![n, block.width()], gains[l].clone())?);
                h = tape.mul(h, g)?;
            }
            if opts.capture {
                tape.retain_grad(h);
            }
            hs.push(h);
            let y = tape.matmul_nt(h, p[14])?;
            x = tape.add(x, y)?;
        }
        let base = 2 + self.blocks.len() * 15;
        let xf = tape.layer_norm(x, params[base], params[base + 1])?;
        let head = if self.lm_head.is_some() {
            params[base + 2]
        } else {
            params[0]
        };
        let logits = tape.matmul_nt(xf, head)?;
        Ok(Forward {
            logits,
            h: hs,
            params,
            batch,
            seq,
        })
    }

    /// Logits for a token batch without recording gradients.
    pub fn logits(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, tokens, ForwardOptions::default())?;
        Ok(tape.value(f.logits).clone())
    }
}

/// Next-token targets for a `[batch][seq]` block: position `t` predicts
/// token `t + 1`; the final position of each row is ignored.
pub fn next_token_targets(tokens: &[Vec<usize>]) -> Vec<Option<usize>> {
    tokens
        .iter()
        .flat_map(|row| (0..row.len()).map(move |t| row.get(t + 1).copied()))
        .collect()
}

/// Mean cross-entropy over non-ignored positions with uniform label smoothing.
pub fn lm_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[Option<usize>],
    label_smoothing: Real,
) -> Result<Var> {
    tape.cross_entropy(logits, targets, label_smoothing)
}
