//! Validation metrics: perplexity and greedy-decode exact match.

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::kernels::map_indexed;
use crate::model::TransformerModel;
use crate::tensor::Real;

use super::data::{Batch, SortExample};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean next-token cross-entropy over scored positions.
    pub loss: Real,
    pub perplexity: Real,
    pub tokens: usize,
    /// Present for the sorting task.
    pub exact_match: Option<Real>,
}

/// Summed negative log-likelihood and scored-token count for one batch.
pub fn batch_nll(model: &TransformerModel, batch: &Batch) -> Result<(f64, usize)> {
    let logits = model.logits(&batch.tokens)?;
    let v = logits.cols();
    let mut nll = 0.0f64;
    let mut count = 0;
    for (r, target) in batch.targets.iter().enumerate() {
        if let Some(t) = *target {
            let row = &logits.data()[r * v..(r + 1) * v];
            nll += f64::from(log_sum_exp(row) - row[t]);
            count += 1;
        }
    }
    Ok((nll, count))
}

/// Mean cross-entropy and `exp` of it over `batches`. Batches run in
/// parallel; partial sums are combined in batch order.
pub fn perplexity(model: &TransformerModel, batches: &[Batch]) -> Result<(Real, Real, usize)> {
    if batches.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let parts = map_indexed(batches.len(), |i| batch_nll(model, &batches[i]));
    let mut nll = 0.0f64;
    let mut tokens = 0;
    for p in parts {
        let (n, c) = p?;
        nll += n;
        tokens += c;
    }
    if tokens == 0 {
        return Err(Error::Data("evaluation set has no scored positions".into()));
    }
    let loss = nll / tokens as f64;
    Ok((loss as Real, loss.exp() as Real, tokens))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedily extends `prompt` by `n` tokens.
pub fn greedy_decode(model: &TransformerModel, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let logits = model.logits(std::slice::from_ref(&seq))?;
        let v = logits.cols();
        let last = &logits.data()[(seq.len() - 1) * v..seq.len() * v];
        seq.push(argmax(last));
    }
    Ok(seq.split_off(prompt.len()))
}

/// Fraction of prompts whose decoded answer matches exactly.
pub fn exact_match_with<F>(examples: &[SortExample], decode: F) -> Result<Real>
where
    F: Fn(&SortExample) -> Result<Vec<usize>> + Send + Sync,
{
    if examples.is_empty() {
        return Err(Error::Data("no exact-match prompts".into()));
    }
    let hits = map_indexed(examples.len(), |i| {
        decode(&examples[i]).map(|out| out == examples[i].answer)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as Real / examples.len() as Real)
}

pub fn exact_match(model: &TransformerModel, examples: &[SortExample]) -> Result<Real> {
    exact_match_with(examples, |e| {
        greedy_decode(model, &e.prompt, e.answer.len())
    })
}

/// Errors when a token in `batches` is outside the model's vocabulary.
pub fn check_vocab(model: &TransformerModel, batches: &[Batch]) -> Result<()> {
    let vocab = model.config.vocab_size;
    match batches
        .iter()
        .flat_map(|b| b.tokens.iter().flatten())
        .find(|&&t| t >= vocab)
    {
        Some(&t) => Err(Error::Data(format!(
            "vocabulary mismatch: dataset token {t} but model vocabulary is {vocab}"
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{synth_sort_task, tokenize, Example};
    use crate::model::ModelConfig;

    fn uniform_model() -> TransformerModel {
        let mut m = TransformerModel::new(ModelConfig {
            d_model: 16,
            n_heads: 2,
            max_seq_len: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        // zero final gain makes every logit identical
        m.lnf_gamma.data_mut().fill(0.0);
        m.lnf_beta.data_mut().fill(0.0);
        m
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let m = uniform_model();
        let ex = Example::language_model(tokenize(b"hello wo"));
        let (loss, ppl, tokens) = perplexity(&m, &[Batch::collate(&[&ex, &ex])]).unwrap();
        assert_eq!(tokens, 14);
        assert!((ppl - 256.0).abs() < 1e-9, "{ppl}");
        assert!((loss - (256.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let m = TransformerModel::new(ModelConfig {
            d_model: 16,
            n_heads: 2,
            max_seq_len: 16,
            ..ModelConfig::default()
        })
        .unwrap();
        let task = synth_sort_task(1, 6, 4).unwrap();
        let b: Vec<Batch> = task
            .chunks(3)
            .map(|c| {
                let ex: Vec<Example> = c.iter().map(SortExample::to_example).collect();
                Batch::collate(&ex.iter().collect::<Vec<_>>())
            })
            .collect();
        assert_eq!(perplexity(&m, &b).unwrap(), perplexity(&m, &b).unwrap());
        assert_eq!(
            exact_match(&m, &task).unwrap(),
            exact_match(&m, &task).unwrap()
        );
    }

    #[test]
    fn copying_scores_only_the_already_sorted_share() {
        // 4 distinct digits are already sorted with probability 1/24
        let task = synth_sort_task(11, 4800, 4).unwrap();
        let copy = |e: &SortExample| {
            let mut out = e.prompt[5..9].to_vec();
            out.push(b'\n' as usize);
            Ok(out)
        };
        let acc = exact_match_with(&task, copy).unwrap();
        let p = 1.0 / 24.0;
        let sd = (p * (1.0 - p) / 4800.0 as Real).sqrt();
        assert!((acc - p).abs() < 4.0 * sd, "{acc}");
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let m = TransformerModel::new(ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            max_seq_len: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        let ex = Example::language_model(tokenize(b"ab"));
        assert!(check_vocab(&m, &[Batch::collate(&[&ex])]).is_err());
        assert!(perplexity(&m, &[]).is_err());
    }
}
