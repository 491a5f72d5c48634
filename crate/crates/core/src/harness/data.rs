//! Byte-level corpus loading and the synthetic sorting task.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One training or evaluation sequence with its per-position targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// `targets[p]` is the token position `p` should predict, if scored.
    pub targets: Vec<Option<usize>>,
}

impl Example {
    /// Next-token targets with the last position unscored.
    pub fn language_model(tokens: Vec<usize>) -> Self {
        let targets = (0..tokens.len())
            .map(|p| tokens.get(p + 1).copied())
            .collect();
        Example { tokens, targets }
    }
}

/// A stack of equal-length examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    /// Flattened `[batch·seq]` targets.
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn collate(examples: &[&Example]) -> Self {
        Batch {
            tokens: examples.iter().map(|e| e.tokens.clone()).collect(),
            targets: examples
                .iter()
                .flat_map(|e| e.targets.iter().copied())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// Splits a token stream into non-overlapping blocks, dropping the tail.
pub fn blocks(tokens: &[usize], block_len: usize) -> Result<Vec<Vec<usize>>> {
    if tokens.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    if block_len == 0 || block_len > tokens.len() {
        return Err(Error::Data(format!(
            "block length {block_len} does not fit a corpus of {} tokens",
            tokens.len()
        )));
    }
    Ok(tokens
        .chunks_exact(block_len)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Disjoint train/validation blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
}

impl Corpus {
    /// Shuffles block indices with `seed` and assigns the first
    /// `valid_fraction` of them to validation (at least one when positive).
    pub fn split(blocks: Vec<Vec<usize>>, valid_fraction: f64, seed: u64) -> Result<Self> {
        let n = blocks.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_valid = (valid_fraction * n as f64).round() as usize;
        if valid_fraction > 0.0 {
            n_valid = n_valid.max(1);
        }
        if n_valid >= n {
            return Err(Error::Data(format!(
                "{n} blocks leave nothing for training at valid fraction {valid_fraction}"
            )));
        }
        let mut valid_idx = order[..n_valid].to_vec();
        let mut train_idx = order[n_valid..].to_vec();
        valid_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok(Corpus {
            train: train_idx.iter().map(|&i| blocks[i].clone()).collect(),
            valid: valid_idx.iter().map(|&i| blocks[i].clone()).collect(),
        })
    }

    pub fn load(path: &Path, block_len: usize, valid_fraction: f64, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::split(blocks(&tokenize(&bytes), block_len)?, valid_fraction, seed)
    }

    /// SHA-256 over both splits, for reproducibility checks.
    pub fn stream_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, split) in [(b't', &self.train), (b'v', &self.valid)] {
            h.update([tag]);
            for b in split {
                for &t in b {
                    h.update((t as u32).to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

pub const SORT_PREFIX: &str = "sort:";
pub const SORT_SEPARATOR: u8 = b'=';
pub const SORT_END: u8 = b'\n';

/// A digit-sorting prompt such as `sort:3142=` and its answer `1234\n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SortExample {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl SortExample {
    pub fn from_digits(digits: &[u8]) -> Self {
        let mut prompt = tokenize(SORT_PREFIX.as_bytes());
        prompt.extend(digits.iter().map(|d| (b'0' + d) as usize));
        prompt.push(SORT_SEPARATOR as usize);
        let mut sorted = digits.to_vec();
        sorted.sort_unstable();
        let mut answer: Vec<usize> = sorted.iter().map(|d| (b'0' + d) as usize).collect();
        answer.push(SORT_END as usize);
        SortExample { prompt, answer }
    }

    /// Full sequence scored only on the answer tokens.
    pub fn to_example(&self) -> Example {
        let mut tokens = self.prompt.clone();
        tokens.extend(&self.answer);
        let start = self.prompt.len() - 1;
        let targets = (0..tokens.len())
            .map(|p| (p >= start && p + 1 < tokens.len()).then(|| tokens[p + 1]))
            .collect();
        Example { tokens, targets }
    }

    pub fn text(&self) -> String {
        self.prompt
            .iter()
            .chain(&self.answer)
            .map(|&t| t as u8 as char)
            .collect()
    }
}

/// `size` prompts of `digits` distinct decimal digits each.
pub fn synth_sort_task(seed: u64, size: usize, digits: usize) -> Result<Vec<SortExample>> {
    if digits == 0 || digits > 10 {
        return Err(Error::Data(format!(
            "sort task needs 1..=10 distinct digits, got {digits}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u8> = (0..10).collect();
    Ok((0..size)
        .map(|_| {
            pool.shuffle(&mut rng);
            SortExample::from_digits(&pool[..digits])
        })
        .collect())
}

/// Train and validation prompts with no digit string shared between them.
pub fn sort_splits(
    seed: u64,
    digits: usize,
    n_train: usize,
    n_valid: usize,
) -> Result<(Vec<SortExample>, Vec<SortExample>)> {
    let available: usize = (0..digits).map(|i| 10 - i).product();
    if n_train + n_valid > available {
        return Err(Error::Data(format!(
            "only {available} distinct {digits}-digit prompts exist, {} requested",
            n_train + n_valid
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u8> = (0..10).collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n_train + n_valid);
    while out.len() < n_train + n_valid {
        pool.shuffle(&mut rng);
        if seen.insert(pool[..digits].to_vec()) {
            out.push(SortExample::from_digits(&pool[..digits]));
        }
    }
    let train = out.split_off(n_valid);
    Ok((train, out))
}

/// Training and validation examples plus deterministic batch order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    /// Validation prompts for exact-match scoring (sort task only).
    pub valid_sort: Vec<SortExample>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn from_corpus(corpus: Corpus, batch_size: usize, seed: u64) -> Self {
        Dataset {
            train: corpus
                .train
                .into_iter()
                .map(Example::language_model)
                .collect(),
            valid: corpus
                .valid
                .into_iter()
                .map(Example::language_model)
                .collect(),
            valid_sort: Vec::new(),
            batch_size,
            seed,
        }
    }

    pub fn from_sort(
        train: &[SortExample],
        valid: Vec<SortExample>,
        batch_size: usize,
        seed: u64,
    ) -> Self {
        Dataset {
            train: train.iter().map(SortExample::to_example).collect(),
            valid: valid.iter().map(SortExample::to_example).collect(),
            valid_sort: valid,
            batch_size,
            seed,
        }
    }

    /// Full batches per pass over the training set (at least one).
    pub fn batches_per_epoch(&self) -> usize {
        (self.train.len() / self.batch_size).max(1)
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// The training batch used at `step`, a pure function of seed and step.
    pub fn train_batch(&self, step: usize) -> Batch {
        let bpe = self.batches_per_epoch();
        let order = self.epoch_order(step / bpe);
        let size = self.batch_size.min(self.train.len());
        let start = (step % bpe) * size;
        let picked: Vec<&Example> = order[start..start + size]
            .iter()
            .map(|&i| &self.train[i])
            .collect();
        Batch::collate(&picked)
    }

    /// Validation examples in fixed order, chunked into batches.
    pub fn valid_batches(&self, max_examples: usize) -> Vec<Batch> {
        let n = if max_examples == 0 {
            self.valid.len()
        } else {
            max_examples.min(self.valid.len())
        };
        self.valid[..n]
            .chunks(self.batch_size)
            .map(|c| Batch::collate(&c.iter().collect::<Vec<_>>()))
            .collect()
    }

    /// Leading training examples in fixed order, chunked into batches.
    pub fn train_prefix_batches(&self, max_examples: usize) -> Vec<Batch> {
        let n = if max_examples == 0 {
            self.train.len()
        } else {
            max_examples.min(self.train.len())
        };
        self.train[..n]
            .chunks(self.batch_size)
            .map(|c| Batch::collate(&c.iter().collect::<Vec<_>>()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abab_blocks() {
        let b = blocks(&tokenize(b"abab"), 2).unwrap();
        assert_eq!(b, vec![vec![97, 98], vec![97, 98]]);
        assert_eq!(blocks(&tokenize(b"abcde"), 2).unwrap().len(), 2);
        assert!(blocks(&[], 2).is_err());
        assert!(blocks(&tokenize(b"ab"), 3).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let blocks: Vec<Vec<usize>> = (0..50).map(|i| vec![i, i + 1]).collect();
        let a = Corpus::split(blocks.clone(), 0.1, 3).unwrap();
        assert_eq!((a.train.len(), a.valid.len()), (45, 5));
        for v in &a.valid {
            assert!(!a.train.contains(v));
        }
        let b = Corpus::split(blocks.clone(), 0.1, 3).unwrap();
        assert_eq!(a.stream_hash(), b.stream_hash());
        let c = Corpus::split(blocks, 0.1, 4).unwrap();
        assert_ne!(a.stream_hash(), c.stream_hash());
        assert!(Corpus::split(vec![vec![1]], 0.5, 0).is_err());
    }

    #[test]
    fn sort_examples() {
        let e = SortExample::from_digits(&[3, 1, 4, 2]);
        assert_eq!(e.text(), "sort:3142=1234\n");
        let ex = e.to_example();
        let scored: Vec<usize> = ex.targets.iter().flatten().copied().collect();
        assert_eq!(scored, tokenize(b"1234\n"));
        assert_eq!(ex.targets[e.prompt.len() - 2], None);

        let a = synth_sort_task(7, 100, 4).unwrap();
        assert_eq!(a, synth_sort_task(7, 100, 4).unwrap());
        assert_ne!(a, synth_sort_task(8, 100, 4).unwrap());
        for x in &a {
            let mut d = x.prompt[5..9].to_vec();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 4);
        }
        assert!(synth_sort_task(0, 1, 11).is_err());

        let (tr, va) = sort_splits(2, 4, 300, 50).unwrap();
        assert_eq!((tr.len(), va.len()), (300, 50));
        assert!(va.iter().all(|v| !tr.contains(v)));
        assert!(sort_splits(2, 2, 80, 20).is_err());
    }

    #[test]
    fn batches_follow_seeded_epochs() {
        let corpus = Corpus {
            train: (0..10).map(|i| vec![i; 3]).collect(),
            valid: (0..3).map(|i| vec![100 + i; 3]).collect(),
        };
        let d = Dataset::from_corpus(corpus, 4, 1);
        assert_eq!(d.batches_per_epoch(), 2);
        assert_eq!(d.train_batch(5), d.train_batch(5));
        let first: Vec<usize> = d
            .train_batch(0)
            .tokens
            .iter()
            .chain(&d.train_batch(1).tokens)
            .map(|r| r[0])
            .collect();
        let mut uniq = first.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        assert_eq!(d.train_batch(0).targets.len(), 12);
        assert_eq!(d.valid_batches(0).len(), 1);
        assert_eq!(d.valid_batches(2)[0].len(), 2);
    }
}
