//! Tokenized corpora, random training windows and evaluation windows.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::SeqLayout;
use crate::tokenizer::{self, PAD, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub ids: Vec<usize>,
    pub vocab_size: usize,
    pub source: Option<PathBuf>,
    pub byte_count: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Corpus {
            ids: tokenizer::tokenize(bytes),
            vocab_size: VOCAB_SIZE,
            source: None,
            byte_count: bytes.len(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Corpus {
            source: Some(path.to_path_buf()),
            ..Self::from_bytes(&bytes)
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Splits off the trailing `fraction` of tokens as a held-out corpus.
    pub fn split(&self, fraction: f64) -> (Corpus, Corpus) {
        let cut = ((1.0 - fraction) * self.ids.len() as f64).round() as usize;
        let part = |ids: &[usize]| Corpus {
            ids: ids.to_vec(),
            vocab_size: self.vocab_size,
            source: self.source.clone(),
            byte_count: ids.iter().filter(|&&i| i < 256).count(),
        };
        (part(&self.ids[..cut]), part(&self.ids[cut..]))
    }

    /// Non-overlapping next-token windows of length `seq` (stride `seq`);
    /// the final partial window is padded and its padding masked.
    pub fn eval_windows(&self, seq: usize) -> Result<Vec<Batch>> {
        if self.ids.len() < 2 {
            return Err(Error::Empty("corpus has no next-token pairs"));
        }
        let pairs = self.ids.len() - 1;
        let mut out = Vec::with_capacity(pairs.div_ceil(seq));
        let mut start = 0;
        while start < pairs {
            let n = (pairs - start).min(seq);
            let mut inputs = self.ids[start..start + n].to_vec();
            let mut targets: Vec<Option<usize>> =
                self.ids[start + 1..start + n + 1].iter().map(|&t| Some(t)).collect();
            inputs.resize(seq, PAD);
            targets.resize(seq, None);
            out.push(Batch {
                inputs,
                targets,
                layout: SeqLayout { batch: 1, seq },
            });
            start += seq;
        }
        Ok(out)
    }
}

/// Flattened `batch × seq` inputs with their next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub layout: SeqLayout,
}

impl Batch {
    /// Concatenates single-sequence batches of equal length.
    pub fn stack(parts: &[Batch]) -> Batch {
        let seq = parts[0].layout.seq;
        Batch {
            inputs: parts.iter().flat_map(|b| b.inputs.iter().copied()).collect(),
            targets: parts.iter().flat_map(|b| b.targets.iter().copied()).collect(),
            layout: SeqLayout {
                batch: parts.iter().map(|b| b.layout.batch).sum(),
                seq,
            },
        }
    }
}

/// Seeded stream of random contiguous training windows.
pub struct BatchStream<'c> {
    corpus: &'c Corpus,
    batch: usize,
    seq: usize,
    rng: ChaCha8Rng,
}

impl<'c> BatchStream<'c> {
    pub fn new(corpus: &'c Corpus, batch: usize, seq: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::Config("batch and seq must be positive".into()));
        }
        let need = batch * (seq + 1);
        if corpus.len() < need {
            return Err(Error::CorpusTooSmall(format!(
                "{} tokens, need at least {need} for batch {batch} × seq {seq}",
                corpus.len()
            )));
        }
        Ok(BatchStream {
            corpus,
            batch,
            seq,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let max_start = self.corpus.len() - self.seq - 1;
        let mut inputs = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        for _ in 0..self.batch {
            let o = self.rng.gen_range(0..=max_start);
            let w = &self.corpus.ids[o..o + self.seq + 1];
            inputs.extend_from_slice(&w[..self.seq]);
            targets.extend(w[1..].iter().map(|&t| Some(t)));
        }
        Batch {
            inputs,
            targets,
            layout: SeqLayout {
                batch: self.batch,
                seq: self.seq,
            },
        }
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Seeded random windows, as an endless iterator.
pub fn batch_stream(corpus: &Corpus, batch: usize, seq: usize, seed: u64) -> Result<BatchStream<'_>> {
    BatchStream::new(corpus, batch, seq, ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Corpus {
        Corpus::from_bytes(&(0..500u32).map(|i| (i % 251) as u8).collect::<Vec<_>>())
    }

    #[test]
    fn targets_are_shifted_inputs() {
        let c = corpus();
        let b = batch_stream(&c, 3, 10, 1).unwrap().next().unwrap();
        for row in 0..3 {
            for t in 0..9 {
                assert_eq!(b.targets[row * 10 + t], Some(b.inputs[row * 10 + t + 1]));
            }
        }
    }

    #[test]
    fn same_seed_same_windows() {
        let c = corpus();
        let a: Vec<_> = batch_stream(&c, 2, 8, 9).unwrap().take(5).collect();
        let b: Vec<_> = batch_stream(&c, 2, 8, 9).unwrap().take(5).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_is_rejected() {
        let c = Corpus::from_bytes(b"tiny");
        assert!(matches!(batch_stream(&c, 1, 64, 0), Err(Error::CorpusTooSmall(_))));
    }

    #[test]
    fn eval_windows_cover_every_pair_once() {
        let c = corpus();
        let w = c.eval_windows(64).unwrap();
        let counted: usize = w.iter().map(|b| b.targets.iter().flatten().count()).sum();
        assert_eq!(counted, c.len() - 1);
        let last = w.last().unwrap();
        assert!(last.inputs.contains(&PAD));
        assert!(Corpus::from_bytes(b"").eval_windows(4).is_err());
    }
}
