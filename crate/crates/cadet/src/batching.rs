//! Sequence packing into fixed-budget contiguous buffers and
//! recency-anchored chunking.
//!
//! Packing aggregates sequences greedily in arrival order until the next one
//! would exceed the token budget, then pads the batch to exactly the budget.
//! Attention across packed sequences is impossible by construction: the mask
//! predicates refuse cross-sequence pairs via the offset table, and padding
//! tokens belong to no sequence at all.
//!
//! Chunking partitions a long history from the most recent end, so recent
//! chunks are always full-length and only the oldest may run short. Each
//! chunk becomes an independent training example; timestamps stay absolute,
//! so temporal structure survives.

use crate::error::{Error, Result};
use crate::events::{InterleavedSequence, SeqToken, TokenKind};

/// Contiguous token buffer holding several packed sequences plus padding.
#[derive(Clone, Debug)]
pub struct PackedBatch<Tok> {
    /// Exactly `token_budget` entries; real tokens first, padding after.
    pub tokens: Vec<Tok>,
    /// Prefix-sum sequence boundaries, `n_seqs + 1` entries starting at 0.
    pub offsets: Vec<usize>,
    pub seq_lengths: Vec<usize>,
    pub pad_count: usize,
    pub token_budget: usize,
}

impl<Tok> PackedBatch<Tok> {
    pub fn n_seqs(&self) -> usize {
        self.seq_lengths.len()
    }

    pub fn real_tokens(&self) -> usize {
        self.token_budget - self.pad_count
    }

    pub fn seq_tokens(&self, i: usize) -> &[Tok] {
        &self.tokens[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.tokens.len() != self.token_budget {
            return Err(Error::Shape(format!(
                "packed batch holds {} tokens, budget {}",
                self.tokens.len(),
                self.token_budget
            )));
        }
        if self.offsets.first() != Some(&0) {
            return Err(Error::Shape("offsets must start at 0".into()));
        }
        if self.offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("offsets must be strictly increasing".into()));
        }
        let last = *self.offsets.last().unwrap();
        if last + self.pad_count != self.token_budget {
            return Err(Error::Shape(format!(
                "offsets end at {last}, pad {} does not reach budget {}",
                self.pad_count, self.token_budget
            )));
        }
        if self.seq_lengths.iter().sum::<usize>() != last {
            return Err(Error::Shape("sequence lengths disagree with offsets".into()));
        }
        Ok(())
    }
}

/// Greedy first-fit packing in arrival order. A batch is emitted when the
/// next sequence would overflow the budget; every emitted batch is padded to
/// exactly `token_budget` tokens with `pad()`.
pub fn pack<Tok: Clone>(
    sequences: &[Vec<Tok>],
    token_budget: usize,
    mut pad: impl FnMut() -> Tok,
) -> Result<Vec<PackedBatch<Tok>>> {
    if token_budget == 0 {
        return Err(Error::Config("token budget must be positive".into()));
    }
    for s in sequences {
        if s.len() > token_budget {
            return Err(Error::SequenceTooLong {
                len: s.len(),
                budget: token_budget,
            });
        }
    }

    let mut batches = Vec::new();
    let mut tokens: Vec<Tok> = Vec::with_capacity(token_budget);
    let mut offsets = vec![0usize];
    let mut seq_lengths = Vec::new();

    let mut flush = |tokens: &mut Vec<Tok>,
                     offsets: &mut Vec<usize>,
                     seq_lengths: &mut Vec<usize>,
                     pad: &mut dyn FnMut() -> Tok,
                     batches: &mut Vec<PackedBatch<Tok>>| {
        if seq_lengths.is_empty() {
            return;
        }
        let pad_count = token_budget - tokens.len();
        tokens.extend(std::iter::repeat_with(&mut *pad).take(pad_count));
        batches.push(PackedBatch {
            tokens: std::mem::take(tokens),
            offsets: std::mem::replace(offsets, vec![0]),
            seq_lengths: std::mem::take(seq_lengths),
            pad_count,
            token_budget,
        });
    };

    for seq in sequences {
        if seq.is_empty() {
            continue;
        }
        if tokens.len() + seq.len() > token_budget {
            flush(&mut tokens, &mut offsets, &mut seq_lengths, &mut pad, &mut batches);
        }
        tokens.extend_from_slice(seq);
        offsets.push(tokens.len());
        seq_lengths.push(seq.len());
    }
    flush(&mut tokens, &mut offsets, &mut seq_lengths, &mut pad, &mut batches);

    for b in &batches {
        b.check_invariants()?;
    }
    Ok(batches)
}

/// Half-open token ranges partitioning `[0, L)` from the most recent end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub source_length: usize,
    pub chunk_length: usize,
    /// Ordered most-recent-first; all full-length except possibly the last
    /// (oldest) entry.
    pub chunks: Vec<(usize, usize)>,
}

/// Partition `[0, L)` working backward from index `L`, so the chunk holding
/// the newest tokens is always full-length and only the oldest may be short.
pub fn chunk(source_length: usize, chunk_length: usize) -> ChunkPlan {
    assert!(source_length >= 1 && chunk_length >= 1);
    let mut chunks = Vec::with_capacity(source_length.div_ceil(chunk_length));
    let mut end = source_length;
    while end > 0 {
        let start = end.saturating_sub(chunk_length);
        chunks.push((start, end));
        end = start;
    }
    ChunkPlan {
        source_length,
        chunk_length,
        chunks,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkCostReport {
    pub n_chunks: usize,
    /// Causal attention pairs in one full-length chunk.
    pub per_chunk_pairs: u64,
    /// Causal attention pairs summed over all chunks.
    pub total_pairs: u64,
    /// Unchunked pairs divided by chunked pairs.
    pub reduction_vs_unchunked: f64,
}

fn causal_pairs(n: u64) -> u64 {
    n * (n + 1) / 2
}

/// Causal-pair accounting for one chunking choice.
pub fn chunk_cost_report(source_length: usize, chunk_length: usize) -> ChunkCostReport {
    let plan = chunk(source_length, chunk_length);
    let total_pairs: u64 = plan
        .chunks
        .iter()
        .map(|&(s, e)| causal_pairs((e - s) as u64))
        .sum();
    let unchunked = causal_pairs(source_length as u64);
    ChunkCostReport {
        n_chunks: plan.chunks.len(),
        per_chunk_pairs: causal_pairs(chunk_length.min(source_length) as u64),
        total_pairs,
        reduction_vs_unchunked: unchunked as f64 / total_pairs as f64,
    }
}

/// Chunk an interleaved sequence into independent training examples,
/// nudging any boundary that would orphan an action token from its
/// impression: the pair moves whole into the newer chunk.
pub fn chunk_sequence(seq: &InterleavedSequence, chunk_length: usize) -> Vec<InterleavedSequence> {
    if seq.len() <= chunk_length {
        return vec![seq.clone()];
    }
    let plan = chunk(seq.len(), chunk_length);
    // collect boundaries oldest-first, adjust, then rebuild ranges
    let mut boundaries: Vec<usize> = plan.chunks.iter().rev().map(|&(s, _)| s).collect();
    boundaries.push(seq.len());
    for b in boundaries.iter_mut() {
        if *b > 0 && *b < seq.len() && seq.tokens[*b].kind() == TokenKind::Action {
            *b -= 1;
        }
    }
    boundaries.dedup();

    let mut out = Vec::with_capacity(boundaries.len() - 1);
    for w in boundaries.windows(2).rev() {
        let (start, end) = (w[0], w[1]);
        if start == end {
            continue;
        }
        let tokens: Vec<SeqToken> = seq.tokens[start..end].to_vec();
        let impression_positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind() == TokenKind::Impression)
            .map(|(i, _)| i)
            .collect();
        out.push(InterleavedSequence {
            user_id: seq.user_id,
            tokens,
            impression_positions,
        });
    }
    out
}
