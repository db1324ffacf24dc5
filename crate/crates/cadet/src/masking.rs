//! Declarative attention-mask predicates and their materialization.
//!
//! Two modes exist. Training masks are time-based: a query may attend a key
//! only if the key is old enough to have been observable online
//! (`t_key <= t_query - delta_delay`), with the diagonal always preserved so
//! every token can see itself. Inference masks cover single-pass
//! multi-candidate scoring: `L` context tokens attend causally, `N` appended
//! candidates attend the full context plus themselves, and candidates stay
//! isolated from each other.
//!
//! Predicates are pure and cheap; [`materialize`] builds the additive
//! `{0, -inf}` matrix for the reference attention path and for tests. The
//! tiled engine never materializes a mask and instead asks
//! [`tile_fully_masked`] before touching a tile.

use crate::error::{Error, Result};
use crate::events::TokenKind;
use crate::tensor::{Scalar, Tensor};

/// Training-mode mask parameters.
#[derive(Clone, Debug)]
pub struct TrainingMask {
    /// Minimum guaranteed lag between an event and its observability online.
    pub delta_delay_ms: i64,
    /// When true, drop the impression/action pairing exception.
    pub strict_pairing: bool,
    /// Queries with timestamps at or past this cutoff use `val_delta_ms`
    /// instead of `delta_delay_ms`; evaluation retains the delay even when
    /// a training ablation zeroes it.
    pub val_cutoff_ts: Option<i64>,
    pub val_delta_ms: i64,
}

impl TrainingMask {
    pub fn new(delta_delay_ms: i64) -> Self {
        TrainingMask {
            delta_delay_ms,
            strict_pairing: false,
            val_cutoff_ts: None,
            val_delta_ms: delta_delay_ms,
        }
    }

    fn delta_for_query(&self, t_query: i64) -> i64 {
        match self.val_cutoff_ts {
            Some(cutoff) if t_query >= cutoff => self.val_delta_ms,
            _ => self.delta_delay_ms,
        }
    }
}

#[derive(Clone, Debug)]
pub enum MaskMode {
    Training(TrainingMask),
    Inference {
        context_len: usize,
        candidate_count: usize,
    },
}

/// Everything the predicates need to decide whether query `i` may attend
/// key `j` inside one packed buffer.
#[derive(Clone, Debug)]
pub struct MaskSpec {
    pub mode: MaskMode,
    /// Per-token timestamps (training mode).
    pub timestamps: Vec<i64>,
    /// Sequence-boundary prefix sums, `n_seqs + 1` entries. Tokens at or past
    /// `offsets[last]` are padding and belong to no sequence.
    pub offsets: Vec<usize>,
    pub kinds: Vec<TokenKind>,
    /// For action tokens, the buffer index of their own impression token.
    pub action_pair: Vec<Option<u32>>,
    total_tokens: usize,
}

impl MaskSpec {
    /// Multi-candidate inference mask over `context_len + candidate_count`
    /// tokens.
    pub fn inference(context_len: usize, candidate_count: usize) -> MaskSpec {
        MaskSpec {
            mode: MaskMode::Inference {
                context_len,
                candidate_count,
            },
            timestamps: Vec::new(),
            offsets: Vec::new(),
            kinds: Vec::new(),
            action_pair: Vec::new(),
            total_tokens: context_len + candidate_count,
        }
    }

    /// Training mask over one or more packed sequences.
    pub fn training(
        mask: TrainingMask,
        timestamps: Vec<i64>,
        offsets: Vec<usize>,
        kinds: Vec<TokenKind>,
        action_pair: Vec<Option<u32>>,
    ) -> MaskSpec {
        let total = timestamps.len();
        debug_assert_eq!(kinds.len(), total);
        debug_assert_eq!(action_pair.len(), total);
        MaskSpec {
            mode: MaskMode::Training(mask),
            timestamps,
            offsets,
            kinds,
            action_pair,
            total_tokens: total,
        }
    }

    /// Single-sequence training mask with every token an impression; enough
    /// for tests that only care about timestamps.
    pub fn training_single(mask: TrainingMask, timestamps: Vec<i64>) -> MaskSpec {
        let n = timestamps.len();
        MaskSpec::training(
            mask,
            timestamps,
            vec![0, n],
            vec![TokenKind::Impression; n],
            vec![None; n],
        )
    }

    pub fn total_tokens(&self) -> usize {
        self.total_tokens
    }

    /// Index of the packed sequence containing token `idx`, if any. Padding
    /// tokens live past the last offset and belong to no sequence.
    pub fn sequence_of(&self, idx: usize) -> Option<usize> {
        if self.offsets.is_empty() {
            return Some(0);
        }
        let end = *self.offsets.last().unwrap();
        if idx >= end {
            return None;
        }
        // offsets is sorted; partition_point returns the first offset > idx
        Some(self.offsets.partition_point(|&o| o <= idx) - 1)
    }

    pub fn is_pad(&self, idx: usize) -> bool {
        match &self.mode {
            MaskMode::Inference { .. } => false,
            MaskMode::Training(_) => {
                (!self.kinds.is_empty() && self.kinds[idx] == TokenKind::Pad)
                    || self.sequence_of(idx).is_none()
            }
        }
    }
}

/// May training query `i` attend key `j`? Cross-sequence pairs and padding
/// are always refused; the diagonal is always preserved; static-prefix keys
/// are profile data and visible to any later query in the sequence; an
/// action token may attend its own impression unless strict pairing is on;
/// everything else follows `j < i && t_j <= t_i - delta`.
pub fn train_allowed(spec: &MaskSpec, i: usize, j: usize) -> bool {
    let mask = match &spec.mode {
        MaskMode::Training(m) => m,
        MaskMode::Inference { .. } => return inference_allowed(spec, i, j),
    };
    let (si, sj) = (spec.sequence_of(i), spec.sequence_of(j));
    if si.is_none() || sj.is_none() || si != sj {
        return false;
    }
    if !spec.kinds.is_empty()
        && (spec.kinds[i] == TokenKind::Pad || spec.kinds[j] == TokenKind::Pad)
    {
        return false;
    }
    if i == j {
        return true;
    }
    if j > i {
        return false;
    }
    if !spec.kinds.is_empty() && spec.kinds[j] == TokenKind::Static {
        return true;
    }
    if !mask.strict_pairing
        && !spec.action_pair.is_empty()
        && spec.action_pair[i] == Some(j as u32)
    {
        return true;
    }
    let delta = mask.delta_for_query(spec.timestamps[i]);
    spec.timestamps[j] <= spec.timestamps[i] - delta
}

/// May inference query `i` attend key `j`? Context queries (`i < L`) are
/// causal; candidate queries (`i >= L`) see the whole context and themselves
/// only, never each other.
pub fn inference_allowed(spec: &MaskSpec, i: usize, j: usize) -> bool {
    let (l, n) = match &spec.mode {
        MaskMode::Inference {
            context_len,
            candidate_count,
        } => (*context_len, *candidate_count),
        MaskMode::Training(_) => return train_allowed(spec, i, j),
    };
    debug_assert!(i < l + n && j < l + n);
    if i < l {
        j <= i
    } else {
        j < l || j == i
    }
}

/// Mode-appropriate predicate.
pub fn allowed(spec: &MaskSpec, i: usize, j: usize) -> bool {
    match &spec.mode {
        MaskMode::Training(_) => train_allowed(spec, i, j),
        MaskMode::Inference { .. } => inference_allowed(spec, i, j),
    }
}

/// Additive mask matrix: 0 where allowed, -inf elsewhere. Reference path and
/// tests only; the tiled engine queries the predicate instead.
pub fn materialize<T: Scalar>(spec: &MaskSpec, total_tokens: usize) -> Result<Tensor<T>> {
    if total_tokens != spec.total_tokens() {
        return Err(Error::Shape(format!(
            "mask spec covers {} tokens, asked to materialize {}",
            spec.total_tokens(),
            total_tokens
        )));
    }
    let mut m = Tensor::zeros(&[total_tokens, total_tokens]);
    for i in 0..total_tokens {
        for j in 0..total_tokens {
            if !allowed(spec, i, j) {
                m.set2(i, j, T::neg_infinity());
            }
        }
    }
    Ok(m)
}

/// Exact number of scored (query, key) pairs. Closed form for inference
/// masks, enumeration otherwise.
pub fn count_allowed(spec: &MaskSpec) -> u64 {
    match &spec.mode {
        MaskMode::Inference {
            context_len,
            candidate_count,
        } => {
            let l = *context_len as u64;
            let n = *candidate_count as u64;
            l * (l + 1) / 2 + n * (l + 1)
        }
        MaskMode::Training(_) => {
            let t = spec.total_tokens();
            let mut count = 0u64;
            for i in 0..t {
                for j in 0..t {
                    if train_allowed(spec, i, j) {
                        count += 1;
                    }
                }
            }
            count
        }
    }
}

/// Dense vs sparse pair accounting for an inference mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCount {
    pub dense_pairs: u64,
    pub sparse_pairs: u64,
    pub ratio: f64,
}

pub fn op_count(context_len: usize, candidate_count: usize) -> OpCount {
    let spec = MaskSpec::inference(context_len, candidate_count);
    let total = (context_len + candidate_count) as u64;
    let dense = total * total;
    let sparse = count_allowed(&spec);
    OpCount {
        dense_pairs: dense,
        sparse_pairs: sparse,
        ratio: dense as f64 / sparse as f64,
    }
}

/// True iff every cell of the tile `rows x cols` is disallowed. Inference
/// masks are decided analytically from the region geometry; training masks
/// scan with early exit on the first allowed cell.
pub fn tile_fully_masked(
    spec: &MaskSpec,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> bool {
    if let MaskMode::Inference { context_len, .. } = &spec.mode {
        let l = *context_len;
        let (r0, r1) = (rows.start, rows.end);
        let (c0, c1) = (cols.start, cols.end);
        // causal triangle: exists i < l, j <= i in the tile
        let causal_hit = r0 < l && c0 < l && r1.min(l) > 0 && c0 <= r1.min(l) - 1;
        // candidate rows attending context columns
        let strip_hit = r1 > l && c0 < l;
        // candidate diagonal
        let lo = r0.max(c0).max(l);
        let diag_hit = lo < r1.min(c1);
        return !(causal_hit || strip_hit || diag_hit);
    }
    for i in rows {
        for j in cols.clone() {
            if allowed(spec, i, j) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_train(delta: i64, timestamps: Vec<i64>) -> MaskSpec {
        MaskSpec::training_single(TrainingMask::new(delta), timestamps)
    }

    #[test]
    fn delay_rule_direct_substitution() {
        let spec = simple_train(3_600_000, vec![3_500_000, 3_700_000, 7_200_000]);
        // t_i = 7_200_000, t_j = 3_500_000: 3_500_000 <= 3_600_000, allowed
        assert!(train_allowed(&spec, 2, 0));
        // t_j = 3_700_000 > 3_600_000: masked
        assert!(!train_allowed(&spec, 2, 1));
    }

    #[test]
    fn diagonal_always_preserved() {
        let spec = simple_train(3_600_000, vec![10, 20, 25, 30]);
        for i in 0..4 {
            assert!(train_allowed(&spec, i, i));
        }
    }

    #[test]
    fn future_keys_masked() {
        let spec = simple_train(0, vec![10, 20, 30]);
        assert!(!train_allowed(&spec, 0, 1));
        assert!(!train_allowed(&spec, 1, 2));
    }

    #[test]
    fn zero_delay_degrades_to_causal() {
        let spec = simple_train(0, vec![5, 6, 7, 8, 9, 10]);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(train_allowed(&spec, i, j), j <= i, "({i},{j})");
            }
        }
    }

    #[test]
    fn cross_sequence_always_masked() {
        let mask = TrainingMask::new(0);
        let spec = MaskSpec::training(
            mask,
            vec![1, 2, 3, 4],
            vec![0, 2, 4],
            vec![TokenKind::Impression; 4],
            vec![None; 4],
        );
        assert!(train_allowed(&spec, 1, 0));
        assert!(!train_allowed(&spec, 2, 0));
        assert!(!train_allowed(&spec, 2, 1));
        assert!(train_allowed(&spec, 3, 2));
    }

    #[test]
    fn pads_attend_nothing_and_are_unattended() {
        let mask = TrainingMask::new(0);
        let spec = MaskSpec::training(
            mask,
            vec![1, 2, 0, 0],
            vec![0, 2],
            vec![
                TokenKind::Impression,
                TokenKind::Impression,
                TokenKind::Pad,
                TokenKind::Pad,
            ],
            vec![None; 4],
        );
        for p in 2..4 {
            for j in 0..4 {
                assert!(!train_allowed(&spec, p, j));
                assert!(!train_allowed(&spec, j, p));
            }
        }
    }

    #[test]
    fn static_prefix_always_visible() {
        let mask = TrainingMask::new(1_000_000);
        let spec = MaskSpec::training(
            mask,
            vec![0, 100, 150],
            vec![0, 3],
            vec![
                TokenKind::Static,
                TokenKind::Impression,
                TokenKind::Impression,
            ],
            vec![None; 3],
        );
        // gaps are far below delta, but the static token stays visible
        assert!(train_allowed(&spec, 1, 0));
        assert!(train_allowed(&spec, 2, 0));
        assert!(!train_allowed(&spec, 2, 1));
    }

    #[test]
    fn action_attends_own_impression_unless_strict() {
        let kinds = vec![TokenKind::Impression, TokenKind::Action];
        let pair = vec![None, Some(0)];
        let lenient = MaskSpec::training(
            TrainingMask::new(3_600_000),
            vec![500, 500],
            vec![0, 2],
            kinds.clone(),
            pair.clone(),
        );
        assert!(train_allowed(&lenient, 1, 0));

        let mut strict_mask = TrainingMask::new(3_600_000);
        strict_mask.strict_pairing = true;
        let strict =
            MaskSpec::training(strict_mask, vec![500, 500], vec![0, 2], kinds, pair);
        assert!(!train_allowed(&strict, 1, 0));
    }

    #[test]
    fn inference_candidate_attends_context_and_self() {
        let spec = MaskSpec::inference(3, 2);
        // 1-based query 4 is index 3: attends {0,1,2,3}
        let attended: Vec<usize> = (0..5).filter(|&j| inference_allowed(&spec, 3, j)).collect();
        assert_eq!(attended, vec![0, 1, 2, 3]);
        // 1-based query 5 is index 4: attends {0,1,2,4}, never 3
        let attended: Vec<usize> = (0..5).filter(|&j| inference_allowed(&spec, 4, j)).collect();
        assert_eq!(attended, vec![0, 1, 2, 4]);
    }

    #[test]
    fn inference_no_candidates_is_causal() {
        let spec = MaskSpec::inference(5, 0);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(inference_allowed(&spec, i, j), j <= i);
            }
        }
    }

    #[test]
    fn materialize_single_token() {
        let spec = simple_train(3_600_000, vec![42]);
        let m: Tensor<f64> = materialize(&spec, 1).unwrap();
        assert_eq!(m.data(), &[0.0]);
    }

    #[test]
    fn materialize_all_within_delay_leaves_diagonal() {
        let spec = simple_train(3_600_000, vec![1_000, 2_000, 3_000, 4_000]);
        let m: Tensor<f64> = materialize(&spec, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.0 } else { f64::NEG_INFINITY };
                assert_eq!(m.at2(i, j), want, "({i},{j})");
            }
        }
    }

    #[test]
    fn materialize_matches_fig3_layout() {
        // 4 train tokens at unit spacing with delta 2, then 2 validation
        // queries far enough in the future to see the whole training block
        // while staying inside each other's delay window.
        let spec = simple_train(2, vec![0, 1, 2, 3, 100, 101]);
        let m: Tensor<f64> = materialize(&spec, 6).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i < 4 {
                    j == i || (j < i && spec.timestamps[j] <= spec.timestamps[i] - 2)
                } else {
                    j < 4 || j == i
                };
                assert_eq!(m.at2(i, j) == 0.0, want, "cell ({i},{j})");
            }
        }
        // the striped in-window cells are masked for train queries
        assert_eq!(m.at2(1, 0), f64::NEG_INFINITY);
        assert_eq!(m.at2(3, 2), f64::NEG_INFINITY);
        // validation rows attend every train column plus their own diagonal
        for j in 0..4 {
            assert_eq!(m.at2(4, j), 0.0);
            assert_eq!(m.at2(5, j), 0.0);
        }
        assert_eq!(m.at2(5, 4), f64::NEG_INFINITY);
        assert_eq!(m.at2(4, 5), f64::NEG_INFINITY);
    }

    #[test]
    fn count_allowed_small_inference() {
        let spec = MaskSpec::inference(3, 2);
        assert_eq!(count_allowed(&spec), 14);
        // brute force over the 5x5 grid
        let mut brute = 0;
        for i in 0..5 {
            for j in 0..5 {
                if inference_allowed(&spec, i, j) {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 14);
    }

    #[test]
    fn count_allowed_production_shape() {
        let c = op_count(4096, 512);
        assert_eq!(c.sparse_pairs, 10_488_320);
        assert_eq!(c.dense_pairs, 21_233_664);
        assert!((c.ratio - 2.025).abs() < 1e-3);
    }

    #[test]
    fn count_allowed_degenerate_shapes() {
        // no context: candidates see only themselves
        let c = op_count(0, 7);
        assert_eq!(c.sparse_pairs, 7);
        assert_eq!(c.dense_pairs, 49);
        // no candidates: causal triangle
        let c = op_count(12, 0);
        assert_eq!(c.sparse_pairs, 12 * 13 / 2);
    }

    #[test]
    fn count_matches_enumeration_up_to_64() {
        for l in [0usize, 1, 2, 5, 17, 48] {
            for n in [0usize, 1, 3, 16] {
                if l + n == 0 || l + n > 64 {
                    continue;
                }
                let spec = MaskSpec::inference(l, n);
                let mut brute = 0u64;
                for i in 0..l + n {
                    for j in 0..l + n {
                        if inference_allowed(&spec, i, j) {
                            brute += 1;
                        }
                    }
                }
                assert_eq!(count_allowed(&spec), brute, "L={l} N={n}");
            }
        }
    }

    #[test]
    fn tile_skip_analytic_matches_brute_force() {
        for l in [0usize, 3, 8, 9] {
            for n in [0usize, 2, 4] {
                if l + n == 0 {
                    continue;
                }
                let spec = MaskSpec::inference(l, n);
                let total = l + n;
                for tile in [1usize, 2, 4, 8] {
                    for r0 in (0..total).step_by(tile) {
                        for c0 in (0..total).step_by(tile) {
                            let rows = r0..(r0 + tile).min(total);
                            let cols = c0..(c0 + tile).min(total);
                            let mut brute = true;
                            for i in rows.clone() {
                                for j in cols.clone() {
                                    if inference_allowed(&spec, i, j) {
                                        brute = false;
                                    }
                                }
                            }
                            assert_eq!(
                                tile_fully_masked(&spec, rows.clone(), cols.clone()),
                                brute,
                                "L={l} N={n} tile={tile} rows={rows:?} cols={cols:?}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn training_subset_of_inference_for_context_tokens() {
        // any train-allowed context pair is causal, hence inference-allowed
        let spec = simple_train(3, vec![0, 2, 4, 6, 9, 14]);
        let inf = MaskSpec::inference(6, 0);
        for i in 0..6 {
            for j in 0..6 {
                if train_allowed(&spec, i, j) {
                    assert!(inference_allowed(&inf, i, j), "({i},{j})");
                }
            }
        }
    }
}
