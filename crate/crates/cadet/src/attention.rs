//! Self-gated multi-head attention with two execution engines.
//!
//! The pipeline per layer: representation-level gating of the input, Q/K/V
//! projections from the gated input, interaction-level gating of Q and K,
//! head split, timestamp rotation of queries and keys, masked scaled-dot
//! attention, head concat, output projection. Gating happens before
//! attention; values are projected but never interaction-gated.
//!
//! The reference engine materializes the additive mask and the full score
//! matrix. The tiled engine walks (query tile x key tile) blocks with an
//! online softmax, skips blocks the predicate proves fully masked, and never
//! materializes a mask. Both produce the same output; the reference path is
//! the oracle in tests.

use crate::error::{Error, Result};
use crate::masking::{self, allowed, MaskSpec};
use crate::optim::{ParamBank, ParamId};
use crate::parallel::map_indexed;
use crate::rope::{self, RopeConfig};
use crate::tensor::{
    dot, matmul, matmul_nt, matmul_tn, sigmoid, softmax_row, softmax_rows_backward, Scalar,
    Tensor,
};

/// The seven weight matrices of one attention layer, all `d_model x d_model`.
#[derive(Clone, Debug)]
pub struct AttentionLayerParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_x_gate: ParamId,
    pub w_q_gate: ParamId,
    pub w_k_gate: ParamId,
    pub w_o: ParamId,
}

impl AttentionLayerParams {
    /// Register fresh weights: `sample()` draws projection entries, gate
    /// weights start at zero so every gate opens at the neutral 0.5.
    pub fn init<T: Scalar>(
        bank: &mut ParamBank<T>,
        d_model: usize,
        prefix: &str,
        mut sample: impl FnMut() -> f64,
    ) -> Self {
        let mut proj = |bank: &mut ParamBank<T>, name: &str| {
            let t = Tensor::from_fn(&[d_model, d_model], |_| T::from_f64(sample()));
            bank.add(format!("{prefix}.{name}"), t)
        };
        let w_q = proj(bank, "w_q");
        let w_k = proj(bank, "w_k");
        let w_v = proj(bank, "w_v");
        let w_o = proj(bank, "w_o");
        let zero = |bank: &mut ParamBank<T>, name: &str| {
            bank.add(format!("{prefix}.{name}"), Tensor::zeros(&[d_model, d_model]))
        };
        let w_x_gate = zero(bank, "w_x_gate");
        let w_q_gate = zero(bank, "w_q_gate");
        let w_k_gate = zero(bank, "w_k_gate");
        AttentionLayerParams {
            w_q,
            w_k,
            w_v,
            w_x_gate,
            w_q_gate,
            w_k_gate,
            w_o,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Reference,
    Tiled,
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Engine> {
        match s {
            "reference" => Ok(Engine::Reference),
            "tiled" => Ok(Engine::Tiled),
            other => Err(Error::Config(format!(
                "unknown attention engine '{other}' (use reference|tiled)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TileConfig {
    pub tile_size: usize,
    pub engine: Engine,
}

impl TileConfig {
    pub fn reference() -> Self {
        TileConfig {
            tile_size: 16,
            engine: Engine::Reference,
        }
    }

    pub fn tiled(tile_size: usize) -> Self {
        TileConfig {
            tile_size,
            engine: Engine::Tiled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || !self.tile_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "tile_size must be a power of two >= 1, got {}",
                self.tile_size
            )));
        }
        Ok(())
    }
}

/// Gate activations captured by a forward pass of `out = x * sigmoid(x W)`.
pub struct GateSaved<T> {
    pub gate: Tensor<T>,
}

/// Representation-level gate; `|out| <= |x|` element-wise since the gate
/// lies in (0, 1).
pub fn representation_gate<T: Scalar>(
    x: &Tensor<T>,
    w_gate: &Tensor<T>,
) -> Result<(Tensor<T>, GateSaved<T>)> {
    gate_forward(x, w_gate)
}

/// Interaction-level gates applied to projected queries and keys.
pub fn interaction_gate<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    w_q_gate: &Tensor<T>,
    w_k_gate: &Tensor<T>,
) -> Result<((Tensor<T>, GateSaved<T>), (Tensor<T>, GateSaved<T>))> {
    Ok((gate_forward(q, w_q_gate)?, gate_forward(k, w_k_gate)?))
}

fn gate_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(Tensor<T>, GateSaved<T>)> {
    let pre = matmul(x, w)?;
    let gate = sigmoid(&pre);
    let mut out = x.clone();
    for (o, g) in out.data_mut().iter_mut().zip(gate.data()) {
        *o = *o * *g;
    }
    Ok((out, GateSaved { gate }))
}

/// Backward of `out = x * sigmoid(x W)`: returns (dL/dx, dL/dW).
fn gate_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    saved: &GateSaved<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    // direct term: d_out * gate
    let mut dx = d_out.clone();
    for (d, g) in dx.data_mut().iter_mut().zip(saved.gate.data()) {
        *d = *d * *g;
    }
    // gate term: d_pre = d_out * x * gate * (1 - gate)
    let mut d_pre = d_out.clone();
    for ((d, &xv), &g) in d_pre
        .data_mut()
        .iter_mut()
        .zip(x.data())
        .zip(saved.gate.data())
    {
        *d = *d * xv * g * (T::one() - g);
    }
    let dw = matmul_tn(x, &d_pre)?;
    dx.add_scaled(&matmul_nt(&d_pre, w)?, T::one());
    Ok((dx, dw))
}

/// Per-row online-softmax statistics; enough to rebuild any probability row
/// during backward without a materialized mask.
#[derive(Clone, Debug)]
pub struct RowStats<T> {
    pub max: Vec<T>,
    pub denom: Vec<T>,
}

pub struct TiledResult<T> {
    pub output: Tensor<T>,
    pub tiles_visited: usize,
    pub tiles_skipped: usize,
    pub stats: RowStats<T>,
}

/// Masked softmax-attention over one head via tiled online softmax.
/// `q` and `k` arrive already rotated. A tile is skipped only when every
/// cell in it is disallowed; boundary tiles apply the predicate per element.
/// Padding query rows produce zero output rows.
pub fn tiled_attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    spec: &MaskSpec,
    tile_size: usize,
    scale: T,
) -> Result<TiledResult<T>> {
    let n = q.rows();
    let dk = q.cols();
    let dv = v.cols();
    if k.rows() != n || v.rows() != n || k.cols() != dk {
        return Err(Error::Shape(format!(
            "tiled_attend expects matching token counts, got q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if spec.total_tokens() != n {
        return Err(Error::Shape(format!(
            "mask spec covers {} tokens but q has {n} rows",
            spec.total_tokens()
        )));
    }

    let n_tiles = n.div_ceil(tile_size);
    // each worker owns a row tile, so per-row online state is single-owner
    let per_row_tile: Vec<(Vec<T>, Vec<T>, Vec<T>, usize, usize)> =
        map_indexed(n_tiles, |rt| {
            let r0 = rt * tile_size;
            let r1 = (r0 + tile_size).min(n);
            let rows = r1 - r0;
            let mut acc = vec![T::zero(); rows * dv];
            let mut row_max = vec![T::neg_infinity(); rows];
            let mut row_denom = vec![T::zero(); rows];
            let mut visited = 0usize;
            let mut skipped = 0usize;
            let mut scores = vec![T::neg_infinity(); tile_size];

            for ct in 0..n_tiles {
                let c0 = ct * tile_size;
                let c1 = (c0 + tile_size).min(n);
                if masking::tile_fully_masked(spec, r0..r1, c0..c1) {
                    skipped += 1;
                    continue;
                }
                visited += 1;
                for i in r0..r1 {
                    if spec.is_pad(i) {
                        continue;
                    }
                    let qi = q.row(i);
                    let mut tile_max = T::neg_infinity();
                    for j in c0..c1 {
                        let s = if allowed(spec, i, j) {
                            scale * dot(qi, k.row(j))
                        } else {
                            T::neg_infinity()
                        };
                        scores[j - c0] = s;
                        if s > tile_max {
                            tile_max = s;
                        }
                    }
                    if tile_max == T::neg_infinity() {
                        continue;
                    }
                    let r = i - r0;
                    let new_max = if row_max[r] > tile_max { row_max[r] } else { tile_max };
                    if row_max[r] > T::neg_infinity() && row_max[r] < new_max {
                        let correction = (row_max[r] - new_max).exp();
                        row_denom[r] = row_denom[r] * correction;
                        for a in &mut acc[r * dv..(r + 1) * dv] {
                            *a = *a * correction;
                        }
                    }
                    for j in c0..c1 {
                        let s = scores[j - c0];
                        if s == T::neg_infinity() {
                            continue;
                        }
                        let w = (s - new_max).exp();
                        row_denom[r] = row_denom[r] + w;
                        let vrow = v.row(j);
                        for (a, &vv) in acc[r * dv..(r + 1) * dv].iter_mut().zip(vrow) {
                            *a = *a + w * vv;
                        }
                    }
                    row_max[r] = new_max;
                }
            }
            (acc, row_max, row_denom, visited, skipped)
        });

    let mut output = Tensor::zeros(&[n, dv]);
    let mut stats = RowStats {
        max: vec![T::neg_infinity(); n],
        denom: vec![T::zero(); n],
    };
    let mut tiles_visited = 0;
    let mut tiles_skipped = 0;
    for (rt, (acc, row_max, row_denom, visited, skipped)) in per_row_tile.into_iter().enumerate()
    {
        let r0 = rt * tile_size;
        tiles_visited += visited;
        tiles_skipped += skipped;
        for (r, (&m, &d)) in row_max.iter().zip(row_denom.iter()).enumerate() {
            let i = r0 + r;
            if spec.is_pad(i) {
                continue;
            }
            if d == T::zero() {
                return Err(Error::DegenerateRow { row: i });
            }
            stats.max[i] = m;
            stats.denom[i] = d;
            let inv = T::one() / d;
            for (o, &a) in output.row_mut(i).iter_mut().zip(&acc[r * dv..(r + 1) * dv]) {
                *o = a * inv;
            }
        }
    }
    Ok(TiledResult {
        output,
        tiles_visited,
        tiles_skipped,
        stats,
    })
}

/// Dense vs sparse pair accounting for the shared-context inference pattern.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCount {
    pub dense_pairs: u64,
    pub sparse_pairs: u64,
    pub ratio: f64,
}

pub fn op_count(context_len: usize, candidate_count: usize) -> OpCount {
    let total = (context_len + candidate_count) as u64;
    let dense = total * total;
    let sparse = masking::count_allowed(&MaskSpec::inference(context_len, candidate_count));
    OpCount {
        dense_pairs: dense,
        sparse_pairs: sparse,
        ratio: dense as f64 / sparse as f64,
    }
}

/// Per-head attention state captured by the forward pass.
pub enum SavedAttn<T> {
    /// Full probability matrices, one per head (reference engine).
    Probs(Vec<Tensor<T>>),
    /// Online-softmax row statistics per head (tiled engine).
    Stats(Vec<RowStats<T>>),
}

/// Everything `mha_backward` needs.
pub struct MhaSaved<T> {
    x: Tensor<T>,
    gate_x: GateSaved<T>,
    x_tilde: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    gate_q: GateSaved<T>,
    gate_k: GateSaved<T>,
    /// Rotated per-head queries/keys and per-head values.
    q_heads: Vec<Tensor<T>>,
    k_heads: Vec<Tensor<T>>,
    v_heads: Vec<Tensor<T>>,
    /// Rotation frequencies used in forward, if rotation was enabled.
    freqs: Option<Vec<f64>>,
    attn: SavedAttn<T>,
    ctx: Tensor<T>,
}

impl<T: Scalar> MhaSaved<T> {
    /// Attention probabilities of one head; rebuilt from row statistics on
    /// the tiled path.
    pub fn head_probs(&self, h: usize, spec: &MaskSpec, scale: T) -> Tensor<T> {
        match &self.attn {
            SavedAttn::Probs(p) => p[h].clone(),
            SavedAttn::Stats(stats) => {
                let n = self.q_heads[h].rows();
                let mut p = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    rebuild_prob_row(
                        &self.q_heads[h],
                        &self.k_heads[h],
                        spec,
                        &stats[h],
                        scale,
                        i,
                        p.row_mut(i),
                    );
                }
                p
            }
        }
    }
}

fn gather_head<T: Scalar>(full: &Tensor<T>, head: usize, dk: usize) -> Tensor<T> {
    let n = full.rows();
    let d = full.cols();
    let mut out = Tensor::zeros(&[n, dk]);
    for i in 0..n {
        let src = &full.data()[i * d + head * dk..i * d + (head + 1) * dk];
        out.row_mut(i).copy_from_slice(src);
    }
    out
}

fn scatter_head<T: Scalar>(full: &mut Tensor<T>, head: usize, dk: usize, part: &Tensor<T>) {
    let d = full.cols();
    for i in 0..part.rows() {
        let dst = i * d + head * dk;
        full.data_mut()[dst..dst + dk].copy_from_slice(part.row(i));
    }
}

/// Attention probabilities for one head on the materialized-mask path.
/// Padding query rows come out all-zero.
fn reference_probs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    spec: &MaskSpec,
    mask: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>> {
    let n = q.rows();
    let mut scores = matmul_nt(q, k)?;
    for (s, m) in scores.data_mut().iter_mut().zip(mask.data()) {
        *s = *s * scale + *m;
    }
    let mut probs = Tensor::zeros(&[n, n]);
    for i in 0..n {
        if spec.is_pad(i) {
            continue;
        }
        softmax_row(scores.row(i), probs.row_mut(i))
            .map_err(|_| Error::DegenerateRow { row: i })?;
    }
    Ok(probs)
}

/// Rebuild one probability row from tiled row statistics and the predicate.
fn rebuild_prob_row<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    spec: &MaskSpec,
    stats: &RowStats<T>,
    scale: T,
    i: usize,
    out: &mut [T],
) {
    out.iter_mut().for_each(|o| *o = T::zero());
    if spec.is_pad(i) {
        return;
    }
    let qi = q.row(i);
    let inv = T::one() / stats.denom[i];
    for (j, o) in out.iter_mut().enumerate() {
        if allowed(spec, i, j) {
            let s = scale * dot(qi, k.row(j));
            *o = (s - stats.max[i]).exp() * inv;
        }
    }
}

/// Full self-gated multi-head attention forward.
///
/// `cached_mask` lets the caller materialize the additive mask once per
/// batch and reuse it across layers on the reference engine; the tiled
/// engine never touches it. `rope_config` of `None` disables rotation.
#[allow(clippy::too_many_arguments)]
pub fn mha_forward<T: Scalar>(
    bank: &ParamBank<T>,
    params: &AttentionLayerParams,
    x: &Tensor<T>,
    spec: &MaskSpec,
    cached_mask: Option<&Tensor<T>>,
    rope_config: Option<&RopeConfig>,
    n_heads: usize,
    tile: TileConfig,
) -> Result<(Tensor<T>, MhaSaved<T>)> {
    let n = x.rows();
    let d_model = x.cols();
    if d_model % n_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }
    if spec.total_tokens() != n {
        return Err(Error::Shape(format!(
            "mask spec covers {} tokens but input has {n} rows",
            spec.total_tokens()
        )));
    }
    let dk = d_model / n_heads;
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());

    let (x_tilde, gate_x) = representation_gate(x, bank.value(params.w_x_gate))?;
    let q = matmul(&x_tilde, bank.value(params.w_q))?;
    let k = matmul(&x_tilde, bank.value(params.w_k))?;
    let v = matmul(&x_tilde, bank.value(params.w_v))?;
    let ((q_gated, gate_q), (k_gated, gate_k)) = interaction_gate(
        &q,
        &k,
        bank.value(params.w_q_gate),
        bank.value(params.w_k_gate),
    )?;

    let freqs = rope_config.map(rope::frequencies);
    let mut q_heads = Vec::with_capacity(n_heads);
    let mut k_heads = Vec::with_capacity(n_heads);
    let mut v_heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut qh = gather_head(&q_gated, h, dk);
        let mut kh = gather_head(&k_gated, h, dk);
        if let Some(f) = &freqs {
            for i in 0..n {
                rope::rotate_in_place(qh.row_mut(i), spec.timestamps[i], f);
                rope::rotate_in_place(kh.row_mut(i), spec.timestamps[i], f);
            }
        }
        q_heads.push(qh);
        k_heads.push(kh);
        v_heads.push(gather_head(&v, h, dk));
    }

    let owned_mask = match (tile.engine, cached_mask) {
        (Engine::Reference, None) => Some(masking::materialize::<T>(spec, n)?),
        _ => None,
    };

    let mut ctx = Tensor::zeros(&[n, d_model]);
    let attn = match tile.engine {
        Engine::Reference => {
            let mask = cached_mask.or(owned_mask.as_ref()).unwrap();
            let probs = map_indexed(n_heads, |h| {
                reference_probs(&q_heads[h], &k_heads[h], spec, mask, scale)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            for (h, p) in probs.iter().enumerate() {
                let ctx_h = matmul(p, &v_heads[h])?;
                scatter_head(&mut ctx, h, dk, &ctx_h);
            }
            SavedAttn::Probs(probs)
        }
        Engine::Tiled => {
            tile.validate()?;
            let results = map_indexed(n_heads, |h| {
                tiled_attend(&q_heads[h], &k_heads[h], &v_heads[h], spec, tile.tile_size, scale)
            });
            let mut stats = Vec::with_capacity(n_heads);
            for (h, r) in results.into_iter().enumerate() {
                let r = r?;
                scatter_head(&mut ctx, h, dk, &r.output);
                stats.push(r.stats);
            }
            SavedAttn::Stats(stats)
        }
    };

    let out = matmul(&ctx, bank.value(params.w_o))?;
    Ok((
        out,
        MhaSaved {
            x: x.clone(),
            gate_x,
            x_tilde,
            q,
            k,
            gate_q,
            gate_k,
            q_heads,
            k_heads,
            v_heads,
            freqs,
            attn,
            ctx,
        },
    ))
}

/// Backward through the whole layer: accumulates gradients for all seven
/// weight matrices into the bank and returns dL/dx.
pub fn mha_backward<T: Scalar>(
    bank: &mut ParamBank<T>,
    params: &AttentionLayerParams,
    saved: &MhaSaved<T>,
    d_out: &Tensor<T>,
    spec: &MaskSpec,
) -> Result<Tensor<T>> {
    let n = saved.x.rows();
    let d_model = saved.x.cols();
    let n_heads = saved.q_heads.len();
    let dk = d_model / n_heads;
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());

    // output projection
    let dw_o = matmul_tn(&saved.ctx, d_out)?;
    bank.accumulate(params.w_o, &dw_o);
    let d_ctx = matmul_nt(d_out, bank.value(params.w_o))?;

    // heads are independent in backward as well
    let head_grads = map_indexed(n_heads, |h| -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let d_ctx_h = gather_head(&d_ctx, h, dk);
        let probs = saved.head_probs(h, spec, scale);
        let d_v = matmul_tn(&probs, &d_ctx_h)?;
        let d_probs = matmul_nt(&d_ctx_h, &saved.v_heads[h])?;
        let mut d_scores = softmax_rows_backward(&probs, &d_probs);
        for s in d_scores.data_mut() {
            *s = *s * scale;
        }
        let mut d_q = matmul(&d_scores, &saved.k_heads[h])?;
        let mut d_k = matmul_tn(&d_scores, &saved.q_heads[h])?;
        if let Some(f) = &saved.freqs {
            for i in 0..n {
                rope::rotate_inverse_in_place(d_q.row_mut(i), spec.timestamps[i], f);
                rope::rotate_inverse_in_place(d_k.row_mut(i), spec.timestamps[i], f);
            }
        }
        Ok((d_q, d_k, d_v))
    });

    let mut d_q_gated = Tensor::zeros(&[n, d_model]);
    let mut d_k_gated = Tensor::zeros(&[n, d_model]);
    let mut d_v = Tensor::zeros(&[n, d_model]);
    for (h, grads) in head_grads.into_iter().enumerate() {
        let (dq, dk_h, dv) = grads?;
        scatter_head(&mut d_q_gated, h, dk, &dq);
        scatter_head(&mut d_k_gated, h, dk, &dk_h);
        scatter_head(&mut d_v, h, dk, &dv);
    }

    // interaction gates
    let (d_q, dw_qg) = gate_backward(
        &saved.q,
        bank.value(params.w_q_gate),
        &saved.gate_q,
        &d_q_gated,
    )?;
    bank.accumulate(params.w_q_gate, &dw_qg);
    let (d_k, dw_kg) = gate_backward(
        &saved.k,
        bank.value(params.w_k_gate),
        &saved.gate_k,
        &d_k_gated,
    )?;
    bank.accumulate(params.w_k_gate, &dw_kg);

    // projections
    let dw_q = matmul_tn(&saved.x_tilde, &d_q)?;
    bank.accumulate(params.w_q, &dw_q);
    let dw_k = matmul_tn(&saved.x_tilde, &d_k)?;
    bank.accumulate(params.w_k, &dw_k);
    let dw_v = matmul_tn(&saved.x_tilde, &d_v)?;
    bank.accumulate(params.w_v, &dw_v);

    let mut d_x_tilde = matmul_nt(&d_q, bank.value(params.w_q))?;
    d_x_tilde.add_scaled(&matmul_nt(&d_k, bank.value(params.w_k))?, T::one());
    d_x_tilde.add_scaled(&matmul_nt(&d_v, bank.value(params.w_v))?, T::one());

    // representation gate
    let (d_x, dw_xg) = gate_backward(
        &saved.x,
        bank.value(params.w_x_gate),
        &saved.gate_x,
        &d_x_tilde,
    )?;
    bank.accumulate(params.w_x_gate, &dw_xg);
    Ok(d_x)
}
