//! Context-conditioned prediction towers, auxiliary heads, and the combined
//! loss with a pairwise ranking term.
//!
//! Every impression gets K context logits (one per bucket) plus J auxiliary
//! outputs from a single forward pass. During training only the head whose
//! bucket was realized receives gradient from an impression; at serving the
//! caller selects the logit for the bucket it is about to fill. Buckets
//! route losses and selection only; they are never an input feature on the
//! scoring path.

use crate::error::{Error, Result};
use crate::optim::{ParamBank, ParamId};
use crate::tensor::{
    matmul, matmul_nt, matmul_tn, sigmoid_scalar, silu_backward_scalar, silu_scalar, Scalar,
    Tensor,
};

/// Two-layer perceptron with biases: `d_in -> d_hidden -> d_out`, smooth
/// nonlinearity between the layers.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_hidden: usize,
}

impl MlpParams {
    pub fn init<T: Scalar>(
        bank: &mut ParamBank<T>,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        prefix: &str,
        mut sample: impl FnMut() -> f64,
    ) -> Self {
        let w1 = bank.add(
            format!("{prefix}.w1"),
            Tensor::from_fn(&[d_in, d_hidden], |_| T::from_f64(sample())),
        );
        let b1 = bank.add(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]));
        let w2 = bank.add(
            format!("{prefix}.w2"),
            Tensor::from_fn(&[d_hidden, d_out], |_| T::from_f64(sample())),
        );
        let b2 = bank.add(format!("{prefix}.b2"), Tensor::zeros(&[d_out]));
        MlpParams {
            w1,
            b1,
            w2,
            b2,
            d_hidden,
        }
    }
}

pub struct MlpSaved<T> {
    input: Tensor<T>,
    z1: Tensor<T>,
    a: Tensor<T>,
}

/// Batched forward over row vectors: `out = silu(x W1 + b1) W2 + b2`.
pub fn mlp_forward<T: Scalar>(
    bank: &ParamBank<T>,
    mlp: &MlpParams,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, MlpSaved<T>)> {
    let mut z1 = matmul(x, bank.value(mlp.w1))?;
    let b1 = bank.value(mlp.b1).data();
    for i in 0..z1.rows() {
        for (v, &b) in z1.row_mut(i).iter_mut().zip(b1) {
            *v = *v + b;
        }
    }
    let a = z1.map(silu_scalar);
    let mut out = matmul(&a, bank.value(mlp.w2))?;
    let b2 = bank.value(mlp.b2).data();
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(b2) {
            *v = *v + b;
        }
    }
    Ok((
        out,
        MlpSaved {
            input: x.clone(),
            z1,
            a,
        },
    ))
}

/// Backward; accumulates weight/bias gradients and returns dL/dx.
pub fn mlp_backward<T: Scalar>(
    bank: &mut ParamBank<T>,
    mlp: &MlpParams,
    saved: &MlpSaved<T>,
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dw2 = matmul_tn(&saved.a, d_out)?;
    bank.accumulate(mlp.w2, &dw2);
    let db2 = column_sums(d_out);
    bank.accumulate(mlp.b2, &db2);

    let d_a = matmul_nt(d_out, bank.value(mlp.w2))?;
    let mut d_z1 = d_a;
    for (d, &z) in d_z1.data_mut().iter_mut().zip(saved.z1.data()) {
        *d = silu_backward_scalar(z, *d);
    }
    let dw1 = matmul_tn(&saved.input, &d_z1)?;
    bank.accumulate(mlp.w1, &dw1);
    let db1 = column_sums(&d_z1);
    bank.accumulate(mlp.b1, &db1);
    matmul_nt(&d_z1, bank.value(mlp.w1))
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(&[t.cols()]);
    for i in 0..t.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(t.row(i)) {
            *o = *o + v;
        }
    }
    out
}

/// Which auxiliary losses exist and which label column feeds each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxKind {
    Binary,
    Regression,
}

#[derive(Clone, Debug)]
pub struct AuxTaskSpec {
    pub name: &'static str,
    pub kind: AuxKind,
    pub label_index: usize,
}

/// Desk-scale default auxiliary tasks: a long-dwell indicator and an
/// impression-duration regression.
pub fn default_aux_tasks() -> Vec<AuxTaskSpec> {
    vec![
        AuxTaskSpec {
            name: "long_dwell",
            kind: AuxKind::Binary,
            label_index: 0,
        },
        AuxTaskSpec {
            name: "duration",
            kind: AuxKind::Regression,
            label_index: 1,
        },
    ]
}

/// K context towers plus J shared auxiliary heads.
#[derive(Clone, Debug)]
pub struct HeadBankParams {
    pub context_heads: Vec<MlpParams>,
    pub aux_heads: Vec<MlpParams>,
    pub aux_tasks: Vec<AuxTaskSpec>,
}

impl HeadBankParams {
    pub fn init<T: Scalar>(
        bank: &mut ParamBank<T>,
        d_model: usize,
        k: usize,
        aux_tasks: Vec<AuxTaskSpec>,
        mut sample: impl FnMut() -> f64,
    ) -> Self {
        assert!(k >= 1);
        let d_hidden = (d_model / 2).max(1);
        let context_heads = (0..k)
            .map(|i| {
                MlpParams::init(bank, d_model, d_hidden, 1, &format!("head.ctx{i}"), &mut sample)
            })
            .collect();
        let aux_heads = aux_tasks
            .iter()
            .map(|t| {
                MlpParams::init(
                    bank,
                    d_model,
                    d_hidden,
                    1,
                    &format!("head.aux_{}", t.name),
                    &mut sample,
                )
            })
            .collect();
        HeadBankParams {
            context_heads,
            aux_heads,
            aux_tasks,
        }
    }

    pub fn k(&self) -> usize {
        self.context_heads.len()
    }
}

/// Per-impression outputs: K context logits and J auxiliary outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T> {
    pub context_logits: Vec<T>,
    pub aux_outputs: Vec<T>,
}

/// All heads applied to a single transformer output vector.
pub fn predict_all_heads<T: Scalar>(
    bank: &ParamBank<T>,
    heads: &HeadBankParams,
    h_t: &[T],
) -> Result<PredictionSet<T>> {
    let x = Tensor::from_vec(&[1, h_t.len()], h_t.to_vec())?;
    let mut context_logits = Vec::with_capacity(heads.k());
    for mlp in &heads.context_heads {
        let (out, _) = mlp_forward(bank, mlp, &x)?;
        context_logits.push(out.data()[0]);
    }
    let mut aux_outputs = Vec::with_capacity(heads.aux_heads.len());
    for mlp in &heads.aux_heads {
        let (out, _) = mlp_forward(bank, mlp, &x)?;
        aux_outputs.push(out.data()[0]);
    }
    Ok(PredictionSet {
        context_logits,
        aux_outputs,
    })
}

/// Serving-time selection: the logit for the bucket being filled. Pure
/// lookup, no recomputation, and auxiliary outputs never participate.
pub fn serve_select<T: Scalar>(prediction: &PredictionSet<T>, bucket: usize) -> Result<T> {
    if bucket < 1 || bucket > prediction.context_logits.len() {
        return Err(Error::BucketRange {
            bucket,
            k: prediction.context_logits.len(),
        });
    }
    Ok(prediction.context_logits[bucket - 1])
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (T::one() + (-x).exp()).ln()
    } else {
        (T::one() + x.exp()).ln()
    }
}

/// Binary cross-entropy on a logit: `y*softplus(-z) + (1-y)*softplus(z)`.
pub fn bce_with_logit<T: Scalar>(z: T, y: T) -> T {
    y * softplus(-z) + (T::one() - y) * softplus(z)
}

/// Routed context loss: sum over impressions of BCE between the realized
/// bucket's logit and the label. Returns the loss and d/dlogits, which is
/// zero everywhere except the routed column of each impression.
pub fn context_loss<T: Scalar>(
    logits: &Tensor<T>,
    realized_buckets: &[u32],
    labels: &[u8],
) -> Result<(T, Tensor<T>)> {
    let n = logits.rows();
    let k = logits.cols();
    if realized_buckets.len() != n || labels.len() != n {
        return Err(Error::Shape(format!(
            "context_loss got {n} logit rows, {} buckets, {} labels",
            realized_buckets.len(),
            labels.len()
        )));
    }
    let mut loss = T::zero();
    let mut d_logits = Tensor::zeros(&[n, k]);
    for t in 0..n {
        let bucket = realized_buckets[t] as usize;
        if bucket < 1 || bucket > k {
            return Err(Error::BucketRange { bucket, k });
        }
        let z = logits.at2(t, bucket - 1);
        let y = T::from_f64(labels[t] as f64);
        loss = loss + bce_with_logit(z, y);
        d_logits.set2(t, bucket - 1, sigmoid_scalar(z) - y);
    }
    Ok((loss, d_logits))
}

/// RankNet pairwise loss over all cross-user (positive, negative) pairs in
/// the batch, normalized by the pair count.
#[derive(Clone, Debug)]
pub struct PairwiseLoss<T> {
    pub value: T,
    /// True when either side was empty and the term was skipped.
    pub skipped: bool,
    pub d_pos: Vec<T>,
    pub d_neg: Vec<T>,
}

pub fn pairwise_loss<T: Scalar>(z_pos: &[T], z_neg: &[T]) -> PairwiseLoss<T> {
    if z_pos.is_empty() || z_neg.is_empty() {
        return PairwiseLoss {
            value: T::zero(),
            skipped: true,
            d_pos: vec![T::zero(); z_pos.len()],
            d_neg: vec![T::zero(); z_neg.len()],
        };
    }
    let norm = T::one() / T::from_f64((z_pos.len() * z_neg.len()) as f64);
    let mut value = T::zero();
    let mut d_pos = vec![T::zero(); z_pos.len()];
    let mut d_neg = vec![T::zero(); z_neg.len()];
    for (i, &zp) in z_pos.iter().enumerate() {
        for (j, &zn) in z_neg.iter().enumerate() {
            let diff = zp - zn;
            // -log sigmoid(diff) = softplus(-diff)
            value = value + softplus(-diff);
            let g = T::one() - sigmoid_scalar(diff);
            d_pos[i] = d_pos[i] - g;
            d_neg[j] = d_neg[j] + g;
        }
    }
    value = value * norm;
    for d in &mut d_pos {
        *d = *d * norm;
    }
    for d in &mut d_neg {
        *d = *d * norm;
    }
    PairwiseLoss {
        value,
        skipped: false,
        d_pos,
        d_neg,
    }
}

/// Loss-term weights.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub lambda_ctx: f64,
    pub lambda_aux: Vec<f64>,
    pub lambda_pair: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ctx: 1.0,
            lambda_aux: vec![0.1, 0.1],
            lambda_pair: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.lambda_ctx)
            .chain(self.lambda_aux.iter().copied())
            .chain(std::iter::once(self.lambda_pair));
        let mut any_positive = false;
        for l in all {
            if l < 0.0 {
                return Err(Error::Config(format!("negative loss weight {l}")));
            }
            if l > 0.0 {
                any_positive = true;
            }
        }
        if !any_positive {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// `lambda_ctx * ctx + sum_j lambda_j * aux_j + lambda_pair * pair`.
pub fn total_loss<T: Scalar>(ctx: T, aux: &[T], pair: T, weights: &LossWeights) -> T {
    let mut total = T::from_f64(weights.lambda_ctx) * ctx;
    for (a, l) in aux.iter().zip(&weights.lambda_aux) {
        total = total + T::from_f64(*l) * *a;
    }
    total + T::from_f64(weights.lambda_pair) * pair
}
