//! Parameter storage, Adam, and the finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Stable identifier of a parameter inside a [`ParamBank`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat, insertion-ordered registry of all learnable parameters. Layers hold
/// `ParamId`s; the optimizer, gradient checker, and checkpoint writer iterate
/// the bank in a fixed order, which keeps every run reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamBank<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamBank<T> {
    pub fn new() -> Self {
        ParamBank { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    pub fn param(&self, idx: usize) -> &Parameter<T> {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// `grad[id] += contribution`.
    pub fn accumulate(&mut self, id: ParamId, contribution: &Tensor<T>) {
        self.params[id.0].grad.add_scaled(contribution, T::one());
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn validate_grads_finite(&self) -> Result<()> {
        for p in &self.params {
            p.grad.validate_finite(&format!("grad of {}", p.name))?;
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair per bank entry.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(bank: &ParamBank<T>, lr: f64) -> Self {
        AdamState {
            m: bank.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: bank.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. `lr` is the effective learning rate
/// for this step (the trainer applies warmup before calling).
pub fn adam_step<T: Scalar>(bank: &mut ParamBank<T>, state: &mut AdamState<T>, lr: f64) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::from_f64(state.beta1);
    let b2 = T::from_f64(state.beta2);
    let eps = T::from_f64(state.eps);
    let bias1 = T::from_f64(1.0 - state.beta1.powi(t));
    let bias2 = T::from_f64(1.0 - state.beta2.powi(t));
    let lr = T::from_f64(lr);
    let one = T::one();

    for (idx, p) in bank.params.iter_mut().enumerate() {
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let w = p.value.data_mut();
        let g = p.grad.data();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Central-difference check of the analytic gradients currently stored in
/// `bank` against `loss_fn`. Samples up to `samples_per_param` coordinates
/// from every parameter so each layer gets coverage. Parameter values are
/// restored exactly after probing. Meaningful only in f64.
///
/// Each coordinate is probed with central differences at `eps` and `eps/2`
/// and the two are Richardson-combined, which cancels the leading
/// truncation term and lets `eps` sit well above the f64 cancellation
/// floor. Small gradients stay resolvable that way.
pub fn finite_diff_check<F>(
    bank: &mut ParamBank<f64>,
    mut loss_fn: F,
    epsilon: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamBank<f64>) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for idx in 0..bank.len() {
        let numel = bank.param(idx).value.numel();
        let take = samples_per_param.min(numel);
        let mut coords: Vec<usize> = if take == numel {
            (0..numel).collect()
        } else {
            // sample without replacement
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < take {
                picked.insert(rng.random_range(0..numel));
            }
            picked.into_iter().collect()
        };
        coords.sort_unstable();

        for c in coords {
            let w0 = bank.param(idx).value.data()[c];
            let eps = epsilon * w0.abs().max(1.0);

            bank.param_mut(idx).value.data_mut()[c] = w0 + eps;
            let f_plus = loss_fn(bank)?;
            bank.param_mut(idx).value.data_mut()[c] = w0 - eps;
            let f_minus = loss_fn(bank)?;
            bank.param_mut(idx).value.data_mut()[c] = w0;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss during finite differences of {}",
                    bank.param(idx).name
                )));
            }

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let analytic = bank.param(idx).grad.data()[c];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = bank.param(idx).name.clone();
                report.worst_index = c;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
