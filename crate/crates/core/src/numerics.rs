//! Dense vector math used by the model: probability functions, the Adam
//! optimiser, z-scoring, and a central-difference gradient checker.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// A named, shaped block of `f64` values.
///
/// Model parameters are stored as plain vectors for speed; `Tensor` is the
/// exchange form used by checkpoints and inspection tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(expected, values.len(), "tensor values"));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Allocate (or reset) the gradient slot.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(alloc::format!("{what} contains non-finite values")))
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    check_finite(logits, "logits")?;
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Unchecked softmax for hot paths; `logits` must be non-empty and finite.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = math::exp(l - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `KL(p ‖ q) = Σ p_k ln(p_k / q_k)` with `0 · ln 0 = 0` and `q` floored.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(p.len(), q.len(), "kl_divergence"));
    }
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (math::ln(pk) - math::ln(qk.max(PROB_FLOOR))))
        .sum();
    // rounding can leave a tiny negative residue when p == q
    kl.max(0.0)
}

/// `-ln p[label]` with the probability floored.
pub fn cross_entropy(p: &[f64], label: usize) -> Result<f64> {
    let pk = p.get(label).ok_or(Error::Index {
        index: label,
        len: p.len(),
    })?;
    Ok(-math::ln(pk.max(PROB_FLOOR)))
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        OptimizerState {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    /// One Adam update across several parameter blocks that together make up
    /// this group (in order). The step counter advances once.
    pub fn step<'a, I>(&mut self, blocks: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut [f64], &'a [f64])>,
    {
        if !(lr > 0.0) {
            return Err(Error::Config(alloc::format!("learning rate must be > 0, got {lr}")));
        }
        let blocks: Vec<_> = blocks.into_iter().collect();
        let mut total = 0;
        for (p, g) in &blocks {
            if p.len() != g.len() {
                return Err(Error::shape(p.len(), g.len(), "adam gradient"));
            }
            total += p.len();
        }
        if total != self.first_moment.len() {
            return Err(Error::shape(self.first_moment.len(), total, "adam parameters"));
        }

        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - math::powf(ADAM_BETA1, t);
        let bias2 = 1.0 - math::powf(ADAM_BETA2, t);
        let mut offset = 0;
        for (params, grads) in blocks {
            let m = &mut self.first_moment[offset..offset + params.len()];
            let v = &mut self.second_moment[offset..offset + params.len()];
            for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (math::sqrt(v_hat) + ADAM_EPSILON);
            }
            offset += params.len();
        }
        Ok(())
    }
}

/// Bias-corrected Adam update on a single flat parameter vector.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    state.step(core::iter::once((params, grads)), lr)
}

/// Compare an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point.
/// The result is `max_k |analytic_k − numeric_k| / max(1, |analytic_k|)`.
pub fn grad_check<F>(mut f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidInput(alloc::format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let (value, analytic) = f(point);
    if !value.is_finite() {
        return Err(Error::InvalidInput("function value is not finite".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(point.len(), analytic.len(), "analytic gradient"));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + eps;
        let (plus, _) = f(&x);
        x[k] = orig - eps;
        let (minus, _) = f(&x);
        x[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidInput(alloc::format!(
                "function value not finite near coordinate {k}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Standardise with the population standard deviation. A spread below
/// `1e-9` yields all zeros.
pub fn z_score_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::InvalidInput(String::from(
            "z-score normalisation needs at least two values",
        )));
    }
    check_finite(v, "z-score input")?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = math::sqrt(var);
    if std < 1e-9 {
        return Ok(vec![0.0; v.len()]);
    }
    Ok(v.iter().map(|x| (x - mean) / std).collect())
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
