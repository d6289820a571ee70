//! Training objectives and their gradients.
//!
//! * contrastive margin loss on length-normalised representations,
//! * mixup interpolation and its KL loss,
//! * the pairwise combination `β·L_con + (1 − β)·L_mix`,
//! * the clean/errorful fine-tuning loss `CE(p) + η·(CE(p̃) + KL(p ‖ p̃))`.
//!
//! KL terms take `(first ‖ second)` in the order written.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::numerics::{cross_entropy, kl_unchecked, softmax, PROB_FLOOR};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHyperparams {
    pub m_pos: f64,
    pub m_neg: f64,
    /// Shape of the symmetric `Beta(α, α)` mixing distribution.
    pub alpha: f64,
    /// Weight of the contrastive term in the pairwise loss.
    pub beta_weight: f64,
    /// Weight of the errorful branch in the fine-tuning loss.
    pub eta: f64,
    /// Probability of replacing a training input by a sampled hypothesis.
    pub epsilon_halluc: f64,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        LossHyperparams {
            m_pos: 0.8,
            m_neg: 1.2,
            alpha: 0.4,
            beta_weight: 0.5,
            eta: 1.0,
            epsilon_halluc: 0.5,
        }
    }
}

impl LossHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_neg > self.m_pos) {
            return Err(Error::Config(alloc::format!(
                "negative margin {} must exceed positive margin {}",
                self.m_neg,
                self.m_pos
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(alloc::format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta_weight) {
            return Err(Error::Config(alloc::format!(
                "beta_weight must be in [0, 1], got {}",
                self.beta_weight
            )));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config(alloc::format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_halluc) {
            return Err(Error::Config(alloc::format!(
                "epsilon_halluc must be in [0, 1], got {}",
                self.epsilon_halluc
            )));
        }
        Ok(())
    }
}

/// A sampled training pair. `y_pair` holds iff the labels agree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairInstance {
    pub x_i: usize,
    pub x_j: usize,
    pub y_i: usize,
    pub y_j: usize,
    pub y_pair: bool,
}

impl PairInstance {
    /// `x_i`, `x_j` are utterance indices into the training split.
    pub fn new(x_i: usize, y_i: usize, x_j: usize, y_j: usize) -> Self {
        PairInstance {
            x_i,
            x_j,
            y_i,
            y_j,
            y_pair: y_i == y_j,
        }
    }
}

const MIN_NORM: f64 = 1e-12;

/// Distance `D` between the unit-normalised vectors plus their unit forms.
fn normalised_distance(r_i: &[f64], r_j: &[f64]) -> Result<(f64, f64, f64, Vec<f64>, Vec<f64>)> {
    if r_i.len() != r_j.len() {
        return Err(Error::shape(r_i.len(), r_j.len(), "contrastive pair"));
    }
    let (ni, nj) = (math::l2_norm(r_i), math::l2_norm(r_j));
    if ni < MIN_NORM || nj < MIN_NORM {
        return Err(Error::InvalidInput(
            "contrastive loss needs non-zero representations".into(),
        ));
    }
    let u: Vec<f64> = r_i.iter().map(|x| x / ni).collect();
    let v: Vec<f64> = r_j.iter().map(|x| x / nj).collect();
    Ok((math::euclidean(&u, &v), ni, nj, u, v))
}

/// `½·y·max(0, D − m_pos)² + ½·(1 − y)·max(0, m_neg − D)²`.
pub fn contrastive_loss(r_i: &[f64], r_j: &[f64], y_pair: bool, hp: &LossHyperparams) -> Result<f64> {
    let (d, ..) = normalised_distance(r_i, r_j)?;
    Ok(contrastive_from_distance(d, y_pair, hp).0)
}

/// Loss and `∂L/∂D`.
fn contrastive_from_distance(d: f64, y_pair: bool, hp: &LossHyperparams) -> (f64, f64) {
    if y_pair {
        let gap = (d - hp.m_pos).max(0.0);
        (0.5 * gap * gap, gap)
    } else {
        let gap = (hp.m_neg - d).max(0.0);
        (0.5 * gap * gap, -gap)
    }
}

/// Contrastive loss with gradients with respect to both raw representations.
pub fn contrastive_loss_grad(
    r_i: &[f64],
    r_j: &[f64],
    y_pair: bool,
    hp: &LossHyperparams,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (d, ni, nj, u, v) = normalised_distance(r_i, r_j)?;
    let (loss, dl_dd) = contrastive_from_distance(d, y_pair, hp);
    let n = r_i.len();
    if dl_dd == 0.0 || d == 0.0 {
        // at D = 0 the distance has no defined direction; take the zero subgradient
        return Ok((loss, vec![0.0; n], vec![0.0; n]));
    }
    // ∂D/∂u = (u − v)/D, then through the normalisation: (g − u(u·g))/‖r‖
    let g_u: Vec<f64> = u.iter().zip(&v).map(|(a, b)| dl_dd * (a - b) / d).collect();
    let g_v: Vec<f64> = g_u.iter().map(|x| -x).collect();
    let project = |g: &[f64], unit: &[f64], norm: f64| -> Vec<f64> {
        let along = math::dot(g, unit);
        g.iter().zip(unit).map(|(gk, uk)| (gk - uk * along) / norm).collect()
    };
    Ok((loss, project(&g_u, &u, ni), project(&g_v, &v, nj)))
}

/// Draw `λ ~ Beta(α, α)`.
pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(alloc::format!("alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::Config(alloc::format!("invalid Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Interpolate representations and one-hot labels with weight `λ` on the
/// first member.
pub fn mixup(
    r_i: &[f64],
    r_j: &[f64],
    y_i: usize,
    y_j: usize,
    num_classes: usize,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if r_i.len() != r_j.len() {
        return Err(Error::shape(r_i.len(), r_j.len(), "mixup pair"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(alloc::format!("lambda {lambda} outside [0, 1]")));
    }
    for y in [y_i, y_j] {
        if y >= num_classes {
            return Err(Error::Index {
                index: y,
                len: num_classes,
            });
        }
    }
    let r_mix = r_i
        .iter()
        .zip(r_j)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    let mut y_mix = vec![0.0; num_classes];
    y_mix[y_i] += lambda;
    y_mix[y_j] += 1.0 - lambda;
    Ok((r_mix, y_mix))
}

/// `KL(y_mix ‖ softmax(logits))`.
pub fn mixup_loss(y_mix: &[f64], logits: &[f64]) -> Result<f64> {
    mixup_loss_grad(y_mix, logits).map(|(l, _)| l)
}

/// Mixup loss and its gradient with respect to the logits, `p − y_mix`.
pub fn mixup_loss_grad(y_mix: &[f64], logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y_mix.len() != logits.len() {
        return Err(Error::shape(y_mix.len(), logits.len(), "mixup target"));
    }
    let p = softmax(logits)?;
    let loss = kl_unchecked(y_mix, &p);
    let mass: f64 = y_mix.iter().sum();
    let grad = p.iter().zip(y_mix).map(|(pk, yk)| pk * mass - yk).collect();
    Ok((loss, grad))
}

/// `β·l_con + (1 − β)·l_mix`.
pub fn pairwise_loss_l1(l_con: f64, l_mix: f64, beta_weight: f64) -> f64 {
    beta_weight * l_con + (1.0 - beta_weight) * l_mix
}

/// Components of the fine-tuning loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLoss {
    pub total: f64,
    pub ce_clean: f64,
    pub ce_err: f64,
    pub kl: f64,
    pub d_clean: Vec<f64>,
    pub d_err: Vec<f64>,
}

/// `CE(p, y) + η·(CE(p̃, y) + KL(p ‖ p̃))`.
pub fn finetune_loss_l2(logits_clean: &[f64], logits_err: &[f64], y: usize, eta: f64) -> Result<f64> {
    finetune_loss_l2_grad(logits_clean, logits_err, y, eta).map(|l| l.total)
}

/// Fine-tuning loss with gradients for both branches; no stop-gradient.
pub fn finetune_loss_l2_grad(logits_clean: &[f64], logits_err: &[f64], y: usize, eta: f64) -> Result<FinetuneLoss> {
    if logits_clean.len() != logits_err.len() {
        return Err(Error::shape(logits_clean.len(), logits_err.len(), "fine-tuning logits"));
    }
    if !(eta >= 0.0) {
        return Err(Error::Config(alloc::format!("eta must be >= 0, got {eta}")));
    }
    let p = softmax(logits_clean)?;
    let q = softmax(logits_err)?;
    let ce_clean = cross_entropy(&p, y)?;
    let ce_err = cross_entropy(&q, y)?;
    let kl = kl_unchecked(&p, &q);
    let total = ce_clean + eta * (ce_err + kl);

    // ∂KL(p‖q)/∂z_clean = p ⊙ (g − p·g), g = ln p − ln q
    let g: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(pk, qk)| math::ln(pk.max(PROB_FLOOR)) - math::ln(qk.max(PROB_FLOOR)))
        .collect();
    let pg = math::dot(&p, &g);
    let mut d_clean: Vec<f64> = p
        .iter()
        .zip(&g)
        .map(|(pk, gk)| eta * pk * (gk - pg))
        .collect();
    d_clean.iter_mut().zip(&p).for_each(|(d, pk)| *d += pk);
    d_clean[y] -= 1.0;
    // CE(q) and KL both give q − target on the errorful logits
    let mut d_err: Vec<f64> = q.iter().zip(&p).map(|(qk, pk)| eta * (2.0 * qk - pk)).collect();
    d_err[y] -= eta;
    Ok(FinetuneLoss {
        total,
        ce_clean,
        ce_err,
        kl,
        d_clean,
        d_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::rng;
    use proptest::prelude::*;

    fn hp() -> LossHyperparams {
        LossHyperparams::default()
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_loss(&[1.0, 2.0], &[3.0, 6.0], true, &hp()).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&[1.0, 0.0], &[0.0, 1.0], false, &hp()).unwrap(), 0.0);
        let want = 0.5 * (2f64.sqrt() - 0.8).powi(2);
        let got = contrastive_loss(&[1.0, 0.0], &[0.0, 1.0], true, &hp()).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.18863).abs() < 1e-5);
    }

    #[test]
    fn contrastive_rejects_zero_vectors() {
        assert!(matches!(
            contrastive_loss(&[0.0, 0.0], &[1.0, 0.0], true, &hp()),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            contrastive_loss(&[1.0], &[1.0, 0.0], true, &hp()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut r = rng::seeded(seed);
            let x: Vec<f64> = (0..8).map(|_| 2.0 * rng::uniform(&mut r) - 1.0).collect();
            for y_pair in [true, false] {
                let f = |v: &[f64]| {
                    let (l, gi, gj) = contrastive_loss_grad(&v[..4], &v[4..], y_pair, &hp()).unwrap();
                    (l, [gi, gj].concat())
                };
                assert!(grad_check(f, &x, 1e-6).unwrap() < 1e-4);
            }
        }
    }

    #[test]
    fn lambda_uniform_mean() {
        let mut r = rng::seeded(11);
        let draws: Vec<f64> = (0..10_000).map(|_| sample_lambda(1.0, &mut r).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
        assert!(draws.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn lambda_variance_decreases_with_alpha() {
        let var = |alpha: f64| {
            let mut r = rng::seeded(5);
            let d: Vec<f64> = (0..10_000).map(|_| sample_lambda(alpha, &mut r).unwrap()).collect();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d.len() as f64
        };
        // Beta(α, α) variance is 1 / (4(2α + 1))
        let (lo, hi) = (var(5.0), var(0.2));
        assert!(hi > lo);
        assert!((hi - 0.25 / 1.4).abs() < 0.01 && (lo - 0.25 / 11.0).abs() < 0.005);
    }

    #[test]
    fn lambda_rejects_bad_alpha() {
        let mut r = rng::seeded(0);
        assert!(matches!(sample_lambda(0.0, &mut r), Err(Error::Config(_))));
        assert!(matches!(sample_lambda(-1.0, &mut r), Err(Error::Config(_))));
        let a = sample_lambda(0.4, &mut rng::seeded(3)).unwrap();
        let b = sample_lambda(0.4, &mut rng::seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixup_examples() {
        let (r, y) = mixup(&[1.0, 2.0], &[3.0, 4.0], 0, 2, 3, 1.0).unwrap();
        assert_eq!((r, y), (vec![1.0, 2.0], vec![1.0, 0.0, 0.0]));
        let (r, y) = mixup(&[1.0, 2.0], &[3.0, 4.0], 0, 2, 3, 0.0).unwrap();
        assert_eq!((r, y), (vec![3.0, 4.0], vec![0.0, 0.0, 1.0]));
        let (r, y) = mixup(&[1.0, 0.0], &[0.0, 1.0], 0, 1, 3, 0.5).unwrap();
        assert_eq!((r, y), (vec![0.5, 0.5], vec![0.5, 0.5, 0.0]));
        assert!(matches!(mixup(&[1.0], &[1.0], 0, 3, 3, 0.5), Err(Error::Index { .. })));
        assert!(mixup(&[1.0], &[1.0], 0, 1, 3, 1.5).is_err());
    }

    #[test]
    fn mixup_loss_examples() {
        assert!(mixup_loss(&[1.0 / 3.0; 3], &[0.7; 3]).unwrap().abs() < 1e-15);
        let logits = [0.3, -1.2, 2.0];
        let p = softmax(&logits).unwrap();
        let ce = cross_entropy(&p, 2).unwrap();
        assert!((mixup_loss(&[0.0, 0.0, 1.0], &logits).unwrap() - ce).abs() < 1e-14);
        let want = 2.0 * 0.5 * 1.5f64.ln();
        let got = mixup_loss(&[0.5, 0.5, 0.0], &[0.0; 3]).unwrap();
        assert!((got - want).abs() < 1e-15 && (got - 0.405465).abs() < 1e-6);
        assert!(matches!(mixup_loss(&[1.0], &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn mixup_loss_gradient() {
        for seed in 0..20u64 {
            let mut r = rng::seeded(seed);
            let logits: Vec<f64> = (0..4).map(|_| 3.0 * rng::uniform(&mut r) - 1.5).collect();
            let lam = rng::uniform(&mut r);
            let (_, y) = mixup(&[0.0], &[0.0], 1, 3, 4, lam).unwrap();
            let err = grad_check(|z| mixup_loss_grad(&y, z).unwrap(), &logits, 1e-6).unwrap();
            assert!(err < 1e-4);
        }
    }

    #[test]
    fn l1_examples() {
        assert_eq!(pairwise_loss_l1(2.0, 4.0, 0.0), 4.0);
        assert_eq!(pairwise_loss_l1(2.0, 4.0, 1.0), 2.0);
        assert_eq!(pairwise_loss_l1(2.0, 4.0, 0.25), 3.5);
    }

    #[test]
    fn l2_examples() {
        let a = [0.2, 1.5, -0.3];
        let b = [1.0, -0.5, 0.4];
        let ce = cross_entropy(&softmax(&a).unwrap(), 1).unwrap();
        assert_eq!(finetune_loss_l2(&a, &b, 1, 0.0).unwrap(), ce);
        for eta in [0.1, 1.0, 10.0] {
            let same = finetune_loss_l2(&a, &a, 1, eta).unwrap();
            assert!((same - ce * (1.0 + eta)).abs() < 1e-12);
        }
        // composition: CE_clean + η (CE_err + KL) assembled from component oracles
        let l = finetune_loss_l2_grad(&a, &b, 0, 1.0).unwrap();
        let p = softmax(&a).unwrap();
        let q = softmax(&b).unwrap();
        let kl: f64 = p.iter().zip(&q).map(|(x, y)| x * (x / y).ln()).sum();
        assert!((l.kl - kl).abs() < 1e-14);
        assert!((l.total - (-p[0].ln() + (-q[0].ln() + kl))).abs() < 1e-12);
        assert!(matches!(finetune_loss_l2(&a, &b[..2], 0, 1.0), Err(Error::Shape(_))));
        assert!(finetune_loss_l2(&a, &b, 5, 1.0).is_err());
    }

    #[test]
    fn l2_gradient() {
        for seed in 0..20u64 {
            let mut r = rng::seeded(seed);
            let z: Vec<f64> = (0..6).map(|_| 4.0 * rng::uniform(&mut r) - 2.0).collect();
            for eta in [0.0, 0.1, 1.0, 10.0] {
                let f = |v: &[f64]| {
                    let l = finetune_loss_l2_grad(&v[..3], &v[3..], 2, eta).unwrap();
                    (l.total, [l.d_clean, l.d_err].concat())
                };
                assert!(grad_check(f, &z, 1e-6).unwrap() < 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn contrastive_scale_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            b in prop::collection::vec(-3.0f64..3.0, 4),
            s in 0.01f64..100.0, t in 0.01f64..100.0, y in any::<bool>(),
        ) {
            prop_assume!(math::l2_norm(&a) > 1e-3 && math::l2_norm(&b) > 1e-3);
            let base = contrastive_loss(&a, &b, y, &hp()).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * t).collect();
            prop_assert!((contrastive_loss(&sa, &sb, y, &hp()).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn contrastive_zero_exactly_inside_margins(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            y in any::<bool>(),
        ) {
            prop_assume!(math::l2_norm(&a) > 1e-3 && math::l2_norm(&b) > 1e-3);
            let (d, ..) = normalised_distance(&a, &b).unwrap();
            prop_assert!((0.0..=2.0 + 1e-12).contains(&d));
            let l = contrastive_loss(&a, &b, y, &hp()).unwrap();
            let inactive = if y { d <= 0.8 } else { d >= 1.2 };
            prop_assert_eq!(l == 0.0, inactive);
        }

        #[test]
        fn mixup_stays_on_segment(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            lam in 0.0f64..=1.0, yi in 0usize..4, yj in 0usize..4,
        ) {
            let (r, y) = mixup(&a, &b, yi, yj, 4, lam).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
            for k in 0..3 {
                let (lo, hi) = (a[k].min(b[k]), a[k].max(b[k]));
                prop_assert!(r[k] >= lo - 1e-12 && r[k] <= hi + 1e-12);
            }
        }

        #[test]
        fn l2_non_negative(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            y in 0usize..4, eta in 0.0f64..20.0,
        ) {
            prop_assert!(finetune_loss_l2(&a, &b, y, eta).unwrap() >= 0.0);
        }
    }
}
