//! Importance-sampling weights and their effective loss functionals.
//!
//! Given per-sample losses `L_1..L_N` and a temperature `T > 0`, two
//! aggregator families arise from the KL-constrained worst-case risk:
//!
//! ```text
//! ISloss:     is_loss(L, T)     = T · log Σ_i exp(L_i / T)     w_i ∝ exp(L_i / T)
//! LogISloss:  log_is_loss(L, T) = T · log Σ_i L_i^(1/T)        w_i ∝ L_i^(1/T)
//! ```
//!
//! The weights are the optimality condition of the inner maximization over
//! the probability simplex; the scalar losses are the maximized Lagrangian.
//! `exp(log_is_loss(L, T))` is the `(1/T)`-norm of `L`, so minimizing
//! LogISloss is p-norm minimization with `p = 1/T`.
//!
//! All evaluation happens in log space with max-shifting: for any finite
//! input no intermediate overflows, even when losses span hundreds of orders
//! of magnitude or `T` is extreme. Note that `is_loss` keeps the full
//! `T·log Σ exp` value including the `T·log N` offset; the offset is constant
//! in the model parameters and irrelevant to gradients.

use thiserror::Error;

/// Default clamp for the opt-in epsilon mode of the log-domain aggregators
/// (per-sample cross-entropy can underflow to exact zero).
pub const DEFAULT_POSITIVE_EPSILON: f64 = 1e-12;

/// Errors from loss construction and evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("loss vector must be non-empty")]
    Empty,
    #[error("loss value at index {0} is not finite")]
    NonFinite(usize),
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("log-domain aggregator requires strictly positive losses; index {0} is {1}")]
    NonPositiveLoss(usize, f64),
    #[error("weights must lie in [0,1]; index {0} is {1}")]
    WeightOutOfRange(usize, f64),
    #[error("weights must sum to 1 within 1e-12, got {0}")]
    NotNormalized(f64),
}

/// Per-sample nonnegative-ish losses for one batch; non-empty, all finite.
///
/// Entries may be any finite real for the ISloss family; the LogISloss
/// operations additionally require strict positivity and report a domain
/// error otherwise (use [`LossVector::clamp_min`] for the epsilon mode).
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LossError> {
        if values.is_empty() {
            return Err(LossError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty vectors
    }

    /// Epsilon mode: entries below `eps` are raised to `eps`, making the
    /// vector a valid LogISloss input. `eps` must be positive.
    pub fn clamp_min(&self, eps: f64) -> LossVector {
        assert!(eps > 0.0, "clamp epsilon must be positive");
        LossVector(self.0.iter().map(|&v| v.max(eps)).collect())
    }

    fn max(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Temperature `T > 0`, the Lagrange multiplier of the KL budget. Small `T`
/// tolerates large distribution deviation; large `T` forces near-uniform
/// weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(t: f64) -> Result<Self, LossError> {
        if !(t.is_finite() && t > 0.0) {
            return Err(LossError::InvalidTemperature(t));
        }
        Ok(Self(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Point on the probability simplex: entries in `[0,1]` summing to 1 within
/// 1e-12.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self, LossError> {
        if weights.is_empty() {
            return Err(LossError::Empty);
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return Err(LossError::WeightOutOfRange(i, w));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(LossError::NotNormalized(sum));
        }
        Ok(Self(weights))
    }

    /// Exact uniform distribution over `n` points.
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        Self(vec![1.0 / n as f64; n])
    }

    pub(crate) fn from_normalized(weights: Vec<f64>) -> Self {
        debug_assert!(!weights.is_empty());
        debug_assert!(weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        Self(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Max-shifted exponentials `exp((x_i - max x) / t)` and their sum.
/// Every exponential argument is ≤ 0, so nothing overflows.
fn shifted_exp_terms(xs: &[f64], shift: f64, t: f64) -> (Vec<f64>, f64) {
    let terms: Vec<f64> = xs.iter().map(|&x| ((x - shift) / t).exp()).collect();
    let sum = terms.iter().sum();
    (terms, sum)
}

fn normalize(terms: Vec<f64>, sum: f64) -> WeightVector {
    let mut w: Vec<f64> = terms.into_iter().map(|e| e / sum).collect();
    // One renormalization pass keeps the simplex invariant tight after the
    // per-entry division roundoff.
    let s: f64 = w.iter().sum();
    for wi in &mut w {
        *wi = (*wi / s).clamp(0.0, 1.0);
    }
    WeightVector::from_normalized(w)
}

/// ISloss weights: softmax of `L / T` (optimality condition of the inner
/// maximization). Larger losses get larger weights.
pub fn is_weights(losses: &LossVector, temp: Temperature) -> WeightVector {
    let shift = losses.max();
    let (terms, sum) = shifted_exp_terms(losses.as_slice(), shift, temp.get());
    normalize(terms, sum)
}

/// ISloss: `T · log Σ exp(L_i / T)`, the effective loss functional of the
/// KL-constrained worst case. Retains the `T·log N` offset.
pub fn is_loss(losses: &LossVector, temp: Temperature) -> f64 {
    let t = temp.get();
    let shift = losses.max();
    let (_, sum) = shifted_exp_terms(losses.as_slice(), shift, t);
    shift + t * sum.ln()
}

/// Gradient of [`is_loss`] with respect to each `L_i`; identical to
/// [`is_weights`] (the derivative of the temperature-scaled log-sum-exp is
/// the softmax).
pub fn is_loss_grad(losses: &LossVector, temp: Temperature) -> WeightVector {
    is_weights(losses, temp)
}

fn log_losses(losses: &LossVector) -> Result<Vec<f64>, LossError> {
    losses
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(LossError::NonPositiveLoss(i, v))
            }
        })
        .collect()
}

/// LogISloss weights: `L_i^(1/T) / Σ_j L_j^(1/T)`, evaluated in log space so
/// large `1/T` powers cannot overflow. Requires strictly positive losses.
pub fn log_is_weights(losses: &LossVector, temp: Temperature) -> Result<WeightVector, LossError> {
    let logs = log_losses(losses)?;
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (terms, sum) = shifted_exp_terms(&logs, shift, temp.get());
    Ok(normalize(terms, sum))
}

/// LogISloss: `T · log Σ L_i^(1/T)`, the log of the `(1/T)`-norm of the loss
/// vector. Requires strictly positive losses.
pub fn log_is_loss(losses: &LossVector, temp: Temperature) -> Result<f64, LossError> {
    let t = temp.get();
    let logs = log_losses(losses)?;
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (_, sum) = shifted_exp_terms(&logs, shift, t);
    Ok(shift + t * sum.ln())
}

/// Gradient of [`log_is_loss`] with respect to each `L_i`:
/// `w_i / L_i` with `w` the [`log_is_weights`] vector.
pub fn log_is_loss_grad(losses: &LossVector, temp: Temperature) -> Result<Vec<f64>, LossError> {
    let w = log_is_weights(losses, temp)?;
    Ok(w.as_slice()
        .iter()
        .zip(losses.as_slice())
        .map(|(&wi, &li)| wi / li)
        .collect())
}

/// Empirical KL divergence of a weight vector from the uniform distribution:
/// `Σ w_i log w_i + log N`, with the `0·log 0 = 0` convention. Nonnegative;
/// zero iff uniform (clamped at zero against roundoff).
pub fn empirical_kl(weights: &WeightVector) -> f64 {
    let n = weights.len() as f64;
    let neg_entropy: f64 = weights
        .as_slice()
        .iter()
        .map(|&w| if w > 0.0 { w * w.ln() } else { 0.0 })
        .sum();
    (neg_entropy + n.ln()).max(0.0)
}
