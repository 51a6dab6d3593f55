//! Margin-softmax heads on normalized embeddings, plus their batch-level
//! importance-sampling aggregation.
//!
//! Per-sample losses are cross-entropy over cosine logits with the margin
//! applied to the target class only:
//!
//! ```text
//! additive-angular:  target logit = s · cos(θ_y + m)      (s=64, m=0.5)
//! additive-cosine:   target logit = s · (cos θ_y − m)     (s=64, m=0.35)
//! non-target:        logit        = s · cos θ_j
//! ```
//!
//! Features and class-weight columns are L2-normalized before the cosines,
//! so any positive rescaling of the raw inputs leaves the losses unchanged.
//! The batch aggregate is either the plain mean or the LogISloss of the
//! per-sample losses, and [`head_backward`] provides the full hand-derived
//! gradient of either aggregate with respect to the raw (pre-normalization)
//! features and class weights.

use crate::loss::{
    self, LossError, LossVector, Temperature, DEFAULT_POSITIVE_EPSILON,
};
use crate::matrix::{dot, norm2, Matrix};
use thiserror::Error;

/// Cosines are clamped to [−1+δ, 1−δ] before arccos.
pub const COSINE_CLAMP: f64 = 1e-7;

/// Norm guard: rows/columns with a smaller L2 norm are scaled by 1/ε instead
/// of normalized, keeping zero inputs finite.
const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MarginError {
    #[error("label {label} at row {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("feature dimension {feature_dim} does not match class-weight dimension {weight_dim}")]
    DimensionMismatch {
        feature_dim: usize,
        weight_dim: usize,
    },
    #[error("operation requires the {expected:?} margin kind, config says {got:?}")]
    KindMismatch { expected: MarginKind, got: MarginKind },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("margin config requires finite s > 0 and finite m")]
    InvalidConfig,
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginKind {
    AdditiveAngular,
    AdditiveCosine,
}

/// Scale and margin of the head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub s: f64,
    pub m: f64,
    pub kind: MarginKind,
}

impl MarginConfig {
    pub fn new(s: f64, m: f64, kind: MarginKind) -> Result<Self, MarginError> {
        if !(s.is_finite() && s > 0.0 && m.is_finite()) {
            return Err(MarginError::InvalidConfig);
        }
        Ok(Self { s, m, kind })
    }

    /// Additive-angular defaults: s = 64, m = 0.5.
    pub fn arc() -> Self {
        Self {
            s: 64.0,
            m: 0.5,
            kind: MarginKind::AdditiveAngular,
        }
    }

    /// Additive-cosine defaults: s = 64, m = 0.35.
    pub fn add() -> Self {
        Self {
            s: 64.0,
            m: 0.35,
            kind: MarginKind::AdditiveCosine,
        }
    }
}

/// Rows of d-dimensional deep features with their target classes.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    features: Matrix,
    labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, MarginError> {
        if features.rows() != labels.len() {
            return Err(MarginError::DimensionMismatch {
                feature_dim: features.rows(),
                weight_dim: labels.len(),
            });
        }
        if !features.all_finite() {
            return Err(MarginError::NonFinite("features"));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-class weight columns (d × K); bias fixed to zero. Columns are
/// L2-normalized at use, not at rest.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    matrix: Matrix,
}

impl ClassWeights {
    pub fn new(matrix: Matrix) -> Result<Self, MarginError> {
        if !matrix.all_finite() {
            return Err(MarginError::NonFinite("class weights"));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn classes(&self) -> usize {
        self.matrix.cols()
    }
}

/// Which batch aggregate the head optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    /// Plain mean of the per-sample cross-entropies.
    MeanCe,
    /// LogISloss of the per-sample cross-entropies (epsilon-clamped).
    LogIs,
}

/// L2-normalize with the zero-vector guard. Returns (unit vector, guarded norm).
fn normalize_guarded(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm2(v).max(NORM_EPSILON);
    (v.iter().map(|x| x / n).collect(), n)
}

struct Forward {
    /// Normalized feature rows.
    x_hat: Vec<Vec<f64>>,
    x_norm: Vec<f64>,
    /// Normalized class-weight columns.
    w_hat: Vec<Vec<f64>>,
    w_norm: Vec<f64>,
    /// Clamped cosines, n × K.
    cos: Matrix,
    /// True where the cosine clamp was active (derivative is zero there).
    cos_clamped: Vec<Vec<bool>>,
    /// Logits with the margin applied to the target column, n × K.
    logits: Matrix,
    /// True where the arc angle clamp θ ≤ π − m was active.
    angle_clamped: Vec<bool>,
    losses: Vec<f64>,
}

fn validate(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
) -> Result<(), MarginError> {
    if batch.features.cols() != weights.dim() {
        return Err(MarginError::DimensionMismatch {
            feature_dim: batch.features.cols(),
            weight_dim: weights.dim(),
        });
    }
    let classes = weights.classes();
    for (i, &y) in batch.labels.iter().enumerate() {
        if y >= classes {
            return Err(MarginError::LabelOutOfRange {
                index: i,
                label: y,
                classes,
            });
        }
    }
    Ok(())
}

fn forward(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<Forward, MarginError> {
    validate(batch, weights)?;
    let n = batch.len();
    let k = weights.classes();
    let mut x_hat = Vec::with_capacity(n);
    let mut x_norm = Vec::with_capacity(n);
    for i in 0..n {
        let (unit, norm) = normalize_guarded(batch.features.row(i));
        x_hat.push(unit);
        x_norm.push(norm);
    }
    let mut w_hat = Vec::with_capacity(k);
    let mut w_norm = Vec::with_capacity(k);
    for j in 0..k {
        let (unit, norm) = normalize_guarded(&weights.matrix.column(j));
        w_hat.push(unit);
        w_norm.push(norm);
    }

    let lo = -1.0 + COSINE_CLAMP;
    let hi = 1.0 - COSINE_CLAMP;
    let mut cos = Matrix::zeros(n, k);
    let mut cos_clamped = vec![vec![false; k]; n];
    let mut logits = Matrix::zeros(n, k);
    let mut angle_clamped = vec![false; n];
    let mut losses = Vec::with_capacity(n);

    for i in 0..n {
        for j in 0..k {
            let raw = dot(&x_hat[i], &w_hat[j]);
            let c = raw.clamp(lo, hi);
            cos_clamped[i][j] = raw < lo || raw > hi;
            cos.set(i, j, c);
            logits.set(i, j, cfg.s * c);
        }
        let y = batch.labels[i];
        let c_y = cos.get(i, y);
        let target = match cfg.kind {
            MarginKind::AdditiveAngular => {
                // cos(θ + m) is non-monotone past θ = π − m; clamp the angle.
                let theta = c_y.acos();
                let limit = std::f64::consts::PI - cfg.m;
                if theta > limit {
                    angle_clamped[i] = true;
                    cfg.s * (limit + cfg.m).cos()
                } else {
                    cfg.s * (theta + cfg.m).cos()
                }
            }
            MarginKind::AdditiveCosine => cfg.s * (c_y - cfg.m),
        };
        logits.set(i, y, target);

        // Stable cross-entropy: LSE(z) − z_y.
        let row = logits.row(i);
        let zmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + row.iter().map(|&z| (z - zmax).exp()).sum::<f64>().ln();
        losses.push(lse - target);
    }

    Ok(Forward {
        x_hat,
        x_norm,
        w_hat,
        w_norm,
        cos,
        cos_clamped,
        logits,
        angle_clamped,
        losses,
    })
}

fn per_sample(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    cfg: &MarginConfig,
    expected: MarginKind,
) -> Result<LossVector, MarginError> {
    if cfg.kind != expected {
        return Err(MarginError::KindMismatch {
            expected,
            got: cfg.kind,
        });
    }
    let fwd = forward(batch, weights, cfg)?;
    Ok(LossVector::new(fwd.losses)?)
}

/// Per-sample additive-angular margin loss (requires `kind = AdditiveAngular`).
pub fn arc_loss_per_sample(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<LossVector, MarginError> {
    per_sample(batch, weights, cfg, MarginKind::AdditiveAngular)
}

/// Per-sample additive-cosine margin loss (requires `kind = AdditiveCosine`).
pub fn add_loss_per_sample(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<LossVector, MarginError> {
    per_sample(batch, weights, cfg, MarginKind::AdditiveCosine)
}

/// Per-sample loss for whichever margin kind the config selects.
pub fn margin_loss_per_sample(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    cfg: &MarginConfig,
) -> Result<LossVector, MarginError> {
    let fwd = forward(batch, weights, cfg)?;
    Ok(LossVector::new(fwd.losses)?)
}

/// Batch-level importance-sampling aggregate. IS-ArcLoss and IS-AddLoss differ
/// only in the per-sample loss fed in; this is exactly
/// [`crate::loss::log_is_loss`] over the batch (single code path).
pub fn is_aggregate(per_sample: &LossVector, temp: Temperature) -> Result<f64, LossError> {
    loss::log_is_loss(per_sample, temp)
}

/// Gradients of the selected batch aggregate with respect to the raw
/// (pre-normalization) features and class weights, plus the forward values.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    /// n × d gradient for the raw feature rows.
    pub features: Matrix,
    /// d × K gradient for the raw class-weight matrix.
    pub class_weights: Matrix,
    pub per_sample: LossVector,
    pub aggregate: f64,
}

/// Full backward pass of the margin head for either aggregate. The LogIs
/// aggregate clamps per-sample losses at [`DEFAULT_POSITIVE_EPSILON`];
/// samples pinned at the clamp contribute zero gradient.
pub fn head_backward(
    batch: &EmbeddingBatch,
    weights: &ClassWeights,
    cfg: &MarginConfig,
    temp: Temperature,
    aggregate: Aggregate,
) -> Result<HeadGradients, MarginError> {
    let fwd = forward(batch, weights, cfg)?;
    let n = batch.len();
    let k = weights.classes();
    let d = weights.dim();
    let per_sample = LossVector::new(fwd.losses.clone())?;

    // dA/dL_i per aggregate.
    let (aggregate_value, loss_grad): (f64, Vec<f64>) = match aggregate {
        Aggregate::MeanCe => {
            let mean = fwd.losses.iter().sum::<f64>() / n as f64;
            (mean, vec![1.0 / n as f64; n])
        }
        Aggregate::LogIs => {
            let clamped = per_sample.clamp_min(DEFAULT_POSITIVE_EPSILON);
            let value = is_aggregate(&clamped, temp)?;
            let grad = loss::log_is_loss_grad(&clamped, temp)?;
            let grad = grad
                .into_iter()
                .zip(per_sample.as_slice())
                .map(|(g, &l)| if l >= DEFAULT_POSITIVE_EPSILON { g } else { 0.0 })
                .collect();
            (value, grad)
        }
    };

    let mut grad_x_hat = vec![vec![0.0; d]; n];
    let mut grad_w_hat = vec![vec![0.0; d]; k];

    for i in 0..n {
        let g = loss_grad[i];
        if g == 0.0 {
            continue;
        }
        let y = batch.labels[i];
        let row = fwd.logits.row(i);
        let zmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - zmax).exp()).collect();
        let zsum: f64 = exps.iter().sum();
        for j in 0..k {
            let p = exps[j] / zsum;
            let dz = g * (p - if j == y { 1.0 } else { 0.0 });
            // dz/dcos factor, zero wherever a clamp is active.
            let factor = if fwd.cos_clamped[i][j] {
                0.0
            } else if j == y {
                match cfg.kind {
                    MarginKind::AdditiveAngular => {
                        if fwd.angle_clamped[i] {
                            0.0
                        } else {
                            let c = fwd.cos.get(i, y);
                            let theta = c.acos();
                            cfg.s * (theta + cfg.m).sin() / (1.0 - c * c).sqrt()
                        }
                    }
                    MarginKind::AdditiveCosine => cfg.s,
                }
            } else {
                cfg.s
            };
            let gcos = dz * factor;
            if gcos == 0.0 {
                continue;
            }
            for t in 0..d {
                grad_x_hat[i][t] += gcos * fwd.w_hat[j][t];
                grad_w_hat[j][t] += gcos * fwd.x_hat[i][t];
            }
        }
    }

    // Backprop through L2 normalization: for x̂ = x/‖x‖ the Jacobian is
    // (I − x̂x̂ᵀ)/‖x‖; for the guarded branch x̂ = x/ε it is I/ε.
    let mut grad_features = Matrix::zeros(n, d);
    for i in 0..n {
        let raw_norm = norm2(batch.features.row(i));
        if raw_norm < NORM_EPSILON {
            for t in 0..d {
                grad_features.set(i, t, grad_x_hat[i][t] / NORM_EPSILON);
            }
        } else {
            let proj = dot(&grad_x_hat[i], &fwd.x_hat[i]);
            for t in 0..d {
                grad_features.set(
                    i,
                    t,
                    (grad_x_hat[i][t] - proj * fwd.x_hat[i][t]) / fwd.x_norm[i],
                );
            }
        }
    }
    let mut grad_class_weights = Matrix::zeros(d, k);
    for j in 0..k {
        let col = weights.matrix.column(j);
        let raw_norm = norm2(&col);
        if raw_norm < NORM_EPSILON {
            for t in 0..d {
                grad_class_weights.set(t, j, grad_w_hat[j][t] / NORM_EPSILON);
            }
        } else {
            let proj = dot(&grad_w_hat[j], &fwd.w_hat[j]);
            for t in 0..d {
                grad_class_weights.set(
                    t,
                    j,
                    (grad_w_hat[j][t] - proj * fwd.w_hat[j][t]) / fwd.w_norm[j],
                );
            }
        }
    }

    Ok(HeadGradients {
        features: grad_features,
        class_weights: grad_class_weights,
        per_sample,
        aggregate: aggregate_value,
    })
}
