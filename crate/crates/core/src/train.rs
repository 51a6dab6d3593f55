//! Deterministic desk-scale trainer: a single linear projection feeding the
//! margin head, SGD with momentum and weight decay, a step learning-rate
//! schedule, and per-epoch instrumentation of the importance-sampling
//! weights.
//!
//! The model is deliberately minimal — the interesting part is the loss, not
//! the architecture. Everything is driven by one seed: initialization,
//! shuffling, and reduction order are fixed, so identical configs produce
//! bit-identical traces.

use crate::dataset::Dataset;
use crate::loss::{
    empirical_kl, log_is_weights, LossError, LossVector, Temperature,
    DEFAULT_POSITIVE_EPSILON,
};
use crate::margin::{
    head_backward, margin_loss_per_sample, Aggregate, ClassWeights, EmbeddingBatch,
    MarginConfig, MarginError,
};
use crate::matrix::{dot, norm2, Matrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// How many of the largest importance-sampling weights each epoch trace keeps.
pub const TOP_WEIGHT_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(&'static str),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        /// Traces of the epochs completed before the divergence.
        trace: Vec<EpochTrace>,
    },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("model text is malformed: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Margin(#[from] MarginError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Linear embedding model: raw input (d_in) → embedding (d), plus the
/// per-class weight columns of the margin head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub projection: Matrix,
    pub class_weights: ClassWeights,
}

impl ModelParams {
    /// Embed raw features: X (n × d_in) · P (d_in × d).
    pub fn embed(&self, features: &Matrix) -> Matrix {
        features.matmul(&self.projection)
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.cols()
    }

    /// Versioned text serialization: header, dimensions, then row-major
    /// parameter values in decimal (round-trip exact).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (d_in, d) = (self.projection.rows(), self.projection.cols());
        let k = self.class_weights.classes();
        let _ = writeln!(out, "islossmodel v1");
        let _ = writeln!(out, "{d_in} {d} {k}");
        for r in 0..d_in {
            let row: Vec<String> = self.projection.row(r).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        for r in 0..d {
            let row: Vec<String> = self
                .class_weights
                .matrix()
                .row(r)
                .iter()
                .map(|v| format!("{v:e}"))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "islossmodel v1" {
            return Err(TrainError::MalformedModel(format!(
                "unexpected header {header:?}"
            )));
        }
        let dims: Vec<usize> = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|e| TrainError::MalformedModel(format!("bad dimensions: {e}")))?;
        let [d_in, d, k] = dims[..] else {
            return Err(TrainError::MalformedModel("expected three dimensions".into()));
        };
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix, TrainError> {
            let mut m = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| TrainError::MalformedModel("truncated".into()))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|s| s.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| TrainError::MalformedModel(format!("bad value: {e}")))?;
                if vals.len() != cols {
                    return Err(TrainError::MalformedModel(format!(
                        "row {r} has {} values, expected {cols}",
                        vals.len()
                    )));
                }
                m.row_mut(r).copy_from_slice(&vals);
            }
            Ok(m)
        };
        let projection = read_matrix(d_in, d)?;
        let class_weights = read_matrix(d, k)?;
        Ok(Self {
            projection,
            class_weights: ClassWeights::new(class_weights)
                .map_err(|e| TrainError::MalformedModel(e.to_string()))?,
        })
    }
}

/// Training hyperparameters. Defaults mirror the usual margin-softmax recipe:
/// momentum 0.9, weight decay 5e-4, batch size 128, initial lr 0.1 decayed by
/// a factor of 10 at the listed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (1-based) at which the learning rate is divided by the factor.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub temp: Temperature,
    pub aggregate: Aggregate,
    pub margin: MarginConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 10,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 10.0,
            temp: Temperature::new(0.5).unwrap(),
            aggregate: Aggregate::LogIs,
            margin: MarginConfig::arc(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.embed_dim == 0 {
            return Err(TrainError::InvalidConfig("embed_dim must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig("momentum must be in [0,1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::InvalidConfig("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(TrainError::InvalidConfig("lr_decay_factor must be positive"));
        }
        Ok(())
    }
}

/// Effective learning rate at a (1-based) epoch:
/// `lr · factor^(−#{decay epochs ≤ epoch})`.
pub fn effective_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr * cfg.lr_decay_factor.powi(-(decays as i32))
}

/// One of the `TOP_WEIGHT_COUNT` largest importance-sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TopWeight {
    pub sample: usize,
    pub class: usize,
    pub weight: f64,
}

/// Per-epoch instrumentation. The importance-sampling weights behind
/// `kl_concentration` and `top_weights` come from a full forward pass over
/// the whole dataset at epoch end (dataset-level, not per-batch).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    pub epoch: usize,
    pub mean_loss: f64,
    pub aggregate_loss: f64,
    pub lr: f64,
    pub kl_concentration: f64,
    pub per_class_accuracy: BTreeMap<usize, f64>,
    /// Sorted descending by weight; ties broken by sample index.
    pub top_weights: Vec<TopWeight>,
}

/// Heavy-ball SGD step with weight decay folded into the gradient:
/// `v ← momentum·v + (g + wd·p); p ← p − lr·v`.
pub(crate) fn sgd_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

fn init_params(data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> ModelParams {
    let d_in = data.input_dim();
    let scale = 1.0 / (d_in as f64).sqrt();
    let mut projection = Matrix::zeros(d_in, cfg.embed_dim);
    for v in projection.as_mut_slice() {
        *v = rng.gen_range(-1.0..1.0) * scale;
    }
    let mut cw = Matrix::zeros(cfg.embed_dim, data.class_count());
    for v in cw.as_mut_slice() {
        *v = rng.gen_range(-1.0..1.0) * scale;
    }
    ModelParams {
        projection,
        class_weights: ClassWeights::new(cw).expect("finite init"),
    }
}

fn aggregate_of(per_sample: &LossVector, cfg: &TrainConfig) -> Result<f64, LossError> {
    match cfg.aggregate {
        Aggregate::MeanCe => {
            Ok(per_sample.as_slice().iter().sum::<f64>() / per_sample.len() as f64)
        }
        Aggregate::LogIs => crate::margin::is_aggregate(
            &per_sample.clamp_min(DEFAULT_POSITIVE_EPSILON),
            cfg.temp,
        ),
    }
}

/// Predicted class per sample: argmax cosine against the class weights
/// (margin-free), ties toward the lower class index.
fn predictions(embeddings: &Matrix, class_weights: &ClassWeights) -> Vec<usize> {
    let k = class_weights.classes();
    let cols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let col = class_weights.matrix().column(j);
            let n = norm2(&col).max(1e-12);
            col.into_iter().map(|v| v / n).collect()
        })
        .collect();
    (0..embeddings.rows())
        .map(|i| {
            let row = embeddings.row(i);
            let n = norm2(row).max(1e-12);
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for (j, col) in cols.iter().enumerate() {
                let c = dot(row, col) / n;
                if c > best_cos {
                    best_cos = c;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn instrument_epoch(
    data: &Dataset,
    params: &ModelParams,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<EpochTrace, TrainError> {
    let embeddings = params.embed(data.features());
    let batch = EmbeddingBatch::new(embeddings.clone(), data.labels().to_vec())?;
    let per_sample = margin_loss_per_sample(&batch, &params.class_weights, &cfg.margin)?;
    let mean_loss =
        per_sample.as_slice().iter().sum::<f64>() / per_sample.len() as f64;
    let aggregate_loss = aggregate_of(&per_sample, cfg)?;

    let weights = log_is_weights(&per_sample.clamp_min(DEFAULT_POSITIVE_EPSILON), cfg.temp)?;
    let kl_concentration = empirical_kl(&weights);

    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights.as_slice()[b]
            .partial_cmp(&weights.as_slice()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let top_weights: Vec<TopWeight> = order
        .iter()
        .take(TOP_WEIGHT_COUNT)
        .map(|&i| TopWeight {
            sample: i,
            class: data.labels()[i],
            weight: weights.as_slice()[i],
        })
        .collect();

    let preds = predictions(&embeddings, &params.class_weights);
    let mut correct = vec![0usize; data.class_count()];
    let mut total = vec![0usize; data.class_count()];
    for (i, (&p, &y)) in preds.iter().zip(data.labels()).enumerate() {
        let _ = i;
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let per_class_accuracy: BTreeMap<usize, f64> = (0..data.class_count())
        .filter(|&c| total[c] > 0)
        .map(|c| (c, correct[c] as f64 / total[c] as f64))
        .collect();

    Ok(EpochTrace {
        epoch,
        mean_loss,
        aggregate_loss,
        lr,
        kl_concentration,
        per_class_accuracy,
        top_weights,
    })
}

/// Train the linear model with SGD. Deterministic given the config seed;
/// returns the final parameters and one trace per epoch. A non-finite loss
/// aborts with the traces collected so far.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, Vec<EpochTrace>), TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_params(data, cfg, &mut rng);
    let mut traces = Vec::with_capacity(cfg.epochs);
    let mut vel_proj = vec![0.0; params.projection.as_slice().len()];
    let mut vel_cw = vec![0.0; params.class_weights.matrix().as_slice().len()];
    let mut indices: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = effective_lr(cfg, epoch);
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch_x, batch_labels) = data.select(chunk);
            let embedded = params.embed(&batch_x);
            if !embedded.all_finite() {
                return Err(TrainError::Diverged { epoch, trace: traces });
            }
            let batch = EmbeddingBatch::new(embedded, batch_labels)?;
            let grads = head_backward(
                &batch,
                &params.class_weights,
                &cfg.margin,
                cfg.temp,
                cfg.aggregate,
            )?;
            if !grads.aggregate.is_finite() {
                return Err(TrainError::Diverged { epoch, trace: traces });
            }
            let grad_proj = batch_x.transposed_matmul(&grads.features);

            sgd_step(
                params.projection.as_mut_slice(),
                &mut vel_proj,
                grad_proj.as_slice(),
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            let mut cw = params.class_weights.matrix().clone();
            sgd_step(
                cw.as_mut_slice(),
                &mut vel_cw,
                grads.class_weights.as_slice(),
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            params.class_weights = match ClassWeights::new(cw) {
                Ok(w) => w,
                Err(_) => return Err(TrainError::Diverged { epoch, trace: traces }),
            };
        }
        let trace = instrument_epoch(data, &params, cfg, epoch, lr)?;
        if !(trace.mean_loss.is_finite() && trace.aggregate_loss.is_finite()) {
            return Err(TrainError::Diverged { epoch, trace: traces });
        }
        traces.push(trace);
    }
    Ok((params, traces))
}

/// Per-epoch concentration summary derived from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochConcentration {
    pub epoch: usize,
    /// Empirical KL of the epoch's full IS weight vector.
    pub kl: f64,
    /// Share of the top-k weight mass per class (sums to 1 over classes).
    pub top_mass_by_class: BTreeMap<usize, f64>,
    pub lowest_accuracy_class: usize,
    /// Share of the top-k weighted samples labelled with the
    /// lowest-accuracy class.
    pub hard_class_overlap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub per_epoch: Vec<EpochConcentration>,
}

/// Summarize how the IS weights concentrate over training: per epoch, the
/// weight-vector KL and where the top-k weight mass sits relative to the
/// per-class accuracies.
pub fn weight_concentration_report(
    traces: &[EpochTrace],
) -> Result<ConcentrationReport, TrainError> {
    if traces.is_empty() {
        return Err(TrainError::EmptyTrace);
    }
    let per_epoch = traces
        .iter()
        .map(|t| {
            let total: f64 = t.top_weights.iter().map(|w| w.weight).sum();
            let mut top_mass_by_class = BTreeMap::new();
            for w in &t.top_weights {
                *top_mass_by_class.entry(w.class).or_insert(0.0) +=
                    if total > 0.0 { w.weight / total } else { 0.0 };
            }
            let lowest_accuracy_class = t
                .per_class_accuracy
                .iter()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(b.0)))
                .map(|(&c, _)| c)
                .unwrap_or(0);
            let hits = t
                .top_weights
                .iter()
                .filter(|w| w.class == lowest_accuracy_class)
                .count();
            let hard_class_overlap = if t.top_weights.is_empty() {
                0.0
            } else {
                hits as f64 / t.top_weights.len() as f64
            };
            EpochConcentration {
                epoch: t.epoch,
                kl: t.kl_concentration,
                top_mass_by_class,
                lowest_accuracy_class,
                hard_class_overlap,
            }
        })
        .collect();
    Ok(ConcentrationReport { per_epoch })
}

/// Central finite differences over every parameter of a tiny model; returns
/// the maximum relative disagreement with the analytic gradient. Entries
/// where both sides are below 1e-6 are treated as agreeing.
pub fn gradient_check(
    model: &ModelParams,
    batch: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let loss_of = |params: &ModelParams| -> Result<f64, TrainError> {
        let embedded = params.embed(batch.features());
        let b = EmbeddingBatch::new(embedded, batch.labels().to_vec())?;
        let per = margin_loss_per_sample(&b, &params.class_weights, &cfg.margin)?;
        Ok(aggregate_of(&per, cfg)?)
    };

    let embedded = model.embed(batch.features());
    let b = EmbeddingBatch::new(embedded, batch.labels().to_vec())?;
    let grads = head_backward(&b, &model.class_weights, &cfg.margin, cfg.temp, cfg.aggregate)?;
    let grad_proj = batch.features().transposed_matmul(&grads.features);

    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut check = |analytic: f64, fd: f64| {
        if analytic.abs().max(fd.abs()) < 1e-6 {
            return;
        }
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
        max_rel = max_rel.max(rel);
    };

    for idx in 0..model.projection.as_slice().len() {
        let mut up = model.clone();
        up.projection.as_mut_slice()[idx] += h;
        let mut dn = model.clone();
        dn.projection.as_mut_slice()[idx] -= h;
        let fd = (loss_of(&up)? - loss_of(&dn)?) / (2.0 * h);
        check(grad_proj.as_slice()[idx], fd);
    }
    for idx in 0..model.class_weights.matrix().as_slice().len() {
        let mut up_m = model.class_weights.matrix().clone();
        up_m.as_mut_slice()[idx] += h;
        let mut dn_m = model.class_weights.matrix().clone();
        dn_m.as_mut_slice()[idx] -= h;
        let up = ModelParams {
            projection: model.projection.clone(),
            class_weights: ClassWeights::new(up_m)?,
        };
        let dn = ModelParams {
            projection: model.projection.clone(),
            class_weights: ClassWeights::new(dn_m)?,
        };
        let fd = (loss_of(&up)? - loss_of(&dn)?) / (2.0 * h);
        check(grads.class_weights.as_slice()[idx], fd);
    }
    Ok(max_rel)
}

/// Trace CSV: `epoch,mean_loss,aggregate_loss,lr,kl_concentration`.
pub fn trace_csv(traces: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,mean_loss,aggregate_loss,lr,kl_concentration\n");
    for t in traces {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            t.epoch, t.mean_loss, t.aggregate_loss, t.lr, t.kl_concentration
        );
    }
    out
}

/// Top-weight CSV: `epoch,sample_id,class_id,weight`.
pub fn top_weights_csv(traces: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,sample_id,class_id,weight\n");
    for t in traces {
        for w in &t.top_weights {
            let _ = writeln!(out, "{},{},{},{}", t.epoch, w.sample, w.class, w.weight);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Two Gaussian blobs on the x-axis, linearly separable.
    fn two_blob_dataset(seed: u64, per_class: usize, noise: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            let cx = if class == 0 { 2.0 } else { -2.0 };
            for _ in 0..per_class {
                rows.push(cx + noise * rng.gen_range(-1.0..1.0));
                rows.push(noise * rng.gen_range(-1.0..1.0));
                labels.push(class);
            }
        }
        Dataset::new(Matrix::from_vec(2 * per_class, 2, rows), labels).unwrap()
    }

    fn desk_config(aggregate: Aggregate) -> TrainConfig {
        TrainConfig {
            embed_dim: 2,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs: 20,
            lr_decay_epochs: vec![12],
            lr_decay_factor: 10.0,
            aggregate,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    /// Brute-force separability witness: the mean-difference direction must
    /// classify every sample correctly before we demand the trained model do so.
    fn assert_linearly_separable(data: &Dataset) {
        let d = data.input_dim();
        let mut means = vec![vec![0.0; d]; 2];
        let mut counts = [0usize; 2];
        for i in 0..data.len() {
            let y = data.labels()[i];
            counts[y] += 1;
            for (m, v) in means[y].iter_mut().zip(data.features().row(i)) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let dir: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| a - b).collect();
        let mid: Vec<f64> = means[0].iter().zip(&means[1]).map(|(a, b)| (a + b) / 2.0).collect();
        for i in 0..data.len() {
            let x = data.features().row(i);
            let side: f64 = x.iter().zip(&dir).map(|(v, w)| v * w).sum::<f64>()
                - mid.iter().zip(&dir).map(|(v, w)| v * w).sum::<f64>();
            let want_positive = data.labels()[i] == 0;
            assert_eq!(side > 0.0, want_positive, "dataset is not separable");
        }
    }

    fn final_accuracy(data: &Dataset, params: &ModelParams) -> f64 {
        let preds = predictions(&params.embed(data.features()), &params.class_weights);
        let correct = preds
            .iter()
            .zip(data.labels())
            .filter(|(p, y)| p == y)
            .count();
        correct as f64 / data.len() as f64
    }

    #[test]
    fn separable_data_reaches_full_accuracy_with_mean_ce() {
        let data = two_blob_dataset(7, 20, 0.3);
        assert_linearly_separable(&data);
        let cfg = desk_config(Aggregate::MeanCe);
        let (params, traces) = train(&data, &cfg).unwrap();
        assert_eq!(traces.len(), 20);
        assert_eq!(final_accuracy(&data, &params), 1.0);
    }

    #[test]
    fn log_is_loss_non_increasing_after_decay() {
        let data = two_blob_dataset(7, 20, 0.3);
        let cfg = desk_config(Aggregate::LogIs);
        let (_, traces) = train(&data, &cfg).unwrap();
        let decay = 12;
        for w in traces[decay - 1..].windows(2) {
            assert!(
                w[1].aggregate_loss <= w[0].aggregate_loss * 1.05,
                "epoch {}: {} -> {}",
                w[0].epoch,
                w[0].aggregate_loss,
                w[1].aggregate_loss
            );
        }
    }

    #[test]
    fn zero_epochs_returns_initialization_and_empty_trace() {
        let data = two_blob_dataset(3, 5, 0.2);
        let cfg = TrainConfig {
            epochs: 0,
            embed_dim: 2,
            ..TrainConfig::default()
        };
        let (params, traces) = train(&data, &cfg).unwrap();
        assert!(traces.is_empty());
        // initialization is a pure function of the seed
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let expected = init_params(&data, &cfg, &mut rng);
        assert_eq!(params, expected);
    }

    #[test]
    fn training_is_deterministic() {
        let data = two_blob_dataset(11, 10, 0.4);
        let cfg = desk_config(Aggregate::LogIs);
        let (p1, t1) = train(&data, &cfg).unwrap();
        let (p2, t2) = train(&data, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(p1.to_text(), p2.to_text());
    }

    #[test]
    fn divergent_lr_aborts_with_diagnostic() {
        let data = two_blob_dataset(5, 10, 0.3);
        let cfg = TrainConfig {
            lr: 1e6,
            epochs: 200,
            embed_dim: 2,
            batch_size: 4,
            ..desk_config(Aggregate::MeanCe)
        };
        match train(&data, &cfg) {
            Err(TrainError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn weight_decay_shrinks_norms_geometrically() {
        // momentum 0, zero data gradient: p ← p·(1 − lr·wd) each step
        let mut params = vec![2.0, -1.5, 0.25];
        let mut velocity = vec![0.0; 3];
        let grads = vec![0.0; 3];
        let (lr, wd) = (0.1, 0.01);
        let start: Vec<f64> = params.clone();
        for step in 1..=5 {
            sgd_step(&mut params, &mut velocity, &grads, lr, 0.0, wd);
            let factor = (1.0 - lr * wd).powi(step);
            for (p, s) in params.iter().zip(&start) {
                assert!((p - s * factor).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lr_schedule_counts_decay_epochs() {
        let cfg = TrainConfig {
            lr: 0.1,
            lr_decay_epochs: vec![14, 20, 24],
            lr_decay_factor: 10.0,
            ..TrainConfig::default()
        };
        assert!((effective_lr(&cfg, 1) - 0.1).abs() < 1e-15);
        assert!((effective_lr(&cfg, 14) - 0.01).abs() < 1e-15);
        assert!((effective_lr(&cfg, 21) - 0.001).abs() < 1e-15);
        assert!((effective_lr(&cfg, 30) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn trace_weight_order_matches_loss_order() {
        let data = two_blob_dataset(13, 15, 0.5);
        let cfg = desk_config(Aggregate::LogIs);
        let (params, traces) = train(&data, &cfg).unwrap();
        let last = traces.last().unwrap();
        for w in last.top_weights.windows(2) {
            assert!(w[0].weight >= w[1].weight);
        }
        // the heaviest sample is the lossiest one
        let batch = EmbeddingBatch::new(
            params.embed(data.features()),
            data.labels().to_vec(),
        )
        .unwrap();
        let per = margin_loss_per_sample(&batch, &params.class_weights, &cfg.margin).unwrap();
        let argmax_loss = per
            .as_slice()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert_eq!(last.top_weights[0].sample, argmax_loss);
    }

    #[test]
    fn gradient_check_mean_ce_and_log_is() {
        let data = two_blob_dataset(17, 4, 0.6);
        for aggregate in [Aggregate::MeanCe, Aggregate::LogIs] {
            let cfg = TrainConfig {
                embed_dim: 3,
                aggregate,
                margin: MarginConfig::new(8.0, 0.3, crate::margin::MarginKind::AdditiveAngular)
                    .unwrap(),
                ..TrainConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let model = init_params(&data, &cfg, &mut rng);
            let err = gradient_check(&model, &data, &cfg).unwrap();
            assert!(err < 1e-4, "{aggregate:?}: max rel error {err}");
        }
    }

    #[test]
    fn gradient_check_zero_batch_is_finite() {
        let data = Dataset::new(Matrix::zeros(3, 2), vec![0, 1, 0]).unwrap();
        let cfg = TrainConfig {
            embed_dim: 2,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = init_params(&data, &cfg, &mut rng);
        let err = gradient_check(&model, &data, &cfg).unwrap();
        assert!(err.is_finite());
    }

    #[test]
    fn concentration_report_examples() {
        // uniform losses → concentration 0
        let uniform_trace = EpochTrace {
            epoch: 1,
            mean_loss: 1.0,
            aggregate_loss: 1.0,
            lr: 0.1,
            kl_concentration: 0.0,
            per_class_accuracy: BTreeMap::from([(0, 0.9), (1, 0.6)]),
            top_weights: vec![
                TopWeight { sample: 0, class: 1, weight: 0.5 },
                TopWeight { sample: 1, class: 0, weight: 0.5 },
            ],
        };
        let report = weight_concentration_report(&[uniform_trace]).unwrap();
        assert_eq!(report.per_epoch[0].kl, 0.0);
        assert_eq!(report.per_epoch[0].lowest_accuracy_class, 1);
        assert!((report.per_epoch[0].hard_class_overlap - 0.5).abs() < 1e-15);
        assert!((report.per_epoch[0].top_mass_by_class[&1] - 0.5).abs() < 1e-15);

        assert!(matches!(
            weight_concentration_report(&[]),
            Err(TrainError::EmptyTrace)
        ));
    }

    #[test]
    fn dominant_sample_tops_the_trace() {
        // one far-out mislabelled point dominates the per-sample losses
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            let cx = if class == 0 { 2.0 } else { -2.0 };
            for k in 0..6 {
                rows.push(cx + 0.05 * k as f64);
                rows.push(0.05 * k as f64);
                labels.push(class);
            }
        }
        // sample 12 sits in class 1 territory but is labelled 0
        rows.push(-2.0);
        rows.push(0.0);
        labels.push(0);
        let data = Dataset::new(Matrix::from_vec(13, 2, rows), labels).unwrap();
        let cfg = TrainConfig {
            embed_dim: 2,
            epochs: 10,
            batch_size: 13,
            lr: 0.05,
            aggregate: Aggregate::MeanCe,
            ..TrainConfig::default()
        };
        let (_, traces) = train(&data, &cfg).unwrap();
        assert_eq!(traces.last().unwrap().top_weights[0].sample, 12);
    }

    #[test]
    fn model_text_round_trips() {
        let data = two_blob_dataset(23, 4, 0.3);
        let cfg = TrainConfig {
            embed_dim: 3,
            epochs: 1,
            ..TrainConfig::default()
        };
        let (params, _) = train(&data, &cfg).unwrap();
        let text = params.to_text();
        let back = ModelParams::from_text(&text).unwrap();
        assert_eq!(params, back);
        assert!(ModelParams::from_text("bogus").is_err());
        assert!(ModelParams::from_text("islossmodel v1\n2 2\n").is_err());
    }

    #[test]
    fn csv_emission_matches_schema() {
        let data = two_blob_dataset(29, 5, 0.3);
        let cfg = TrainConfig {
            embed_dim: 2,
            epochs: 3,
            ..desk_config(Aggregate::LogIs)
        };
        let (_, traces) = train(&data, &cfg).unwrap();
        let csv = trace_csv(&traces);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,mean_loss,aggregate_loss,lr,kl_concentration"
        );
        assert_eq!(lines.count(), 3);
        let tw = top_weights_csv(&traces);
        assert_eq!(tw.lines().next().unwrap(), "epoch,sample_id,class_id,weight");
        assert_eq!(tw.lines().count(), 1 + 3 * TOP_WEIGHT_COUNT);
    }
}
