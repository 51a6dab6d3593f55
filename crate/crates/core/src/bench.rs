//! Synthetic distribution-shift benchmark and the pair-verification protocol:
//! Gaussian-mixture population generation, positive/negative pair sampling,
//! 10-fold threshold cross-validation, TAR@FAR, and hard-pair ranking.
//!
//! Populations are isotropic Gaussian mixtures. Class centers depend only on
//! the seed and the class geometry, so two specs sharing a seed but differing
//! in `shift_vector` or `within_class_noise` describe the *same* identities
//! under a distribution shift — which is what the cross-population evaluation
//! measures. The shift size is quantified by a Monte-Carlo KL estimate
//! between the generating mixtures.

use crate::dataset::{Dataset, DatasetError};
use crate::matrix::{dot, norm2, Matrix};
use crate::train::ModelParams;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use thiserror::Error;

/// The verification protocol always uses 10 folds.
pub const FOLD_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("population spec invalid: {0}")]
    InvalidSpec(&'static str),
    #[error("cosine similarity of a zero vector is undefined (row {0})")]
    ZeroVector(usize),
    #[error("not enough samples: {0}")]
    InsufficientSamples(String),
    #[error("pair index {0} out of range for {1} embeddings")]
    PairIndexOutOfRange(usize, usize),
    #[error("fold {0} is empty (10-fold verification needs at least 10 pairs)")]
    EmptyFold(usize),
    #[error("FAR level {0} outside (0, 1)")]
    InvalidFarLevel(f64),
    #[error("hard-pair count {k} exceeds available {label} pairs ({available})")]
    KTooLarge {
        k: usize,
        label: &'static str,
        available: usize,
    },
    #[error("pair file malformed at line {0}")]
    MalformedPairFile(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Generator for one synthetic population: a `class_count`-component Gaussian
/// mixture with isotropic `within_class_noise`, every sample offset by
/// `shift_vector`. Centers are a pure function of the seed and the class
/// geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub name: String,
    pub class_count: usize,
    pub samples_per_class: usize,
    pub class_center_spread: f64,
    pub within_class_noise: f64,
    pub shift_vector: Vec<f64>,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn input_dim(&self) -> usize {
        self.shift_vector.len()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.class_count == 0 {
            return Err(BenchError::InvalidSpec("class_count must be positive"));
        }
        if self.samples_per_class == 0 {
            return Err(BenchError::InvalidSpec("samples_per_class must be positive"));
        }
        if self.shift_vector.is_empty() {
            return Err(BenchError::InvalidSpec("shift_vector must set the dimension"));
        }
        if !(self.class_center_spread.is_finite() && self.class_center_spread > 0.0) {
            return Err(BenchError::InvalidSpec("class_center_spread must be positive"));
        }
        if !(self.within_class_noise.is_finite() && self.within_class_noise >= 0.0) {
            return Err(BenchError::InvalidSpec("within_class_noise must be nonnegative"));
        }
        if self.shift_vector.iter().any(|v| !v.is_finite()) {
            return Err(BenchError::InvalidSpec("shift_vector must be finite"));
        }
        Ok(())
    }
}

/// A generated population: samples plus the ground-truth class centers
/// (centers exclude the shift; samples are `center + shift + noise`).
#[derive(Debug, Clone)]
pub struct Population {
    pub data: Dataset,
    pub centers: Matrix,
}

fn draw_centers(spec: &PopulationSpec, rng: &mut ChaCha8Rng) -> Matrix {
    let d = spec.input_dim();
    let mut centers = Matrix::zeros(spec.class_count, d);
    for v in centers.as_mut_slice() {
        let z: f64 = rng.sample(StandardNormal);
        *v = spec.class_center_spread * z;
    }
    centers
}

/// Deterministic Gaussian-mixture sampling. Centers are drawn before any
/// noise, so specs sharing a seed share identities regardless of shift and
/// noise settings.
pub fn generate_population(spec: &PopulationSpec) -> Result<Population, BenchError> {
    spec.validate()?;
    let d = spec.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = draw_centers(spec, &mut rng);
    let n = spec.class_count * spec.samples_per_class;
    let mut features = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..spec.class_count {
        for _ in 0..spec.samples_per_class {
            for t in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                features.set(
                    row,
                    t,
                    centers.get(class, t) + spec.shift_vector[t] + spec.within_class_noise * z,
                );
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok(Population {
        data: Dataset::new(features, labels)?,
        centers,
    })
}

/// Log-density of the isotropic Gaussian mixture a spec generates.
fn mixture_log_density(spec: &PopulationSpec, centers: &Matrix, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sigma2 = spec.within_class_noise * spec.within_class_noise;
    let k = spec.class_count;
    let mut terms = Vec::with_capacity(k);
    for class in 0..k {
        let mut sq = 0.0;
        for (t, &xt) in x.iter().enumerate() {
            let diff = xt - centers.get(class, t) - spec.shift_vector[t];
            sq += diff * diff;
        }
        terms.push(-sq / (2.0 * sigma2));
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln();
    lse - (k as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * sigma2).ln()
}

/// Monte-Carlo estimate of `KL(a ‖ b)` between two populations' generating
/// mixtures, with `samples` draws from `a`. Both specs need positive noise.
pub fn mixture_kl_estimate(
    a: &PopulationSpec,
    b: &PopulationSpec,
    samples: usize,
    seed: u64,
) -> Result<f64, BenchError> {
    a.validate()?;
    b.validate()?;
    if a.input_dim() != b.input_dim() {
        return Err(BenchError::InvalidSpec("populations differ in dimension"));
    }
    if a.within_class_noise == 0.0 || b.within_class_noise == 0.0 {
        return Err(BenchError::InvalidSpec(
            "KL estimation needs positive within_class_noise",
        ));
    }
    if samples == 0 {
        return Err(BenchError::InvalidSpec("KL estimation needs samples > 0"));
    }
    let centers_a = {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        draw_centers(a, &mut rng)
    };
    let centers_b = {
        let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
        draw_centers(b, &mut rng)
    };
    let d = a.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut x = vec![0.0; d];
    for _ in 0..samples {
        let class = rng.gen_range(0..a.class_count);
        for (t, xt) in x.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *xt = centers_a.get(class, t) + a.shift_vector[t] + a.within_class_noise * z;
        }
        acc += mixture_log_density(a, &centers_a, &x) - mixture_log_density(b, &centers_b, &x);
    }
    Ok(acc / samples as f64)
}

/// Cosine similarity in [−1, 1]; zero vectors are a domain error.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, BenchError> {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 {
        return Err(BenchError::ZeroVector(0));
    }
    if nb == 0.0 {
        return Err(BenchError::ZeroVector(1));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    Positive,
    Negative,
}

/// One verification pair: two sample indices plus the ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

/// Labeled pairs with their 10-fold assignment (`folds[i]` is the fold of
/// `pairs[i]`; fold sizes differ by at most one).
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    pub folds: Vec<usize>,
}

/// Sample `positives_per_class` same-class pairs per class and
/// `negatives_total` cross-class pairs, then shuffle and assign folds
/// round-robin. Deterministic per seed; labels are correct by construction.
pub fn build_pairs(
    data: &Dataset,
    positives_per_class: usize,
    negatives_total: usize,
    seed: u64,
) -> Result<PairSet, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = data.class_count();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }

    let mut pairs: Vec<Pair> = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        if positives_per_class == 0 {
            continue;
        }
        if members.len() < 2 {
            return Err(BenchError::InsufficientSamples(format!(
                "class {class} has {} samples, positives need at least 2",
                members.len()
            )));
        }
        let mut all: Vec<(usize, usize)> = Vec::new();
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                all.push((a, b));
            }
        }
        if all.len() < positives_per_class {
            return Err(BenchError::InsufficientSamples(format!(
                "class {class} admits {} distinct pairs, {positives_per_class} requested",
                all.len()
            )));
        }
        all.shuffle(&mut rng);
        pairs.extend(all.iter().take(positives_per_class).map(|&(a, b)| Pair {
            a,
            b,
            label: PairLabel::Positive,
        }));
    }

    if negatives_total > 0 {
        if k < 2 {
            return Err(BenchError::InsufficientSamples(
                "negative pairs need at least two classes".into(),
            ));
        }
        let mut all: Vec<(usize, usize)> = Vec::new();
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                if data.labels()[i] != data.labels()[j] {
                    all.push((i, j));
                }
            }
        }
        if all.len() < negatives_total {
            return Err(BenchError::InsufficientSamples(format!(
                "only {} cross-class pairs available, {negatives_total} requested",
                all.len()
            )));
        }
        all.shuffle(&mut rng);
        pairs.extend(all.iter().take(negatives_total).map(|&(a, b)| Pair {
            a,
            b,
            label: PairLabel::Negative,
        }));
    }

    pairs.shuffle(&mut rng);
    let folds = (0..pairs.len()).map(|i| i % FOLD_COUNT).collect();
    Ok(PairSet { pairs, folds })
}

/// Pair list file: one `idx_a,idx_b,label,fold` line per pair, label ∈ {1,0}.
pub fn pairs_to_string(set: &PairSet) -> String {
    let mut out = String::new();
    for (pair, fold) in set.pairs.iter().zip(&set.folds) {
        let label = match pair.label {
            PairLabel::Positive => 1,
            PairLabel::Negative => 0,
        };
        let _ = writeln!(out, "{},{},{},{}", pair.a, pair.b, label, fold);
    }
    out
}

pub fn pairs_from_str(text: &str) -> Result<PairSet, BenchError> {
    let mut pairs = Vec::new();
    let mut folds = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let [a, b, label, fold] = fields[..] else {
            return Err(BenchError::MalformedPairFile(lineno + 1));
        };
        let parse = |s: &str| -> Result<usize, BenchError> {
            s.trim()
                .parse()
                .map_err(|_| BenchError::MalformedPairFile(lineno + 1))
        };
        let label = match parse(label)? {
            1 => PairLabel::Positive,
            0 => PairLabel::Negative,
            _ => return Err(BenchError::MalformedPairFile(lineno + 1)),
        };
        let fold = parse(fold)?;
        if fold >= FOLD_COUNT {
            return Err(BenchError::MalformedPairFile(lineno + 1));
        }
        pairs.push(Pair {
            a: parse(a)?,
            b: parse(b)?,
            label,
        });
        folds.push(fold);
    }
    Ok(PairSet { pairs, folds })
}

/// Verification outcome: per-fold thresholds, fold-averaged accuracy,
/// TAR@FAR per requested level, and the embedded hard-pair shortlists.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub per_fold_threshold: Vec<f64>,
    /// Mean of the 10 held-out fold accuracies.
    pub accuracy: f64,
    /// (FAR level, TAR) in the order the levels were requested.
    pub tar_at_far: Vec<(f64, f64)>,
    /// Lowest-similarity positives, ascending.
    pub hard_positives: Vec<(Pair, f64)>,
    /// Highest-similarity negatives, descending.
    pub hard_negatives: Vec<(Pair, f64)>,
}

fn pair_similarities(embeddings: &Matrix, pairs: &PairSet) -> Result<Vec<f64>, BenchError> {
    let n = embeddings.rows();
    pairs
        .pairs
        .iter()
        .map(|p| {
            if p.a >= n {
                return Err(BenchError::PairIndexOutOfRange(p.a, n));
            }
            if p.b >= n {
                return Err(BenchError::PairIndexOutOfRange(p.b, n));
            }
            cosine_similarity(embeddings.row(p.a), embeddings.row(p.b))
        })
        .collect()
}

/// Candidate thresholds: midpoints of consecutive sorted unique similarities
/// plus the ±1 sentinels.
fn threshold_candidates(sims: &[f64]) -> Vec<f64> {
    let mut sorted = sims.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    candidates.push(-1.0);
    for w in sorted.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(1.0);
    candidates
}

fn accuracy_at(threshold: f64, sims: &[f64], labels: &[PairLabel]) -> usize {
    sims.iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == (l == PairLabel::Positive))
        .count()
}

/// The 10-fold threshold cross-validation protocol. For each fold the
/// threshold maximizing accuracy on the other nine folds (ties toward the
/// lower threshold) is applied to the held-out fold; the report averages the
/// ten fold accuracies. TAR@FAR uses all pairs: the smallest candidate
/// threshold whose false-accept rate is ≤ the level.
pub fn verify(
    embeddings: &Matrix,
    pairs: &PairSet,
    far_levels: &[f64],
) -> Result<VerificationReport, BenchError> {
    for &level in far_levels {
        if !(level > 0.0 && level < 1.0) {
            return Err(BenchError::InvalidFarLevel(level));
        }
    }
    let sims = pair_similarities(embeddings, pairs)?;
    let labels: Vec<PairLabel> = pairs.pairs.iter().map(|p| p.label).collect();
    for fold in 0..FOLD_COUNT {
        if !pairs.folds.iter().any(|&f| f == fold) {
            return Err(BenchError::EmptyFold(fold));
        }
    }

    let mut per_fold_threshold = Vec::with_capacity(FOLD_COUNT);
    let mut fold_accuracies = Vec::with_capacity(FOLD_COUNT);
    for fold in 0..FOLD_COUNT {
        let (mut train_s, mut train_l) = (Vec::new(), Vec::new());
        let (mut held_s, mut held_l) = (Vec::new(), Vec::new());
        for ((&s, &l), &f) in sims.iter().zip(&labels).zip(&pairs.folds) {
            if f == fold {
                held_s.push(s);
                held_l.push(l);
            } else {
                train_s.push(s);
                train_l.push(l);
            }
        }
        let mut best_threshold = -1.0;
        let mut best_correct = 0;
        for cand in threshold_candidates(&train_s) {
            let correct = accuracy_at(cand, &train_s, &train_l);
            if correct > best_correct {
                best_correct = correct;
                best_threshold = cand;
            }
        }
        per_fold_threshold.push(best_threshold);
        fold_accuracies
            .push(accuracy_at(best_threshold, &held_s, &held_l) as f64 / held_s.len() as f64);
    }
    let accuracy = fold_accuracies.iter().sum::<f64>() / FOLD_COUNT as f64;

    let neg_count = labels.iter().filter(|&&l| l == PairLabel::Negative).count();
    let pos_count = labels.len() - neg_count;
    let mut tar_at_far = Vec::with_capacity(far_levels.len());
    let candidates = threshold_candidates(&sims);
    for &level in far_levels {
        let mut chosen = 1.0;
        for &cand in &candidates {
            let false_accepts = sims
                .iter()
                .zip(&labels)
                .filter(|(&s, &l)| l == PairLabel::Negative && s > cand)
                .count();
            if false_accepts as f64 / neg_count.max(1) as f64 <= level {
                chosen = cand;
                break;
            }
        }
        let true_accepts = sims
            .iter()
            .zip(&labels)
            .filter(|(&s, &l)| l == PairLabel::Positive && s > chosen)
            .count();
        tar_at_far.push((level, true_accepts as f64 / pos_count.max(1) as f64));
    }

    let k = 10usize.min(pos_count).min(neg_count);
    let (hard_positives, hard_negatives) = hard_pairs(embeddings, pairs, k)?;

    Ok(VerificationReport {
        per_fold_threshold,
        accuracy,
        tar_at_far,
        hard_positives,
        hard_negatives,
    })
}

/// The `k` lowest-similarity positives (ascending) and `k` highest-similarity
/// negatives (descending). Ties break on the pair indices, so the output is
/// stable under permutation of the pair list.
pub fn hard_pairs(
    embeddings: &Matrix,
    pairs: &PairSet,
    k: usize,
) -> Result<(Vec<(Pair, f64)>, Vec<(Pair, f64)>), BenchError> {
    let sims = pair_similarities(embeddings, pairs)?;
    let mut positives: Vec<(Pair, f64)> = Vec::new();
    let mut negatives: Vec<(Pair, f64)> = Vec::new();
    for (&pair, &sim) in pairs.pairs.iter().zip(&sims) {
        match pair.label {
            PairLabel::Positive => positives.push((pair, sim)),
            PairLabel::Negative => negatives.push((pair, sim)),
        }
    }
    if k > positives.len() {
        return Err(BenchError::KTooLarge {
            k,
            label: "positive",
            available: positives.len(),
        });
    }
    if k > negatives.len() {
        return Err(BenchError::KTooLarge {
            k,
            label: "negative",
            available: negatives.len(),
        });
    }
    positives.sort_by(|(pa, sa), (pb, sb)| {
        sa.partial_cmp(sb)
            .unwrap()
            .then(pa.a.cmp(&pb.a))
            .then(pa.b.cmp(&pb.b))
    });
    negatives.sort_by(|(pa, sa), (pb, sb)| {
        sb.partial_cmp(sa)
            .unwrap()
            .then(pa.a.cmp(&pb.a))
            .then(pa.b.cmp(&pb.b))
    });
    positives.truncate(k);
    negatives.truncate(k);
    Ok((positives, negatives))
}

/// Pair generation settings for the cross-population evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGenConfig {
    pub positives_per_class: usize,
    pub negatives_total: usize,
    pub seed: u64,
}

impl Default for PairGenConfig {
    fn default() -> Self {
        Self {
            positives_per_class: 75,
            negatives_total: 600,
            seed: 1,
        }
    }
}

/// One row of the cross-population matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationEval {
    pub population: String,
    pub report: VerificationReport,
}

/// Evaluate a trained model across every listed population: generate each
/// population, embed it, build pairs, and run the verification protocol.
pub fn cross_population_eval(
    model: &ModelParams,
    populations: &[PopulationSpec],
    pair_cfg: &PairGenConfig,
    far_levels: &[f64],
) -> Result<Vec<PopulationEval>, BenchError> {
    populations
        .iter()
        .map(|spec| {
            let population = generate_population(spec)?;
            let pairs = build_pairs(
                &population.data,
                pair_cfg.positives_per_class,
                pair_cfg.negatives_total,
                pair_cfg.seed,
            )?;
            let embeddings = model.embed(population.data.features());
            let report = verify(&embeddings, &pairs, far_levels)?;
            Ok(PopulationEval {
                population: spec.name.clone(),
                report,
            })
        })
        .collect()
}

/// Per-population accuracy gains of `candidate` over `baseline` (maps by
/// position; panics if the listings disagree).
pub fn accuracy_gains(
    candidate: &[PopulationEval],
    baseline: &[PopulationEval],
) -> Vec<(String, f64)> {
    assert_eq!(candidate.len(), baseline.len(), "evaluation lists differ");
    candidate
        .iter()
        .zip(baseline)
        .map(|(c, b)| {
            assert_eq!(c.population, b.population, "population order differs");
            (c.population.clone(), c.report.accuracy - b.report.accuracy)
        })
        .collect()
}

/// Report CSV: `test_population,accuracy,thr_mean,tar@far<level>,...`.
pub fn report_csv(rows: &[PopulationEval]) -> String {
    let mut out = String::from("test_population,accuracy,thr_mean");
    if let Some(first) = rows.first() {
        for (level, _) in &first.report.tar_at_far {
            let _ = write!(out, ",tar@far{level:e}");
        }
    }
    out.push('\n');
    for row in rows {
        let thr_mean = row.report.per_fold_threshold.iter().sum::<f64>()
            / row.report.per_fold_threshold.len() as f64;
        let _ = write!(out, "{},{},{}", row.population, row.report.accuracy, thr_mean);
        for (_, tar) in &row.report.tar_at_far {
            let _ = write!(out, ",{tar}");
        }
        out.push('\n');
    }
    out
}

/// Hard-pair CSV: `kind,idx_a,idx_b,similarity` with 2k rows.
pub fn hard_pairs_csv(positives: &[(Pair, f64)], negatives: &[(Pair, f64)]) -> String {
    let mut out = String::from("kind,idx_a,idx_b,similarity\n");
    for (pair, sim) in positives {
        let _ = writeln!(out, "positive,{},{},{}", pair.a, pair.b, sim);
    }
    for (pair, sim) in negatives {
        let _ = writeln!(out, "negative,{},{},{}", pair.a, pair.b, sim);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margin::ClassWeights;

    fn spec(name: &str, seed: u64) -> PopulationSpec {
        PopulationSpec {
            name: name.into(),
            class_count: 4,
            samples_per_class: 12,
            class_center_spread: 2.0,
            within_class_noise: 0.3,
            shift_vector: vec![0.0; 3],
            seed,
        }
    }

    #[test]
    fn zero_noise_samples_equal_shifted_centers() {
        let mut s = spec("p", 5);
        s.within_class_noise = 0.0;
        s.shift_vector = vec![1.0, -2.0, 0.5];
        let pop = generate_population(&s).unwrap();
        for i in 0..pop.data.len() {
            let class = pop.data.labels()[i];
            for t in 0..3 {
                let expected = pop.centers.get(class, t) + s.shift_vector[t];
                assert_eq!(pop.data.features().get(i, t), expected);
            }
        }
    }

    #[test]
    fn different_seeds_same_summary_statistics() {
        let mut a = spec("a", 100);
        let mut b = spec("b", 200);
        a.samples_per_class = 200;
        b.samples_per_class = 200;
        let pa = generate_population(&a).unwrap();
        let pb = generate_population(&b).unwrap();
        assert_ne!(pa.data.features().as_slice(), pb.data.features().as_slice());
        let stats = |m: &Matrix| {
            let vals = m.as_slice();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            (mean, var)
        };
        // overall mean ~ N(0, (spread²+noise²)/count): generous 3σ bounds
        let (ma, va) = stats(pa.data.features());
        let (mb, vb) = stats(pb.data.features());
        let sigma = ((2.0f64 * 2.0 + 0.09) / (800.0 * 3.0)).sqrt();
        assert!((ma - mb).abs() < 6.0 * sigma, "means {ma} vs {mb}");
        assert!((va - vb).abs() < 0.5 * va.max(vb), "vars {va} vs {vb}");
    }

    #[test]
    fn identical_mixtures_have_zero_kl() {
        let a = spec("a", 7);
        let b = spec("b", 7); // same seed → same centers, no shift, same noise
        let kl = mixture_kl_estimate(&a, &b, 500, 99).unwrap();
        assert!(kl.abs() < 1e-12, "kl {kl}");
    }

    #[test]
    fn kl_grows_with_shift() {
        let a = spec("a", 7);
        let mut shifted_small = spec("b", 7);
        shifted_small.shift_vector = vec![0.2, 0.0, 0.0];
        let mut shifted_large = spec("c", 7);
        shifted_large.shift_vector = vec![1.0, 0.0, 0.0];
        let k0 = mixture_kl_estimate(&a, &a, 2000, 3).unwrap();
        let k1 = mixture_kl_estimate(&a, &shifted_small, 2000, 3).unwrap();
        let k2 = mixture_kl_estimate(&a, &shifted_large, 2000, 3).unwrap();
        assert!(k0 < k1 && k1 < k2, "{k0} {k1} {k2}");
    }

    #[test]
    fn cosine_similarity_basics() {
        assert!((cosine_similarity(&[2.0, 0.0], &[5.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
        let v = cosine_similarity(&[1.0, 0.0], &[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]).unwrap();
        assert!((v - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(BenchError::ZeroVector(0))
        ));
    }

    #[test]
    fn build_pairs_counts_and_errors() {
        let one_class = Dataset::new(
            Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]),
            vec![0, 0, 0],
        )
        .unwrap();
        assert!(matches!(
            build_pairs(&one_class, 1, 2, 0),
            Err(BenchError::InsufficientSamples(_))
        ));

        let two_by_two = Dataset::new(
            Matrix::from_vec(4, 1, vec![0.0, 0.1, 5.0, 5.1]),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let set = build_pairs(&two_by_two, 1, 2, 0).unwrap();
        let pos = set
            .pairs
            .iter()
            .filter(|p| p.label == PairLabel::Positive)
            .count();
        assert_eq!(pos, 2);
        assert_eq!(set.pairs.len() - pos, 2);
        for pair in &set.pairs {
            let same = two_by_two.labels()[pair.a] == two_by_two.labels()[pair.b];
            assert_eq!(same, pair.label == PairLabel::Positive);
        }
    }

    #[test]
    fn folds_are_balanced() {
        let data = Dataset::new(
            Matrix::from_vec(20, 1, (0..20).map(|i| i as f64).collect()),
            (0..20).map(|i| i / 10).collect(),
        )
        .unwrap();
        let set = build_pairs(&data, 20, 20, 4).unwrap();
        assert_eq!(set.pairs.len(), 60);
        let mut counts = [0usize; FOLD_COUNT];
        for &f in &set.folds {
            counts[f] += 1;
        }
        assert!(counts.iter().all(|&c| c == 6));
    }

    #[test]
    fn pair_file_round_trips() {
        let data = Dataset::new(
            Matrix::from_vec(6, 1, vec![0.0, 0.1, 0.2, 5.0, 5.1, 5.2]),
            vec![0, 0, 0, 1, 1, 1],
        )
        .unwrap();
        let set = build_pairs(&data, 3, 6, 9).unwrap();
        let text = pairs_to_string(&set);
        let back = pairs_from_str(&text).unwrap();
        assert_eq!(set, back);
        assert!(pairs_from_str("1,2,7,0\n").is_err());
        assert!(pairs_from_str("1,2\n").is_err());
    }

    /// Embeddings with two tight clusters: every within-cluster similarity
    /// beats every cross-cluster one.
    fn separated_embeddings_and_pairs() -> (Matrix, PairSet) {
        let mut m = Matrix::zeros(12, 2);
        for i in 0..6 {
            m.set(i, 0, 1.0);
            m.set(i, 1, 0.01 * i as f64);
            m.set(6 + i, 0, 0.01 * i as f64);
            m.set(6 + i, 1, 1.0);
        }
        let labels: Vec<usize> = (0..12).map(|i| i / 6).collect();
        let data = Dataset::new(m.clone(), labels).unwrap();
        let pairs = build_pairs(&data, 10, 20, 5).unwrap();
        (m, pairs)
    }

    #[test]
    fn verify_perfect_separation() {
        let (embeddings, pairs) = separated_embeddings_and_pairs();
        let report = verify(&embeddings, &pairs, &[0.01, 0.001]).unwrap();
        assert_eq!(report.accuracy, 1.0);
        for &(_, tar) in &report.tar_at_far {
            assert_eq!(tar, 1.0);
        }
        assert_eq!(report.per_fold_threshold.len(), FOLD_COUNT);
    }

    #[test]
    fn verify_rejects_bad_inputs() {
        let (embeddings, pairs) = separated_embeddings_and_pairs();
        assert!(matches!(
            verify(&embeddings, &pairs, &[0.0]),
            Err(BenchError::InvalidFarLevel(_))
        ));
        assert!(matches!(
            verify(&embeddings, &pairs, &[1.0]),
            Err(BenchError::InvalidFarLevel(_))
        ));
        // 8 pairs cannot fill 10 folds
        let small = PairSet {
            pairs: pairs.pairs[..8].to_vec(),
            folds: (0..8).collect(),
        };
        assert!(matches!(
            verify(&embeddings, &small, &[0.01]),
            Err(BenchError::EmptyFold(8))
        ));
    }

    #[test]
    fn verify_thresholds_ignore_held_out_fold() {
        let (embeddings, pairs) = separated_embeddings_and_pairs();
        let report = verify(&embeddings, &pairs, &[0.01]).unwrap();
        let sims = pair_similarities(&embeddings, &pairs).unwrap();
        for fold in 0..FOLD_COUNT {
            let (mut train_s, mut train_l) = (Vec::new(), Vec::new());
            for ((&s, p), &f) in sims.iter().zip(&pairs.pairs).zip(&pairs.folds) {
                if f != fold {
                    train_s.push(s);
                    train_l.push(p.label);
                }
            }
            let mut best_threshold = -1.0;
            let mut best_correct = 0;
            for cand in threshold_candidates(&train_s) {
                let correct = accuracy_at(cand, &train_s, &train_l);
                if correct > best_correct {
                    best_correct = correct;
                    best_threshold = cand;
                }
            }
            assert_eq!(report.per_fold_threshold[fold], best_threshold);
        }
    }

    #[test]
    fn verify_invariant_under_embedding_rescale() {
        let (embeddings, pairs) = separated_embeddings_and_pairs();
        let base = verify(&embeddings, &pairs, &[0.05]).unwrap();
        // power-of-two scale: similarities are bit-identical
        let mut scaled = embeddings.clone();
        for v in scaled.as_mut_slice() {
            *v *= 4.0;
        }
        assert_eq!(verify(&scaled, &pairs, &[0.05]).unwrap(), base);
        // arbitrary positive scale: accuracy unchanged
        let mut scaled = embeddings.clone();
        for v in scaled.as_mut_slice() {
            *v *= 3.7;
        }
        let r = verify(&scaled, &pairs, &[0.05]).unwrap();
        assert_eq!(r.accuracy, base.accuracy);
    }

    #[test]
    fn tar_far_monotone_in_level() {
        let (embeddings, mut pairs) = separated_embeddings_and_pairs();
        // scramble labels so the similarity signal is imperfect
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in pairs.pairs.iter_mut() {
            if rng.gen_bool(0.5) {
                p.label = match p.label {
                    PairLabel::Positive => PairLabel::Negative,
                    PairLabel::Negative => PairLabel::Positive,
                };
            }
        }
        let levels = [0.01, 0.05, 0.1, 0.3, 0.6];
        let report = verify(&embeddings, &pairs, &levels).unwrap();
        for w in report.tar_at_far.windows(2) {
            assert!(w[1].1 >= w[0].1, "TAR not monotone: {:?}", report.tar_at_far);
        }
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 200;
        let mut m = Matrix::zeros(n, 4);
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Dataset::new(m.clone(), labels).unwrap();
        let pairs = build_pairs(&data, 300, 600, 3).unwrap();
        let report = verify(&m, &pairs, &[0.1]).unwrap();
        // 1200 pairs: 3σ of a fair coin is ~0.0433
        assert!((report.accuracy - 0.5).abs() < 0.0433, "{}", report.accuracy);
    }

    #[test]
    fn hard_pairs_match_brute_force_sort() {
        let (embeddings, pairs) = separated_embeddings_and_pairs();
        let sims = pair_similarities(&embeddings, &pairs).unwrap();
        let (hp, hn) = hard_pairs(&embeddings, &pairs, 5).unwrap();
        // brute force: full sort of (sim, pair) tuples
        let mut pos: Vec<(f64, Pair)> = sims
            .iter()
            .zip(&pairs.pairs)
            .filter(|(_, p)| p.label == PairLabel::Positive)
            .map(|(&s, &p)| (s, p))
            .collect();
        pos.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap()
                .then(a.1.a.cmp(&b.1.a))
                .then(a.1.b.cmp(&b.1.b))
        });
        for (got, want) in hp.iter().zip(&pos) {
            assert_eq!(got.0, want.1);
            assert_eq!(got.1, want.0);
        }
        let mut neg: Vec<(f64, Pair)> = sims
            .iter()
            .zip(&pairs.pairs)
            .filter(|(_, p)| p.label == PairLabel::Negative)
            .map(|(&s, &p)| (s, p))
            .collect();
        neg.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.a.cmp(&b.1.a))
                .then(a.1.b.cmp(&b.1.b))
        });
        for (got, want) in hn.iter().zip(&neg) {
            assert_eq!(got.0, want.1);
        }
    }

    #[test]
    fn hard_pairs_deterministic_under_permutation_and_ties() {
        // all similarities equal: ranking falls back to pair indices
        let mut m = Matrix::zeros(6, 2);
        for i in 0..6 {
            m.set(i, 0, 1.0);
        }
        let pairs = PairSet {
            pairs: vec![
                Pair { a: 0, b: 1, label: PairLabel::Positive },
                Pair { a: 2, b: 3, label: PairLabel::Positive },
                Pair { a: 4, b: 5, label: PairLabel::Positive },
                Pair { a: 0, b: 2, label: PairLabel::Negative },
                Pair { a: 1, b: 3, label: PairLabel::Negative },
            ],
            folds: vec![0, 1, 2, 3, 4],
        };
        let (hp, hn) = hard_pairs(&m, &pairs, 2).unwrap();
        assert_eq!((hp[0].0.a, hp[0].0.b), (0, 1));
        assert_eq!((hp[1].0.a, hp[1].0.b), (2, 3));
        assert_eq!((hn[0].0.a, hn[0].0.b), (0, 2));

        let mut permuted = pairs.clone();
        permuted.pairs.reverse();
        permuted.folds.reverse();
        let (hp2, hn2) = hard_pairs(&m, &permuted, 2).unwrap();
        assert_eq!(hp, hp2);
        assert_eq!(hn, hn2);

        assert!(matches!(
            hard_pairs(&m, &pairs, 4),
            Err(BenchError::KTooLarge { .. })
        ));
    }

    #[test]
    fn identical_models_have_zero_gains() {
        let specs = vec![spec("p0", 40), {
            let mut s = spec("p1", 40);
            s.shift_vector = vec![0.5, 0.0, 0.0];
            s
        }];
        let model = ModelParams {
            projection: Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5]),
            class_weights: ClassWeights::new(Matrix::from_vec(2, 4, vec![
                1.0, 0.0, -1.0, 0.5, 0.0, 1.0, 0.5, -1.0,
            ]))
            .unwrap(),
        };
        let cfg = PairGenConfig {
            positives_per_class: 10,
            negatives_total: 40,
            seed: 6,
        };
        let eval_a = cross_population_eval(&model, &specs, &cfg, &[0.01]).unwrap();
        let eval_b = cross_population_eval(&model, &specs, &cfg, &[0.01]).unwrap();
        for (name, gain) in accuracy_gains(&eval_a, &eval_b) {
            assert_eq!(gain, 0.0, "population {name}");
        }
    }

    #[test]
    fn report_csv_schema() {
        let report = VerificationReport {
            per_fold_threshold: vec![0.5; FOLD_COUNT],
            accuracy: 0.875,
            tar_at_far: vec![(0.01, 0.9), (0.001, 0.75)],
            hard_positives: vec![],
            hard_negatives: vec![],
        };
        let rows = vec![PopulationEval {
            population: "shifted".into(),
            report,
        }];
        let csv = report_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "test_population,accuracy,thr_mean,tar@far1e-2,tar@far1e-3"
        );
        assert_eq!(lines.next().unwrap(), "shifted,0.875,0.5,0.9,0.75");
    }
}
