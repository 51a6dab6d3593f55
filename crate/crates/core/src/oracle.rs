//! Brute-force certification of the closed-form inner maximum.
//!
//! The worst-case reweighting problem is
//!
//! ```text
//! max_w Σ L_i w_i   s.t.   Σ w_i log w_i + log N ≤ C,   w on the simplex
//! ```
//!
//! whose Lagrangian solution is the softmax weight family of [`crate::loss`].
//! This module solves the same problem directly — by exhaustive simplex-grid
//! search for N ≤ 4 and by projected gradient ascent for larger N — and maps
//! a KL budget `C` to the temperature `T` that attains it, so the closed form
//! can be checked against solvers that know nothing about it.

use crate::loss::{empirical_kl, is_weights, LossVector, Temperature, WeightVector};
use thiserror::Error;

/// Bisection bracket for the budget → temperature map. Outside the bracket a
/// regime flag replaces a numeric answer.
pub const TEMP_MIN: f64 = 1e-6;
pub const TEMP_MAX: f64 = 1e6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("KL budget must be a finite nonnegative number, got {0}")]
    InvalidBudget(f64),
    #[error("grid oracle supports at most 4 samples, got {0}")]
    UnsupportedSize(usize),
    #[error("grid resolution must be at least 100, got {0}")]
    InvalidResolution(usize),
    #[error("ascent requires step > 0 and iters >= 1")]
    InvalidAscentParams,
    #[error("constant losses: no finite temperature attains a positive KL budget")]
    DegenerateInput,
    #[error("ascent exited with KL {kl} exceeding budget {budget} by more than 1e-6")]
    NonConvergence {
        kl: f64,
        budget: f64,
        /// Last iterate, for diagnosis.
        weights: Vec<f64>,
    },
}

/// Maximum allowed empirical KL (nats). Values above `log N` fall into the
/// point-mass regime at solve time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlBudget(f64);

impl KlBudget {
    pub fn new(c: f64) -> Result<Self, OracleError> {
        if !(c.is_finite() && c >= 0.0) {
            return Err(OracleError::InvalidBudget(c));
        }
        Ok(Self(c))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMethod {
    Grid,
    ProjectedAscent,
    Bisection,
}

/// A feasible maximizer of the inner problem.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub weights: WeightVector,
    /// Σ L_i w_i at the returned weights.
    pub objective: f64,
    /// Empirical KL of the returned weights (≤ budget + 1e-8).
    pub kl: f64,
    pub method: OracleMethod,
}

/// Where the budget landed relative to the bisection bracket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetRegime {
    /// Budget attained strictly inside the bracket.
    Interior,
    /// Budget below what the bracket's top temperature reaches; weights are
    /// effectively uniform. The returned temperature is the 1e6 cap.
    Uniform,
    /// Budget at or above what the bracket's bottom temperature reaches;
    /// weights are effectively a point mass. The returned temperature is the
    /// 1e-6 cap.
    PointMass,
}

/// Temperature realizing a KL budget, with its regime flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetTemperature {
    pub temp: Temperature,
    pub regime: BudgetRegime,
}

fn objective(losses: &[f64], weights: &[f64]) -> f64 {
    losses.iter().zip(weights).map(|(l, w)| l * w).sum()
}

fn kl_slice(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    let neg_entropy: f64 = weights
        .iter()
        .map(|&w| if w > 0.0 { w * w.ln() } else { 0.0 })
        .sum();
    (neg_entropy + n.ln()).max(0.0)
}

struct GridSearch<'a> {
    losses: &'a [f64],
    resolution: usize,
    /// phi[k] = (k/res)·ln(k/res), phi[0] = 0.
    phi: Vec<f64>,
    ln_n: f64,
    budget: f64,
    counts: Vec<usize>,
    best_weights: Vec<f64>,
    best_objective: f64,
}

impl<'a> GridSearch<'a> {
    fn new(losses: &'a [f64], resolution: usize, budget: f64) -> Self {
        let inv_res = 1.0 / resolution as f64;
        let phi = (0..=resolution)
            .map(|k| {
                if k == 0 {
                    0.0
                } else {
                    let w = k as f64 * inv_res;
                    w * w.ln()
                }
            })
            .collect();
        let n = losses.len();
        // Seed with the exact uniform vector: it is feasible for every budget
        // (KL = 0), which keeps the feasible set non-empty even when the grid
        // itself contains no point inside a tiny budget.
        let uniform = vec![1.0 / n as f64; n];
        let best_objective = objective(losses, &uniform);
        Self {
            losses,
            resolution,
            phi,
            ln_n: (n as f64).ln(),
            budget,
            counts: vec![0; n],
            best_weights: uniform,
            best_objective,
        }
    }

    fn consider(&mut self, obj: f64, phi_sum: f64) {
        if (phi_sum + self.ln_n).max(0.0) > self.budget + 1e-12 {
            return;
        }
        if obj < self.best_objective {
            return;
        }
        let inv_res = 1.0 / self.resolution as f64;
        if obj > self.best_objective {
            self.best_objective = obj;
            self.best_weights = self.counts.iter().map(|&k| k as f64 * inv_res).collect();
            return;
        }
        // Tie: keep the lexicographically smallest weight vector.
        let candidate: Vec<f64> = self.counts.iter().map(|&k| k as f64 * inv_res).collect();
        if candidate
            .iter()
            .zip(&self.best_weights)
            .find_map(|(c, b)| {
                if c < b {
                    Some(true)
                } else if c > b {
                    Some(false)
                } else {
                    None
                }
            })
            .unwrap_or(false)
        {
            self.best_weights = candidate;
        }
    }

    fn recurse(&mut self, idx: usize, remaining: usize, obj: f64, phi_sum: f64) {
        let inv_res = 1.0 / self.resolution as f64;
        if idx + 1 == self.counts.len() {
            self.counts[idx] = remaining;
            let obj = obj + self.losses[idx] * remaining as f64 * inv_res;
            let phi_sum = phi_sum + self.phi[remaining];
            self.consider(obj, phi_sum);
            return;
        }
        for k in 0..=remaining {
            self.counts[idx] = k;
            self.recurse(
                idx + 1,
                remaining - k,
                obj + self.losses[idx] * k as f64 * inv_res,
                phi_sum + self.phi[k],
            );
        }
    }
}

/// Exhaustive search over the simplex grid with spacing `1/resolution`,
/// filtered by the KL constraint. N ≤ 4 only; ties broken toward the
/// lexicographically smallest weight vector, so the result is deterministic.
pub fn solve_inner_max_grid(
    losses: &LossVector,
    budget: KlBudget,
    resolution: usize,
) -> Result<OracleSolution, OracleError> {
    let n = losses.len();
    if n > 4 {
        return Err(OracleError::UnsupportedSize(n));
    }
    if resolution < 100 {
        return Err(OracleError::InvalidResolution(resolution));
    }
    let mut search = GridSearch::new(losses.as_slice(), resolution, budget.value());
    search.recurse(0, resolution, 0.0, 0.0);
    let weights = WeightVector::new(search.best_weights).expect("grid weights are simplex points");
    let kl = empirical_kl(&weights);
    let objective = objective(losses.as_slice(), weights.as_slice());
    Ok(OracleSolution {
        weights,
        objective,
        kl,
        method: OracleMethod::Grid,
    })
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Pull `w` radially toward uniform until the KL budget holds:
/// `w ← (1−α)·w + α·uniform` with the smallest feasible `α` found by
/// bisection. KL is monotone non-increasing along the segment.
fn radial_to_budget(w: &[f64], budget: f64) -> Vec<f64> {
    if kl_slice(w) <= budget {
        return w.to_vec();
    }
    let n = w.len() as f64;
    let u = 1.0 / n;
    let mix = |alpha: f64| -> Vec<f64> {
        w.iter().map(|&wi| (1.0 - alpha) * wi + alpha * u).collect()
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if kl_slice(&mix(mid)) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if hi >= 1.0 - 1e-12 {
        return vec![u; w.len()];
    }
    mix(hi)
}

/// Projected gradient ascent on the simplex intersected with the KL ball.
/// Diminishing steps; alternating Euclidean simplex projection and radial
/// scaling toward uniform. Deterministic given inputs.
pub fn solve_inner_max_ascent(
    losses: &LossVector,
    budget: KlBudget,
    step: f64,
    iters: usize,
) -> Result<OracleSolution, OracleError> {
    if !(step > 0.0 && step.is_finite()) || iters < 1 {
        return Err(OracleError::InvalidAscentParams);
    }
    let l = losses.as_slice();
    let n = l.len();
    let c = budget.value();
    let mut w = vec![1.0 / n as f64; n];
    for k in 0..iters {
        let eta = step / ((k + 1) as f64).sqrt();
        let moved: Vec<f64> = w.iter().zip(l).map(|(&wi, &li)| wi + eta * li).collect();
        w = radial_to_budget(&project_simplex(&moved), c);
    }
    let kl = kl_slice(&w);
    if kl > c + 1e-6 {
        return Err(OracleError::NonConvergence {
            kl,
            budget: c,
            weights: w,
        });
    }
    let objective = objective(l, &w);
    let weights = WeightVector::new(w).expect("projected iterate is a simplex point");
    Ok(OracleSolution {
        weights,
        objective,
        kl,
        method: OracleMethod::ProjectedAscent,
    })
}

/// Map a KL budget to the temperature whose softmax weights attain it, by
/// bisection over `log T` (empirical KL is monotone non-increasing in `T`).
/// Budgets outside what the `[1e-6, 1e6]` bracket reaches come back flagged
/// as the uniform / point-mass regime instead of a bisected value.
pub fn temperature_for_budget(
    losses: &LossVector,
    budget: KlBudget,
) -> Result<BudgetTemperature, OracleError> {
    let l = losses.as_slice();
    let spread = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - l.iter().cloned().fold(f64::INFINITY, f64::min);
    if spread == 0.0 {
        return Err(OracleError::DegenerateInput);
    }
    let c = budget.value();
    let kl_at = |t: f64| empirical_kl(&is_weights(losses, Temperature::new(t).unwrap()));
    if c <= kl_at(TEMP_MAX) {
        return Ok(BudgetTemperature {
            temp: Temperature::new(TEMP_MAX).unwrap(),
            regime: BudgetRegime::Uniform,
        });
    }
    if c >= kl_at(TEMP_MIN) {
        return Ok(BudgetTemperature {
            temp: Temperature::new(TEMP_MIN).unwrap(),
            regime: BudgetRegime::PointMass,
        });
    }
    let (mut lo, mut hi) = (TEMP_MIN.ln(), TEMP_MAX.ln());
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let kl = kl_at(mid.exp());
        if (kl - c).abs() <= 1e-12 {
            break;
        }
        if kl > c {
            // KL decreases with T: too much concentration means T is too low.
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(BudgetTemperature {
        temp: Temperature::new(mid.exp()).unwrap(),
        regime: BudgetRegime::Interior,
    })
}

/// Closed-form solution of the inner maximum via the budget → temperature
/// map: weights are the softmax family evaluated at the bisected temperature.
pub fn closed_form_solution(
    losses: &LossVector,
    budget: KlBudget,
) -> Result<OracleSolution, OracleError> {
    let bt = temperature_for_budget(losses, budget)?;
    let weights = match bt.regime {
        BudgetRegime::Interior | BudgetRegime::PointMass => is_weights(losses, bt.temp),
        // At the uniform end the budget is below anything the bracket
        // reaches; the feasible optimum is uniform itself.
        BudgetRegime::Uniform => WeightVector::uniform(losses.len()),
    };
    let kl = empirical_kl(&weights);
    let obj = objective(losses.as_slice(), weights.as_slice());
    Ok(OracleSolution {
        weights,
        objective: obj,
        kl,
        method: OracleMethod::Bisection,
    })
}
