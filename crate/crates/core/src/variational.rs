//! Exact ELBO bookkeeping on small discrete latent-variable models.
//!
//! A model factorizes as `P(y, z | x) = P(y | x, z) P(z | x)` over finite
//! sets indexed `0..n`. All quantities are exact sums in the log domain with
//! the convention `0 * log 0 = 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

pub const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VariationalError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no latent value survives the filter")]
    EmptySupport,
    #[error("index out of range: {0}")]
    OutOfRange(String),
}

fn check_row(row: &[f64], what: &str) -> Result<(), VariationalError> {
    if row.is_empty() {
        return Err(VariationalError::InvalidDistribution(format!("{what}: empty row")));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(VariationalError::InvalidDistribution(format!("{what}: negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(VariationalError::InvalidDistribution(format!("{what}: row sums to {s}")));
    }
    Ok(())
}

/// Stable `log Σ exp(x_i)`; `-inf` for an empty or all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `p * log(q)` with `0 * log(anything) = 0`.
fn xlogy(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * q.ln()
    }
}

/// `KL(q ‖ p)`, `+inf` when q puts mass outside p's support.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| match (qi, pi) {
            (0.0, _) => 0.0,
            (_, 0.0) => f64::INFINITY,
            _ => qi * (qi.ln() - pi.ln()),
        })
        .sum()
}

/// Flat-Dirichlet row: normalized Exp(1) draws.
pub fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteModel {
    /// `prior[x][z] = P(z | x)`
    prior: Vec<Vec<f64>>,
    /// `likelihood[x][z][y] = P(y | x, z)`
    likelihood: Vec<Vec<Vec<f64>>>,
}

impl DiscreteModel {
    pub fn new(prior: Vec<Vec<f64>>, likelihood: Vec<Vec<Vec<f64>>>) -> Result<Self, VariationalError> {
        if prior.is_empty() || prior.len() != likelihood.len() {
            return Err(VariationalError::InvalidDistribution("prior and likelihood disagree on |X|".into()));
        }
        let nz = prior[0].len();
        let ny = likelihood[0].first().map_or(0, Vec::len);
        for (x, (pz, py)) in prior.iter().zip(&likelihood).enumerate() {
            if pz.len() != nz || py.len() != nz {
                return Err(VariationalError::InvalidDistribution(format!("x={x}: ragged |Z|")));
            }
            check_row(pz, &format!("P(z|x={x})"))?;
            for (z, row) in py.iter().enumerate() {
                if row.len() != ny {
                    return Err(VariationalError::InvalidDistribution(format!("x={x}, z={z}: ragged |Y|")));
                }
                check_row(row, &format!("P(y|x={x},z={z})"))?;
            }
        }
        Ok(DiscreteModel { prior, likelihood })
    }

    pub fn random<R: Rng>(nx: usize, ny: usize, nz: usize, rng: &mut R) -> Self {
        let prior = (0..nx).map(|_| random_simplex(nz, rng)).collect();
        let likelihood = (0..nx)
            .map(|_| (0..nz).map(|_| random_simplex(ny, rng)).collect())
            .collect();
        DiscreteModel { prior, likelihood }
    }

    pub fn nx(&self) -> usize {
        self.prior.len()
    }

    pub fn nz(&self) -> usize {
        self.prior[0].len()
    }

    pub fn ny(&self) -> usize {
        self.likelihood[0][0].len()
    }

    pub fn prior(&self, x: usize) -> &[f64] {
        &self.prior[x]
    }

    pub fn likelihood(&self, x: usize, z: usize) -> &[f64] {
        &self.likelihood[x][z]
    }

    fn check_xy(&self, x: usize, y: usize) -> Result<(), VariationalError> {
        if x >= self.nx() || y >= self.ny() {
            return Err(VariationalError::OutOfRange(format!("(x={x}, y={y})")));
        }
        Ok(())
    }

    /// `P(y | x) = Σ_z P(z | x) P(y | x, z)`.
    pub fn marginal(&self, x: usize) -> Vec<f64> {
        (0..self.ny())
            .map(|y| (0..self.nz()).map(|z| self.prior[x][z] * self.likelihood[x][z][y]).sum())
            .collect()
    }

    fn log_joint(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.nz())
            .map(|z| self.prior[x][z].ln() + self.likelihood[x][z][y].ln())
            .collect()
    }

    pub fn log_marginal(&self, x: usize, y: usize) -> f64 {
        log_sum_exp(&self.log_joint(x, y))
    }

    /// `P(z | x, y)`. Falls back to the prior when `P(y | x) = 0`.
    pub fn true_posterior(&self, x: usize, y: usize) -> Vec<f64> {
        let lj = self.log_joint(x, y);
        let lm = log_sum_exp(&lj);
        if lm == f64::NEG_INFINITY {
            return self.prior[x].clone();
        }
        lj.into_iter().map(|l| (l - lm).exp()).collect()
    }
}

/// `q(z | x, y)`, stored as `table[x][y][z]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalPosterior {
    table: Vec<Vec<Vec<f64>>>,
}

impl VariationalPosterior {
    pub fn new(table: Vec<Vec<Vec<f64>>>) -> Result<Self, VariationalError> {
        for (x, rows) in table.iter().enumerate() {
            for (y, row) in rows.iter().enumerate() {
                check_row(row, &format!("q(z|x={x},y={y})"))?;
            }
        }
        Ok(VariationalPosterior { table })
    }

    pub fn random<R: Rng>(model: &DiscreteModel, rng: &mut R) -> Self {
        let table = (0..model.nx())
            .map(|_| (0..model.ny()).map(|_| random_simplex(model.nz(), rng)).collect())
            .collect();
        VariationalPosterior { table }
    }

    pub fn exact(model: &DiscreteModel) -> Self {
        let table = (0..model.nx())
            .map(|x| (0..model.ny()).map(|y| model.true_posterior(x, y)).collect())
            .collect();
        VariationalPosterior { table }
    }

    pub fn from_prior(model: &DiscreteModel) -> Self {
        let table = (0..model.nx())
            .map(|x| vec![model.prior(x).to_vec(); model.ny()])
            .collect();
        VariationalPosterior { table }
    }

    pub fn row(&self, x: usize, y: usize) -> &[f64] {
        &self.table[x][y]
    }

    fn checked_row(&self, model: &DiscreteModel, x: usize, y: usize) -> Result<&[f64], VariationalError> {
        model.check_xy(x, y)?;
        let row = self
            .table
            .get(x)
            .and_then(|r| r.get(y))
            .ok_or_else(|| VariationalError::OutOfRange(format!("q has no row for (x={x}, y={y})")))?;
        if row.len() != model.nz() {
            return Err(VariationalError::InvalidDistribution(format!(
                "q row has {} entries, model has |Z|={}",
                row.len(),
                model.nz()
            )));
        }
        Ok(row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboTerms {
    /// `E_q[log P(y | x, z)]`
    pub prediction: f64,
    /// `KL(q(z | x, y) ‖ P(z | x))`
    pub regularization: f64,
    pub elbo: f64,
}

pub fn elbo_terms(model: &DiscreteModel, q: &VariationalPosterior, x: usize, y: usize) -> Result<ElboTerms, VariationalError> {
    let row = q.checked_row(model, x, y)?;
    let prediction: f64 = row
        .iter()
        .enumerate()
        .map(|(z, &qz)| xlogy(qz, model.likelihood(x, z)[y]))
        .sum();
    let regularization = kl_divergence(row, model.prior(x));
    Ok(ElboTerms {
        prediction,
        regularization,
        elbo: prediction - regularization,
    })
}

pub fn elbo(model: &DiscreteModel, q: &VariationalPosterior, x: usize, y: usize) -> Result<f64, VariationalError> {
    elbo_terms(model, q, x, y).map(|t| t.elbo)
}

/// 1 iff `y` is the unique argmax of `P(· | x, z)`. Ties count as failure.
pub fn consistency_indicator(model: &DiscreteModel, x: usize, y: usize, z: usize) -> bool {
    let row = model.likelihood(x, z);
    let target = row[y];
    row.iter().enumerate().all(|(i, &p)| i == y || p < target)
}

/// Prediction term under `q` renormalized onto the latent values that pass
/// the consistency indicator.
pub fn filtered_term1(model: &DiscreteModel, q: &VariationalPosterior, x: usize, y: usize) -> Result<f64, VariationalError> {
    let row = q.checked_row(model, x, y)?;
    let kept: Vec<usize> = (0..model.nz())
        .filter(|&z| row[z] > 0.0 && consistency_indicator(model, x, y, z))
        .collect();
    let mass: f64 = kept.iter().map(|&z| row[z]).sum();
    if kept.is_empty() || mass == 0.0 {
        return Err(VariationalError::EmptySupport);
    }
    Ok(kept
        .iter()
        .map(|&z| xlogy(row[z] / mass, model.likelihood(x, z)[y]))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboCheckReport {
    pub models: usize,
    /// `max(ELBO - log P(y|x))`; must be ≤ 0 up to rounding.
    pub max_bound_violation: f64,
    /// `max |log P(y|x) - ELBO - KL(q ‖ posterior)|`.
    pub max_tightness_residual: f64,
    /// `max |ELBO(exact posterior) - log P(y|x)|`.
    pub max_exact_posterior_residual: f64,
    /// `max(unfiltered - filtered)` prediction term over non-empty filters.
    pub max_filter_violation: f64,
    pub filter_cases: usize,
}

impl ElboCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_bound_violation <= tolerance
            && self.max_tightness_residual <= tolerance
            && self.max_exact_posterior_residual <= tolerance
            && self.max_filter_violation <= tolerance
    }
}

/// Random models with `|X| = 1`, `|Y| = 2`, `|Z| ∈ {2..5}` and random `q`.
pub fn run_elbo_check(models: usize, seed: u64) -> ElboCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ElboCheckReport {
        models,
        max_bound_violation: f64::NEG_INFINITY,
        max_tightness_residual: 0.0,
        max_exact_posterior_residual: 0.0,
        max_filter_violation: f64::NEG_INFINITY,
        filter_cases: 0,
    };
    for _ in 0..models {
        let nz = rng.random_range(2..=5);
        let model = DiscreteModel::random(1, 2, nz, &mut rng);
        let q = VariationalPosterior::random(&model, &mut rng);
        let exact = VariationalPosterior::exact(&model);
        for y in 0..model.ny() {
            let lm = model.log_marginal(0, y);
            let terms = elbo_terms(&model, &q, 0, y).expect("generated tables are valid");
            let gap_kl = kl_divergence(q.row(0, y), &model.true_posterior(0, y));
            report.max_bound_violation = report.max_bound_violation.max(terms.elbo - lm);
            report.max_tightness_residual = report.max_tightness_residual.max((lm - terms.elbo - gap_kl).abs());
            let tight = elbo(&model, &exact, 0, y).expect("posterior is valid");
            report.max_exact_posterior_residual = report.max_exact_posterior_residual.max((tight - lm).abs());
            if let Ok(filtered) = filtered_term1(&model, &q, 0, y) {
                report.filter_cases += 1;
                report.max_filter_violation = report.max_filter_violation.max(terms.prediction - filtered);
            }
        }
    }
    report
}
