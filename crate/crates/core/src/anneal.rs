//! Simulated annealing over the temperature-layer strength `beta`.
//!
//! The annealer keeps its own temperature, unrelated to `beta`: it only sets
//! how readily a worse-scoring proposal is accepted.

use rand::Rng;

use crate::data::{split, Dataset};
use crate::error::{FttnError, Result};
use crate::model::{MpsClassifier, Temperature};
use crate::rng;
use crate::training::{evaluate, train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealConfig {
    pub beta_init: f64,
    /// Half-width of the uniform proposal step.
    pub step_width: f64,
    pub anneal_temp_init: f64,
    pub cooling_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    pub proxy_epochs: usize,
    pub proxy_subset: usize,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            beta_init: 0.0,
            step_width: 0.05,
            anneal_temp_init: 1.0,
            cooling_rate: 0.95,
            iterations: 200,
            seed: 0,
            proxy_epochs: 2,
            proxy_subset: 500,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(FttnError::InvalidArgument(what.to_string()));
        if !(self.beta_init.is_finite() && self.beta_init >= 0.0) {
            return bad("beta_init must be finite and >= 0");
        }
        // zero width is allowed and pins beta at beta_init
        if !(self.step_width.is_finite() && self.step_width >= 0.0) {
            return bad("step_width must be finite and >= 0");
        }
        if !(self.anneal_temp_init.is_finite() && self.anneal_temp_init > 0.0) {
            return bad("anneal_temp_init must be positive");
        }
        if !(self.cooling_rate > 0.0 && self.cooling_rate < 1.0) {
            return bad("cooling_rate must lie in (0, 1)");
        }
        if self.iterations == 0 || self.proxy_epochs == 0 || self.proxy_subset == 0 {
            return bad("iterations, proxy_epochs and proxy_subset must be positive");
        }
        Ok(())
    }

    /// Annealing temperature in force at iteration `iter` (1-based).
    pub fn anneal_temp(&self, iter: usize) -> f64 {
        self.anneal_temp_init * self.cooling_rate.powi(iter as i32 - 1)
    }
}

/// Metropolis acceptance probability of a move changing the score by `delta`.
pub fn acceptance_probability(delta: f64, anneal_temp: f64) -> f64 {
    if delta >= 0.0 {
        1.0
    } else {
        (delta / anneal_temp).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// Proposed beta.
    pub beta: f64,
    /// Objective at the proposed beta.
    pub score: f64,
    pub accepted: bool,
    pub anneal_temp: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "iter,beta,score,accepted,anneal_temp";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter,
            self.beta,
            self.score,
            u8::from(self.accepted),
            self.anneal_temp
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnealOutcome {
    pub beta_star: f64,
    pub best_score: f64,
    pub initial_score: f64,
    /// One row per proposal.
    pub trace: Vec<TraceRow>,
}

/// Annealing aborted on a non-finite objective value.
#[derive(Debug, thiserror::Error)]
pub enum AnnealError {
    #[error("objective returned {score} at beta = {beta} (iteration {iter})")]
    NonFinite {
        iter: usize,
        beta: f64,
        score: f64,
        trace: Vec<TraceRow>,
    },
    #[error(transparent)]
    Objective(#[from] FttnError),
}

/// Maximizes `objective` over `beta >= 0`.
///
/// Proposals are `max(0, beta + U(-w, w))`; improvements are always taken and
/// a worse score is taken with probability `exp(delta / T)`, with `T` cooled
/// geometrically. Returns the best beta ever evaluated, preferring the smaller
/// beta on equal scores.
pub fn anneal_beta<F>(mut objective: F, config: &AnnealConfig) -> std::result::Result<AnnealOutcome, AnnealError>
where
    F: FnMut(f64) -> Result<f64>,
{
    config.validate()?;
    let mut rng = rng::stream(config.seed, "anneal");
    let mut trace = Vec::with_capacity(config.iterations);

    let mut beta = config.beta_init;
    let mut score = objective(beta)?;
    if !score.is_finite() {
        return Err(AnnealError::NonFinite {
            iter: 0,
            beta,
            score,
            trace,
        });
    }
    let initial_score = score;
    let (mut best_beta, mut best_score) = (beta, score);

    for iter in 1..=config.iterations {
        let temp = config.anneal_temp(iter);
        let step = if config.step_width > 0.0 {
            rng.gen_range(-config.step_width..=config.step_width)
        } else {
            0.0
        };
        let candidate = (beta + step).max(0.0);
        let candidate_score = objective(candidate)?;
        if !candidate_score.is_finite() {
            return Err(AnnealError::NonFinite {
                iter,
                beta: candidate,
                score: candidate_score,
                trace,
            });
        }
        let delta = candidate_score - score;
        // draw every iteration so the stream does not depend on the scores
        let u: f64 = rng.gen();
        let accepted = u < acceptance_probability(delta, temp);
        if accepted {
            beta = candidate;
            score = candidate_score;
        }
        if candidate_score > best_score || (candidate_score == best_score && candidate < best_beta) {
            best_beta = candidate;
            best_score = candidate_score;
        }
        trace.push(TraceRow {
            iter,
            beta: candidate,
            score: candidate_score,
            accepted,
            anneal_temp: temp,
        });
    }
    Ok(AnnealOutcome {
        beta_star: best_beta,
        best_score,
        initial_score,
        trace,
    })
}

/// Validation accuracy after a short training run at a given beta.
///
/// Every call starts from the same template model and the same data split,
/// so the score depends on beta alone.
pub struct ProxyObjective {
    template: MpsClassifier,
    train_set: Dataset,
    validation: Dataset,
    config: TrainConfig,
}

impl ProxyObjective {
    /// Holds out `holdout_fraction` of `dataset` for validation and keeps at
    /// most `proxy_subset` of the rest for training.
    pub fn new(
        dataset: &Dataset,
        template: MpsClassifier,
        train_config: &TrainConfig,
        anneal: &AnnealConfig,
        holdout_fraction: f64,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(FttnError::EmptyDataset);
        }
        let (train_part, validation) = split(dataset, holdout_fraction, anneal.seed)?;
        if train_part.is_empty() || validation.is_empty() {
            return Err(FttnError::InvalidArgument(format!(
                "holdout fraction {holdout_fraction} leaves an empty side of {} samples",
                dataset.len()
            )));
        }
        let config = TrainConfig {
            epochs: anneal.proxy_epochs,
            ..train_config.clone()
        };
        Ok(ProxyObjective {
            template,
            train_set: train_part.take(anneal.proxy_subset),
            validation,
            config,
        })
    }

    pub fn score(&self, beta: f64) -> Result<f64> {
        let temperature = Temperature {
            beta,
            ..self.config.temperature.unwrap_or(Temperature::new(0.0)?)
        };
        Temperature::new(beta)?;
        let config = TrainConfig {
            temperature: Some(temperature),
            ..self.config.clone()
        };
        let mut model = self.template.clone();
        train(&mut model, &self.train_set, None, &config, |_| {})?;
        evaluate(&model, &self.validation, Some(&temperature), config.feature_map)
    }
}

/// One-shot form of [`ProxyObjective::score`].
pub fn accuracy_objective(
    dataset: &Dataset,
    template: &MpsClassifier,
    train_config: &TrainConfig,
    anneal: &AnnealConfig,
    beta: f64,
) -> Result<f64> {
    ProxyObjective::new(dataset, template.clone(), train_config, anneal, 0.2)?.score(beta)
}
