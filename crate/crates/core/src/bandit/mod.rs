//! Combinatorial Thompson sampling over context segments.
//!
//! Each segment is an arm with a Gaussian belief over its importance. Every
//! round draws one sample per arm, keeps the top-`p` fraction of arms as the
//! context subset, observes that subset's supportiveness reward, and applies
//! the conjugate Gaussian update to every arm in the subset with that same
//! scalar. Final scores are the posterior means.

mod result;

pub use result::{rank, AttributionResult, Method};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, SubsetMask};
use crate::error::{Error, Result};
use crate::oracle::{calls_so_far, LikelihoodOracle};
use crate::reward::RewardContext;

/// Gaussian belief `N(mean, variance)` over one segment's importance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPosterior {
    pub mean: f64,
    pub variance: f64,
}

impl ArmPosterior {
    /// Conjugate update with one observation of noise variance `noise_variance`.
    pub fn observe(self, value: f64, noise_variance: f64) -> Self {
        let variance = 1.0 / (1.0 / self.variance + 1.0 / noise_variance);
        let mean = variance * (self.mean / self.variance + value / noise_variance);
        Self { mean, variance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtsConfig {
    /// Fraction of arms played per round, in (0, 1).
    pub top_p: f64,
    /// Number of rounds, each costing one oracle query.
    pub max_rounds: usize,
    /// Observation noise variance.
    pub noise_variance: f64,
    pub prior_variance: f64,
    pub seed: u64,
}

impl Default for CtsConfig {
    fn default() -> Self {
        Self {
            top_p: 0.2,
            max_rounds: 60,
            noise_variance: 1.0,
            prior_variance: 1.0,
            seed: 0,
        }
    }
}

impl CtsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p < 1.0) {
            return Err(Error::contract(format!(
                "top_p {} not in (0, 1)",
                self.top_p
            )));
        }
        for (name, v) in [
            ("noise_variance", self.noise_variance),
            ("prior_variance", self.prior_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Arms kept per round: `max(1, ceil(top_p * n))`, at most `n`.
pub fn subset_size(n_segments: usize, top_p: f64) -> usize {
    // the epsilon absorbs representation error such as 0.2 * 15 = 3.0000000000000004
    let k = (top_p * n_segments as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n_segments)
}

/// Mask of the `subset_size(N, top_p)` largest samples, ties by lower index.
pub fn select_subset(thetas: &[f64], top_p: f64) -> SubsetMask {
    let k = subset_size(thetas.len(), top_p);
    let order = rank(thetas);
    SubsetMask::from_indices(thetas.len(), order.into_iter().take(k))
        .expect("ranked indices are in range")
}

/// Live state of one CTS run.
#[derive(Debug, Clone)]
pub struct CtsState {
    config: CtsConfig,
    posteriors: Vec<ArmPosterior>,
    history: Vec<(SubsetMask, f64)>,
    rng: ChaCha8Rng,
}

impl CtsState {
    /// Every arm starts at `N(1/N, prior_variance)`.
    pub fn new(n_segments: usize, config: CtsConfig) -> Result<Self> {
        if n_segments == 0 {
            return Err(Error::contract("CTS needs at least one segment"));
        }
        config.validate()?;
        let prior = ArmPosterior {
            mean: 1.0 / n_segments as f64,
            variance: config.prior_variance,
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            posteriors: vec![prior; n_segments],
            history: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &CtsConfig {
        &self.config
    }

    pub fn posteriors(&self) -> &[ArmPosterior] {
        &self.posteriors
    }

    pub fn means(&self) -> Vec<f64> {
        self.posteriors.iter().map(|p| p.mean).collect()
    }

    /// Played masks and observed rewards, one per completed round.
    pub fn history(&self) -> &[(SubsetMask, f64)] {
        &self.history
    }

    pub fn round(&self) -> usize {
        self.history.len()
    }

    /// One independent draw per arm from its current posterior.
    pub fn sample_thetas(&mut self) -> Vec<f64> {
        let rng = &mut self.rng;
        self.posteriors
            .iter()
            .map(|p| {
                let z: f64 = StandardNormal.sample(rng);
                p.mean + p.variance.sqrt() * z
            })
            .collect()
    }

    /// Apply the observed reward to every arm in `mask`; others are untouched.
    pub fn update(&mut self, mask: &SubsetMask, observed: f64) -> Result<()> {
        if self.round() >= self.config.max_rounds {
            return Err(Error::contract(format!(
                "round budget of {} already spent",
                self.config.max_rounds
            )));
        }
        if mask.len() != self.posteriors.len() {
            return Err(Error::contract("mask width does not match arm count"));
        }
        if !(0.0..=1.0).contains(&observed) {
            return Err(Error::contract(format!("reward {observed} outside [0, 1]")));
        }
        for j in mask.indices() {
            self.posteriors[j] = self.posteriors[j].observe(observed, self.config.noise_variance);
        }
        self.history.push((mask.clone(), observed));
        Ok(())
    }
}

/// Run CTS for `config.max_rounds` rounds and score segments by posterior mean.
///
/// Costs two anchor queries plus at most one query per round.
pub fn run(
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
    config: &CtsConfig,
) -> Result<AttributionResult> {
    run_with_state(instance, oracle, config).map(|(result, _)| result)
}

/// [`run`], also returning the final state for inspection.
pub fn run_with_state(
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
    config: &CtsConfig,
) -> Result<(AttributionResult, CtsState)> {
    let mut state = CtsState::new(instance.n_segments(), config.clone())?;
    let before = calls_so_far(oracle);
    let ctx = RewardContext::prepare(instance, oracle)?;
    for _ in 0..config.max_rounds {
        let thetas = state.sample_thetas();
        let mask = select_subset(&thetas, config.top_p);
        let reward = ctx.reward(instance, &mask, oracle)?;
        state.update(&mask, reward)?;
    }
    let result = AttributionResult::new(
        instance.id(),
        Method::Cts,
        state.means(),
        calls_so_far(oracle) - before,
        config.seed,
    );
    Ok((result, state))
}
