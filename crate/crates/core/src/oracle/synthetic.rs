use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{LikelihoodOracle, TokenLikelihoods};
use crate::corpus::{Instance, SubsetMask};
use crate::error::{Error, Result};

/// Base logit used by [`SyntheticModel::lexical`].
const LEXICAL_BASE_OFFSET: f64 = -2.0;
/// Logit gained by a segment containing every response token.
const LEXICAL_FULL_WEIGHT: f64 = 4.0;

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Additive-logit likelihood model with planted segment importances:
/// `l_t(S) = logistic(b_t + sum_{j in S} w_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticModel {
    pub base_offsets: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SyntheticModel {
    pub fn new(base_offsets: Vec<f64>, weights: Vec<f64>) -> Self {
        Self {
            base_offsets,
            weights,
        }
    }

    /// Deterministic stand-in for instances without a planted model: each
    /// segment's weight is proportional to the share of (lowercased,
    /// punctuation-stripped) response tokens it contains.
    pub fn lexical(instance: &Instance) -> Self {
        let normalize = |s: &str| {
            s.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        };
        let response: Vec<String> = instance
            .response_tokens()
            .iter()
            .map(|t| normalize(t))
            .filter(|t| !t.is_empty())
            .collect();
        let weights = instance
            .segments()
            .iter()
            .map(|seg| {
                if response.is_empty() {
                    return 0.0;
                }
                let words: HashSet<String> = seg.text.split_whitespace().map(normalize).collect();
                let hits = response.iter().filter(|t| words.contains(*t)).count();
                LEXICAL_FULL_WEIGHT * hits as f64 / response.len() as f64
            })
            .collect();
        Self::new(vec![LEXICAL_BASE_OFFSET; instance.n_tokens()], weights)
    }

    pub(crate) fn check_dims(&self, n_segments: usize, n_tokens: usize) -> Result<()> {
        if self.weights.len() != n_segments || self.base_offsets.len() != n_tokens {
            return Err(Error::contract(format!(
                "synthetic model is {}x{} (weights x offsets) but instance has N = {n_segments}, T = {n_tokens}",
                self.weights.len(),
                self.base_offsets.len()
            )));
        }
        if self
            .weights
            .iter()
            .chain(&self.base_offsets)
            .any(|v| !v.is_finite())
        {
            return Err(Error::contract("synthetic model has non-finite parameters"));
        }
        Ok(())
    }
}

/// Evaluate the synthetic model on a mask.
pub fn synthetic_score(model: &SyntheticModel, mask: &SubsetMask) -> Result<TokenLikelihoods> {
    if mask.len() != model.weights.len() {
        return Err(Error::contract(format!(
            "mask width {} does not match {} synthetic weights",
            mask.len(),
            model.weights.len()
        )));
    }
    let shift: f64 = mask.indices().map(|j| model.weights[j]).sum();
    TokenLikelihoods::new(
        model
            .base_offsets
            .iter()
            .map(|b| logistic(b + shift))
            .collect(),
    )
}

/// Oracle backed by each instance's planted [`SyntheticModel`], falling back
/// to [`SyntheticModel::lexical`] when none is attached.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticOracle;

impl LikelihoodOracle for SyntheticOracle {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods> {
        instance.check_mask(mask)?;
        match instance.synthetic() {
            Some(model) => synthetic_score(model, mask),
            None => synthetic_score(&SyntheticModel::lexical(instance), mask),
        }
    }
}
