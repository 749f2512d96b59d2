//! Supportiveness reward: the likelihood gain of a subset over the empty
//! context, normalized by the gain of the full context and clipped to [0, 1].

use crate::corpus::{Instance, SubsetMask};
use crate::error::{Error, Result};
use crate::oracle::{LikelihoodOracle, TokenLikelihoods};

/// Smallest full-context gain for which the reward is defined.
pub const DENOMINATOR_GUARD: f64 = 1e-6;

/// Anchor likelihoods for one instance. Immutable once prepared.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardContext {
    empty: TokenLikelihoods,
    full: TokenLikelihoods,
    denominator: f64,
}

impl RewardContext {
    /// Score the empty and full contexts (two oracle calls) and fix the
    /// normalizer `sum_t l_t(C) - l_t(empty)`.
    pub fn prepare(instance: &Instance, oracle: &dyn LikelihoodOracle) -> Result<Self> {
        let empty = oracle.score(instance, &instance.empty_mask())?;
        let full = oracle.score(instance, &instance.full_mask())?;
        Self::from_anchors(instance, empty, full)
    }

    pub fn from_anchors(
        instance: &Instance,
        empty: TokenLikelihoods,
        full: TokenLikelihoods,
    ) -> Result<Self> {
        let t = instance.n_tokens();
        if empty.len() != t || full.len() != t {
            return Err(Error::contract(format!(
                "anchor likelihoods have lengths {} and {}, expected T = {t}",
                empty.len(),
                full.len()
            )));
        }
        let denominator = full
            .values()
            .iter()
            .zip(empty.values())
            .map(|(c, e)| c - e)
            .sum::<f64>();
        if denominator.is_nan() || denominator <= DENOMINATOR_GUARD {
            return Err(Error::UninformativeContext {
                instance_id: instance.id().to_string(),
                denominator,
            });
        }
        Ok(Self {
            empty,
            full,
            denominator,
        })
    }

    pub fn empty_likelihoods(&self) -> &TokenLikelihoods {
        &self.empty
    }

    pub fn full_likelihoods(&self) -> &TokenLikelihoods {
        &self.full
    }

    pub fn denominator(&self) -> f64 {
        self.denominator
    }

    /// Normalized gain before clipping.
    pub fn raw_ratio(&self, likelihoods: &TokenLikelihoods) -> f64 {
        let gain = likelihoods
            .values()
            .iter()
            .zip(self.empty.values())
            .map(|(s, e)| s - e)
            .sum::<f64>();
        gain / self.denominator
    }

    /// Clipped reward for already-scored likelihoods.
    pub fn value_of(&self, likelihoods: &TokenLikelihoods) -> f64 {
        self.raw_ratio(likelihoods).clamp(0.0, 1.0)
    }

    /// Reward of `mask`. The empty and full masks are answered from the
    /// anchors without touching the oracle.
    pub fn reward(
        &self,
        instance: &Instance,
        mask: &SubsetMask,
        oracle: &dyn LikelihoodOracle,
    ) -> Result<f64> {
        instance.check_mask(mask)?;
        if mask.is_full() {
            return Ok(1.0);
        }
        if mask.is_empty() {
            return Ok(0.0);
        }
        let likelihoods = oracle.score(instance, mask)?;
        if likelihoods.len() != instance.n_tokens() {
            return Err(Error::contract(
                "oracle returned wrong number of likelihoods",
            ));
        }
        Ok(self.value_of(&likelihoods))
    }
}
