//! Likelihood oracles: anything that can score the frozen response of an
//! instance under a masked context, one probability per response token.
//!
//! Oracles compose by wrapping. A typical per-run stack is
//! `ReplayOracle<Metered<&dyn LikelihoodOracle>>`: the replay layer answers
//! repeated masks from memory, the metered layer charges every evaluation
//! that reaches the base oracle against a [`BudgetLedger`]. [`session`]
//! builds that stack.

mod remote;
mod replay;
mod synthetic;

pub use remote::{RemoteConfig, RemoteGenerator, RemoteOracle, ENV_API_BASE, ENV_API_KEY};
pub use replay::{ReplayOracle, ReplayRecord};
pub use synthetic::{logistic, synthetic_score, SyntheticModel, SyntheticOracle};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::corpus::{Instance, SubsetMask};
use crate::error::{Error, Result};

/// Smallest likelihood an oracle may return; values below are clamped up.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Per-token likelihoods of the frozen response, each in `[LIKELIHOOD_FLOOR, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLikelihoods {
    values: Vec<f64>,
}

impl TokenLikelihoods {
    /// Clamp raw probabilities into `[LIKELIHOOD_FLOOR, 1]`. NaN is rejected.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("likelihood vector is empty"));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::contract("likelihood vector contains NaN"));
        }
        let values = values
            .into_iter()
            .map(|v| v.clamp(LIKELIHOOD_FLOOR, 1.0))
            .collect();
        Ok(Self { values })
    }

    /// From natural-log probabilities, as returned by completion APIs.
    pub fn from_logprobs(logprobs: &[f64]) -> Result<Self> {
        Self::new(logprobs.iter().map(|lp| lp.exp()).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Mean natural-log likelihood over the response tokens.
    pub fn avg_log_likelihood(&self) -> f64 {
        self.values.iter().map(|v| v.ln()).sum::<f64>() / self.values.len() as f64
    }

    /// Mean log-odds `ln(l / (1 - l))`, with `l` also clamped below
    /// `1 - LIKELIHOOD_FLOOR` so the odds stay finite.
    pub fn avg_log_odds(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| {
                let p = v.clamp(LIKELIHOOD_FLOOR, 1.0 - LIKELIHOOD_FLOOR);
                (p / (1.0 - p)).ln()
            })
            .sum::<f64>()
            / self.values.len() as f64
    }
}

/// Source of per-token likelihoods for a masked context.
///
/// Implementations must tolerate concurrent calls.
pub trait LikelihoodOracle: Send + Sync {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods>;

    /// The ledger charged by this oracle stack, if any layer keeps one.
    fn ledger(&self) -> Option<&BudgetLedger> {
        None
    }
}

impl<T: LikelihoodOracle + ?Sized> LikelihoodOracle for &T {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods> {
        (**self).score(instance, mask)
    }

    fn ledger(&self) -> Option<&BudgetLedger> {
        (**self).ledger()
    }
}

impl<T: LikelihoodOracle + ?Sized> LikelihoodOracle for Box<T> {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods> {
        (**self).score(instance, mask)
    }

    fn ledger(&self) -> Option<&BudgetLedger> {
        (**self).ledger()
    }
}

impl<T: LikelihoodOracle + ?Sized> LikelihoodOracle for Arc<T> {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods> {
        (**self).score(instance, mask)
    }

    fn ledger(&self) -> Option<&BudgetLedger> {
        (**self).ledger()
    }
}

/// Query accounting. Counters only grow; `oracle_calls` never passes the
/// limit when one is set.
#[derive(Debug, Default)]
pub struct BudgetLedger {
    oracle_calls: AtomicU64,
    anchor_calls: AtomicU64,
    cache_hits: AtomicU64,
    budget_limit: Option<u64>,
}

/// Point-in-time copy of a [`BudgetLedger`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LedgerSnapshot {
    /// Evaluations delegated to the base oracle, anchors included.
    pub oracle_calls: u64,
    /// The subset of `oracle_calls` spent on the empty or full context.
    pub anchor_calls: u64,
    pub cache_hits: u64,
    pub budget_limit: Option<u64>,
}

impl LedgerSnapshot {
    /// Calls excluding the empty/full anchors.
    pub fn non_anchor_calls(&self) -> u64 {
        self.oracle_calls - self.anchor_calls
    }
}

impl BudgetLedger {
    pub fn new(budget_limit: Option<u64>) -> Self {
        Self {
            budget_limit,
            ..Self::default()
        }
    }

    pub fn oracle_calls(&self) -> u64 {
        self.oracle_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    pub fn budget_limit(&self) -> Option<u64> {
        self.budget_limit
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            oracle_calls: self.oracle_calls(),
            anchor_calls: self.anchor_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits(),
            budget_limit: self.budget_limit,
        }
    }

    /// Reserve one evaluation, failing if the limit is reached.
    pub fn try_charge(&self, anchor: bool) -> Result<()> {
        let limit = self.budget_limit.unwrap_or(u64::MAX);
        self.oracle_calls
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |calls| {
                (calls < limit).then_some(calls + 1)
            })
            .map_err(|calls| Error::Budget { calls, limit })?;
        if anchor {
            self.anchor_calls.fetch_add(1, Ordering::SeqCst);
        }
        Ok(())
    }

    pub fn record_hit(&self) {
        self.cache_hits.fetch_add(1, Ordering::SeqCst);
    }
}

/// Charges every evaluation against a ledger before delegating.
///
/// The charge stands even if the inner oracle then fails.
#[derive(Debug)]
pub struct Metered<O> {
    inner: O,
    ledger: BudgetLedger,
}

impl<O: LikelihoodOracle> Metered<O> {
    pub fn new(inner: O, budget_limit: Option<u64>) -> Self {
        Self {
            inner,
            ledger: BudgetLedger::new(budget_limit),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: LikelihoodOracle> LikelihoodOracle for Metered<O> {
    fn score(&self, instance: &Instance, mask: &SubsetMask) -> Result<TokenLikelihoods> {
        instance.check_mask(mask)?;
        self.ledger.try_charge(mask.is_empty() || mask.is_full())?;
        self.inner.score(instance, mask)
    }

    fn ledger(&self) -> Option<&BudgetLedger> {
        Some(&self.ledger)
    }
}

/// Cached, metered view of a base oracle for one attribution run.
pub type Session<'a> = ReplayOracle<Metered<&'a dyn LikelihoodOracle>>;

/// Wrap `base` in a fresh in-memory cache and a ledger with `budget_limit`.
pub fn session(base: &dyn LikelihoodOracle, budget_limit: Option<u64>) -> Session<'_> {
    ReplayOracle::new(Metered::new(base, budget_limit))
}

/// Calls charged on `oracle`'s ledger, or zero when it keeps none.
pub(crate) fn calls_so_far(oracle: &dyn LikelihoodOracle) -> u64 {
    oracle.ledger().map_or(0, BudgetLedger::oracle_calls)
}
