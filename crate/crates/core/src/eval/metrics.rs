use std::collections::HashMap;

use serde::Serialize;

use crate::bandit::AttributionResult;
use crate::baselines::avg_log_likelihood;
use crate::corpus::{render_prompt, Instance, SubsetMask};
use crate::error::{Error, Result};
use crate::oracle::LikelihoodOracle;

/// The context left after removing a result's `k` top-ranked segments.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKAblation {
    pub k: usize,
    pub removed: Vec<usize>,
    pub kept_mask: SubsetMask,
}

impl TopKAblation {
    pub fn new(result: &AttributionResult, k: usize) -> Self {
        let n = result.ranking.len();
        let removed = result.top_k(k).to_vec();
        let mut kept_mask = SubsetMask::full(n);
        for &j in &removed {
            kept_mask.remove(j);
        }
        Self {
            k,
            removed,
            kept_mask,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopKDrop {
    pub value: f64,
    /// Set when `k >= N` and the whole context was removed.
    pub clamped: bool,
}

fn check_result(instance: &Instance, result: &AttributionResult) -> Result<()> {
    if result.instance_id != instance.id() || result.ranking.len() != instance.n_segments() {
        return Err(Error::contract(format!(
            "result for `{}` with {} segments does not belong to instance `{}` (N = {})",
            result.instance_id,
            result.ranking.len(),
            instance.id(),
            instance.n_segments()
        )));
    }
    Ok(())
}

/// Mean log-likelihood of the response under the full context minus the
/// same under the context with the top-`k` segments removed.
pub fn top_k_drop(
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
    result: &AttributionResult,
    k: usize,
) -> Result<TopKDrop> {
    check_result(instance, result)?;
    let clamped = k >= instance.n_segments();
    if k == 0 {
        return Ok(TopKDrop {
            value: 0.0,
            clamped,
        });
    }
    let ablation = TopKAblation::new(result, k);
    let full = avg_log_likelihood(instance, oracle, &instance.full_mask())?;
    let kept = avg_log_likelihood(instance, oracle, &ablation.kept_mask)?;
    Ok(TopKDrop {
        value: full - kept,
        clamped,
    })
}

/// Similarity in [0, 1] between a candidate and a reference token list.
pub trait SimilarityScorer: Send + Sync {
    fn score(&self, candidate: &[String], reference: &[String]) -> f64;
}

/// Bag-of-tokens F1: harmonic mean of multiset precision and recall.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

impl SimilarityScorer for TokenF1 {
    fn score(&self, candidate: &[String], reference: &[String]) -> f64 {
        if candidate.is_empty() || reference.is_empty() {
            return 0.0;
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in reference {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut overlap = 0usize;
        for t in candidate {
            if let Some(c) = counts.get_mut(t.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let precision = overlap as f64 / candidate.len() as f64;
        let recall = overlap as f64 / reference.len() as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Consistency {
    pub value: f64,
    /// Set when the ablated response was empty.
    pub empty_response: bool,
}

/// Similarity of the regenerated response to the original one.
pub fn consistency_score(
    original: &[String],
    ablated: &[String],
    scorer: &dyn SimilarityScorer,
) -> Result<Consistency> {
    if original.is_empty() {
        return Err(Error::contract("original response is empty"));
    }
    if ablated.is_empty() {
        return Ok(Consistency {
            value: 0.0,
            empty_response: true,
        });
    }
    Ok(Consistency {
        value: scorer.score(ablated, original).clamp(0.0, 1.0),
        empty_response: false,
    })
}

/// Produces a fresh response for a prompt with deterministic decoding.
pub trait ResponseGenerator: Send + Sync {
    fn generate(&self, prompt: &str, max_tokens: usize) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedResponse {
    pub tokens: Vec<String>,
    /// Set when the response hit the `2T` length cap.
    pub capped: bool,
}

/// Regenerate the response under the ablated context, capped at `2T` tokens.
pub fn generate_ablated(
    instance: &Instance,
    kept_mask: &SubsetMask,
    generator: Option<&dyn ResponseGenerator>,
) -> Result<GeneratedResponse> {
    let generator = generator.ok_or_else(|| {
        Error::Capability(
            "no response generator configured; only log-probability metrics are available".into(),
        )
    })?;
    let prompt = render_prompt(instance, kept_mask)?;
    let cap = 2 * instance.n_tokens();
    let mut tokens = generator.generate(&prompt, cap)?;
    let capped = tokens.len() >= cap;
    tokens.truncate(cap);
    Ok(GeneratedResponse { tokens, capped })
}
