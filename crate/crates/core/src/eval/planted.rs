use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compare::{mean_stderr, CellStatus, InstanceOutcome, ReportRow};
use crate::bandit::Method;
use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::oracle::SyntheticModel;

/// Shape of a planted synthetic benchmark: `n_planted` segments carry
/// `planted_weight` in the logit, the others carry none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_segments: usize,
    pub n_planted: usize,
    pub planted_weight: f64,
    pub n_tokens: usize,
    /// Per-token base offsets are drawn uniformly from this range.
    pub offset_range: (f64, f64),
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_segments: 12,
            n_planted: 3,
            planted_weight: 2.0,
            n_tokens: 3,
            offset_range: (-3.0, -1.0),
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 || self.n_tokens == 0 {
            return Err(Error::contract("need at least one segment and one token"));
        }
        if self.n_planted >= self.n_segments {
            return Err(Error::contract(format!(
                "n_planted ({}) must be below n_segments ({})",
                self.n_planted, self.n_segments
            )));
        }
        let (lo, hi) = self.offset_range;
        if !(self.planted_weight.is_finite() && lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::contract(
                "planted weight and offset range must be finite",
            ));
        }
        Ok(())
    }
}

/// A generated instance together with its planted segment indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub instance: Instance,
    pub planted: BTreeSet<usize>,
}

/// `runs` instances with planted positions and offsets drawn from `seed`.
pub fn planted_instances(
    spec: &PlantedSpec,
    runs: usize,
    seed: u64,
) -> Result<Vec<PlantedInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = runs.saturating_sub(1).to_string().len().max(4);
    (0..runs)
        .map(|r| {
            let planted: BTreeSet<usize> = sample(&mut rng, spec.n_segments, spec.n_planted)
                .into_iter()
                .collect();
            let weights = (0..spec.n_segments)
                .map(|j| {
                    if planted.contains(&j) {
                        spec.planted_weight
                    } else {
                        0.0
                    }
                })
                .collect();
            let (lo, hi) = spec.offset_range;
            let offsets = (0..spec.n_tokens)
                .map(|_| {
                    if lo < hi {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                })
                .collect();
            let instance = Instance::new(
                format!("planted-{r:0width$}"),
                format!("Which facts support answer {r}?"),
                (0..spec.n_segments)
                    .map(|j| format!("Fact {j} of case {r}."))
                    .collect(),
                (0..spec.n_tokens).map(|t| format!("tok{t}")).collect(),
            )?
            .with_synthetic(SyntheticModel::new(offsets, weights))?;
            Ok(PlantedInstance { instance, planted })
        })
        .collect()
}

/// Whether the top `|planted|` ranked segments are exactly the planted ones.
pub fn recovered(ranking: &[usize], planted: &BTreeSet<usize>) -> bool {
    let top: BTreeSet<usize> = ranking.iter().take(planted.len()).copied().collect();
    top == *planted
}

/// One `recovery` row per (method, budget), with `k = n_planted`.
/// With nothing planted the rate is undefined and `mean` is `None`.
pub fn recovery_rows(
    dataset: &str,
    outcomes: &[InstanceOutcome],
    planted: &[PlantedInstance],
    methods: &[Method],
    budgets: &[usize],
) -> Vec<ReportRow> {
    let n_planted = planted.first().map_or(0, |p| p.planted.len());
    let skipped_instances = outcomes.iter().filter(|o| o.skipped.is_some()).count();
    let mut rows = Vec::new();
    for &method in methods {
        for &budget in budgets {
            let mut values = Vec::new();
            let (mut infeasible, mut skipped) = (0, 0);
            for o in outcomes {
                let truth = match planted.iter().find(|p| p.instance.id() == o.instance_id) {
                    Some(p) => &p.planted,
                    None => continue,
                };
                for c in o
                    .cells
                    .iter()
                    .filter(|c| c.method == method && c.budget == budget)
                {
                    match &c.status {
                        CellStatus::Ran { result, .. } => {
                            values.push(f64::from(u8::from(recovered(&result.ranking, truth))))
                        }
                        CellStatus::Infeasible { .. } => infeasible += 1,
                        CellStatus::Skipped { .. } => skipped += 1,
                    }
                }
            }
            let all_infeasible = values.is_empty() && infeasible > 0 && skipped == 0;
            let (mean, stderr) = if n_planted == 0 {
                (None, None)
            } else {
                mean_stderr(&values)
            };
            rows.push(ReportRow {
                dataset: dataset.to_string(),
                method,
                budget,
                k: Some(n_planted),
                metric: "recovery".to_string(),
                mean,
                stderr,
                n: values.len(),
                skips: skipped_instances + skipped + if all_infeasible { 0 } else { infeasible },
                infeasible: all_infeasible,
                flagged: 0,
            });
        }
    }
    rows
}
