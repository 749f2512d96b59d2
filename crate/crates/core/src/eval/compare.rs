use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{
    consistency_score, generate_ablated, top_k_drop, ResponseGenerator, SimilarityScorer,
    TopKAblation,
};
use crate::bandit::{self, AttributionResult, CtsConfig, Method};
use crate::baselines::{context_cite, kernel_shap, leave_one_out, ContextCiteConfig};
use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::oracle::{session, LedgerSnapshot, LikelihoodOracle};
use crate::reward::RewardContext;

/// Extra evaluations a run may spend on the empty and full context.
pub const ANCHOR_CHARGE: u64 = 2;

pub const ANCHOR_CONVENTION: &str = "oracle_calls counts every evaluation delegated to the \
model, including the two anchor queries on the empty and full context; a run with budget s \
may spend at most s + 2; cache hits are free";

/// CTS knobs that are not tied to the budget or seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSettings {
    pub top_p: f64,
    pub noise_variance: f64,
    pub prior_variance: f64,
}

impl Default for MethodSettings {
    fn default() -> Self {
        let cts = CtsConfig::default();
        Self {
            top_p: cts.top_p,
            noise_variance: cts.noise_variance,
            prior_variance: cts.prior_variance,
        }
    }
}

/// Smallest budget at which `method` can run on `n_segments` segments.
pub fn min_budget(method: Method, n_segments: usize) -> usize {
    match method {
        Method::Loo => n_segments + 1,
        _ => 1,
    }
}

/// Per-run seed from the run seed, instance id, method and replicate.
/// Independent of scheduling order.
pub fn derive_seed(run_seed: u64, instance_id: &str, method: Method, replicate: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(replicate.to_le_bytes());
    h.update(instance_id.as_bytes());
    h.update([0xff]);
    h.update(method.as_str().as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Run `method` on `instance` with a budget of `budget` non-anchor queries.
///
/// The oracle is used as given; see [`attribute_budgeted`] for a metered run.
pub fn attribute(
    method: Method,
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
    budget: usize,
    seed: u64,
    settings: &MethodSettings,
) -> Result<AttributionResult> {
    let min = min_budget(method, instance.n_segments());
    if budget < min {
        return Err(Error::contract(format!(
            "{method} needs a budget of at least {min} on `{}`, got {budget}",
            instance.id()
        )));
    }
    match method {
        Method::Cts => bandit::run(
            instance,
            oracle,
            &CtsConfig {
                top_p: settings.top_p,
                max_rounds: budget,
                noise_variance: settings.noise_variance,
                prior_variance: settings.prior_variance,
                seed,
            },
        ),
        Method::Shap => kernel_shap(instance, oracle, budget, seed),
        Method::ContextCite => context_cite(
            instance,
            oracle,
            &ContextCiteConfig {
                n_samples: budget,
                seed,
                ..ContextCiteConfig::default()
            },
        ),
        Method::Loo => leave_one_out(instance, oracle),
    }
}

/// [`attribute`] on a fresh cached session whose ledger stops the run at
/// `budget + 2` evaluations.
pub fn attribute_budgeted(
    method: Method,
    instance: &Instance,
    base: &dyn LikelihoodOracle,
    budget: usize,
    seed: u64,
    settings: &MethodSettings,
) -> Result<(AttributionResult, LedgerSnapshot)> {
    let s = session(base, Some(budget as u64 + ANCHOR_CHARGE));
    let result = attribute(method, instance, &s, budget, seed, settings)?;
    let ledger = s.ledger().expect("sessions are metered").snapshot();
    Ok((result, ledger))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSpec {
    /// Tag written in the `dataset` column.
    pub dataset: String,
    pub methods: Vec<Method>,
    pub budgets: Vec<usize>,
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Independent seeded runs per (instance, method, budget).
    pub replicates: usize,
    pub settings: MethodSettings,
}

impl CompareSpec {
    pub fn new(
        dataset: impl Into<String>,
        methods: Vec<Method>,
        budgets: Vec<usize>,
        ks: Vec<usize>,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            methods,
            budgets,
            ks,
            seed: 0,
            replicates: 1,
            settings: MethodSettings::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.budgets.is_empty() || self.ks.is_empty() {
            return Err(Error::contract(
                "methods, budgets and k values must be non-empty",
            ));
        }
        if self.replicates == 0 {
            return Err(Error::contract("replicates must be at least 1"));
        }
        Ok(())
    }
}

/// Regenerate responses under ablation and score them against the original.
#[derive(Clone, Copy)]
pub struct Regeneration<'a> {
    pub generator: &'a dyn ResponseGenerator,
    pub scorer: &'a dyn SimilarityScorer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KValue {
    pub k: usize,
    pub value: f64,
    /// Degenerate k, empty regenerated response, or a capped one.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ran {
        result: AttributionResult,
        ledger: Option<LedgerSnapshot>,
        drops: Vec<KValue>,
        consistency: Vec<KValue>,
    },
    Infeasible {
        min_budget: usize,
    },
    Skipped {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub method: Method,
    pub budget: usize,
    pub replicate: usize,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceOutcome {
    pub instance_id: String,
    /// Why the whole instance was left out, e.g. an uninformative context.
    pub skipped: Option<String>,
    pub cells: Vec<CellOutcome>,
}

fn sorted_by_id(instances: &[Instance]) -> Result<Vec<&Instance>> {
    if instances.is_empty() {
        return Err(Error::contract("no instances to evaluate"));
    }
    let mut sorted: Vec<&Instance> = instances.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    if let Some(w) = sorted.windows(2).find(|w| w[0].id() == w[1].id()) {
        return Err(Error::validation(w[0].id(), "duplicate instance id"));
    }
    Ok(sorted)
}

/// `Ok(None)` when the context carries no signal for this instance.
fn informative(instance: &Instance, eval: &dyn LikelihoodOracle) -> Result<Option<String>> {
    match RewardContext::prepare(instance, eval) {
        Ok(_) => Ok(None),
        Err(e @ Error::UninformativeContext { .. }) => Ok(Some(e.to_string())),
        Err(e) => Err(e),
    }
}

fn measure(
    instance: &Instance,
    eval: &dyn LikelihoodOracle,
    result: &AttributionResult,
    ks: &[usize],
    regen: Option<Regeneration<'_>>,
) -> Result<(Vec<KValue>, Vec<KValue>)> {
    let mut drops = Vec::with_capacity(ks.len());
    let mut consistency = Vec::new();
    for &k in ks {
        let d = top_k_drop(instance, eval, result, k)?;
        drops.push(KValue {
            k,
            value: d.value,
            flagged: d.clamped,
        });
        if let Some(r) = regen {
            let kept = TopKAblation::new(result, k).kept_mask;
            let generated = generate_ablated(instance, &kept, Some(r.generator))?;
            let c = consistency_score(instance.response_tokens(), &generated.tokens, r.scorer)?;
            consistency.push(KValue {
                k,
                value: c.value,
                flagged: c.empty_response || generated.capped || d.clamped,
            });
        }
    }
    Ok((drops, consistency))
}

fn run_instance(
    instance: &Instance,
    spec: &CompareSpec,
    base: &dyn LikelihoodOracle,
    regen: Option<Regeneration<'_>>,
) -> Result<InstanceOutcome> {
    let eval = session(base, None);
    let mut outcome = InstanceOutcome {
        instance_id: instance.id().to_string(),
        skipped: informative(instance, &eval)?,
        cells: Vec::new(),
    };
    if outcome.skipped.is_some() {
        return Ok(outcome);
    }
    for &method in &spec.methods {
        for &budget in &spec.budgets {
            for replicate in 0..spec.replicates {
                let min = min_budget(method, instance.n_segments());
                let status = if budget < min {
                    CellStatus::Infeasible { min_budget: min }
                } else {
                    let seed = derive_seed(spec.seed, instance.id(), method, replicate as u64);
                    match attribute_budgeted(method, instance, base, budget, seed, &spec.settings) {
                        Ok((result, ledger)) => {
                            let (drops, consistency) =
                                measure(instance, &eval, &result, &spec.ks, regen)?;
                            CellStatus::Ran {
                                result,
                                ledger: Some(ledger),
                                drops,
                                consistency,
                            }
                        }
                        Err(e @ Error::DegenerateSample(_)) => CellStatus::Skipped {
                            reason: e.to_string(),
                        },
                        Err(e) => return Err(e),
                    }
                };
                outcome.cells.push(CellOutcome {
                    method,
                    budget,
                    replicate,
                    status,
                });
            }
        }
    }
    Ok(outcome)
}

/// Attribute and measure every instance under every (method, budget,
/// replicate). Instances run in parallel; output is ordered by instance id.
pub fn run_grid(
    instances: &[Instance],
    spec: &CompareSpec,
    base: &dyn LikelihoodOracle,
    regen: Option<Regeneration<'_>>,
) -> Result<Vec<InstanceOutcome>> {
    spec.validate()?;
    sorted_by_id(instances)?
        .into_par_iter()
        .map(|inst| run_instance(inst, spec, base, regen))
        .collect()
}

/// Measure already computed attributions. Results whose instance is
/// missing are a contract error; instances without results are ignored.
pub fn measure_results(
    instances: &[Instance],
    results: &[AttributionResult],
    budget: usize,
    ks: &[usize],
    base: &dyn LikelihoodOracle,
    regen: Option<Regeneration<'_>>,
) -> Result<Vec<InstanceOutcome>> {
    let sorted = sorted_by_id(instances)?;
    sorted
        .into_par_iter()
        .filter_map(|inst| {
            let mine: Vec<&AttributionResult> = results
                .iter()
                .filter(|r| r.instance_id == inst.id())
                .collect();
            (!mine.is_empty()).then_some((inst, mine))
        })
        .map(|(inst, mine)| {
            let eval = session(base, None);
            let mut outcome = InstanceOutcome {
                instance_id: inst.id().to_string(),
                skipped: informative(inst, &eval)?,
                cells: Vec::new(),
            };
            if outcome.skipped.is_some() {
                return Ok(outcome);
            }
            for result in mine {
                let (drops, consistency) = measure(inst, &eval, result, ks, regen)?;
                outcome.cells.push(CellOutcome {
                    method: result.method,
                    budget,
                    replicate: 0,
                    status: CellStatus::Ran {
                        result: result.clone(),
                        ledger: None,
                        drops,
                        consistency,
                    },
                });
            }
            Ok(outcome)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: Method,
    pub budget: usize,
    pub k: Option<usize>,
    pub metric: String,
    /// `None` when no value could be computed.
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub n: usize,
    pub skips: usize,
    /// Every run in this row was below the method's minimum budget.
    pub infeasible: bool,
    /// Values computed under a warning (degenerate k, capped output).
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerTotal {
    pub method: Method,
    pub budget: usize,
    pub runs: usize,
    pub total_oracle_calls: u64,
    pub max_oracle_calls: u64,
    pub limit_per_run: u64,
    pub total_cache_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub dataset: String,
    pub anchor_convention: String,
    pub rows: Vec<ReportRow>,
    pub ledgers: Vec<LedgerTotal>,
}

pub const CSV_HEADER: &str = "dataset,method,budget,k,metric,mean,stderr,n,skips";

/// Sample mean and standard error (`None` below two values).
pub fn mean_stderr(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ComparisonReport {
    /// Fold instance outcomes into rows in (method, budget, metric, k) order.
    pub fn from_outcomes(dataset: &str, outcomes: &[InstanceOutcome], ks: &[usize]) -> Self {
        let skipped_instances = outcomes.iter().filter(|o| o.skipped.is_some()).count();
        let mut keys: Vec<(Method, usize)> = Vec::new();
        for cell in outcomes.iter().flat_map(|o| &o.cells) {
            if !keys.contains(&(cell.method, cell.budget)) {
                keys.push((cell.method, cell.budget));
            }
        }
        keys.sort_by_key(|&(m, b)| (Method::ALL.iter().position(|x| *x == m), b));

        let mut rows = Vec::new();
        let mut ledgers = Vec::new();
        for (method, budget) in keys {
            let cells: Vec<&CellOutcome> = outcomes
                .iter()
                .flat_map(|o| &o.cells)
                .filter(|c| c.method == method && c.budget == budget)
                .collect();
            let infeasible = cells
                .iter()
                .filter(|c| matches!(c.status, CellStatus::Infeasible { .. }))
                .count();
            let skipped = cells
                .iter()
                .filter(|c| matches!(c.status, CellStatus::Skipped { .. }))
                .count();
            let ran: Vec<_> = cells
                .iter()
                .filter_map(|c| match &c.status {
                    CellStatus::Ran {
                        result,
                        ledger,
                        drops,
                        consistency,
                    } => Some((result, ledger, drops, consistency)),
                    _ => None,
                })
                .collect();
            let all_infeasible = ran.is_empty() && infeasible > 0 && skipped == 0;
            let skips = skipped_instances + skipped + if all_infeasible { 0 } else { infeasible };
            let row = |k: Option<usize>, metric: &str, values: Vec<f64>, flagged: usize| {
                let (mean, stderr) = mean_stderr(&values);
                ReportRow {
                    dataset: dataset.to_string(),
                    method,
                    budget,
                    k,
                    metric: metric.to_string(),
                    mean,
                    stderr,
                    n: values.len(),
                    skips,
                    infeasible: all_infeasible,
                    flagged,
                }
            };
            let has_consistency = ran.iter().any(|r| !r.3.is_empty());
            for (metric, pick) in [("top_k_drop", 2usize), ("consistency", 3)] {
                if pick == 3 && !has_consistency {
                    continue;
                }
                for &k in ks {
                    let picked: Vec<&KValue> = ran
                        .iter()
                        .flat_map(|r| if pick == 2 { r.2 } else { r.3 })
                        .filter(|v| v.k == k)
                        .collect();
                    let flagged = picked.iter().filter(|v| v.flagged).count();
                    rows.push(row(
                        Some(k),
                        metric,
                        picked.iter().map(|v| v.value).collect(),
                        flagged,
                    ));
                }
            }
            let calls: Vec<u64> = ran
                .iter()
                .map(|r| r.1.map_or(r.0.oracle_calls, |l| l.oracle_calls))
                .collect();
            rows.push(row(
                None,
                "oracle_calls",
                calls.iter().map(|&c| c as f64).collect(),
                0,
            ));
            ledgers.push(LedgerTotal {
                method,
                budget,
                runs: ran.len(),
                total_oracle_calls: calls.iter().sum(),
                max_oracle_calls: calls.iter().copied().max().unwrap_or(0),
                limit_per_run: budget as u64 + ANCHOR_CHARGE,
                total_cache_hits: ran.iter().filter_map(|r| r.1.map(|l| l.cache_hits)).sum(),
            });
        }
        Self {
            dataset: dataset.to_string(),
            anchor_convention: ANCHOR_CONVENTION.to_string(),
            rows,
            ledgers,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let mean = match (r.mean, r.infeasible) {
                (_, true) => "infeasible".to_string(),
                (Some(m), false) => m.to_string(),
                (None, false) => "n/a".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&r.dataset),
                r.method,
                r.budget,
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                r.metric,
                mean,
                r.stderr.map(|s| s.to_string()).unwrap_or_default(),
                r.n,
                r.skips
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn row(
        &self,
        method: Method,
        budget: usize,
        k: Option<usize>,
        metric: &str,
    ) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.budget == budget && r.k == k && r.metric == metric)
    }
}

/// Run the budget sweep and aggregate it.
pub fn compare_methods(
    instances: &[Instance],
    spec: &CompareSpec,
    base: &dyn LikelihoodOracle,
    regen: Option<Regeneration<'_>>,
) -> Result<ComparisonReport> {
    let outcomes = run_grid(instances, spec, base, regen)?;
    Ok(ComparisonReport::from_outcomes(
        &spec.dataset,
        &outcomes,
        &spec.ks,
    ))
}

/// Ids present on one side only, as (results without instance, unused instances).
pub fn orphans(
    instances: &[Instance],
    results: &[AttributionResult],
) -> (Vec<String>, Vec<String>) {
    let ids: BTreeSet<&str> = instances.iter().map(Instance::id).collect();
    let used: BTreeSet<&str> = results.iter().map(|r| r.instance_id.as_str()).collect();
    (
        used.difference(&ids).map(|s| s.to_string()).collect(),
        ids.difference(&used).map(|s| s.to_string()).collect(),
    )
}
