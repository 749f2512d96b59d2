use rayon::prelude::*;

use super::avg_log_likelihood;
use crate::bandit::{AttributionResult, Method};
use crate::corpus::Instance;
use crate::error::Result;
use crate::oracle::{calls_so_far, LikelihoodOracle};

/// Score each segment by the drop in mean log-likelihood when it alone is
/// removed. Costs `N + 1` queries: the full context and one per segment.
pub fn leave_one_out(
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
) -> Result<AttributionResult> {
    let before = calls_so_far(oracle);
    let full = instance.full_mask();
    let full_value = avg_log_likelihood(instance, oracle, &full)?;
    let scores = (0..instance.n_segments())
        .into_par_iter()
        .map(|j| Ok(full_value - avg_log_likelihood(instance, oracle, &full.without(j))?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(AttributionResult::new(
        instance.id(),
        Method::Loo,
        scores,
        calls_so_far(oracle) - before,
        0,
    ))
}
