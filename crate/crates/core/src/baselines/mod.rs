//! Perturbation-based reference methods: segment-level KernelSHAP, ablation
//! regression with LASSO (ContextCite style) and leave-one-out, plus a
//! brute-force Shapley oracle for tests.

mod contextcite;
mod lasso;
mod loo;
mod shap;

pub use contextcite::{context_cite, ContextCiteConfig, LambdaChoice};
pub use lasso::{lambda_grid, lasso_coordinate_descent, lasso_cv, LassoFit, LassoProblem};
pub use loo::leave_one_out;
pub use shap::{
    exact_shapley, kernel_shap, kernel_shap_values, shapley_kernel_weight,
    EXACT_SHAPLEY_MAX_SEGMENTS,
};

use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{Instance, SubsetMask};
use crate::error::{Error, Result};
use crate::oracle::LikelihoodOracle;

/// One perturbation and the method's scalar signal for it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub mask: SubsetMask,
    pub value: f64,
}

/// Mean natural-log likelihood of the response under `mask`.
pub fn avg_log_likelihood(
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
    mask: &SubsetMask,
) -> Result<f64> {
    Ok(oracle.score(instance, mask)?.avg_log_likelihood())
}

/// `n_samples` masks with each bit set independently with `inclusion_prob`.
pub fn sample_masks_uniform<R: Rng + ?Sized>(
    n_segments: usize,
    n_samples: usize,
    inclusion_prob: f64,
    rng: &mut R,
) -> Result<Vec<SubsetMask>> {
    if !(0.0..=1.0).contains(&inclusion_prob) {
        return Err(Error::contract(format!(
            "inclusion probability {inclusion_prob} outside [0, 1]"
        )));
    }
    Ok((0..n_samples)
        .map(|_| {
            let bits: Vec<bool> = (0..n_segments)
                .map(|_| rng.random::<f64>() < inclusion_prob)
                .collect();
            SubsetMask::from_bools(&bits)
        })
        .collect())
}

/// Evaluate `signal` on every distinct mask (possibly concurrently) and
/// return the samples sorted by mask so downstream fits are order-independent.
pub(crate) fn evaluate_sorted<F>(masks: Vec<SubsetMask>, signal: F) -> Result<Vec<MaskSample>>
where
    F: Fn(&SubsetMask) -> Result<f64> + Sync,
{
    let mut masks = masks;
    masks.sort();
    let mut distinct = masks.clone();
    distinct.dedup();
    let values: Vec<f64> = distinct.par_iter().map(&signal).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(masks.len());
    let mut d = 0;
    for mask in masks {
        while distinct[d] != mask {
            d += 1;
        }
        if !values[d].is_finite() {
            return Err(Error::contract(format!(
                "non-finite signal for mask {mask:?}"
            )));
        }
        out.push(MaskSample {
            mask,
            value: values[d],
        });
    }
    Ok(out)
}
