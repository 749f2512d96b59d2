use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{avg_log_likelihood, evaluate_sorted, MaskSample};
use crate::bandit::{AttributionResult, Method};
use crate::corpus::{Instance, SubsetMask};
use crate::error::{Error, Result};
use crate::oracle::{calls_so_far, LikelihoodOracle};

/// Largest segment count [`exact_shapley`] will enumerate.
pub const EXACT_SHAPLEY_MAX_SEGMENTS: usize = 12;

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel `(N-1) / (C(N, z) * z * (N-z))` for a coalition of size `z`.
///
/// Sizes 0 and N carry infinite weight and are handled as constraints.
pub fn shapley_kernel_weight(n_segments: usize, subset_size: usize) -> Result<f64> {
    if subset_size == 0 || subset_size >= n_segments {
        return Err(Error::contract(format!(
            "kernel weight undefined for coalition size {subset_size} of {n_segments}"
        )));
    }
    let n = n_segments as f64;
    let z = subset_size as f64;
    Ok((n - 1.0) / (binomial(n_segments, subset_size) * z * (n - z)))
}

/// Exact Shapley values by enumerating all `2^N` coalitions.
pub fn exact_shapley<F>(n_segments: usize, mut value_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(&SubsetMask) -> f64,
{
    if n_segments == 0 || n_segments > EXACT_SHAPLEY_MAX_SEGMENTS {
        return Err(Error::contract(format!(
            "exact Shapley enumeration supports 1..={EXACT_SHAPLEY_MAX_SEGMENTS} segments, got {n_segments}"
        )));
    }
    let n = n_segments;
    let mask_of = |bits: usize| {
        SubsetMask::from_bools(&(0..n).map(|j| bits >> j & 1 == 1).collect::<Vec<_>>())
    };
    let values: Vec<f64> = (0..1usize << n).map(|b| value_fn(&mask_of(b))).collect();

    // weight[s] = s! (n - s - 1)! / n!
    let weight: Vec<f64> = (0..n)
        .map(|s| 1.0 / (n as f64 * binomial(n - 1, s)))
        .collect();
    Ok((0..n)
        .map(|j| {
            (0..1usize << n)
                .filter(|b| b >> j & 1 == 0)
                .map(|b| weight[b.count_ones() as usize] * (values[b | 1 << j] - values[b]))
                .sum()
        })
        .collect())
}

/// Draw coalitions of size 1..N-1 with size probability proportional to the
/// total kernel mass of that size, uniform within a size.
fn sample_kernel_masks<R: Rng + ?Sized>(
    n: usize,
    n_samples: usize,
    rng: &mut R,
) -> Vec<SubsetMask> {
    let sizes: Vec<usize> = (1..n).collect();
    let mass: Vec<f64> = sizes
        .iter()
        .map(|&z| 1.0 / (z as f64 * (n - z) as f64))
        .collect();
    let size_dist = WeightedIndex::new(&mass).expect("kernel masses are positive");
    (0..n_samples)
        .map(|_| {
            let z = sizes[size_dist.sample(rng)];
            let picked = rand::seq::index::sample(rng, n, z);
            SubsetMask::from_indices(n, picked).expect("sampled indices in range")
        })
        .collect()
}

/// KernelSHAP estimate for an arbitrary value function.
///
/// The regression is constrained so that the base value equals `f(empty)`
/// and the attributions sum to `f(full) - f(empty)`. When all `2^N - 2`
/// proper coalitions fit in `n_samples` they are enumerated with kernel
/// weights, which reproduces exact Shapley values; otherwise coalitions are
/// sampled from the kernel and weighted equally.
pub fn kernel_shap_values<F, R>(
    n_segments: usize,
    value_fn: F,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: Fn(&SubsetMask) -> Result<f64> + Sync,
    R: Rng + ?Sized,
{
    let n = n_segments;
    if n == 0 {
        return Err(Error::contract("KernelSHAP needs at least one segment"));
    }
    let base = value_fn(&SubsetMask::empty(n))?;
    let total = value_fn(&SubsetMask::full(n))? - base;
    if n == 1 {
        return Ok(vec![total]);
    }
    let enumerate = n < 31 && (1usize << n) - 2 <= n_samples;
    let masks = if enumerate {
        (1..(1usize << n) - 1)
            .map(|b| SubsetMask::from_bools(&(0..n).map(|j| b >> j & 1 == 1).collect::<Vec<_>>()))
            .collect()
    } else {
        if n_samples == 0 {
            return Err(Error::DegenerateSample("no coalitions sampled".into()));
        }
        sample_kernel_masks(n, n_samples, rng)
    };
    let samples = evaluate_sorted(masks, &value_fn)?;
    let weights: Vec<f64> = if enumerate {
        samples
            .iter()
            .map(|s| shapley_kernel_weight(n, s.mask.count()))
            .collect::<Result<_>>()?
    } else {
        vec![1.0; samples.len()]
    };
    solve_constrained(n, &samples, &weights, base, total)
}

/// Weighted least squares with the last coefficient eliminated through the
/// efficiency constraint.
fn solve_constrained(
    n: usize,
    samples: &[MaskSample],
    weights: &[f64],
    base: f64,
    total: f64,
) -> Result<Vec<f64>> {
    let free = n - 1;
    let mut gram = DMatrix::<f64>::zeros(free, free);
    let mut rhs = DVector::<f64>::zeros(free);
    for (sample, &w) in samples.iter().zip(weights) {
        let last = f64::from(u8::from(sample.mask.contains(n - 1)));
        let x: Vec<f64> = (0..free)
            .map(|j| f64::from(u8::from(sample.mask.contains(j))) - last)
            .collect();
        let y = sample.value - base - last * total;
        for a in 0..free {
            if x[a] == 0.0 {
                continue;
            }
            rhs[a] += w * x[a] * y;
            for b in 0..free {
                gram[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    let svd = gram.svd(true, true);
    let largest = svd.singular_values.max();
    let smallest = svd.singular_values.min();
    if largest <= 0.0 || smallest <= 1e-10 * largest {
        return Err(Error::DegenerateSample(format!(
            "reduced KernelSHAP system is singular ({} coalitions, {} distinct)",
            samples.len(),
            {
                let mut m: Vec<&SubsetMask> = samples.iter().map(|s| &s.mask).collect();
                m.dedup();
                m.len()
            }
        )));
    }
    let solution = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::DegenerateSample(e.to_string()))?;
    let mut phi: Vec<f64> = solution.iter().copied().collect();
    phi.push(total - phi.iter().sum::<f64>());
    Ok(phi)
}

/// Segment-level KernelSHAP with the fully masked context as reference and
/// mean log-likelihood of the response as the value function.
pub fn kernel_shap(
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
    n_samples: usize,
    seed: u64,
) -> Result<AttributionResult> {
    let before = calls_so_far(oracle);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = kernel_shap_values(
        instance.n_segments(),
        |mask| avg_log_likelihood(instance, oracle, mask),
        n_samples,
        &mut rng,
    )?;
    Ok(AttributionResult::new(
        instance.id(),
        Method::Shap,
        phi,
        calls_so_far(oracle) - before,
        seed,
    ))
}
