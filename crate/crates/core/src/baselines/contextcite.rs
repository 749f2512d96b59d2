use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    evaluate_sorted, lasso_coordinate_descent, lasso_cv, sample_masks_uniform, LassoProblem,
};
use crate::bandit::{AttributionResult, Method};
use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::oracle::{calls_so_far, LikelihoodOracle};

/// How the LASSO penalty is picked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    /// K-fold cross-validation over the log grid; minimum mean error wins.
    CrossValidated,
    /// The smallest point of the grid, `lambda_max * min_ratio`.
    SmallestGridPoint,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextCiteConfig {
    pub n_samples: usize,
    pub inclusion_prob: f64,
    pub n_folds: usize,
    pub grid_size: usize,
    pub min_ratio: f64,
    pub lambda: LambdaChoice,
    pub seed: u64,
}

impl Default for ContextCiteConfig {
    fn default() -> Self {
        Self {
            n_samples: 60,
            inclusion_prob: 0.5,
            n_folds: 5,
            grid_size: 10,
            min_ratio: 1e-3,
            lambda: LambdaChoice::CrossValidated,
            seed: 0,
        }
    }
}

/// Ablation regression: random masks, mean response log-odds as target,
/// sparse linear fit on mask indicators. Scores are the LASSO coefficients.
pub fn context_cite(
    instance: &Instance,
    oracle: &dyn LikelihoodOracle,
    config: &ContextCiteConfig,
) -> Result<AttributionResult> {
    let before = calls_so_far(oracle);
    let n = instance.n_segments();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let masks = sample_masks_uniform(n, config.n_samples, config.inclusion_prob, &mut rng)?;
    if masks.is_empty() || masks.iter().all(|m| *m == masks[0]) {
        return Err(Error::DegenerateSample(format!(
            "all {} ablation masks are identical",
            masks.len()
        )));
    }
    let samples = evaluate_sorted(masks, |mask| {
        Ok(oracle.score(instance, mask)?.avg_log_odds())
    })?;
    let design: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            s.mask
                .to_bools()
                .into_iter()
                .map(|b| f64::from(u8::from(b)))
                .collect()
        })
        .collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.value).collect();

    let fit = match config.lambda {
        LambdaChoice::CrossValidated => {
            lasso_cv(
                &design,
                &targets,
                config.n_folds,
                config.grid_size,
                config.min_ratio,
                &mut rng,
            )?
            .1
        }
        LambdaChoice::SmallestGridPoint | LambdaChoice::Fixed(_) => {
            let mut problem = LassoProblem::new(&design, targets, 0.0)?;
            problem.lambda = match config.lambda {
                LambdaChoice::Fixed(l) => l,
                _ => problem.lambda_max() * config.min_ratio,
            };
            lasso_coordinate_descent(&problem, 1e-8, 10_000)?
        }
    };
    Ok(AttributionResult::new(
        instance.id(),
        Method::ContextCite,
        fit.coefficients,
        calls_so_far(oracle) - before,
        config.seed,
    ))
}
