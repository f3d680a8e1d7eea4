//! Exact output distributions of samplers that are affine in their noise.
//!
//! Every sampler here is an affine map `x = m + J ε` of standard-normal noise
//! `ε`, so its output is exactly `N(m, J Jᵀ)`. Evaluating the sampler once at
//! `ε = 0` and once per basis vector recovers `m` and `J` without Monte-Carlo
//! error.

use nalgebra::DMatrix;

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::world::GaussianWorld;
use crate::error::{Error, Result};
use crate::eval::gaussian::{fit_gaussian, gaussian_frechet, GaussianSummary};
use crate::eval::sync::{audio_envelope, motion_series, sync_metric};
use crate::rng::{indexed_stream, FixedNoise, NoiseSource, ZeroNoise};
use crate::streaming::cache::CachePolicy;
use crate::student::{BlockPredictor, Sampler};

/// Gaussian law of `f(ε)` for an `f` that is affine in the noise it draws.
pub fn affine_pushforward(
    mut f: impl FnMut(&mut dyn NoiseSource) -> Result<Vec<f64>>,
) -> Result<GaussianSummary> {
    let mut zero = ZeroNoise::default();
    let mean = f(&mut zero)?;
    let n = zero.consumed;
    let dim = mean.len();
    let mut jac = DMatrix::<f64>::zeros(dim, n);
    let mut basis = vec![0.0; n];
    for i in 0..n {
        basis[i] = 1.0;
        let y = f(&mut FixedNoise::new(basis.clone()))?;
        basis[i] = 0.0;
        if y.len() != dim {
            return Err(Error::shape(dim, y.len()));
        }
        for (r, (yy, m)) in y.iter().zip(&mean).enumerate() {
            jac[(r, i)] = yy - m;
        }
    }
    let cov = &jac * jac.transpose();
    GaussianSummary::new(mean, cov, 0)
}

/// `N(μ_c, Σ)` flattened frame-major.
pub fn world_summary(world: &GaussianWorld, c: &MultimodalCondition) -> Result<GaussianSummary> {
    GaussianSummary::new(world.mean(c)?.into_vec(), world.covariance(), 0)
}

/// Exact law of a `num_blocks` rollout.
pub fn generator_summary(
    pred: &dyn BlockPredictor,
    sampler: &Sampler,
    c: &MultimodalCondition,
    num_blocks: usize,
    policy: CachePolicy,
) -> Result<GaussianSummary> {
    affine_pushforward(|noise| {
        let mut cache = policy.build();
        Ok(sampler
            .rollout(pred, c, num_blocks, cache.as_mut(), noise)?
            .into_frames()
            .into_vec())
    })
}

/// Monte-Carlo estimate of the same law from `n` seeded rollouts.
#[allow(clippy::too_many_arguments)]
pub fn generator_summary_mc(
    pred: &dyn BlockPredictor,
    sampler: &Sampler,
    c: &MultimodalCondition,
    num_blocks: usize,
    policy: CachePolicy,
    n: usize,
    seed: u64,
) -> Result<GaussianSummary> {
    let samples = (0..n)
        .map(|i| {
            let mut rng = indexed_stream(seed, "mc-rollout", i as u64);
            let mut cache = policy.build();
            Ok(sampler
                .rollout(pred, c, num_blocks, cache.as_mut(), &mut rng)?
                .into_frames()
                .into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    fit_gaussian(&samples)
}

/// Mean over `conds` of the exact Fréchet distance between generated videos
/// and the world.
pub fn frechet_to_world(
    pred: &dyn BlockPredictor,
    sampler: &Sampler,
    world: &GaussianWorld,
    conds: &[MultimodalCondition],
    policy: CachePolicy,
) -> Result<f64> {
    if conds.is_empty() {
        return Err(Error::invalid("no evaluation conditions"));
    }
    let mut total = 0.0;
    for c in conds {
        let g = generator_summary(pred, sampler, c, world.num_blocks(), policy)?;
        total += gaussian_frechet(&world_summary(world, c)?, &g)?;
    }
    Ok(total / conds.len() as f64)
}

/// Mean over `conds` of the sync confidence of the zero-noise (mean) rollout.
/// Conditions whose audio or motion is constant score zero.
pub fn mean_sync_confidence(
    pred: &dyn BlockPredictor,
    sampler: &Sampler,
    conds: &[MultimodalCondition],
    num_blocks: usize,
    max_offset: usize,
) -> Result<f64> {
    if conds.is_empty() {
        return Err(Error::invalid("no evaluation conditions"));
    }
    let mut total = 0.0;
    for c in conds {
        let mut cache = CachePolicy::Unbounded.build();
        let video = sampler.rollout(pred, c, num_blocks, cache.as_mut(), &mut ZeroNoise::default())?;
        let n = video.num_frames();
        match sync_metric(&audio_envelope(&c.audio[..n]), &motion_series(video.frames()), max_offset) {
            Ok(r) => total += r.confidence,
            Err(Error::ZeroVariance(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(total / conds.len() as f64)
}

/// Marginal of frames `start..start + len` from a frame-major summary with `dim` columns.
pub fn frame_marginal(g: &GaussianSummary, dim: usize, start: usize, len: usize) -> GaussianSummary {
    let (a, n) = (start * dim, len * dim);
    GaussianSummary {
        mean: g.mean.rows(a, n).into_owned(),
        cov: g.cov.view((a, a), (n, n)).into_owned(),
        count: g.count,
    }
}
