//! Exposure-bias probe: block marginals under teacher-forced versus
//! self-generated context.

use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::world::GaussianWorld;
use crate::error::{Error, Result};
use crate::eval::gaussian::{gaussian_frechet, GaussianSummary};
use crate::eval::pushforward::{affine_pushforward, frame_marginal, generator_summary};
use crate::streaming::cache::CachePolicy;
use crate::student::{BlockPredictor, KVEntry, Sampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureCurve {
    /// Per block, Fréchet distance to the world block marginal when the
    /// context is a clean world sample.
    pub teacher_forced: Vec<f64>,
    /// The same with the model's own earlier blocks as context.
    pub self_rollout: Vec<f64>,
    /// `self_rollout - teacher_forced`.
    pub gap: Vec<f64>,
    /// Fréchet distance between the teacher-forced and self-rollout block laws.
    pub shift: Vec<f64>,
}

impl ExposureCurve {
    pub fn final_gap(&self) -> f64 {
        self.gap.last().copied().unwrap_or(0.0)
    }
}

fn world_block(world: &GaussianWorld, c: &MultimodalCondition, j: usize) -> Result<GaussianSummary> {
    let (mean, cov) = world.block_marginal(c, j)?;
    GaussianSummary::new(mean, cov, 0)
}

/// Exact law of block `j` generated after a clean world prefix.
pub fn teacher_forced_block(
    pred: &dyn BlockPredictor,
    sampler: &Sampler,
    world: &GaussianWorld,
    c: &MultimodalCondition,
    j: usize,
    policy: CachePolicy,
) -> Result<GaussianSummary> {
    let b = sampler.block_size;
    affine_pushforward(|noise| {
        let video = world.sample_world(c, noise)?;
        let mut cache = policy.build();
        for i in 0..j {
            cache.insert(KVEntry {
                block_index: i,
                feature: video.frames().slice_rows(i * b, b),
            })?;
        }
        let s = sampler.sample_block(pred, c, &cache.context(), j, noise)?;
        Ok(s.clean.into_vec())
    })
}

/// Per-block Fréchet curves averaged over `conds`.
pub fn exposure_bias_probe(
    pred: &dyn BlockPredictor,
    sampler: &Sampler,
    world: &GaussianWorld,
    conds: &[MultimodalCondition],
    num_blocks: usize,
    policy: CachePolicy,
) -> Result<ExposureCurve> {
    if conds.is_empty() {
        return Err(Error::invalid("no probe conditions"));
    }
    if num_blocks > world.num_blocks() {
        return Err(Error::invalid(format!(
            "probe of {num_blocks} blocks exceeds the world's {}",
            world.num_blocks()
        )));
    }
    let mut tf = vec![0.0; num_blocks];
    let mut sr = vec![0.0; num_blocks];
    let mut shift = vec![0.0; num_blocks];
    let w = 1.0 / conds.len() as f64;
    let (b, d) = (sampler.block_size, sampler.dim);
    for c in conds {
        let full = generator_summary(pred, sampler, c, num_blocks, policy)?;
        for j in 0..num_blocks {
            let target = world_block(world, c, j)?;
            let own = frame_marginal(&full, d, j * b, b);
            sr[j] += w * gaussian_frechet(&target, &own)?;
            let forced = teacher_forced_block(pred, sampler, world, c, j, policy)?;
            tf[j] += w * gaussian_frechet(&target, &forced)?;
            shift[j] += w * gaussian_frechet(&forced, &own)?;
        }
    }
    let gap = sr.iter().zip(&tf).map(|(s, t)| s - t).collect();
    Ok(ExposureCurve {
        teacher_forced: tf,
        self_rollout: sr,
        gap,
        shift,
    })
}
