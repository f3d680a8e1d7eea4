//! Long-horizon identity drift: distance between each generated block's mean
//! and the world's conditional mean.

use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::world::GaussianWorld;
use crate::error::Result;
use crate::rng::ZeroNoise;
use crate::streaming::cache::CachePolicy;
use crate::student::{BlockPredictor, Sampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCurve {
    pub policy: CachePolicy,
    /// Root-mean-square over the block's frames of the mean offset.
    pub drift: Vec<f64>,
    /// Largest number of context entries any block saw.
    pub max_context: usize,
}

impl DriftCurve {
    pub fn final_drift(&self) -> f64 {
        self.drift.last().copied().unwrap_or(0.0)
    }
}

/// Block means come from a zero-noise rollout, which is exact for predictors
/// affine in their noisy input.
pub fn identity_drift_probe(
    gen: &dyn BlockPredictor,
    sampler: &Sampler,
    world: &GaussianWorld,
    c: &MultimodalCondition,
    num_blocks: usize,
    policies: &[CachePolicy],
) -> Result<Vec<DriftCurve>> {
    let b = sampler.block_size;
    let target = world.mean_range(c, 0, num_blocks * b)?;
    policies
        .iter()
        .map(|&policy| {
            let mut cache = policy.build();
            let trace = sampler.rollout_traced(gen, c, num_blocks, cache.as_mut(), &mut ZeroNoise::default())?;
            let frames = trace.video.frames();
            let drift = (0..num_blocks)
                .map(|j| {
                    let sq: f64 = (j * b..(j + 1) * b)
                        .map(|f| {
                            frames
                                .row(f)
                                .iter()
                                .zip(target.row(f))
                                .map(|(x, m)| (x - m) * (x - m))
                                .sum::<f64>()
                        })
                        .sum();
                    (sq / b as f64).sqrt()
                })
                .collect();
            let max_context = trace.contexts.iter().map(Vec::len).max().unwrap_or(0);
            Ok(DriftCurve {
                policy,
                drift,
                max_context,
            })
        })
        .collect()
}

pub fn standard_policies() -> [CachePolicy; 3] {
    [
        CachePolicy::DEFAULT_AHIS,
        CachePolicy::sliding(5),
        CachePolicy::Unbounded,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, WorldParams};
    use crate::rng::{gaussian_vec, seeded};
    use crate::student::{OracleStudent, SampleMode, SamplerGrid};

    #[test]
    fn oracle_stays_on_identity() {
        let w = GaussianWorld::new(WorldParams {
            dim: 3,
            embed_dim: 2,
            ..WorldParams::default()
        })
        .unwrap();
        let sched = make_schedule(48).unwrap();
        let sampler = Sampler {
            grid: SamplerGrid::uniform(&sched, 4).unwrap(),
            sched: sched.clone(),
            mode: SampleMode::Deterministic,
            block_size: 3,
            dim: 3,
        };
        let mut rng = seeded(4);
        let c = MultimodalCondition::new(
            gaussian_vec(&mut rng, 2),
            gaussian_vec(&mut rng, 2),
            gaussian_vec(&mut rng, 21),
        )
        .unwrap();
        let oracle = OracleStudent::new(&w, &sched);
        let curves = identity_drift_probe(&oracle, &sampler, &w, &c, 7, &standard_policies()).unwrap();
        for cv in &curves {
            assert_eq!(cv.drift.len(), 7);
            assert!(cv.drift.iter().all(|&d| d < 1e-9), "{:?}", cv.drift);
        }
        assert_eq!(curves[0].max_context, 5);
        assert_eq!(curves[2].max_context, 6);
    }
}
