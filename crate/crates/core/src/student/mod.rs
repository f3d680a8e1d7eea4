//! The block-causal few-step student: an affine x0-predictor per sampler step
//! reading a pooled clean-latent context, the k-step block sampler, and
//! autoregressive rollout.

pub mod params;
pub mod predict;
pub mod sampler;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltv1::Tensor;

pub use params::{StepLayout, StudentParams};
pub use predict::{
    pool_context, student_backward, student_predict_x0, BlockPredictor, KVEntry, OracleStudent,
    StudentGrad,
};
pub use sampler::{
    few_step_sample_block, rollout_video, BlockSample, RolloutTrace, SampleMode, Sampler,
    SamplerGrid,
};

/// Sidecar describing a parameter snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub k: usize,
    pub d: usize,
    pub d_c: usize,
    pub grid: Vec<usize>,
}

/// Write `<stem>.ltv1` (flat parameter vector) and `<stem>.toml`.
pub fn save_snapshot(params: &StudentParams, grid: &SamplerGrid, stem: &Path) -> Result<()> {
    Tensor::vector(params.as_slice()).save(stem.with_extension("ltv1"))?;
    let manifest = SnapshotManifest {
        k: params.k(),
        d: params.dim(),
        d_c: params.embed_dim(),
        grid: grid.indices().to_vec(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(stem.with_extension("toml"), text)?;
    Ok(())
}

/// Read a snapshot written by [`save_snapshot`]. Values come back rounded to `f32`.
pub fn load_snapshot(stem: &Path) -> Result<(StudentParams, SnapshotManifest)> {
    let text = fs::read_to_string(stem.with_extension("toml"))?;
    let m: SnapshotManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let t = Tensor::load(stem.with_extension("ltv1"))?;
    let p = StudentParams::from_vec(m.k, m.d, m.d_c, t.to_f64())?;
    Ok((p, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::rng::seeded;

    #[test]
    fn snapshot_roundtrip_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("gen");
        let p = StudentParams::random(4, 3, 2, 1.0, &mut seeded(1));
        let grid = SamplerGrid::uniform(&make_schedule(48).unwrap(), 4).unwrap();
        save_snapshot(&p, &grid, &stem).unwrap();
        let (q, m) = load_snapshot(&stem).unwrap();
        assert_eq!(m.grid, vec![48, 36, 24, 12]);
        assert_eq!((m.k, m.d, m.d_c), (4, 3, 2));
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
