#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use streamforge::diffusion::{make_schedule, GaussianWorld, MultimodalCondition, NoiseSchedule, WorldParams};
use streamforge::rng::{gaussian_vec, seeded};
use streamforge::student::{SampleMode, Sampler, SamplerGrid, StudentParams};

/// Single-frame, single-dimension world `N(mu, var)`. The mean comes from the
/// text embedding, so conditions must carry `text_emb = [1]`.
pub fn world_1d(mu: f64, var: f64) -> GaussianWorld {
    let p = WorldParams {
        dim: 1,
        embed_dim: 1,
        frames: 1,
        block_size: 1,
        rho: 0.0,
        base_var: var,
        ..WorldParams::default()
    };
    GaussianWorld::from_maps(
        p,
        DMatrix::from_element(1, 1, mu),
        DMatrix::zeros(1, 1),
        DVector::zeros(1),
    )
    .unwrap()
}

pub fn cond_1d() -> MultimodalCondition {
    MultimodalCondition::new(vec![1.0], vec![0.0], vec![0.0]).unwrap()
}

pub fn small_world(dim: usize, frames: usize) -> GaussianWorld {
    GaussianWorld::new(WorldParams {
        dim,
        embed_dim: 2,
        frames,
        ..WorldParams::default()
    })
    .unwrap()
}

pub fn desk_world() -> GaussianWorld {
    GaussianWorld::new(WorldParams::default()).unwrap()
}

pub fn random_cond(seed: u64, embed_dim: usize, frames: usize) -> MultimodalCondition {
    let mut rng = seeded(seed);
    MultimodalCondition::new(
        gaussian_vec(&mut rng, embed_dim),
        gaussian_vec(&mut rng, embed_dim),
        gaussian_vec(&mut rng, frames),
    )
    .unwrap()
}

pub fn sampler(sched: &NoiseSchedule, k: usize, block_size: usize, dim: usize, mode: SampleMode) -> Sampler {
    Sampler {
        grid: SamplerGrid::uniform(sched, k).unwrap(),
        sched: sched.clone(),
        mode,
        block_size,
        dim,
    }
}

pub fn schedule() -> NoiseSchedule {
    make_schedule(48).unwrap()
}

pub fn random_student(seed: u64, k: usize, dim: usize, embed_dim: usize) -> StudentParams {
    let mut p = StudentParams::random(k, dim, embed_dim, 0.3, &mut seeded(seed));
    for v in p.as_mut_slice().iter_mut().filter(|v| **v == 0.0) {
        *v = 0.05;
    }
    p
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
