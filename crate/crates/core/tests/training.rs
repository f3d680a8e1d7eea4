mod common;

use common::*;
use streamforge::diffusion::{GaussianWorld, MultimodalCondition, NoiseSchedule};
use streamforge::distill::{
    build_ode_dataset, critic_loss, dmd_critic_step, draw_critic_samples, ode_loss, ode_loss_of, train_ode, AdamW,
    CriticParams, DMDConfig, FakeScore, OdeTrainConfig,
};
use streamforge::eval::{fit_gaussian, gaussian_frechet, world_summary};
use streamforge::rng::seeded;
use streamforge::student::{BlockPredictor, KVEntry, SampleMode, StudentParams};
use streamforge::{Frames, Result};

fn ode_cfg(max_steps: usize) -> OdeTrainConfig {
    OdeTrainConfig {
        max_steps,
        ..OdeTrainConfig::default()
    }
}

#[test]
fn dataset_is_reproducible_and_its_endpoints_follow_the_world() {
    let world = small_world(2, 6);
    let sched = schedule();
    let c = random_cond(1, 2, 6);
    let a = build_ode_dataset(&world, &[c.clone()], &sched, 600, 7).unwrap();
    let b = build_ode_dataset(&world, &[c.clone()], &sched, 600, 7).unwrap();
    assert_eq!(a.trajectories, b.trajectories);
    assert!(a.trajectories.iter().all(|t| t.states.len() == 49));
    let ends: Vec<Vec<f64>> = a.trajectories.iter().map(|t| t.endpoint().as_slice().to_vec()).collect();
    let d = gaussian_frechet(&fit_gaussian(&ends).unwrap(), &world_summary(&world, &c).unwrap()).unwrap();
    assert!(d <= 0.05 * world.trace_cov(), "{d}");
}

/// Integrates the block's exact teacher ODE, given the clean context, from
/// `x_t` down to `t = 0`.
struct BlockFlow<'a> {
    world: &'a GaussianWorld,
    sched: &'a NoiseSchedule,
}

impl BlockPredictor for BlockFlow<'_> {
    fn predict_block(
        &self,
        x_t: &Frames,
        _step: usize,
        t: f64,
        context: &[KVEntry],
        c: &MultimodalCondition,
        block_index: usize,
    ) -> Result<Frames> {
        let rows: Vec<(usize, &[f64])> = context
            .iter()
            .flat_map(|e| (0..e.feature.rows()).map(move |r| (e.block_index * e.feature.rows() + r, e.feature.row(r))))
            .collect();
        let (mean, corr) = self.world.block_conditional(c, block_index, &rows)?;
        let mut x = x_t.clone();
        let start = (t * self.sched.n_steps() as f64).round() as usize;
        for g in (1..=start).rev() {
            let (tg, tn) = (self.sched.time(g), self.sched.time(g - 1));
            let x0 = self.world.block_posterior_x0(&x, tg, &mean, &corr, self.sched);
            x = if tn == 0.0 { x0 } else { self.sched.ode_step(&x, &x0, tg, tn) };
        }
        Ok(x)
    }
}

#[test]
fn oracle_loss_is_far_below_random_loss() {
    let world = desk_world();
    let sched = schedule();
    let c = random_cond(2, 4, 21);
    let ds = build_ode_dataset(&world, &[c], &sched, 4, 3).unwrap();
    let s = sampler(&sched, 4, 3, 8, SampleMode::Deterministic);
    let flow = BlockFlow { world: &world, sched: &sched };
    let random = StudentParams::random(4, 8, 4, 1.0, &mut seeded(4));
    for t in &ds.trajectories {
        let lo = ode_loss_of(&flow, t, &s.grid, &sched, 3).unwrap();
        let hi = ode_loss(&random, t, &s.grid, 3).unwrap().0;
        println!("oracle {lo:.4} random {hi:.4}");
        assert!(lo * 100.0 < hi, "{lo} vs {hi}");
    }
}

#[test]
fn training_converges_and_is_deterministic() {
    let world = small_world(2, 6);
    let sched = schedule();
    let c = random_cond(5, 2, 6);
    let ds = build_ode_dataset(&world, &[c], &sched, 1, 6).unwrap();
    let grid = sampler(&sched, 4, 3, 2, SampleMode::Deterministic).grid;
    let init = StudentParams::random(4, 2, 2, 1.0, &mut seeded(8));
    let initial: f64 = ds.trajectories.iter().map(|t| ode_loss(&init, t, &grid, 3).unwrap().0).sum();
    let cfg = ode_cfg(20_000);
    let (p, log) = train_ode(init.clone(), &ds, &grid, 3, &cfg).unwrap();
    assert!(log.converged && !log.hit_step_cap);
    let fin: f64 = ds.trajectories.iter().map(|t| ode_loss(&p, t, &grid, 3).unwrap().0).sum();
    assert!(fin < 0.01 * initial, "{fin} vs {initial}");

    let (p2, log2) = train_ode(init.clone(), &ds, &grid, 3, &cfg).unwrap();
    assert_eq!(p, p2);
    assert_eq!(log, log2);

    // stopping at 5% of the converged run is flagged
    let short = ode_cfg(((log.generator_steps as f64) * 0.05).round() as usize);
    let (_, log3) = train_ode(init, &ds, &grid, 3, &short).unwrap();
    assert!(!log3.converged && log3.hit_step_cap);
}

#[test]
fn critic_steps_on_a_frozen_generator_reduce_held_out_loss() {
    let world = small_world(2, 6);
    let sched = schedule();
    let s = sampler(&sched, 4, 3, 2, SampleMode::Stochastic);
    let gen = random_student(9, 4, 2, 2);
    let conds: Vec<_> = (0..4).map(|i| random_cond(30 + i, 2, 6)).collect();
    let cfg = DMDConfig {
        batch_size: 16,
        ..DMDConfig::toy()
    };
    let mut critic = CriticParams::zeros(cfg.critic_buckets, cfg.critic_radius, 2, 2).unwrap();
    let held_out = {
        let fake = FakeScore::new(&critic, &world, &sched, &cfg);
        draw_critic_samples(&gen, &fake, &s, &conds, 2, 512, (0.02, 0.98), &mut seeded(10)).unwrap()
    };
    let mut opt = AdamW::new(cfg.critic_adam(), critic.len());
    let mut curve = vec![critic_loss(&critic, &held_out).unwrap().0];
    let mut rng = seeded(11);
    for _ in 0..60 {
        let fake = FakeScore::new(&critic, &world, &sched, &cfg);
        let batch = draw_critic_samples(&gen, &fake, &s, &conds, 2, cfg.batch_size, (0.02, 0.98), &mut rng).unwrap();
        dmd_critic_step(&mut critic, &mut opt, &batch).unwrap();
        curve.push(critic_loss(&critic, &held_out).unwrap().0);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let chunks: Vec<f64> = curve.chunks(10).map(mean).collect();
    assert!(chunks.windows(2).all(|w| w[1] <= w[0] * 1.02), "{chunks:?}");
    assert!(curve[60] < curve[0]);
}
