//! Stage one: regress the student onto teacher ODE trajectories.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::ode::{teacher_ode_rollout, Trajectory};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::world::GaussianWorld;
use crate::distill::log::{StepRecord, TrainLog};
use crate::distill::optim::{l2_norm, AdamConfig, AdamW};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, NoiseSource};
use crate::student::predict::{backward_pooled, forward_pooled};
use crate::student::{BlockPredictor, KVEntry, SamplerGrid, StudentParams};
use crate::tensor::Frames;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ODEDataset {
    pub trajectories: Vec<Trajectory>,
    pub n_steps: usize,
}

impl ODEDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// One seeded teacher rollout per `(condition, replicate)`, condition-major.
pub fn build_ode_dataset(
    world: &GaussianWorld,
    conditions: &[MultimodalCondition],
    sched: &NoiseSchedule,
    rollouts_per_condition: usize,
    seed: u64,
) -> Result<ODEDataset> {
    if conditions.is_empty() {
        return Err(Error::invalid("no conditions for the ODE dataset"));
    }
    let mut trajectories = Vec::with_capacity(conditions.len() * rollouts_per_condition);
    for (ci, c) in conditions.iter().enumerate() {
        for r in 0..rollouts_per_condition {
            let idx = (ci * rollouts_per_condition + r) as u64;
            let mut rng = indexed_stream(seed, "ode-dataset", idx);
            let z = draw_frames(world.frames(), world.dim(), &mut rng);
            trajectories.push(teacher_ode_rollout(world, c, sched, z)?);
        }
    }
    Ok(ODEDataset {
        trajectories,
        n_steps: sched.n_steps(),
    })
}

fn check_grid(traj: &Trajectory, grid: &SamplerGrid) -> Result<()> {
    if grid.indices().iter().any(|&g| g > traj.n_steps()) {
        return Err(Error::invalid(format!(
            "grid {:?} exceeds trajectory of {} steps",
            grid.indices(),
            traj.n_steps()
        )));
    }
    Ok(())
}

/// Running means of the clean endpoint's frames `0..j b`, one per block `j`.
fn teacher_forced_pools(x0: &Frames, block_size: usize) -> Vec<Vec<f64>> {
    let nb = x0.rows() / block_size;
    let d = x0.dim();
    let mut sum = vec![0.0; d];
    let mut pools = Vec::with_capacity(nb);
    for j in 0..nb {
        let n = j * block_size;
        pools.push(if n == 0 {
            vec![0.0; d]
        } else {
            sum.iter().map(|s| s / n as f64).collect()
        });
        for r in n..n + block_size {
            for (s, x) in sum.iter_mut().zip(x0.row(r)) {
                *s += x;
            }
        }
    }
    pools
}

/// Mean over the `k` grid steps and all blocks of `‖g(x_t^b) - x_0^b‖²`, with
/// teacher-forced clean context, plus its gradient in the parameter layout.
pub fn ode_loss(
    params: &StudentParams,
    traj: &Trajectory,
    grid: &SamplerGrid,
    block_size: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let loss = ode_loss_accumulate(params, traj, grid, block_size, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// As [`ode_loss`], adding `weight × gradient` into `grad`.
pub(crate) fn ode_loss_accumulate(
    params: &StudentParams,
    traj: &Trajectory,
    grid: &SamplerGrid,
    block_size: usize,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_grid(traj, grid)?;
    if grid.k() != params.k() {
        return Err(Error::shape(format!("{} sampler steps", params.k()), grid.k()));
    }
    let x0 = traj.endpoint();
    if x0.rows() % block_size != 0 {
        return Err(Error::invalid("trajectory length is not a whole number of blocks"));
    }
    let nb = x0.rows() / block_size;
    let pools = teacher_forced_pools(x0, block_size);
    let c = &traj.condition;
    let norm = (grid.k() * nb) as f64;
    let mut loss = 0.0;
    for (i, &g) in grid.indices().iter().enumerate() {
        let state = traj.at_grid(g);
        for (j, pool) in pools.iter().enumerate() {
            let x_t = state.slice_rows(j * block_size, block_size);
            let target = x0.slice_rows(j * block_size, block_size);
            let pred = forward_pooled(params, &x_t, i, pool, c, j);
            let diff = pred.sub(&target);
            loss += diff.squared_norm();
            let up = diff.scale(2.0 * weight / norm);
            backward_pooled(params, &x_t, i, pool, c, j, &up, grad);
        }
    }
    Ok(loss / norm)
}

/// The same objective for any predictor (no gradient).
pub fn ode_loss_of(
    pred: &dyn BlockPredictor,
    traj: &Trajectory,
    grid: &SamplerGrid,
    sched: &NoiseSchedule,
    block_size: usize,
) -> Result<f64> {
    check_grid(traj, grid)?;
    let x0 = traj.endpoint();
    let nb = x0.rows() / block_size;
    let mut loss = 0.0;
    for (i, &g) in grid.indices().iter().enumerate() {
        let state = traj.at_grid(g);
        let mut context = Vec::with_capacity(nb);
        for j in 0..nb {
            let x_t = state.slice_rows(j * block_size, block_size);
            let target = x0.slice_rows(j * block_size, block_size);
            let p = pred.predict_block(&x_t, i, sched.time(g), &context, &traj.condition, j)?;
            loss += p.sub(&target).squared_norm();
            context.push(KVEntry {
                block_index: j,
                feature: target,
            });
        }
    }
    Ok(loss / (grid.k() * nb) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeTrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Steps per window of the convergence test.
    pub window: usize,
    /// Stop once the mean loss of the last window improves on the previous
    /// window by less than this fraction.
    pub rel_tol: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for OdeTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 4e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            batch_size: 4,
            window: 200,
            rel_tol: 1e-3,
            max_steps: 20_000,
            seed: 0,
        }
    }
}

impl OdeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.window == 0 || self.max_steps == 0 {
            return Err(Error::Config(
                "batch size, window and max steps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeTrainState {
    pub params: StudentParams,
    pub opt: AdamW,
    pub step: usize,
    pub losses: Vec<f64>,
    pub log: TrainLog,
    pub finished: bool,
}

impl OdeTrainState {
    pub fn new(params: StudentParams, cfg: &OdeTrainConfig) -> Self {
        let n = params.len();
        Self {
            params,
            opt: AdamW::new(cfg.adam, n),
            step: 0,
            losses: Vec::new(),
            log: TrainLog::default(),
            finished: false,
        }
    }
}

fn window_converged(losses: &[f64], w: usize, tol: f64) -> bool {
    let n = losses.len();
    if n < 2 * w {
        return false;
    }
    let prev = losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
    let cur = losses[n - w..].iter().sum::<f64>() / w as f64;
    prev <= 0.0 || (prev - cur) / prev < tol
}

/// Advance training until `until` steps have run, the stopping rule fires,
/// or the step cap is reached.
pub fn ode_train_steps(
    state: &mut OdeTrainState,
    dataset: &ODEDataset,
    grid: &SamplerGrid,
    block_size: usize,
    cfg: &OdeTrainConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty ODE dataset"));
    }
    let n = dataset.len();
    while !state.finished && state.step < until.min(cfg.max_steps) {
        let mut rng = indexed_stream(cfg.seed, "ode-step", state.step as u64);
        let mut grad = vec![0.0; state.params.len()];
        let mut loss = 0.0;
        let w = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let traj = &dataset.trajectories[rng.random_range(0..n)];
            loss += w * ode_loss_accumulate(&state.params, traj, grid, block_size, w, &mut grad)?;
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: state.step,
                detail: format!("ODE loss became {loss}"),
            });
        }
        let gn = l2_norm(&grad);
        state.opt.step(state.params.as_mut_slice(), &grad)?;
        state.log.push(StepRecord {
            loss_g: Some(loss),
            grad_norm_g: Some(gn),
            ..StepRecord::new(state.step)
        })?;
        state.losses.push(loss);
        state.step += 1;
        state.log.generator_steps = state.step;
        if window_converged(&state.losses, cfg.window, cfg.rel_tol) {
            state.log.converged = true;
            state.finished = true;
        } else if state.step >= cfg.max_steps {
            state.log.hit_step_cap = true;
            state.finished = true;
        }
    }
    Ok(())
}

/// Train to convergence or `cfg.max_steps`, whichever comes first.
pub fn train_ode(
    params: StudentParams,
    dataset: &ODEDataset,
    grid: &SamplerGrid,
    block_size: usize,
    cfg: &OdeTrainConfig,
) -> Result<(StudentParams, TrainLog)> {
    let mut state = OdeTrainState::new(params, cfg);
    ode_train_steps(&mut state, dataset, grid, block_size, cfg, usize::MAX)?;
    Ok((state.params, state.log))
}

/// Draw standard-normal initial noise through any [`NoiseSource`].
pub fn draw_frames(rows: usize, dim: usize, noise: &mut dyn NoiseSource) -> Frames {
    let mut z = Frames::zeros(rows, dim);
    noise.fill(z.as_mut_slice());
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    #[test]
    fn zero_trajectory_and_params_give_zero_loss() {
        let sched = make_schedule(48).unwrap();
        let grid = SamplerGrid::uniform(&sched, 4).unwrap();
        let c = MultimodalCondition::new(vec![0.0; 2], vec![0.0; 2], vec![0.0; 6]).unwrap();
        let traj = Trajectory {
            states: vec![Frames::zeros(6, 3); 49],
            condition: c,
        };
        let p = StudentParams::zeros(4, 3, 2);
        let (l, g) = ode_loss(&p, &traj, &grid, 3).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pools_are_prefix_means() {
        let x = Frames::from_fn(6, 1, |r, _| r as f64);
        let p = teacher_forced_pools(&x, 2);
        assert_eq!(p, vec![vec![0.0], vec![0.5], vec![1.5]]);
    }

    #[test]
    fn window_rule() {
        let flat = vec![1.0; 4];
        assert!(window_converged(&flat, 2, 1e-3));
        let falling = vec![4.0, 4.0, 2.0, 2.0];
        assert!(!window_converged(&falling, 2, 1e-3));
        assert!(!window_converged(&falling[..3], 2, 1e-3));
    }
}
