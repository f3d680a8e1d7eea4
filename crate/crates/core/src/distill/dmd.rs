//! Stage two: on-policy distribution matching against the teacher.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::guidance::{guided_teacher_x0, CfgScales};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::world::GaussianWorld;
use crate::distill::critic::{critic_loss, fit_critic_ls, CriticParams, CriticSample};
use crate::distill::log::{StepRecord, TrainLog};
use crate::distill::ode::draw_frames;
use crate::distill::optim::{ema_update, l2_norm, AdamConfig, AdamW};
use crate::error::{Error, Result};
use crate::eval::{frechet_to_world, max_sync_offset, mean_sync_confidence};
use crate::rng::{indexed_stream, substream, NoiseSource};
use crate::streaming::cache::{CachePolicy, UnboundedCache};
use crate::student::{RolloutTrace, Sampler, StudentParams};
use crate::tensor::Frames;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DMDConfig {
    pub lr_generator: f64,
    pub lr_critic: f64,
    /// Critic updates per generator update.
    pub update_ratio: usize,
    pub critic_warmup: usize,
    pub ema_decay: f64,
    pub ema_start: usize,
    /// Audio guidance scale of the teacher score.
    pub teacher_cfg_scale: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub batch_size: usize,
    /// Generator steps.
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Divide the score difference by its mean absolute value.
    pub normalize_score_diff: bool,
    /// Generator steps between evaluations.
    pub eval_every: usize,
    /// Relative margin for the peak-then-degrade flag.
    pub peak_margin: f64,
    pub critic_buckets: usize,
    pub critic_radius: usize,
    /// Rollouts used for the least-squares critic initialization.
    pub critic_init_rollouts: usize,
    /// The critic predicts a residual on top of the unguided teacher.
    pub critic_residual: bool,
    pub seed: u64,
}

impl DMDConfig {
    /// Documented paper-scale values.
    pub fn paper() -> Self {
        Self {
            lr_generator: 4e-6,
            lr_critic: 8e-7,
            update_ratio: 5,
            critic_warmup: 20,
            ema_decay: 0.99,
            ema_start: 200,
            teacher_cfg_scale: 6.0,
            tau_min: 0.02,
            tau_max: 0.98,
            batch_size: 64,
            total_steps: 1000,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            normalize_score_diff: false,
            eval_every: 25,
            peak_margin: 0.05,
            critic_buckets: 8,
            critic_radius: 2,
            critic_init_rollouts: 256,
            critic_residual: true,
            seed: 0,
        }
    }

    /// Generator rate scaled by 1000, critic rate matched to it, and the
    /// guidance scale mapped onto the toy world.
    pub fn toy() -> Self {
        Self {
            lr_generator: 4e-3,
            lr_critic: 4e-3,
            teacher_cfg_scale: 1.5,
            batch_size: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_generator > 0.0 && self.lr_critic > 0.0) {
            return Err(Error::Config("DMD learning rates must be > 0".into()));
        }
        if self.update_ratio < 1 {
            return Err(Error::Config("update ratio must be >= 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "EMA decay {} must lie in (0, 1)",
                self.ema_decay
            )));
        }
        if !(0.0 < self.tau_min && self.tau_min < self.tau_max && self.tau_max < 1.0) {
            return Err(Error::Config(format!(
                "tau range ({}, {}) must be an interval inside (0, 1)",
                self.tau_min, self.tau_max
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.critic_buckets == 0 {
            return Err(Error::Config(
                "batch size, eval interval and critic buckets must be positive".into(),
            ));
        }
        if !self.teacher_cfg_scale.is_finite() || self.peak_margin < 0.0 {
            return Err(Error::Config("bad guidance scale or peak margin".into()));
        }
        self.generator_adam().validate()?;
        self.critic_adam().validate()
    }

    pub fn generator_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_generator,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn critic_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_critic,
            ..self.generator_adam()
        }
    }
}

impl Default for DMDConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// An x0-predictor on noised full videos.
pub trait ScoreModel {
    fn x0(&self, x_tau: &Frames, tau: f64, c: &MultimodalCondition) -> Result<Frames>;
}

impl ScoreModel for CriticParams {
    fn x0(&self, x_tau: &Frames, tau: f64, c: &MultimodalCondition) -> Result<Frames> {
        self.predict(x_tau, tau, c)
    }
}

/// The guided teacher as a score model.
#[derive(Debug, Clone, Copy)]
pub struct TeacherScore<'a> {
    pub world: &'a GaussianWorld,
    pub sched: &'a NoiseSchedule,
    pub scales: CfgScales,
}

impl<'a> TeacherScore<'a> {
    pub fn new(world: &'a GaussianWorld, sched: &'a NoiseSchedule, audio_scale: f64) -> Self {
        Self {
            world,
            sched,
            scales: CfgScales::audio_only(audio_scale),
        }
    }
}

impl ScoreModel for TeacherScore<'_> {
    fn x0(&self, x_tau: &Frames, tau: f64, c: &MultimodalCondition) -> Result<Frames> {
        if self.scales == CfgScales::UNIT {
            Ok(self.world.teacher_x0(x_tau, tau, c, self.sched)?.x0)
        } else {
            guided_teacher_x0(self.world, x_tau, tau, c, self.scales, self.sched)
        }
    }
}

/// The critic as a score model: its affine output, plus the unguided teacher
/// when `base` is set.
#[derive(Debug, Clone, Copy)]
pub struct FakeScore<'a> {
    pub params: &'a CriticParams,
    pub base: Option<TeacherScore<'a>>,
}

impl<'a> FakeScore<'a> {
    pub fn new(
        params: &'a CriticParams,
        world: &'a GaussianWorld,
        sched: &'a NoiseSchedule,
        cfg: &DMDConfig,
    ) -> Self {
        Self {
            params,
            base: cfg
                .critic_residual
                .then(|| TeacherScore::new(world, sched, 1.0)),
        }
    }

    pub fn base_x0(&self, x_tau: &Frames, tau: f64, c: &MultimodalCondition) -> Result<Frames> {
        match &self.base {
            Some(t) => t.x0(x_tau, tau, c),
            None => Ok(Frames::zeros(x_tau.rows(), x_tau.dim())),
        }
    }
}

impl ScoreModel for FakeScore<'_> {
    fn x0(&self, x_tau: &Frames, tau: f64, c: &MultimodalCondition) -> Result<Frames> {
        let r = self.params.predict(x_tau, tau, c)?;
        match &self.base {
            Some(t) => Ok(t.x0(x_tau, tau, c)?.add(&r)),
            None => Ok(r),
        }
    }
}

/// `s_ψ - s_θ`, optionally divided by its mean absolute value.
pub fn score_difference(s_teacher: &Frames, s_critic: &Frames, normalize: bool) -> Result<Frames> {
    s_teacher.check_same_shape(s_critic)?;
    let g = s_critic.sub(s_teacher);
    if normalize {
        let n = g.as_slice().len().max(1) as f64;
        let m = g.as_slice().iter().map(|v| v.abs()).sum::<f64>() / n;
        if m > 0.0 {
            return Ok(g.scale(1.0 / m));
        }
    }
    Ok(g)
}

/// Backpropagate a per-frame upstream gradient through a traced rollout.
/// Each block's context is treated as a constant.
pub fn rollout_backward(
    gen: &StudentParams,
    sampler: &Sampler,
    trace: &RolloutTrace,
    c: &MultimodalCondition,
    upstream: &Frames,
) -> Vec<f64> {
    let mut grad = vec![0.0; gen.len()];
    let b = sampler.block_size;
    for (j, (s, ctx)) in trace.blocks.iter().zip(&trace.contexts).enumerate() {
        let up = upstream.slice_rows(j * b, b);
        sampler.block_backward(gen, s, ctx, c, j, &up, &mut grad);
    }
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGradient {
    pub grad: Vec<f64>,
    /// `½‖s_ψ - s_θ‖²`, the surrogate loss whose gradient is `grad`.
    pub loss: f64,
    pub trace: RolloutTrace,
    pub x_tau: Frames,
}

/// DMD gradient for one rollout at noise level `tau`. Draws the rollout noise
/// first, then the noise that forms `x_τ`.
#[allow(clippy::too_many_arguments)]
pub fn dmd_generator_gradient(
    gen: &StudentParams,
    sampler: &Sampler,
    teacher: &dyn ScoreModel,
    critic: &dyn ScoreModel,
    c: &MultimodalCondition,
    num_blocks: usize,
    tau: f64,
    normalize: bool,
    noise: &mut dyn NoiseSource,
) -> Result<GeneratorGradient> {
    let trace = sampler.rollout_traced(gen, c, num_blocks, &mut UnboundedCache::new(), noise)?;
    let x0 = trace.video.frames();
    let eps = draw_frames(x0.rows(), x0.dim(), noise);
    let sched = &sampler.sched;
    let x_tau = x0.lincomb(sched.alpha(tau), &eps, sched.sigma(tau));
    let s_t = teacher.x0(&x_tau, tau, c)?;
    let s_c = critic.x0(&x_tau, tau, c)?;
    let g = score_difference(&s_t, &s_c, normalize)?;
    let grad = rollout_backward(gen, sampler, &trace, c, &g);
    Ok(GeneratorGradient {
        grad,
        loss: 0.5 * g.squared_norm(),
        trace,
        x_tau,
    })
}

fn draw_tau(rng: &mut impl Rng, cfg: &DMDConfig) -> f64 {
    rng.random_range(cfg.tau_min..cfg.tau_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorStepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One generator update averaged over `cfg.batch_size` rollouts.
#[allow(clippy::too_many_arguments)]
pub fn dmd_generator_step(
    gen: &mut StudentParams,
    opt: &mut AdamW,
    critic: &CriticParams,
    world: &GaussianWorld,
    sampler: &Sampler,
    conds: &[MultimodalCondition],
    cfg: &DMDConfig,
    rng: &mut (impl Rng + NoiseSource),
) -> Result<GeneratorStepStats> {
    if conds.is_empty() {
        return Err(Error::invalid("no training conditions"));
    }
    let teacher = TeacherScore::new(world, &sampler.sched, cfg.teacher_cfg_scale);
    let fake = FakeScore::new(critic, world, &sampler.sched, cfg);
    let w = 1.0 / cfg.batch_size as f64;
    let mut grad = vec![0.0; gen.len()];
    let mut loss = 0.0;
    for _ in 0..cfg.batch_size {
        let c = &conds[rng.random_range(0..conds.len())];
        let tau = draw_tau(rng, cfg);
        let g = dmd_generator_gradient(
            gen,
            sampler,
            &teacher,
            &fake,
            c,
            world.num_blocks(),
            tau,
            cfg.normalize_score_diff,
            rng,
        )?;
        loss += w * g.loss;
        grad.iter_mut().zip(&g.grad).for_each(|(a, b)| *a += w * b);
    }
    if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator gradient".into()));
    }
    opt.step(gen.as_mut_slice(), &grad)?;
    Ok(GeneratorStepStats {
        loss,
        grad_norm: l2_norm(&grad),
    })
}

/// Fresh generator rollouts, each noised to one uniformly drawn `τ`.
#[allow(clippy::too_many_arguments)]
pub fn draw_critic_samples(
    gen: &StudentParams,
    fake: &FakeScore,
    sampler: &Sampler,
    conds: &[MultimodalCondition],
    num_blocks: usize,
    n: usize,
    tau_range: (f64, f64),
    rng: &mut (impl Rng + NoiseSource),
) -> Result<Vec<CriticSample>> {
    if conds.is_empty() {
        return Err(Error::invalid("no training conditions"));
    }
    (0..n)
        .map(|_| {
            let c = &conds[rng.random_range(0..conds.len())];
            let tau = rng.random_range(tau_range.0..tau_range.1);
            let x0 = sampler
                .rollout(gen, c, num_blocks, &mut UnboundedCache::new(), rng)?
                .into_frames();
            let eps = draw_frames(x0.rows(), x0.dim(), rng);
            let s = &sampler.sched;
            let x_tau = x0.lincomb(s.alpha(tau), &eps, s.sigma(tau));
            Ok(CriticSample {
                base: fake.base_x0(&x_tau, tau, c)?,
                x_tau,
                x0,
                tau,
                condition: c.clone(),
            })
        })
        .collect()
}

/// One descent step on the denoising loss of `samples`. Returns the loss
/// before the step.
pub fn dmd_critic_step(
    critic: &mut CriticParams,
    opt: &mut AdamW,
    samples: &[CriticSample],
) -> Result<f64> {
    if samples
        .iter()
        .any(|s| !s.x0.is_finite() || !s.x_tau.is_finite())
    {
        return Err(Error::NonFinite("critic input".into()));
    }
    let (loss, grad) = critic_loss(critic, samples)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    opt.step(critic.as_mut_slice(), &grad)?;
    Ok(loss)
}

/// Critic fitted by least squares to rollouts of `gen`, with one sample per
/// bucket per rollout.
pub fn init_critic(
    gen: &StudentParams,
    world: &GaussianWorld,
    sampler: &Sampler,
    conds: &[MultimodalCondition],
    cfg: &DMDConfig,
) -> Result<CriticParams> {
    let num_blocks = world.num_blocks();
    let critic = CriticParams::zeros(
        cfg.critic_buckets,
        cfg.critic_radius,
        gen.dim(),
        gen.embed_dim(),
    )?;
    let mut rng = substream(cfg.seed, "critic-init");
    let nb = cfg.critic_buckets as f64;
    let fake = FakeScore::new(&critic, world, &sampler.sched, cfg);
    let mut samples = Vec::new();
    for _ in 0..cfg.critic_init_rollouts {
        for b in 0..cfg.critic_buckets {
            let lo = (b as f64 / nb).max(cfg.tau_min);
            let hi = ((b + 1) as f64 / nb).min(cfg.tau_max);
            if lo >= hi {
                continue;
            }
            samples.extend(draw_critic_samples(
                gen,
                &fake,
                sampler,
                conds,
                num_blocks,
                1,
                (lo, hi),
                &mut rng,
            )?);
        }
    }
    fit_critic_ls(&critic, &samples)
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdTrainState {
    pub gen: StudentParams,
    pub ema: StudentParams,
    /// EMA parameters at the best evaluation so far.
    pub best: StudentParams,
    pub critic: CriticParams,
    pub opt_g: AdamW,
    pub opt_c: AdamW,
    pub log: TrainLog,
    consecutive_failures: usize,
}

impl DmdTrainState {
    pub fn new(
        gen: StudentParams,
        world: &GaussianWorld,
        sampler: &Sampler,
        conds: &[MultimodalCondition],
        cfg: &DMDConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let critic = init_critic(&gen, world, sampler, conds, cfg)?;
        Ok(Self {
            ema: gen.clone(),
            best: gen.clone(),
            opt_g: AdamW::new(cfg.generator_adam(), gen.len()),
            opt_c: AdamW::new(cfg.critic_adam(), critic.len()),
            gen,
            critic,
            log: TrainLog::default(),
            consecutive_failures: 0,
        })
    }

    pub fn generator_steps(&self) -> usize {
        self.log.generator_steps
    }

    pub fn critic_steps(&self) -> usize {
        self.log.critic_steps
    }
}

const MAX_CONSECUTIVE_FAILURES: usize = 3;

fn critic_round(
    state: &mut DmdTrainState,
    world: &GaussianWorld,
    sampler: &Sampler,
    conds: &[MultimodalCondition],
    cfg: &DMDConfig,
    n: usize,
) -> Result<Option<f64>> {
    let mut total = 0.0;
    for _ in 0..n {
        let mut rng = indexed_stream(cfg.seed, "dmd-critic", state.log.critic_steps as u64);
        let fake = FakeScore::new(&state.critic, world, &sampler.sched, cfg);
        let samples = draw_critic_samples(
            &state.gen,
            &fake,
            sampler,
            conds,
            world.num_blocks(),
            cfg.batch_size,
            (cfg.tau_min, cfg.tau_max),
            &mut rng,
        )?;
        total += dmd_critic_step(&mut state.critic, &mut state.opt_c, &samples)?;
        state.log.critic_steps += 1;
    }
    Ok((n > 0).then(|| total / n as f64))
}

fn evaluate(
    state: &DmdTrainState,
    world: &GaussianWorld,
    sampler: &Sampler,
    eval_conds: &[MultimodalCondition],
) -> Result<(f64, f64)> {
    let f = frechet_to_world(&state.ema, sampler, world, eval_conds, CachePolicy::Unbounded)?;
    let offset = max_sync_offset(world.frames(), 3);
    let s = mean_sync_confidence(&state.ema, sampler, eval_conds, world.num_blocks(), offset)?;
    Ok((f, s))
}

/// Advance until `until` generator steps have run or `cfg.total_steps` is
/// reached. The critic warms up before the first generator step, and the
/// initial parameters are evaluated as step 0.
pub fn dmd_train_steps(
    state: &mut DmdTrainState,
    world: &GaussianWorld,
    sampler: &Sampler,
    conds: &[MultimodalCondition],
    eval_conds: &[MultimodalCondition],
    cfg: &DMDConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    if state.log.records.is_empty() {
        let warm = critic_round(state, world, sampler, conds, cfg, cfg.critic_warmup)?;
        let (f, s) = evaluate(state, world, sampler, eval_conds)?;
        state.log.push(StepRecord {
            loss_c: warm,
            eval_frechet: Some(f),
            eval_sync: Some(s),
            ..StepRecord::new(0)
        })?;
        state.best = state.ema.clone();
    }
    let stop = until.min(cfg.total_steps);
    while state.log.generator_steps < stop {
        let loss_c = critic_round(state, world, sampler, conds, cfg, cfg.update_ratio)?;
        let step = state.log.generator_steps;
        let mut rng = indexed_stream(cfg.seed, "dmd-generator", step as u64);
        let stats = match dmd_generator_step(
            &mut state.gen,
            &mut state.opt_g,
            &state.critic,
            world,
            sampler,
            conds,
            cfg,
            &mut rng,
        ) {
            Ok(s) => {
                state.consecutive_failures = 0;
                Some(s)
            }
            Err(Error::NonFinite(detail)) => {
                state.consecutive_failures += 1;
                if state.consecutive_failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("mode-collapse suspect: {detail}"),
                    });
                }
                None
            }
            Err(e) => return Err(e),
        };
        state.log.generator_steps += 1;
        let n = state.log.generator_steps;
        let ema_active = n >= cfg.ema_start;
        if ema_active {
            ema_update(state.ema.as_mut_slice(), state.gen.as_slice(), cfg.ema_decay)?;
        } else {
            state.ema = state.gen.clone();
        }
        let mut rec = StepRecord {
            loss_g: stats.map(|s| s.loss),
            loss_c,
            grad_norm_g: stats.map(|s| s.grad_norm),
            ema_active,
            ..StepRecord::new(n)
        };
        if n % cfg.eval_every == 0 || n == cfg.total_steps {
            let (f, s) = evaluate(state, world, sampler, eval_conds)?;
            rec.eval_frechet = Some(f);
            rec.eval_sync = Some(s);
            if state.log.best.is_none_or(|(_, b)| f < b) {
                state.best = state.ema.clone();
            }
        }
        state.log.push(rec)?;
    }
    if state.log.generator_steps >= cfg.total_steps {
        if let (Some((_, best)), Some((_, last))) = (state.log.best, state.log.last_eval()) {
            state.log.peak_then_degrade = last > best * (1.0 + cfg.peak_margin);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmdOutcome {
    pub gen: StudentParams,
    pub ema: StudentParams,
    pub best: StudentParams,
    pub critic: CriticParams,
    pub log: TrainLog,
}

/// Full DMD run from an ODE-initialized generator.
pub fn train_dmd(
    gen: StudentParams,
    world: &GaussianWorld,
    sampler: &Sampler,
    conds: &[MultimodalCondition],
    eval_conds: &[MultimodalCondition],
    cfg: &DMDConfig,
) -> Result<DmdOutcome> {
    let mut state = DmdTrainState::new(gen, world, sampler, conds, cfg)?;
    dmd_train_steps(&mut state, world, sampler, conds, eval_conds, cfg, usize::MAX)?;
    Ok(DmdOutcome {
        gen: state.gen,
        ema: state.ema,
        best: state.best,
        critic: state.critic,
        log: state.log,
    })
}
