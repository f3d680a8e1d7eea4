//! Recipe ablation: each arm toggles one ingredient of the two-stage recipe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions::{
    filter_conditions, generate_conditions, ConditionSpec, Degradation, Thresholds,
};
use crate::diffusion::condition::MultimodalCondition;
use crate::diffusion::schedule::make_schedule;
use crate::diffusion::world::{GaussianWorld, WorldParams};
use crate::distill::dmd::{train_dmd, DMDConfig};
use crate::distill::ode::{build_ode_dataset, ode_train_steps, OdeTrainConfig, OdeTrainState};
use crate::error::{Error, Result};
use crate::eval::frechet_to_world;
use crate::eval::report::ReportRow;
use crate::rng::{substream, substream_seed};
use crate::streaming::cache::CachePolicy;
use crate::student::{SampleMode, Sampler, SamplerGrid, StudentParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmSpec {
    /// Train on the filtered condition pool instead of the raw one.
    pub curated: bool,
    /// Run ODE initialization to convergence instead of a short prefix.
    pub converged_ode: bool,
    /// Use the full DMD learning rates instead of the baseline fraction.
    pub aggressive_lr: bool,
    /// Use the tuned teacher guidance scale instead of the baseline one.
    pub tuned_cfg: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub spec: ArmSpec,
}

impl Arm {
    pub fn new(name: &str, curated: bool, converged_ode: bool, aggressive_lr: bool, tuned_cfg: bool) -> Self {
        Self {
            name: name.into(),
            spec: ArmSpec {
                curated,
                converged_ode,
                aggressive_lr,
                tuned_cfg,
            },
        }
    }
}

/// Converged ODE on the raw pool: the recipe with only curation removed
/// before any optimizer change.
pub fn degraded_arm() -> Arm {
    Arm::new("converged_degraded", false, true, false, false)
}

/// The six rows: a baseline, four cumulative additions, and the full recipe
/// without curation.
pub fn standard_arms() -> Vec<Arm> {
    vec![
        Arm::new("baseline", false, false, false, false),
        Arm::new("+curated", true, false, false, false),
        Arm::new("+converged_ode", true, true, false, false),
        Arm::new("+aggressive_lr", true, true, true, false),
        Arm::new("+tuned_cfg", true, true, true, true),
        Arm::new("final_without_curation", false, true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub world: WorldParams,
    pub grid: Vec<usize>,
    pub schedule_steps: usize,
    /// Size of the raw training pool before curation.
    pub n_conditions: usize,
    pub n_eval: usize,
    pub degradation: Degradation,
    pub condition_spec: ConditionSpec,
    pub thresholds: Thresholds,
    pub ode_rollouts_per_condition: usize,
    pub ode: OdeTrainConfig,
    /// Fraction of the convergence step count used by under-trained arms.
    pub under_fraction: f64,
    /// Settings of the aggressive, tuned arms.
    pub dmd: DMDConfig,
    /// Learning-rate multiplier of non-aggressive arms.
    pub baseline_lr_factor: f64,
    pub baseline_cfg: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            world: WorldParams::default(),
            grid: vec![48, 36, 24, 12],
            schedule_steps: 48,
            n_conditions: 48,
            n_eval: 8,
            degradation: Degradation {
                clean_fraction: 0.5,
                dim_fraction: 0.25,
                noisy_fraction: 0.25,
            },
            condition_spec: ConditionSpec::default(),
            thresholds: Thresholds::default(),
            ode_rollouts_per_condition: 2,
            ode: OdeTrainConfig::default(),
            under_fraction: 0.05,
            dmd: DMDConfig {
                total_steps: 400,
                ..DMDConfig::toy()
            },
            baseline_lr_factor: 0.5,
            baseline_cfg: 1.0,
            init_scale: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub spec: ArmSpec,
    pub train_conditions: usize,
    pub ode_steps: usize,
    pub ode_converged: bool,
    /// Fréchet distance of the ODE-initialized student.
    pub ode_frechet: f64,
    /// Best evaluated EMA Fréchet distance during DMD.
    pub best_frechet: f64,
    pub best_step: usize,
    pub final_frechet: f64,
    pub final_sync: f64,
    pub peak_then_degrade: bool,
}

/// Everything shared by the arms of one ablation run.
pub struct AblationSetup {
    pub world: GaussianWorld,
    pub sampler: Sampler,
    pub pool: Vec<MultimodalCondition>,
    pub curated: Vec<MultimodalCondition>,
    pub eval: Vec<MultimodalCondition>,
    pub init: StudentParams,
}

impl AblationSetup {
    pub fn new(cfg: &AblationConfig) -> Result<Self> {
        let world = GaussianWorld::new(cfg.world.clone())?;
        let sched = make_schedule(cfg.schedule_steps)?;
        let grid = SamplerGrid::new(cfg.grid.clone(), &sched)?;
        let spec = ConditionSpec {
            embed_dim: cfg.world.embed_dim,
            frames: cfg.world.frames,
            ..cfg.condition_spec
        };
        let pool = generate_conditions(
            substream_seed(cfg.seed, "train-conditions"),
            cfg.n_conditions,
            &spec,
            cfg.degradation,
        )?;
        // Filter a larger pool drawn the same way until the curated set is
        // as large as the raw one.
        let mut scale = 2;
        let curated = loop {
            let bigger = generate_conditions(
                substream_seed(cfg.seed, "train-conditions"),
                cfg.n_conditions * scale,
                &spec,
                cfg.degradation,
            )?;
            let mut kept = filter_conditions(&bigger, &cfg.thresholds).kept;
            if kept.len() >= cfg.n_conditions || scale >= 64 {
                kept.truncate(cfg.n_conditions);
                break kept;
            }
            scale *= 2;
        };
        if curated.is_empty() {
            return Err(Error::invalid("curation rejected every condition"));
        }
        let eval = generate_conditions(
            substream_seed(cfg.seed, "eval-conditions"),
            cfg.n_eval,
            &spec,
            Degradation::CLEAN,
        )?;
        let init = StudentParams::random(
            grid.k(),
            world.dim(),
            world.embed_dim(),
            cfg.init_scale,
            &mut substream(cfg.seed, "student-init"),
        );
        let sampler = Sampler {
            grid,
            sched,
            mode: SampleMode::Deterministic,
            block_size: world.block_size(),
            dim: world.dim(),
        };
        Ok(Self {
            world,
            sampler,
            pool,
            curated,
            eval,
            init,
        })
    }
}

/// ODE initialization for one arm: to convergence, or a prefix of that run.
pub fn ode_init(
    setup: &AblationSetup,
    conds: &[MultimodalCondition],
    cfg: &AblationConfig,
    converged: bool,
) -> Result<OdeTrainState> {
    let ode_cfg = OdeTrainConfig {
        seed: substream_seed(cfg.seed, "ode-train"),
        ..cfg.ode.clone()
    };
    let dataset = build_ode_dataset(
        &setup.world,
        conds,
        &setup.sampler.sched,
        cfg.ode_rollouts_per_condition,
        substream_seed(cfg.seed, "ode-data"),
    )?;
    let b = setup.sampler.block_size;
    let grid = &setup.sampler.grid;
    let mut state = OdeTrainState::new(setup.init.clone(), &ode_cfg);
    ode_train_steps(&mut state, &dataset, grid, b, &ode_cfg, usize::MAX)?;
    if converged {
        return Ok(state);
    }
    let short = ((state.step as f64 * cfg.under_fraction).round() as usize).max(1);
    let mut under = OdeTrainState::new(setup.init.clone(), &ode_cfg);
    ode_train_steps(&mut under, &dataset, grid, b, &ode_cfg, short)?;
    Ok(under)
}

pub fn arm_dmd_config(cfg: &AblationConfig, spec: ArmSpec) -> DMDConfig {
    let lr = if spec.aggressive_lr {
        1.0
    } else {
        cfg.baseline_lr_factor
    };
    DMDConfig {
        lr_generator: cfg.dmd.lr_generator * lr,
        lr_critic: cfg.dmd.lr_critic * lr,
        teacher_cfg_scale: if spec.tuned_cfg {
            cfg.dmd.teacher_cfg_scale
        } else {
            cfg.baseline_cfg
        },
        seed: substream_seed(cfg.seed, "dmd"),
        ..cfg.dmd.clone()
    }
}

pub fn run_arm(setup: &AblationSetup, cfg: &AblationConfig, arm: &Arm) -> Result<ArmResult> {
    let conds = if arm.spec.curated {
        &setup.curated
    } else {
        &setup.pool
    };
    let ode = ode_init(setup, conds, cfg, arm.spec.converged_ode)?;
    let ode_frechet = frechet_to_world(
        &ode.params,
        &setup.sampler,
        &setup.world,
        &setup.eval,
        CachePolicy::Unbounded,
    )?;
    let dmd_cfg = arm_dmd_config(cfg, arm.spec);
    let out = train_dmd(
        ode.params,
        &setup.world,
        &setup.sampler,
        conds,
        &setup.eval,
        &dmd_cfg,
    )?;
    let (best_step, best_frechet) = out.log.best.unwrap_or((0, f64::NAN));
    let last = out
        .log
        .records
        .iter()
        .rev()
        .find(|r| r.eval_frechet.is_some());
    Ok(ArmResult {
        name: arm.name.clone(),
        spec: arm.spec,
        train_conditions: conds.len(),
        ode_steps: ode.step,
        ode_converged: ode.log.converged,
        ode_frechet,
        best_frechet,
        best_step,
        final_frechet: last.and_then(|r| r.eval_frechet).unwrap_or(f64::NAN),
        final_sync: last.and_then(|r| r.eval_sync).unwrap_or(f64::NAN),
        peak_then_degrade: out.log.peak_then_degrade,
    })
}

pub fn run_ablation(cfg: &AblationConfig, arms: &[Arm]) -> Result<Vec<ArmResult>> {
    let setup = AblationSetup::new(cfg)?;
    arms.par_iter().map(|a| run_arm(&setup, cfg, a)).collect()
}

/// Long-format report rows, one per arm and metric.
pub fn ablation_rows(results: &[ArmResult], n_eval: usize, seed: u64) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for r in results {
        let mut push = |metric: &str, value: f64| {
            rows.push(ReportRow {
                method: r.name.clone(),
                metric: metric.into(),
                value,
                n: n_eval,
                seed,
            })
        };
        push("ode_frechet", r.ode_frechet);
        push("best_frechet", r.best_frechet);
        push("final_frechet", r.final_frechet);
        push("final_sync", r.final_sync);
        push("ode_steps", r.ode_steps as f64);
        push("train_conditions", r.train_conditions as f64);
        push("peak_then_degrade", f64::from(u8::from(r.peak_then_degrade)));
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_add_one_ingredient_per_row() {
        let arms = standard_arms();
        assert_eq!(arms.len(), 6);
        let count = |s: &ArmSpec| {
            [s.curated, s.converged_ode, s.aggressive_lr, s.tuned_cfg]
                .iter()
                .filter(|b| **b)
                .count()
        };
        for (i, a) in arms[..5].iter().enumerate() {
            assert_eq!(count(&a.spec), i);
        }
        assert!(!arms[5].spec.curated && count(&arms[5].spec) == 3);
    }

    #[test]
    fn baseline_arm_halves_rates_and_drops_guidance() {
        let cfg = AblationConfig::default();
        let base = arm_dmd_config(&cfg, standard_arms()[0].spec);
        assert_eq!(base.lr_generator, cfg.dmd.lr_generator * 0.5);
        assert_eq!(base.lr_critic, cfg.dmd.lr_critic * 0.5);
        assert_eq!(base.teacher_cfg_scale, 1.0);
        let tuned = arm_dmd_config(&cfg, standard_arms()[4].spec);
        assert_eq!(tuned.teacher_cfg_scale, cfg.dmd.teacher_cfg_scale);
    }
}
