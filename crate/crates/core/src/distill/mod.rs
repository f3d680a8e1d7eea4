//! The two-stage distillation recipe: ODE-trajectory initialization followed
//! by on-policy distribution matching with a trained critic.

pub mod ablation;
pub mod critic;
pub mod dmd;
pub mod log;
pub mod ode;
pub mod optim;
pub mod probe;

pub use ablation::{
    ablation_rows, arm_dmd_config, degraded_arm, ode_init, run_ablation, run_arm, standard_arms, AblationConfig, AblationSetup, Arm,
    ArmResult, ArmSpec,
};
pub use critic::{critic_loss, fit_critic_ls, CriticParams, CriticSample};
pub use dmd::{
    dmd_critic_step, dmd_generator_gradient, dmd_generator_step, dmd_train_steps,
    draw_critic_samples, init_critic, rollout_backward, score_difference, train_dmd, DMDConfig,
    DmdOutcome, DmdTrainState, FakeScore, GeneratorGradient, GeneratorStepStats, ScoreModel, TeacherScore,
};
pub use log::{StepRecord, TrainLog};
pub use ode::{
    build_ode_dataset, ode_loss, ode_loss_of, ode_train_steps, train_ode, ODEDataset,
    OdeTrainConfig, OdeTrainState,
};
pub use probe::{exposure_bias_probe, teacher_forced_block, ExposureCurve};
pub use optim::{ema_update, AdamConfig, AdamW};
