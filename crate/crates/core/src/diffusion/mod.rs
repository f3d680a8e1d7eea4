//! Noise process, the Gaussian toy world and its exact teacher, guidance,
//! and the many-step teacher ODE sampler.

pub mod condition;
pub mod guidance;
pub mod ode;
pub mod schedule;
pub mod world;

pub use condition::{Modality, MultimodalCondition};
pub use guidance::{cfg_combine, guided_teacher_x0, CfgScales};
pub use ode::{teacher_ode_rollout, Trajectory};
pub use schedule::{add_noise, make_schedule, NoiseSchedule, ScheduleKind};
pub use world::{GaussianWorld, TeacherPrediction, WorldParams};
