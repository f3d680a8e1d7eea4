//! Run configuration: presets, TOML overrides and the resolved manifest.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditions::{ConditionSpec, Degradation, Thresholds};
use crate::diffusion::schedule::make_schedule;
use crate::diffusion::world::WorldParams;
use crate::distill::ablation::AblationConfig;
use crate::distill::dmd::DMDConfig;
use crate::distill::ode::OdeTrainConfig;
use crate::distill::optim::AdamConfig;
use crate::error::{Error, Result};
use crate::rng::substream_seed;
use crate::streaming::cache::CachePolicy;
use crate::streaming::engine::{ClockKind, PipelineMode, StageDelays, StreamConfig};
use crate::streaming::windower::WindowSpec;
use crate::student::{SampleMode, Sampler, SamplerGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Smoke,
    #[default]
    Desk,
    PaperScaleDoc,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Smoke, Preset::Desk, Preset::PaperScaleDoc];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::Desk => "desk",
            Preset::PaperScaleDoc => "paper-scale-doc",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Raw training conditions before curation.
    pub n_train: usize,
    pub n_eval: usize,
    pub curate: bool,
    pub degradation: Degradation,
    pub noisy_audio_var: f64,
    pub thresholds: Thresholds,
    pub ode_rollouts_per_condition: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    pub sinks: usize,
    pub rolling: usize,
    /// Ignore `sinks`/`rolling` and keep every block.
    pub unbounded: bool,
    pub pre_context: usize,
    pub look_ahead: usize,
    pub mode: PipelineMode,
    pub clock: ClockKind,
    pub denoise_ms: f64,
    pub decode_ms: f64,
    pub handoff_depth: usize,
    pub fps: f64,
    pub audio_frame_ms: f64,
    /// Blocks produced by `stream`.
    pub blocks: usize,
    pub pixel_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub blocks: usize,
    pub denoise_ms: f64,
    pub decode_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub dmd_steps: usize,
    pub under_fraction: f64,
    pub baseline_lr_factor: f64,
    pub baseline_cfg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub drift_blocks: usize,
    /// Zero-noise rollouts averaged for the sync score.
    pub sync_max_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Master seed; every random stream is a named substream of it.
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldParams,
    pub schedule_steps: usize,
    pub grid: Vec<usize>,
    pub sample_mode: SampleMode,
    pub init_scale: f64,
    /// Steps between resumable checkpoints of the training commands.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub ode: OdeTrainConfig,
    pub dmd: DMDConfig,
    pub stream: StreamSection,
    pub bench: BenchSection,
    pub ablation: AblationSection,
    pub eval: EvalSection,
}

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self {
            preset: Preset::Desk,
            seed: 0,
            out: PathBuf::from("runs/desk"),
            world: WorldParams::default(),
            schedule_steps: 48,
            grid: vec![48, 36, 24, 12],
            sample_mode: SampleMode::Deterministic,
            init_scale: 0.5,
            checkpoint_every: 100,
            data: DataConfig {
                n_train: 48,
                n_eval: 8,
                curate: true,
                degradation: Degradation {
                    clean_fraction: 0.5,
                    dim_fraction: 0.25,
                    noisy_fraction: 0.25,
                },
                noisy_audio_var: ConditionSpec::default().noisy_audio_var,
                thresholds: Thresholds::default(),
                ode_rollouts_per_condition: 2,
            },
            ode: OdeTrainConfig::default(),
            dmd: DMDConfig {
                total_steps: 400,
                ..DMDConfig::toy()
            },
            stream: StreamSection {
                sinks: 3,
                rolling: 2,
                unbounded: false,
                pre_context: 3,
                look_ahead: 3,
                mode: PipelineMode::Pipelined,
                clock: ClockKind::Simulated,
                denoise_ms: 30.0,
                decode_ms: 20.0,
                handoff_depth: 1,
                fps: 16.0,
                audio_frame_ms: 1000.0 / 16.0,
                blocks: 100,
                pixel_dim: 16,
            },
            bench: BenchSection {
                blocks: 50,
                denoise_ms: 30.0,
                decode_ms: 20.0,
            },
            ablation: AblationSection {
                dmd_steps: 400,
                under_fraction: 0.05,
                baseline_lr_factor: 0.5,
                baseline_cfg: 1.0,
            },
            eval: EvalSection {
                drift_blocks: 100,
                sync_max_offset: 3,
            },
        };
        match p {
            Preset::Desk => desk,
            Preset::Smoke => {
                let mut c = desk;
                c.preset = Preset::Smoke;
                c.out = PathBuf::from("runs/smoke");
                c.world = WorldParams {
                    dim: 4,
                    embed_dim: 2,
                    frames: 6,
                    ..WorldParams::default()
                };
                c.checkpoint_every = 20;
                c.data.n_train = 8;
                c.data.n_eval = 4;
                c.ode.window = 50;
                c.ode.max_steps = 2000;
                c.dmd.total_steps = 60;
                c.dmd.eval_every = 10;
                c.dmd.critic_init_rollouts = 32;
                c.stream.blocks = 20;
                c.bench.blocks = 10;
                c.bench.denoise_ms = 3.0;
                c.bench.decode_ms = 2.0;
                c.ablation.dmd_steps = 40;
                c.eval.drift_blocks = 20;
                c
            }
            Preset::PaperScaleDoc => {
                let mut c = desk;
                c.preset = Preset::PaperScaleDoc;
                c.out = PathBuf::from("runs/paper-scale-doc");
                c.data.n_train = 4000;
                c.data.n_eval = 100;
                c.ode.adam = AdamConfig {
                    lr: 4e-5,
                    ..c.ode.adam
                };
                c.ode.batch_size = 64;
                c.ode.max_steps = 20_000;
                c.dmd = DMDConfig::paper();
                c.ablation.dmd_steps = 1000;
                c.ablation.baseline_cfg = 4.0;
                c
            }
        }
    }

    /// Preset defaults overridden by the keys present in `toml_text`.
    /// A `preset` key in the file selects the base unless `preset` is given.
    pub fn from_toml_over(preset: Option<Preset>, toml_text: &str) -> Result<Self> {
        let file: toml::Table = toml_text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match preset {
            Some(p) => p,
            None => match file.get("preset") {
                Some(v) => v
                    .as_str()
                    .ok_or_else(|| Error::Config("preset must be a string".into()))?
                    .parse()?,
                None => Preset::Desk,
            },
        };
        let mut merged = toml::Table::try_from(Self::preset(base)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        if let Some(p) = preset {
            merged.insert("preset".into(), toml::Value::String(p.name().into()));
        }
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        if self.world.frames % self.world.block_size != 0 {
            return Err(Error::Config(format!(
                "frames {} not a multiple of the block size {}",
                self.world.frames, self.world.block_size
            )));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 || self.data.ode_rollouts_per_condition == 0 {
            return Err(Error::Config("condition and rollout counts must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.data.degradation.validate()?;
        self.ode_config().validate()?;
        self.dmd_config().validate()?;
        self.stream_config(self.stream.mode, self.stream.clock)
            .validate()?;
        let sched = make_schedule(self.schedule_steps)?;
        SamplerGrid::new(self.grid.clone(), &sched)?;
        Ok(())
    }

    /// Named substream of the master seed, kept within TOML's integer range.
    pub fn derived_seed(&self, name: &str) -> u64 {
        substream_seed(self.seed, name) >> 1
    }

    pub fn condition_spec(&self) -> ConditionSpec {
        ConditionSpec {
            embed_dim: self.world.embed_dim,
            frames: self.world.frames,
            noisy_audio_var: self.data.noisy_audio_var,
        }
    }

    pub fn sampler(&self) -> Result<Sampler> {
        let sched = make_schedule(self.schedule_steps)?;
        Ok(Sampler {
            grid: SamplerGrid::new(self.grid.clone(), &sched)?,
            sched,
            mode: self.sample_mode,
            block_size: self.world.block_size,
            dim: self.world.dim,
        })
    }

    pub fn ode_config(&self) -> OdeTrainConfig {
        OdeTrainConfig {
            seed: self.derived_seed("ode-train"),
            ..self.ode.clone()
        }
    }

    pub fn dmd_config(&self) -> DMDConfig {
        DMDConfig {
            seed: self.derived_seed("dmd"),
            ..self.dmd.clone()
        }
    }

    pub fn cache_policy(&self) -> CachePolicy {
        if self.stream.unbounded {
            CachePolicy::Unbounded
        } else {
            CachePolicy::Ahis {
                sinks: self.stream.sinks,
                rolling: self.stream.rolling,
            }
        }
    }

    pub fn stream_config(&self, mode: PipelineMode, clock: ClockKind) -> StreamConfig {
        let s = &self.stream;
        StreamConfig {
            mode,
            clock,
            delays: StageDelays {
                denoise_ns: ms_to_ns(s.denoise_ms),
                decode_ns: ms_to_ns(s.decode_ms),
            },
            handoff_depth: s.handoff_depth,
            window: WindowSpec {
                frames_per_block: self.world.block_size,
                pre_context: s.pre_context,
                look_ahead: s.look_ahead,
            },
            cache: self.cache_policy(),
            fps: s.fps,
            audio_frame_interval_ns: ms_to_ns(s.audio_frame_ms),
            seed: self.derived_seed("stream"),
        }
    }

    /// Stream settings for the benchmark: bench delays, whole track up front.
    pub fn bench_config(&self, mode: PipelineMode, clock: ClockKind) -> StreamConfig {
        StreamConfig {
            delays: StageDelays {
                denoise_ns: ms_to_ns(self.bench.denoise_ms),
                decode_ns: ms_to_ns(self.bench.decode_ms),
            },
            audio_frame_interval_ns: 0,
            ..self.stream_config(mode, clock)
        }
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            world: self.world.clone(),
            grid: self.grid.clone(),
            schedule_steps: self.schedule_steps,
            n_conditions: self.data.n_train,
            n_eval: self.data.n_eval,
            degradation: self.data.degradation,
            condition_spec: self.condition_spec(),
            thresholds: self.data.thresholds,
            ode_rollouts_per_condition: self.data.ode_rollouts_per_condition,
            ode: self.ode.clone(),
            under_fraction: self.ablation.under_fraction,
            dmd: DMDConfig {
                total_steps: self.ablation.dmd_steps,
                ..self.dmd.clone()
            },
            baseline_lr_factor: self.ablation.baseline_lr_factor,
            baseline_cfg: self.ablation.baseline_cfg,
            init_scale: self.init_scale,
            seed: self.seed,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
