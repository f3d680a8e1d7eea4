//! The streaming runtime.

pub mod cache;
pub mod decode;
pub mod drift;
pub mod engine;
pub mod windower;

pub use cache::{cache_context, cache_insert, AHISCache, CachePolicy, ContextCache, UnboundedCache};
pub use decode::{decode_block, Decoder};
pub use drift::{identity_drift_probe, standard_policies, DriftCurve};
pub use engine::{
    block_noise, run_stream, stream_report, write_events_jsonl, write_stream_reports, ClockKind,
    PipelineMode, Stage, StageDelays, StageTiming, StreamConfig, StreamEvent, StreamOutput,
    StreamReport,
};
pub use windower::{window_audio, AudioWindow, AudioWindower, WindowSpec};
