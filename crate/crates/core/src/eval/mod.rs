//! Evaluation: Gaussian Fréchet distance, audio–motion sync, pooled z-score
//! percentiles and CSV reports.

pub mod gaussian;
pub mod percentile;
pub mod pushforward;
pub mod report;
pub mod sync;

pub use gaussian::{fit_gaussian, gaussian_frechet, sqrtm_psd, GaussianSummary};
pub use percentile::{zscore_percentiles, zscore_percentiles_with, PercentileMapping, PercentileReport};
pub use pushforward::{
    affine_pushforward, frame_marginal, frechet_to_world, generator_summary, generator_summary_mc,
    mean_sync_confidence, world_summary,
};
pub use report::{read_report, report_to_string, write_report, ReportRow};
pub use sync::{audio_envelope, max_sync_offset, motion_series, sync_metric, SyncResult};
