//! Evaluation protocols: landmark metrics, matching, few-shot and scale
//! sweeps, NMF part discovery, reports and plots.

mod fewshot;
mod matching;
mod metrics;
pub mod nmf;
pub mod plot;
mod report;
mod scale;

pub use fewshot::{fewshot_sweep, fewshot_sweep_features, write_fewshot_csv, FewshotResult, FewshotRow, FewshotRun};
pub use matching::{eval_matching, write_matching_overlays, MatchingReport, PairRecord};
pub use metrics::{iod_error, mean_iod, pck, PCK_THRESHOLD};
pub use nmf::{nmf, nmf_parts, NmfConfig, NmfParts, NmfResult, ProjectedExtractor};
pub use report::Summary;
pub use scale::{scale_sweep, ScaleCurve, ScaleSweepConfig};
