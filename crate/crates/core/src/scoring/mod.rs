//! Anomaly scoring and ranking metrics.

mod auroc;
mod eval;
mod gms;

pub use auroc::{auroc, pixel_auroc};
pub use eval::{evaluate, export_anomaly_map, spearman, EvalOptions, EvalReport, ImageRecord, MaskStats, MaskingMode};
pub use gms::{
    box_filter, default_levels, default_window, gms_map, image_anomaly_score, msgms_anomaly_map, msgms_loss_with_grad,
    AnomalyMap, DEFAULT_GMS_C,
};
