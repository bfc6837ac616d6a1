//! Synthetic datasets, task heads and metrics.

pub mod data;
pub mod heads;
pub mod metrics;

pub use data::{
    audio_aware_oracle, gen_classification_dataset, gen_segmentation_dataset,
    nearest_template_oracle, visual_only_oracle, Clip, ClipSpec, Dataset, SegSpec, Split,
};
pub use heads::{ClassificationHead, FpnHead, FPN_CHANNELS};
pub use metrics::{miou, segment_accuracy, MetricKind};
