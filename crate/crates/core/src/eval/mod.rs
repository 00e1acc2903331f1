//! Metrics and the downstream segmentation protocol.

mod metrics;
mod protocol;
mod segmenter;
mod sheet;

pub use metrics::{auroc, diversity_proxy, localization_ratio, Localization};
pub use protocol::{
    crop_paste, downstream_protocol, DownstreamScores, LabeledImage, Metric, MetricReport, Overlap,
};
pub use segmenter::{train_segmenter, SegExample, Segmenter, SegmenterConfig, SegmenterTraining};
pub use sheet::{contact_sheet, mask_image};
