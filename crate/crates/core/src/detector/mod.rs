//! The two-stage detector: box geometry, backbone, RoI Align, proposal
//! sampling, detection head and non-maximum suppression.

pub mod boxes;
pub mod detection;
pub mod network;
pub mod roi_align;
pub mod sampler;

pub use boxes::{decode_deltas, encode_deltas, iou, BBox};
pub use detection::{nms, read_detections, write_detections, Detection};
pub use network::{
    backbone_forward, detection_head_forward, init_backbone, init_head, HeadOutput,
    BACKBONE_STRIDE,
};
pub use roi_align::{roi_align, roi_align_graph, RoiAlignConfig, RoiFeatures};
pub use sampler::{grid_proposals, sample_proposals, Label, Proposal, SampledProposals, SamplerConfig};
