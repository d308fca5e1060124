//! Core types and pure operations for the recast character-replacement engine.
//!
//! Pixel math is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix it to `f64`, which is what the pipeline uses.

pub mod artifact;
pub mod color;
pub mod compositing;
pub mod edge_refine;
pub mod error;
pub mod frame;
pub mod harmonization;
pub mod mask;
pub mod morphology;
pub mod pose;
pub mod prompt;
pub mod protocol;
pub mod scalar;
pub mod stubs;
pub mod workspace;

pub use artifact::{artifact_hash, ArtifactHasher, ArtifactId};
pub use compositing::{composite_over, composite_sequence};
pub use edge_refine::{edge_band_sequence, refine_edges, EdgeBandConfig, InpaintWorker};
pub use error::{Error, Result};
pub use frame::{Channels, Fps, Frame, FrameSequence, ReferenceCharacter};
pub use harmonization::{
    apply_pct, blend_params, harmonize_sequence, partition_blocks, schedule_params, upsample_grid,
    BlockParams, BlockSchedule, HarmonizeWorker, IdentityHarmonizer,
};
pub use mask::{mask_bbox, mask_iou, rle_decode, rle_encode, BBox, Mask, MaskSequence, RleMask};
pub use morphology::{dilate, edge_band, erode};
pub use pose::{Joint, Keypoint, PoseSequence, Skeleton};
pub use prompt::{PointLabel, Prompt, PromptBox, PromptKind, PromptPoint};
pub use scalar::Scalar;
pub use workspace::Workspace;

pub type LinearColor = color::LinearColor<f64>;
pub type AffineColor = harmonization::AffineColor<f64>;
pub type ColorTransformGrid = harmonization::ColorTransformGrid<f64>;
pub type ParamField = harmonization::ParamField<f64>;

/// Bumped whenever stage semantics change; part of every cache key.
pub const ENGINE_VERSION: &str = concat!("recast-", env!("CARGO_PKG_VERSION"), "+semantics.1");
