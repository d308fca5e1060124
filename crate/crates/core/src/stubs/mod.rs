//! Deterministic stand-ins for the neural stages.
//!
//! Each stub is a pure function of its inputs (no clocks, no randomness), so
//! a pipeline built from stubs produces the same bytes on every run. They
//! are deliberately simple: colour flood fill instead of a video segmenter,
//! Jacobi diffusion instead of a video inpainter, a bounding-box skeleton
//! instead of a pose network, a similarity warp instead of a pose-driven
//! generator, and mean/variance matching instead of a harmonization network.

mod animate;
mod harmonize;
mod inpaint;
mod pose;
mod segment;

pub use animate::{anchor_segment, stub_animate};
pub use harmonize::{block_statistics, stub_harmonize_params, BlockStatistics, StatsHarmonizer, STATS_EPSILON};
pub use inpaint::{inpaint_linear, stub_inpaint, StubInpainter};
pub use pose::{skeleton_from_bbox, stub_pose};
pub use segment::{flood_fill, stub_segment_track};
