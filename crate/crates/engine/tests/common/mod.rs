#![allow(dead_code)]

use std::path::Path;

use recast_core::protocol::{WorkerSpec, WorkerStage};
use recast_core::{ArtifactId, BBox, Fps, Frame, FrameSequence, Mask, MaskSequence, Prompt, Workspace};
use recast_engine::{EventKind, PipelineConfig, RunReport, StageKind};

pub const RED: [u8; 3] = [240, 8, 8];
pub const N_FRAMES: usize = 16;
pub const SIZE: u32 = 128;

/// Red character box in frame `k`: 24×48, moving 2 px per frame.
pub fn red_box(k: usize) -> BBox {
    let x0 = 20 + 2 * k as u32;
    BBox {
        x_min: x0,
        y_min: 40,
        x_max: x0 + 23,
        y_max: 87,
    }
}

pub fn red_mask(k: usize, size: u32) -> Mask {
    let b = red_box(k);
    Mask::from_fn(size, size, |x, y| b.contains(x, y))
}

/// Integer-only texture, far from red in RGB.
pub fn background(x: u32, y: u32) -> [u8; 3] {
    [
        70 + ((x * 7 + y * 3) % 41) as u8,
        110 + ((x * 3 + y * 5) % 53) as u8,
        90 + ((x * 5 + y * 11) % 37) as u8,
    ]
}

pub fn scene(n: usize, size: u32) -> FrameSequence {
    let frames = (0..n)
        .map(|k| {
            let b = red_box(k);
            let mut f = Frame::filled(size, size, &[0, 0, 0]);
            for y in 0..size {
                for x in 0..size {
                    let px = if b.contains(x, y) { RED } else { background(x, y) };
                    f.pixel_mut(x, y).copy_from_slice(&px);
                }
            }
            f
        })
        .collect();
    FrameSequence::new(frames, Fps::new(24, 1)).unwrap()
}

/// Blue character, 8 wide and 48 tall, textured so its colour statistics
/// are not degenerate.
pub fn reference_image() -> Frame {
    let mut f = Frame::filled(32, 64, &[0, 0, 0, 0]);
    for y in 8..56u32 {
        for x in 12..20u32 {
            let px = [20 + (y % 7 * 5) as u8, 40 + (x % 4 * 9) as u8, 190 + ((x + y) % 5 * 7) as u8, 255];
            f.pixel_mut(x, y).copy_from_slice(&px);
        }
    }
    f
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub ws: Workspace,
    pub config: PipelineConfig,
}

pub fn fixture_with(n: usize, size: u32) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path().join("ws")).unwrap();
    ws.write_sequence("scene", &scene(n, size)).unwrap();
    reference_image().write_png(&ws.root().join("reference.png")).unwrap();
    let b = red_box(0);
    let prompt = Prompt::point(0, (b.x_min + b.x_max) as f64 / 2.0, (b.y_min + b.y_max) as f64 / 2.0);
    let config = PipelineConfig::with_stubs("scene", prompt, "reference.png", "result");
    Fixture { dir, ws, config }
}

pub fn fixture() -> Fixture {
    fixture_with(N_FRAMES, SIZE)
}

pub fn stub_worker_command(extra: &[&str]) -> Vec<String> {
    let mut v = vec![env!("CARGO_BIN_EXE_recast-stub-worker").to_string()];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

pub fn read_frames(ws: &Workspace, rel: &str) -> FrameSequence {
    recast_core::workspace::read_frame_dir(&ws.resolve(rel).unwrap(), Fps::new(24, 1)).unwrap()
}

pub fn exists(p: &Path) -> bool {
    p.exists()
}

/// Cache key a report recorded for `stage`, executed or hit.
pub fn stage_key(report: &RunReport, stage: StageKind) -> ArtifactId {
    report
        .events
        .iter()
        .find(|e| e.stage == stage && matches!(e.event, EventKind::StageDone | EventKind::CacheHit))
        .and_then(|e| e.key)
        .unwrap_or_else(|| panic!("{stage} did not complete"))
}

pub fn stage_frames(ws: &Workspace, report: &RunReport, stage: StageKind) -> FrameSequence {
    read_frames(ws, &format!("cache/{}/frames", stage_key(report, stage)))
}

pub fn stage_masks(ws: &Workspace, report: &RunReport) -> MaskSequence {
    let p = ws
        .resolve(&format!("cache/{}/masks.json", stage_key(report, StageKind::SegmentTrack)))
        .unwrap();
    MaskSequence::from_json(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Route `stage` to a subprocess stub worker started with `extra` flags.
pub fn with_worker(config: &mut PipelineConfig, stage: WorkerStage, extra: &[&str], timeout: u64) {
    let mut spec = WorkerSpec::subprocess(stub_worker_command(extra));
    spec.timeout = timeout;
    config.workers.insert(stage, spec);
}
