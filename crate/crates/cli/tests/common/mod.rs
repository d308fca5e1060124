#![allow(dead_code)]

use std::path::{Path, PathBuf};

use recast_core::workspace::write_frame_dir;
use recast_core::{Fps, Frame, FrameSequence, Prompt, Workspace};
use recast_engine::PipelineConfig;

pub const N: usize = 8;
pub const SIZE: u32 = 128;

/// Red box 24×48 moving right over a textured background.
pub fn scene() -> FrameSequence {
    let frames = (0..N as u32)
        .map(|k| {
            let mut f = Frame::filled(SIZE, SIZE, &[0, 0, 0]);
            for y in 0..SIZE {
                for x in 0..SIZE {
                    let inside = (20 + 2 * k..44 + 2 * k).contains(&x) && (40..88).contains(&y);
                    let px = if inside {
                        [240, 8, 8]
                    } else {
                        [70 + ((x * 7 + y * 3) % 41) as u8, 110 + ((x * 3 + y * 5) % 53) as u8, 90]
                    };
                    f.pixel_mut(x, y).copy_from_slice(&px);
                }
            }
            f
        })
        .collect();
    FrameSequence::new(frames, Fps::new(24, 1)).unwrap()
}

pub fn reference() -> Frame {
    let mut f = Frame::filled(32, 64, &[0, 0, 0, 0]);
    for y in 8..56u32 {
        for x in 12..20u32 {
            f.pixel_mut(x, y).copy_from_slice(&[20 + (y % 7 * 5) as u8, 60, 200, 255]);
        }
    }
    f
}

pub fn prompt() -> Prompt {
    Prompt::point(0, 31.5, 63.5)
}

pub struct Setup {
    pub dir: tempfile::TempDir,
    /// Workspace root, not yet ingested into.
    pub root: PathBuf,
    /// Loose frame directory ready for `ingest --frames`.
    pub frames: PathBuf,
    pub config: PipelineConfig,
}

pub fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ws");
    let frames = dir.path().join("frames");
    write_frame_dir(&frames, &scene()).unwrap();
    std::fs::create_dir_all(&root).unwrap();
    reference().write_png(&root.join("reference.png")).unwrap();
    let config = PipelineConfig::with_stubs("scene", prompt(), "reference.png", "result");
    Setup {
        dir,
        root,
        frames,
        config,
    }
}

/// A workspace with the scene already ingested.
pub fn ingested() -> (Setup, Workspace) {
    let s = setup();
    let ws = Workspace::open(&s.root).unwrap();
    ws.ingest_frames("scene", &s.frames, Fps::new(24, 1)).unwrap();
    (s, ws)
}

pub fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}
