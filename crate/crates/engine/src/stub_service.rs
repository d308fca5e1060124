//! The deterministic stubs behind the wire contract.
//!
//! Used in-process by the builtin transport and out-of-process by the
//! `recast-stub-worker` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use recast_core::frame::Fps;
use recast_core::harmonization::{BlockSchedule, ColorTransformGrid};
use recast_core::protocol::{names, StageRequest, StageResponse, WorkerStage};
use recast_core::stubs::{stub_animate, stub_harmonize_params, stub_inpaint, stub_pose, stub_segment_track};
use recast_core::workspace::{read_frame_dir, write_frame_dir};
use recast_core::{Error, Frame, FrameSequence, Keypoint, MaskSequence, PoseSequence, Prompt, ReferenceCharacter, Result, Workspace};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU: f64 = 30.0;
pub const DEFAULT_INPAINT_ITERS: usize = 200;
pub const DEFAULT_RING_WIDTH: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    pub prompt: Prompt,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintParams {
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateParams {
    pub scene_dims: (u32, u32),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<Keypoint>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonizeParams {
    pub ring_width: u32,
    pub stride: u32,
    pub blocks: Vec<(usize, usize)>,
}

/// Placeholder rate for sequences read back from frame directories, which
/// do not record one. Identity never depends on it.
const DIR_FPS: (u32, u32) = (1, 1);

pub(crate) fn params<T: DeserializeOwned>(req: &StageRequest) -> Result<T> {
    serde_json::from_value(serde_json::Value::Object(req.params.clone()))
        .map_err(|e| Error::Config(format!("{} params: {e}", req.stage)))
}

struct Ctx<'a> {
    ws: &'a Workspace,
    req: &'a StageRequest,
    out: PathBuf,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> Result<PathBuf> {
        let rel = self
            .req
            .artifacts
            .get(name)
            .ok_or_else(|| Error::Config(format!("{} request lacks artifact {name:?}", self.req.stage)))?;
        self.ws.resolve(rel)
    }

    fn frames(&self) -> Result<FrameSequence> {
        read_frame_dir(&self.path(names::FRAMES)?, Fps::new(DIR_FPS.0, DIR_FPS.1))
    }

    fn masks(&self) -> Result<MaskSequence> {
        let p = self.path(names::MASKS)?;
        MaskSequence::from_json(&read_text(&p)?)
    }

    fn output(&self, name: &str, file: &str) -> Result<(String, PathBuf)> {
        let p = self.out.join(file);
        Ok((name.to_string(), p))
    }
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

/// Serve one request. Failures become error responses, never panics.
pub fn handle(ws: &Workspace, req: &StageRequest) -> StageResponse {
    match run(ws, req) {
        Ok(artifacts) => StageResponse::ok(&req.request_id, artifacts),
        Err(e) => StageResponse::error(&req.request_id, e.code(), e.to_string()),
    }
}

fn run(ws: &Workspace, req: &StageRequest) -> Result<BTreeMap<String, String>> {
    let out_rel = req
        .artifacts
        .get(names::OUT)
        .ok_or_else(|| Error::Config("request lacks an output directory".into()))?;
    let out = ws.resolve(out_rel)?;
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let cx = Ctx { ws, req, out };
    let (name, path) = match req.stage {
        WorkerStage::SegmentTrack => {
            let p: SegmentParams = params(req)?;
            let masks = stub_segment_track(&cx.frames()?, &p.prompt, p.tau)?;
            let (name, path) = cx.output(names::MASKS, "masks.json")?;
            write_text(&path, &masks.to_json())?;
            (name, path)
        }
        WorkerStage::Inpaint => {
            let p: InpaintParams = params(req)?;
            let frames = stub_inpaint(&cx.frames()?, &cx.masks()?, p.iters)?;
            let (name, path) = cx.output(names::FRAMES, "frames")?;
            write_frame_dir(&path, &frames)?;
            (name, path)
        }
        WorkerStage::PoseEstimate => {
            let poses = stub_pose(&cx.masks()?);
            let (name, path) = cx.output(names::POSES, "poses.json")?;
            write_text(&path, &poses.to_json())?;
            (name, path)
        }
        WorkerStage::Animate => {
            let p: AnimateParams = params(req)?;
            let image = Frame::read_png(&cx.path(names::REFERENCE)?)?;
            let reference = ReferenceCharacter::new(image, p.anchor)?;
            let poses = PoseSequence::from_json(&read_text(&cx.path(names::POSES)?)?)?;
            let frames = stub_animate(&reference, &poses, p.scene_dims, Fps::new(DIR_FPS.0, DIR_FPS.1))?;
            let (name, path) = cx.output(names::FRAMES, "frames")?;
            write_frame_dir(&path, &frames)?;
            (name, path)
        }
        WorkerStage::HarmonizeParams => {
            let p: HarmonizeParams = params(req)?;
            let frames = cx.frames()?;
            if p.blocks.iter().any(|&(s, e)| s >= e || e > frames.len()) {
                return Err(Error::Config(format!("blocks {:?} do not fit {} frames", p.blocks, frames.len())));
            }
            let schedule = BlockSchedule {
                entries: p.blocks,
                block_len: 0,
                overlap: 0,
            };
            let grids: Vec<ColorTransformGrid<f64>> =
                stub_harmonize_params(&frames, &cx.masks()?, p.ring_width, p.stride, &schedule)?;
            let (name, path) = cx.output(names::GRIDS, "grids.json")?;
            write_text(&path, &serde_json::to_string(&grids)?)?;
            (name, path)
        }
    };
    Ok(BTreeMap::from([(name, ws.relative(&path)?)]))
}
