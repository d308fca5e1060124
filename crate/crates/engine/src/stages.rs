//! Engine side of each worker stage: build the request, invoke, and accept
//! the reply only after checking it against what was asked for.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use recast_core::edge_refine::merge_through_mask;
use recast_core::harmonization::{BlockSchedule, ColorTransformGrid};
use recast_core::pose::validate_skeleton;
use recast_core::protocol::{names, StageRequest, WorkerStage, PROTOCOL_VERSION};
use recast_core::workspace::read_frame_dir;
use recast_core::{
    ArtifactHasher, ArtifactId, Channels, Error, Fps, FrameSequence, Keypoint, MaskSequence, PoseSequence, Prompt,
    Result,
};
use serde::Serialize;

use crate::stub_service::{AnimateParams, HarmonizeParams, InpaintParams, SegmentParams};
use crate::worker::WorkerPool;

static REQUEST_SEQ: AtomicU64 = AtomicU64::new(0);

fn next_request_id(stage: WorkerStage) -> String {
    format!(
        "{stage}-{}-{}",
        std::process::id(),
        REQUEST_SEQ.fetch_add(1, Ordering::Relaxed)
    )
}

fn violation(what: &str, e: Error) -> Error {
    match e {
        e @ Error::ContractViolation(_) => e,
        other => Error::ContractViolation(format!("{what}: {other}")),
    }
}

/// Hash of a file, or of every file in a directory by name, to notice
/// workers that write into their inputs.
pub fn fingerprint(path: &Path) -> Result<ArtifactId> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut h = ArtifactHasher::new();
    if path.is_dir() {
        let mut entries = fs::read_dir(path)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        entries.sort();
        for p in entries {
            h.update_field(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
            h.update_field(&fs::read(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?);
        }
    } else {
        h.update_field(&fs::read(path).map_err(io)?);
    }
    Ok(h.finish())
}

/// One worker call. Inputs are workspace-relative paths; the worker must
/// write only below `out`.
pub struct Call<'a> {
    pool: &'a WorkerPool,
    stage: WorkerStage,
    params: serde_json::Map<String, serde_json::Value>,
    inputs: BTreeMap<String, String>,
    out: String,
}

impl<'a> Call<'a> {
    pub fn new(pool: &'a WorkerPool, stage: WorkerStage, params: &impl Serialize, out: &str) -> Result<Self> {
        let params = match serde_json::to_value(params)? {
            serde_json::Value::Object(m) => m,
            other => return Err(Error::Config(format!("stage params must be an object, got {other}"))),
        };
        Ok(Self {
            pool,
            stage,
            params,
            inputs: BTreeMap::new(),
            out: out.trim_end_matches('/').to_string(),
        })
    }

    pub fn input(mut self, name: &str, rel: &str) -> Self {
        self.inputs.insert(name.to_string(), rel.to_string());
        self
    }

    /// Invoke and return the absolute paths of the `expected` outputs.
    pub fn run(self, expected: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
        let ws = self.pool.workspace();
        let mut before = Vec::new();
        for rel in self.inputs.values() {
            let p = ws.resolve(rel)?;
            before.push((rel.clone(), fingerprint(&p)?));
        }
        let out_abs = ws.resolve(&self.out)?;
        fs::create_dir_all(&out_abs).map_err(|e| Error::Io {
            path: out_abs.clone(),
            source: e,
        })?;
        let mut artifacts = self.inputs.clone();
        artifacts.insert(names::OUT.to_string(), self.out.clone());
        let req = StageRequest {
            protocol_version: PROTOCOL_VERSION,
            request_id: next_request_id(self.stage),
            stage: self.stage,
            params: self.params,
            artifacts,
        };
        let returned = self.pool.invoke(&req)?.into_artifacts(&req)?;

        for (rel, id) in before {
            if fingerprint(&ws.resolve(&rel)?)? != id {
                return Err(Error::ContractViolation(format!(
                    "{} worker modified its input {rel}",
                    self.stage
                )));
            }
        }
        let mut paths = BTreeMap::new();
        for (name, rel) in &returned {
            let p = ws
                .resolve(rel)
                .map_err(|e| violation(&format!("{} output {name}", self.stage), e))?;
            if !Path::new(rel).starts_with(&self.out) {
                return Err(Error::ContractViolation(format!(
                    "{} output {name} at {rel} lies outside its output directory {}",
                    self.stage, self.out
                )));
            }
            paths.insert(name.clone(), p);
        }
        for name in expected {
            match paths.get(*name) {
                Some(p) if p.exists() => {}
                Some(p) => {
                    return Err(Error::ContractViolation(format!(
                        "{} output {name} does not exist at {}",
                        self.stage,
                        p.display()
                    )))
                }
                None => {
                    return Err(Error::ContractViolation(format!(
                        "{} response lacks artifact {name:?}",
                        self.stage
                    )))
                }
            }
        }
        Ok(paths)
    }
}

fn read_json_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

/// A frame sequence already in the workspace.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'s> {
    pub rel: &'s str,
    pub seq: &'s FrameSequence,
}

/// A mask sequence already in the workspace.
#[derive(Debug, Clone, Copy)]
pub struct MaskInput<'s> {
    pub rel: &'s str,
    pub masks: &'s MaskSequence,
}

pub fn segment_track(pool: &WorkerPool, scene: SeqInput, prompt: &Prompt, tau: f64, out: &str) -> Result<MaskSequence> {
    prompt.validate(scene.seq.len(), scene.seq.dims())?;
    let params = SegmentParams {
        prompt: prompt.clone(),
        tau,
    };
    let got = Call::new(pool, WorkerStage::SegmentTrack, &params, out)?
        .input(names::FRAMES, scene.rel)
        .run(&[names::MASKS])?;
    let accept = || -> Result<MaskSequence> {
        let masks = MaskSequence::from_json(&read_json_text(&got[names::MASKS])?)?;
        masks.check_against(scene.seq.len(), scene.seq.dims())?;
        Ok(masks)
    };
    accept().map_err(|e| violation("segment_track masks", e))
}

/// Inpaint `frames` inside `masks`. Changes outside the masks are refused.
pub fn inpaint(pool: &WorkerPool, frames: SeqInput, masks: MaskInput, iters: usize, out: &str) -> Result<FrameSequence> {
    masks.masks.check_against(frames.seq.len(), frames.seq.dims())?;
    let got = Call::new(pool, WorkerStage::Inpaint, &InpaintParams { iters }, out)?
        .input(names::FRAMES, frames.rel)
        .input(names::MASKS, masks.rel)
        .run(&[names::FRAMES])?;
    let raw = read_frame_dir(&got[names::FRAMES], frames.seq.fps()).map_err(|e| violation("inpaint frames", e))?;
    merge_through_mask(frames.seq, &raw, masks.masks)
}

pub fn pose_estimate(pool: &WorkerPool, frames: SeqInput, masks: MaskInput, out: &str) -> Result<PoseSequence> {
    let got = Call::new(pool, WorkerStage::PoseEstimate, &serde_json::json!({}), out)?
        .input(names::FRAMES, frames.rel)
        .input(names::MASKS, masks.rel)
        .run(&[names::POSES])?;
    let accept = || -> Result<PoseSequence> {
        let poses = PoseSequence::from_json(&read_json_text(&got[names::POSES])?)?;
        if poses.len() != frames.seq.len() {
            return Err(Error::Length {
                expected: frames.seq.len(),
                actual: poses.len(),
            });
        }
        if poses.dims != frames.seq.dims() {
            return Err(Error::dims(format!(
                "poses for {:?}, clip is {:?}",
                poses.dims,
                frames.seq.dims()
            )));
        }
        for kps in &poses.frames {
            validate_skeleton(kps, poses.dims)?;
        }
        Ok(poses)
    };
    accept().map_err(|e| violation("pose_estimate poses", e))
}

pub fn animate(
    pool: &WorkerPool,
    reference_rel: &str,
    anchor: Option<&[Keypoint]>,
    poses_rel: &str,
    n_frames: usize,
    scene_dims: (u32, u32),
    fps: Fps,
    out: &str,
) -> Result<FrameSequence> {
    let params = AnimateParams {
        scene_dims,
        anchor: anchor.map(<[Keypoint]>::to_vec),
    };
    let got = Call::new(pool, WorkerStage::Animate, &params, out)?
        .input(names::REFERENCE, reference_rel)
        .input(names::POSES, poses_rel)
        .run(&[names::FRAMES])?;
    let accept = || -> Result<FrameSequence> {
        let seq = read_frame_dir(&got[names::FRAMES], fps)?;
        if seq.len() != n_frames {
            return Err(Error::Length {
                expected: n_frames,
                actual: seq.len(),
            });
        }
        if seq.dims() != scene_dims || seq.channels() != Channels::Rgba {
            return Err(Error::dims(format!(
                "animate must return {scene_dims:?} RGBA frames, got {:?} {:?}",
                seq.dims(),
                seq.channels()
            )));
        }
        Ok(seq)
    };
    accept().map_err(|e| violation("animate frames", e))
}

pub fn harmonize_params(
    pool: &WorkerPool,
    composite: SeqInput,
    masks: MaskInput,
    ring_width: u32,
    stride: u32,
    schedule: &BlockSchedule,
    out: &str,
) -> Result<Vec<ColorTransformGrid<f64>>> {
    let params = HarmonizeParams {
        ring_width,
        stride,
        blocks: schedule.entries.clone(),
    };
    let got = Call::new(pool, WorkerStage::HarmonizeParams, &params, out)?
        .input(names::FRAMES, composite.rel)
        .input(names::MASKS, masks.rel)
        .run(&[names::GRIDS])?;
    let accept = || -> Result<Vec<ColorTransformGrid<f64>>> {
        let grids: Vec<ColorTransformGrid<f64>> = serde_json::from_str(&read_json_text(&got[names::GRIDS])?)?;
        if grids.len() != schedule.entries.len() {
            return Err(Error::Length {
                expected: schedule.entries.len(),
                actual: grids.len(),
            });
        }
        for g in &grids {
            if !g.covers(composite.seq.dims()) {
                return Err(Error::dims(format!(
                    "grid {:?} at stride {} does not cover {:?}",
                    g.size(),
                    g.stride(),
                    composite.seq.dims()
                )));
            }
            g.check_finite()?;
        }
        Ok(grids)
    };
    accept().map_err(|e| violation("harmonize_params grids", e))
}
