//! Single-stage operations shared by the CLI subcommands and the HTTP API.

use std::fs;
use std::path::Path;

use recast_core::compositing::composite_sequence;
use recast_core::{ArtifactId, Error, FrameSequence, MaskSequence, Prompt, Result, Workspace};
use recast_engine::stages::{self, MaskInput, SeqInput};
use recast_engine::WorkerPool;

/// Scratch directory under the cache, removed on drop.
struct Scratch<'a> {
    ws: &'a Workspace,
    rel: String,
}

impl<'a> Scratch<'a> {
    fn new(ws: &'a Workspace, what: &str) -> Self {
        use std::sync::atomic::{AtomicU64, Ordering};
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let rel = format!(
            "cache/.{what}-{}-{}",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        );
        Self { ws, rel }
    }
}

impl Drop for Scratch<'_> {
    fn drop(&mut self) {
        if let Ok(p) = self.ws.resolve(&self.rel) {
            let _ = fs::remove_dir_all(p);
        }
    }
}

fn scene(ws: &Workspace, name: &str) -> Result<(String, FrameSequence)> {
    let seq = ws.read_sequence(name)?;
    Ok((ws.relative(&ws.seq_dir(name))?, seq))
}

pub fn masks(ws: &Workspace, id: &ArtifactId) -> Result<(String, MaskSequence)> {
    let m = ws
        .get_masks(id)?
        .ok_or_else(|| Error::Config(format!("unknown mask sequence {id}")))?;
    let rel = ws.relative(&ws.cache_root().join(id.to_hex()).join("masks.json"))?;
    Ok((rel, m))
}

/// Which phase an operation failed in; decides the exit code.
#[derive(Debug)]
pub enum OpError {
    Input(Error),
    Stage(&'static str, Error),
}

impl From<Error> for OpError {
    fn from(e: Error) -> Self {
        OpError::Input(e)
    }
}

impl std::fmt::Display for OpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OpError::Input(e) => write!(f, "{e}"),
            OpError::Stage(s, e) => write!(f, "stage {s} failed: {e}"),
        }
    }
}

fn in_stage<T>(stage: &'static str, r: Result<T>) -> std::result::Result<T, OpError> {
    r.map_err(|e| OpError::Stage(stage, e))
}

/// Track a prompt through `scene_name` and store the masks by id.
pub fn segment(
    ws: &Workspace,
    pool: &WorkerPool,
    scene_name: &str,
    prompt: &Prompt,
    tau: f64,
) -> std::result::Result<MaskSequence, OpError> {
    let (rel, seq) = scene(ws, scene_name)?;
    prompt.validate(seq.len(), seq.dims())?;
    let scratch = Scratch::new(ws, "segment");
    let masks = in_stage(
        "segment_track",
        stages::segment_track(pool, SeqInput { rel: &rel, seq: &seq }, prompt, tau, &scratch.rel),
    )?;
    ws.put_masks(&masks)?;
    Ok(masks)
}

pub fn remove(
    ws: &Workspace,
    pool: &WorkerPool,
    scene_name: &str,
    mask_id: &ArtifactId,
    iters: usize,
    output: &str,
) -> std::result::Result<ArtifactId, OpError> {
    let (rel, seq) = scene(ws, scene_name)?;
    let (mrel, m) = masks(ws, mask_id)?;
    let scratch = Scratch::new(ws, "remove");
    let plate = in_stage(
        "remove",
        stages::inpaint(
            pool,
            SeqInput { rel: &rel, seq: &seq },
            MaskInput { rel: &mrel, masks: &m },
            iters,
            &scratch.rel,
        ),
    )?;
    ws.write_sequence(output, &plate)?;
    Ok(plate.id())
}

/// Estimate poses from the tracked masks and animate `reference` onto them.
pub fn animate(
    ws: &Workspace,
    pool: &WorkerPool,
    scene_name: &str,
    mask_id: &ArtifactId,
    reference: &Path,
    output: &str,
) -> std::result::Result<ArtifactId, OpError> {
    let (rel, seq) = scene(ws, scene_name)?;
    let (mrel, m) = masks(ws, mask_id)?;
    let scratch = Scratch::new(ws, "animate");
    let scratch_dir = ws.resolve(&scratch.rel)?;
    fs::create_dir_all(&scratch_dir).map_err(|e| Error::Config(format!("{}: {e}", scratch_dir.display())))?;
    let image = recast_core::Frame::read_png(reference).map_err(|e| Error::Config(format!("reference: {e}")))?;
    recast_core::ReferenceCharacter::new(image.clone(), None)?;
    let ref_rel = format!("{}/reference.png", scratch.rel);
    image.write_png(&ws.resolve(&ref_rel)?)?;
    let poses = in_stage(
        "pose_estimate",
        stages::pose_estimate(
            pool,
            SeqInput { rel: &rel, seq: &seq },
            MaskInput { rel: &mrel, masks: &m },
            &format!("{}/pose", scratch.rel),
        ),
    )?;
    let poses_rel = format!("{}/poses.json", scratch.rel);
    fs::write(ws.resolve(&poses_rel)?, poses.to_json()).map_err(|e| Error::Config(e.to_string()))?;
    let fg = in_stage(
        "animate",
        stages::animate(
            pool,
            &ref_rel,
            None,
            &poses_rel,
            seq.len(),
            seq.dims(),
            seq.fps(),
            &format!("{}/animate", scratch.rel),
        ),
    )?;
    ws.write_sequence(output, &fg)?;
    Ok(fg.id())
}

/// Alpha-composite `foreground` (RGBA) over `background`.
pub fn compose(
    ws: &Workspace,
    background: &str,
    foreground: &str,
    output: &str,
) -> std::result::Result<ArtifactId, OpError> {
    let bg = ws.read_sequence(background)?;
    let fg = ws.read_sequence(foreground)?;
    let out = in_stage("composite", composite_sequence::<f64>(&fg, &bg))?;
    ws.write_sequence(output, &out)?;
    Ok(out.id())
}
