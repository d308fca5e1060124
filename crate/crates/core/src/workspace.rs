//! On-disk workspace: ingested sequences, the manifest, and the artifact cache.
//!
//! ```text
//! <root>/manifest.json
//! <root>/seq/<name>/frame_%06d.png
//! <root>/cache/<ArtifactId>/...
//! ```
//!
//! Frames are immutable once written. Manifest updates take an exclusive
//! advisory lock on `<root>/.lock`, so concurrent writers serialize.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::artifact::ArtifactId;
use crate::error::{Error, Result};
use crate::frame::{Channels, Fps, Frame, FrameSequence};
use crate::mask::MaskSequence;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEQ_DIR: &str = "seq";
pub const CACHE_DIR: &str = "cache";

/// Working resolution of reference character images, `(width, height)`.
pub const DEFAULT_REFERENCE_DIMS: (u32, u32) = (1024, 768);
/// Working resolution of scene clips, `(width, height)`.
pub const DEFAULT_SCENE_DIMS: (u32, u32) = (1024, 2048);

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

fn parse_frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    (digits.len() == 6 && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

/// Sorted frame paths of `dir`, checked for a gap-free run from 000000.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut indexed = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(i) = entry.file_name().to_str().and_then(parse_frame_index) {
            indexed.push((i, entry.path()));
        }
    }
    if indexed.is_empty() {
        return Err(Error::Empty(dir.to_path_buf()));
    }
    indexed.sort();
    for (expected, (i, _)) in indexed.iter().enumerate() {
        if *i != expected {
            return Err(Error::Gap { missing: expected });
        }
    }
    Ok(indexed.into_iter().map(|(_, p)| p).collect())
}

/// Read a `frame_%06d.png` directory into a sequence. Source files are only read.
pub fn read_frame_dir(dir: &Path, fps: Fps) -> Result<FrameSequence> {
    let files = list_frame_files(dir)?;
    let frames = files
        .par_iter()
        .map(|p| Frame::read_png(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, fps)
}

/// Write a sequence as `frame_%06d.png` files into `dir` (created if needed).
pub fn write_frame_dir(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    seq.frames()
        .par_iter()
        .enumerate()
        .try_for_each(|(i, f)| f.write_png(&dir.join(frame_file_name(i))))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub frames: usize,
    pub dims: (u32, u32),
    pub channels: Channels,
    pub fps: Fps,
    pub id: ArtifactId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceManifest {
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub sequences: BTreeMap<String, SequenceEntry>,
}

/// Held while the manifest is being rewritten.
pub struct WorkspaceLock {
    file: File,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl Workspace {
    /// Open `root`, creating the layout and an empty manifest if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in [root.clone(), root.join(SEQ_DIR), root.join(CACHE_DIR)] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let ws = Self { root };
        if !ws.manifest_path().exists() {
            let _lock = ws.lock()?;
            if !ws.manifest_path().exists() {
                let created_at = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs());
                ws.save_manifest(&WorkspaceManifest {
                    created_at,
                    sequences: BTreeMap::new(),
                })?;
            }
        }
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn seq_dir(&self, name: &str) -> PathBuf {
        self.root.join(SEQ_DIR).join(name)
    }

    pub fn cache_root(&self) -> PathBuf {
        self.root.join(CACHE_DIR)
    }

    /// Workspace-relative form of `path`, with `/` separators.
    pub fn relative(&self, path: &Path) -> Result<String> {
        let rel = path
            .strip_prefix(&self.root)
            .map_err(|_| Error::Config(format!("{} is outside the workspace", path.display())))?;
        Ok(rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/"))
    }

    /// Resolve a workspace-relative path, refusing anything that escapes the root.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if p.is_absolute()
            || p.components()
                .any(|c| !matches!(c, std::path::Component::Normal(_)))
        {
            return Err(Error::ContractViolation(format!(
                "artifact path {rel:?} is not a plain workspace-relative path"
            )));
        }
        Ok(self.root.join(p))
    }

    pub fn lock(&self) -> Result<WorkspaceLock> {
        let path = self.root.join(".lock");
        let file = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.lock().map_err(|e| Error::io(&path, e))?;
        Ok(WorkspaceLock { file })
    }

    pub fn manifest(&self) -> Result<WorkspaceManifest> {
        let path = self.manifest_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save_manifest(&self, m: &WorkspaceManifest) -> Result<()> {
        let path = self.manifest_path();
        let tmp = self.root.join(".manifest.json.tmp");
        let mut text = serde_json::to_string_pretty(m)?;
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn record(&self, name: &str, seq: &FrameSequence) -> Result<()> {
        let _lock = self.lock()?;
        let mut m = self.manifest()?;
        m.sequences.insert(
            name.to_string(),
            SequenceEntry {
                frames: seq.len(),
                dims: seq.dims(),
                channels: seq.channels(),
                fps: seq.fps(),
                id: seq.id(),
            },
        );
        self.save_manifest(&m)
    }

    fn check_name(name: &str) -> Result<()> {
        if valid_name(name) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sequence name {name:?}")))
        }
    }

    /// Ingest a frame directory as sequence `name`.
    ///
    /// Frames are re-encoded into `seq/<name>/`; the source directory is
    /// never written to.
    pub fn ingest_frames(&self, name: &str, dir: &Path, expected_fps: Fps) -> Result<FrameSequence> {
        Self::check_name(name)?;
        let seq = read_frame_dir(dir, expected_fps)?;
        let target = self.seq_dir(name);
        let same_dir = match (dir.canonicalize(), target.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if !same_dir {
            self.write_sequence(name, &seq)?;
        } else {
            self.record(name, &seq)?;
        }
        debug!(name, frames = seq.len(), id = %seq.id(), "ingested");
        Ok(seq)
    }

    /// Write `seq` as named sequence `name`, replacing any previous contents.
    pub fn write_sequence(&self, name: &str, seq: &FrameSequence) -> Result<()> {
        Self::check_name(name)?;
        let target = self.seq_dir(name);
        let tmp = self.root.join(SEQ_DIR).join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        write_frame_dir(&tmp, seq)?;
        let _lock = self.lock()?;
        if target.exists() {
            fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        }
        fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        drop(_lock);
        self.record(name, seq)
    }

    pub fn read_sequence(&self, name: &str) -> Result<FrameSequence> {
        let m = self.manifest()?;
        let entry = m
            .sequences
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown sequence {name:?}")))?;
        read_frame_dir(&self.seq_dir(name), entry.fps)
    }

    pub fn sequence_entry(&self, name: &str) -> Result<Option<SequenceEntry>> {
        Ok(self.manifest()?.sequences.get(name).cloned())
    }

    /// Check every manifest entry against the files on disk.
    pub fn verify(&self) -> Result<()> {
        for (name, entry) in self.manifest()?.sequences {
            let files = list_frame_files(&self.seq_dir(&name))?;
            if files.len() != entry.frames {
                return Err(Error::Length {
                    expected: entry.frames,
                    actual: files.len(),
                });
            }
            for f in files {
                let frame = Frame::read_png(&f)?;
                if frame.dims() != entry.dims {
                    return Err(Error::dims(format!(
                        "{}: {:?}, manifest says {:?}",
                        f.display(),
                        frame.dims(),
                        entry.dims
                    )));
                }
            }
        }
        Ok(())
    }

    /// Store a mask sequence under its own id: `cache/<id>/masks.json`.
    pub fn put_masks(&self, masks: &MaskSequence) -> Result<PathBuf> {
        let dir = self.cache_root().join(masks.id().to_hex());
        let path = dir.join("masks.json");
        if !path.exists() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let tmp = dir.join(format!(".masks.json.tmp-{}", std::process::id()));
            fs::write(&tmp, masks.to_json()).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    }

    pub fn get_masks(&self, id: &ArtifactId) -> Result<Option<MaskSequence>> {
        let path = self.cache_root().join(id.to_hex()).join("masks.json");
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(MaskSequence::from_json(&text)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Run an external decoder, given as a shell command template with `{in}`
/// and `{out}` placeholders, to turn a video file into a frame directory.
pub fn decode_video(template: &str, video_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    for ph in ["{in}", "{out}"] {
        if !template.contains(ph) {
            return Err(Error::Config(format!("decoder template is missing {ph}")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cmd = template
        .replace("{in}", &shell_quote(&video_path.to_string_lossy()))
        .replace("{out}", &shell_quote(&out_dir.to_string_lossy()));
    let output = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::io("sh", e))?;
    if !output.status.success() {
        return Err(Error::Decoder {
            code: output.status.code(),
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    Ok(out_dir.to_path_buf())
}
