//! The stage DAG: planning, content-addressed caching, execution and resume.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::Instant;

use recast_core::compositing::composite_sequence;
use recast_core::harmonization::{ColorTransformGrid, DEFAULT_BLOCK_LEN, DEFAULT_OVERLAP, DEFAULT_STRIDE};
use recast_core::protocol::{WorkerSpec, WorkerStage};
use recast_core::stubs::STATS_EPSILON;
use recast_core::workspace::{read_frame_dir, write_frame_dir, SequenceEntry};
use recast_core::{
    edge_band_sequence, harmonize_sequence, partition_blocks, ArtifactHasher, ArtifactId, BlockParams, EdgeBandConfig,
    Error, Fps, Frame, FrameSequence, HarmonizeWorker, IdentityHarmonizer, Keypoint, Mask, MaskSequence, Prompt,
    ReferenceCharacter, Result, Workspace, ENGINE_VERSION,
};
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::runlog::{default_log_path, EventKind, Observer, RunEvent, RunLog, SharedLog};
use crate::stages::{self, MaskInput, SeqInput};
use crate::stub_service::{DEFAULT_INPAINT_ITERS, DEFAULT_RING_WIDTH, DEFAULT_TAU};
use crate::worker::WorkerPool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    SegmentTrack,
    Remove,
    PoseEstimate,
    Animate,
    Composite,
    Harmonize,
    EdgeRefine,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::SegmentTrack,
        StageKind::Remove,
        StageKind::PoseEstimate,
        StageKind::Animate,
        StageKind::Composite,
        StageKind::Harmonize,
        StageKind::EdgeRefine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::SegmentTrack => "segment_track",
            StageKind::Remove => "remove",
            StageKind::PoseEstimate => "pose_estimate",
            StageKind::Animate => "animate",
            StageKind::Composite => "composite",
            StageKind::Harmonize => "harmonize",
            StageKind::EdgeRefine => "edge_refine",
        }
    }

    fn primary_output(self) -> &'static str {
        match self {
            StageKind::SegmentTrack => "masks.json",
            StageKind::PoseEstimate => "poses.json",
            _ => "frames",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizeConfig {
    pub block_len: usize,
    pub overlap: usize,
    pub stride: u32,
    pub ring_width: u32,
    /// Use identity grids instead of asking a worker.
    pub identity: bool,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            block_len: DEFAULT_BLOCK_LEN,
            overlap: DEFAULT_OVERLAP,
            stride: DEFAULT_STRIDE,
            ring_width: DEFAULT_RING_WIDTH,
            identity: false,
        }
    }
}

fn yes() -> bool {
    true
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_iters() -> usize {
    DEFAULT_INPAINT_ITERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Name of an ingested sequence.
    pub scene: String,
    pub prompt: Prompt,
    /// RGBA PNG, relative to the workspace root unless absolute.
    pub reference: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_anchor: Option<Vec<Keypoint>>,
    pub workers: BTreeMap<WorkerStage, WorkerSpec>,
    #[serde(default)]
    pub edge: EdgeBandConfig,
    #[serde(default)]
    pub harmonize: HarmonizeConfig,
    #[serde(default = "yes")]
    pub removal_enabled: bool,
    #[serde(default = "default_tau")]
    pub segment_tau: f64,
    #[serde(default = "default_iters")]
    pub inpaint_iters: usize,
    pub output: String,
}

impl PipelineConfig {
    /// A config with every stage served by the in-process stubs.
    pub fn with_stubs(scene: &str, prompt: Prompt, reference: impl Into<PathBuf>, output: &str) -> Self {
        Self {
            scene: scene.to_string(),
            prompt,
            reference: reference.into(),
            reference_anchor: None,
            workers: WorkerStage::ALL.into_iter().map(|s| (s, WorkerSpec::builtin())).collect(),
            edge: EdgeBandConfig::default(),
            harmonize: HarmonizeConfig::default(),
            removal_enabled: true,
            segment_tau: DEFAULT_TAU,
            inpaint_iters: DEFAULT_INPAINT_ITERS,
            output: output.to_string(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn required_workers(&self) -> Vec<WorkerStage> {
        let mut v = vec![
            WorkerStage::SegmentTrack,
            WorkerStage::PoseEstimate,
            WorkerStage::Animate,
            WorkerStage::Inpaint,
        ];
        if !self.harmonize.identity {
            v.push(WorkerStage::HarmonizeParams);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        for stage in self.required_workers() {
            let spec = self
                .workers
                .get(&stage)
                .ok_or_else(|| Error::Config(format!("no worker configured for stage {stage}")))?;
            spec.validate()?;
        }
        let h = &self.harmonize;
        if h.block_len == 0 || h.overlap >= h.block_len {
            return Err(Error::Config(format!(
                "harmonize overlap ({}) must be smaller than block_len ({})",
                h.overlap, h.block_len
            )));
        }
        if h.stride == 0 {
            return Err(Error::Config("harmonize stride must be positive".into()));
        }
        self.edge.validate()?;
        if !(self.segment_tau.is_finite() && self.segment_tau >= 0.0) {
            return Err(Error::Config("segment_tau must be a non-negative number".into()));
        }
        if self.output.is_empty() || self.output == self.scene {
            return Err(Error::Config("output must name a new sequence".into()));
        }
        Ok(())
    }
}

/// Where a node's input comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum NodeInput {
    /// An artifact that exists before the run, such as the scene.
    Artifact { name: String, id: ArtifactId },
    /// The output of another node.
    Node { stage: StageKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub stage: StageKind,
    pub params: serde_json::Value,
    pub params_digest: ArtifactId,
    pub inputs: Vec<NodeInput>,
}

impl PlanNode {
    pub fn new(stage: StageKind, params: serde_json::Value, inputs: Vec<NodeInput>) -> Self {
        let params_digest = ArtifactId::of(&canonical_params(&params));
        Self {
            stage,
            params,
            params_digest,
            inputs,
        }
    }
}

/// Resolved facts about the run that every node needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanContext {
    pub config: PipelineConfig,
    pub scene: SequenceEntry,
    pub scene_rel: String,
    pub reference_rel: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    pub nodes: Vec<PlanNode>,
    /// `(dependency, dependent)` node indices.
    pub edges: Vec<(usize, usize)>,
    pub context: PlanContext,
}

impl StagePlan {
    /// Build and validate a plan from its nodes.
    pub fn new(nodes: Vec<PlanNode>, context: PlanContext) -> Result<Self> {
        let index: HashMap<StageKind, usize> = nodes.iter().enumerate().map(|(i, n)| (n.stage, i)).collect();
        if index.len() != nodes.len() {
            return Err(Error::Config("plan lists a stage twice".into()));
        }
        let mut edges = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            for input in &n.inputs {
                if let NodeInput::Node { stage } = input {
                    let j = *index
                        .get(stage)
                        .ok_or_else(|| Error::Config(format!("{} depends on absent stage {stage}", n.stage)))?;
                    edges.push((j, i));
                }
            }
        }
        let plan = Self { nodes, edges, context };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.topo_order()?;
        let composite = self
            .node(StageKind::Composite)
            .ok_or_else(|| Error::Config("plan has no composite stage".into()))?;
        let background = if self.node(StageKind::Remove).is_some() {
            NodeInput::Node {
                stage: StageKind::Remove,
            }
        } else {
            NodeInput::Artifact {
                name: "scene".into(),
                id: self.context.scene.id,
            }
        };
        let expected = [
            background,
            NodeInput::Node {
                stage: StageKind::Animate,
            },
        ];
        if composite.inputs != expected {
            return Err(Error::Config(
                "composite must depend on exactly the background plate and the animate output".into(),
            ));
        }
        Ok(())
    }

    pub fn node(&self, stage: StageKind) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.stage == stage)
    }

    /// Node indices in dependency order, ties broken by position.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for &(_, b) in &self.edges {
            indegree[b] += 1;
        }
        let mut order = Vec::with_capacity(n);
        let mut done = vec![false; n];
        while order.len() < n {
            let next = (0..n)
                .find(|&i| !done[i] && indegree[i] == 0)
                .ok_or_else(|| Error::Config("stage graph has a cycle".into()))?;
            done[next] = true;
            order.push(next);
            for &(a, b) in &self.edges {
                if a == next {
                    indegree[b] -= 1;
                }
            }
        }
        Ok(order)
    }

    fn deps(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == i).map(|e| e.0)
    }

    pub fn stage_order(&self) -> Result<Vec<StageKind>> {
        Ok(self.topo_order()?.into_iter().map(|i| self.nodes[i].stage).collect())
    }
}

fn canonical_params(v: &serde_json::Value) -> Vec<u8> {
    // serde_json maps are ordered by key, so this is stable
    serde_json::to_vec(v).expect("json values serialize")
}

/// `hash(stage ‖ params ‖ sorted input ids ‖ engine version)`, each field
/// length-prefixed.
pub fn cache_key(stage: &str, params: &[u8], inputs: &[ArtifactId], engine_version: &str) -> ArtifactId {
    let mut sorted = inputs.to_vec();
    sorted.sort();
    let mut h = ArtifactHasher::new();
    h.update_field(stage.as_bytes());
    h.update_field(params);
    h.update_field(&(sorted.len() as u64).to_le_bytes());
    for id in &sorted {
        h.update_field(id.as_bytes());
    }
    h.update_field(engine_version.as_bytes());
    h.finish()
}

fn reference_id(img: &Frame) -> ArtifactId {
    let mut h = ArtifactHasher::new();
    h.update_field(b"reference");
    h.update_field(&img.width().to_le_bytes());
    h.update_field(&img.height().to_le_bytes());
    h.update_field(img.data());
    h.finish()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Validate `config` against the workspace and lay out the stage graph.
pub fn plan(config: &PipelineConfig, ws: &Workspace) -> Result<StagePlan> {
    config.validate()?;
    let scene = ws
        .sequence_entry(&config.scene)?
        .ok_or_else(|| Error::Config(format!("scene {:?} has not been ingested", config.scene)))?;
    config.prompt.validate(scene.frames, scene.dims)?;

    let ref_path = if config.reference.is_absolute() {
        config.reference.clone()
    } else {
        ws.root().join(&config.reference)
    };
    let image = Frame::read_png(&ref_path).map_err(|e| Error::Config(format!("reference: {e}")))?;
    let reference = ReferenceCharacter::new(image, config.reference_anchor.clone())?;
    if Mask::from_alpha(&reference.image).is_empty() {
        return Err(Error::Config("reference character has an empty alpha matte".into()));
    }
    let ref_id = reference_id(&reference.image);
    let ref_dir = ws.cache_root().join(ref_id.to_hex());
    let ref_file = ref_dir.join("reference.png");
    if !ref_file.exists() {
        fs::create_dir_all(&ref_dir).map_err(io_err(&ref_dir))?;
        let tmp = ref_dir.join(format!(".reference.png.tmp-{}", std::process::id()));
        reference.image.write_png(&tmp)?;
        fs::rename(&tmp, &ref_file).map_err(io_err(&ref_file))?;
    }

    let scene_input = || NodeInput::Artifact {
        name: "scene".into(),
        id: scene.id,
    };
    let node = |stage| NodeInput::Node { stage };
    let c = config;
    let mut nodes = vec![PlanNode::new(
        StageKind::SegmentTrack,
        serde_json::json!({ "prompt": c.prompt, "tau": c.segment_tau }),
        vec![scene_input()],
    )];
    if c.removal_enabled {
        nodes.push(PlanNode::new(
            StageKind::Remove,
            serde_json::json!({ "iters": c.inpaint_iters }),
            vec![scene_input(), node(StageKind::SegmentTrack)],
        ));
    }
    nodes.push(PlanNode::new(
        StageKind::PoseEstimate,
        serde_json::json!({}),
        vec![scene_input(), node(StageKind::SegmentTrack)],
    ));
    nodes.push(PlanNode::new(
        StageKind::Animate,
        serde_json::json!({ "scene_dims": scene.dims, "anchor": c.reference_anchor }),
        vec![
            NodeInput::Artifact {
                name: "reference".into(),
                id: ref_id,
            },
            node(StageKind::PoseEstimate),
        ],
    ));
    let background = if c.removal_enabled {
        node(StageKind::Remove)
    } else {
        scene_input()
    };
    nodes.push(PlanNode::new(
        StageKind::Composite,
        serde_json::json!({}),
        vec![background, node(StageKind::Animate)],
    ));
    let h = &c.harmonize;
    nodes.push(PlanNode::new(
        StageKind::Harmonize,
        serde_json::json!({
            "block_len": h.block_len,
            "overlap": h.overlap,
            "stride": h.stride,
            "ring_width": h.ring_width,
            "identity": h.identity,
            "epsilon": STATS_EPSILON,
        }),
        vec![node(StageKind::Composite), node(StageKind::Animate)],
    ));
    nodes.push(PlanNode::new(
        StageKind::EdgeRefine,
        serde_json::json!({
            "r_out": c.edge.r_out,
            "r_in": c.edge.r_in,
            "scale_reference_width": c.edge.scale_reference_width,
            "iters": c.inpaint_iters,
        }),
        vec![node(StageKind::Harmonize), node(StageKind::Animate)],
    ));
    let context = PlanContext {
        config: config.clone(),
        scene_rel: ws.relative(&ws.seq_dir(&config.scene))?,
        reference_rel: ws.relative(&ref_file)?,
        scene,
    };
    StagePlan::new(nodes, context)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: ArtifactId,
    pub stage: StageKind,
    /// Workspace-relative paths of the stored outputs.
    pub outputs: BTreeMap<String, String>,
    pub output_id: ArtifactId,
    pub engine_version: String,
}

#[derive(Default, Clone)]
pub struct RunOptions {
    /// Stop once this stage has completed. Forces sequential execution so
    /// the set of completed stages is well defined.
    pub halt_after: Option<StageKind>,
    pub sequential: bool,
    /// Re-execute cache hits and compare against the stored outputs.
    pub verify: bool,
    /// Defaults to `<workspace>/logs/run-<ms>-<pid>.jsonl`.
    pub log_path: Option<PathBuf>,
    pub observer: Option<Observer>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    /// `None` when the run halted early.
    pub final_id: Option<ArtifactId>,
    pub events: Vec<RunEvent>,
    pub log_path: PathBuf,
}

impl RunReport {
    fn stages_with(&self, kind: EventKind) -> Vec<StageKind> {
        self.events.iter().filter(|e| e.event == kind).map(|e| e.stage).collect()
    }

    pub fn executed(&self) -> Vec<StageKind> {
        self.stages_with(EventKind::StageDone)
    }

    pub fn cache_hits(&self) -> Vec<StageKind> {
        self.stages_with(EventKind::CacheHit)
    }

    pub fn mismatches(&self) -> Vec<StageKind> {
        self.stages_with(EventKind::VerifyMismatch)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: StageKind,
        #[source]
        source: Error,
    },
}

impl RunError {
    /// The underlying error, whichever phase raised it.
    pub fn error(&self) -> &Error {
        match self {
            RunError::Setup(e) | RunError::Stage { source: e, .. } => e,
        }
    }
}

#[derive(Debug, Clone)]
struct NodeOutput {
    id: ArtifactId,
    rel: String,
}

struct Precomputed(Vec<ColorTransformGrid<f64>>);

impl HarmonizeWorker<f64> for Precomputed {
    fn block_params(&self, i: usize, _: &[Frame], _: &[Mask]) -> Result<BlockParams<f64>> {
        Ok(BlockParams::PerBlock(self.0[i].clone()))
    }
}

struct Runner<'a> {
    ws: &'a Workspace,
    pool: &'a WorkerPool,
    plan: &'a StagePlan,
    log: SharedLog,
    start: Instant,
    verify: bool,
    scratch: AtomicU64,
}

type Deps = HashMap<StageKind, NodeOutput>;

impl Runner<'_> {
    fn emit(&self, event: EventKind, stage: StageKind, ms: u64, key: ArtifactId, message: Option<String>) {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).emit(RunEvent {
            event,
            stage,
            ms,
            key: Some(key),
            message,
        });
    }

    fn since_start(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn fps(&self) -> Fps {
        self.plan.context.scene.fps
    }

    fn frames(&self, rel: &str) -> Result<FrameSequence> {
        read_frame_dir(&self.ws.resolve(rel)?, self.fps())
    }

    fn masks(&self, rel: &str) -> Result<MaskSequence> {
        let p = self.ws.resolve(rel)?;
        MaskSequence::from_json(&fs::read_to_string(&p).map_err(io_err(&p))?)
    }

    fn node_key(&self, i: usize, deps: &Deps) -> ArtifactId {
        let node = &self.plan.nodes[i];
        let ids: Vec<ArtifactId> = node
            .inputs
            .iter()
            .map(|inp| match inp {
                NodeInput::Artifact { id, .. } => *id,
                NodeInput::Node { stage } => deps[stage].id,
            })
            .collect();
        cache_key(node.stage.as_str(), &canonical_params(&node.params), &ids, ENGINE_VERSION)
    }

    fn lookup(&self, key: &ArtifactId, stage: StageKind) -> Option<CacheEntry> {
        let path = self.ws.cache_root().join(key.to_hex()).join("entry.json");
        let entry: CacheEntry = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
        let primary = entry.outputs.get(stage.primary_output())?;
        (entry.key == *key
            && entry.stage == stage
            && entry.engine_version == ENGINE_VERSION
            && self.ws.resolve(primary).ok()?.exists())
        .then_some(entry)
    }

    fn scratch_rel(&self, key: &ArtifactId, what: &str) -> String {
        format!(
            "cache/.{what}-{key}-{}-{}",
            std::process::id(),
            self.scratch.fetch_add(1, Ordering::Relaxed)
        )
    }

    fn run_node(&self, i: usize, deps: &Deps) -> Result<NodeOutput> {
        let stage = self.plan.nodes[i].stage;
        let key = self.node_key(i, deps);
        let t0 = Instant::now();
        if let Some(entry) = self.lookup(&key, stage) {
            self.emit(EventKind::CacheHit, stage, t0.elapsed().as_millis() as u64, key, None);
            if self.verify {
                self.verify_entry(i, deps, &entry)?;
            }
            return Ok(NodeOutput {
                id: entry.output_id,
                rel: entry.outputs[stage.primary_output()].clone(),
            });
        }
        self.emit(EventKind::StageStart, stage, self.since_start(), key, None);
        let tmp_rel = self.scratch_rel(&key, "tmp");
        let tmp = self.ws.resolve(&tmp_rel)?;
        let produced = fs::create_dir_all(&tmp)
            .map_err(io_err(&tmp))
            .and_then(|_| self.execute(i, deps, &tmp_rel));
        let id = match produced {
            Ok(id) => id,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                self.emit(EventKind::StageFailed, stage, t0.elapsed().as_millis() as u64, key, Some(e.to_string()));
                return Err(e);
            }
        };
        let final_rel = format!("cache/{key}");
        let entry = CacheEntry {
            key,
            stage,
            outputs: fs::read_dir(&tmp)
                .map_err(io_err(&tmp))?
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().into_string().ok())
                .map(|name| (name.clone(), format!("{final_rel}/{name}")))
                .collect(),
            output_id: id,
            engine_version: ENGINE_VERSION.to_string(),
        };
        let entry_path = tmp.join("entry.json");
        fs::write(&entry_path, serde_json::to_string_pretty(&entry)?).map_err(io_err(&entry_path))?;
        let final_dir = self.ws.resolve(&final_rel)?;
        if let Err(e) = fs::rename(&tmp, &final_dir) {
            // another run committed the same key first
            let _ = fs::remove_dir_all(&tmp);
            if self.lookup(&key, stage).is_none() {
                return Err(io_err(&final_dir)(e));
            }
        }
        self.emit(EventKind::StageDone, stage, t0.elapsed().as_millis() as u64, key, None);
        debug!(%stage, %key, "committed");
        Ok(NodeOutput {
            id,
            rel: format!("{final_rel}/{}", stage.primary_output()),
        })
    }

    fn verify_entry(&self, i: usize, deps: &Deps, entry: &CacheEntry) -> Result<()> {
        let stage = self.plan.nodes[i].stage;
        let rel = self.scratch_rel(&entry.key, "verify");
        let dir = self.ws.resolve(&rel)?;
        let t0 = Instant::now();
        let result = fs::create_dir_all(&dir)
            .map_err(io_err(&dir))
            .and_then(|_| self.execute(i, deps, &rel));
        let _ = fs::remove_dir_all(&dir);
        let fresh = result?;
        let (kind, message) = if fresh == entry.output_id {
            (EventKind::VerifyOk, None)
        } else {
            (
                EventKind::VerifyMismatch,
                Some(format!("cached {} but re-execution gives {fresh}", entry.output_id)),
            )
        };
        self.emit(kind, stage, t0.elapsed().as_millis() as u64, entry.key, message);
        Ok(())
    }

    /// Run node `i`, writing its outputs into `out_rel`; returns the id of
    /// the primary output.
    fn execute(&self, i: usize, deps: &Deps, out_rel: &str) -> Result<ArtifactId> {
        let ctx = &self.plan.context;
        let cfg = &ctx.config;
        let out = self.ws.resolve(out_rel)?;
        let worker_out = format!("{out_rel}/worker");
        let write_frames = |seq: &FrameSequence| write_frame_dir(&out.join("frames"), seq);
        let stage = self.plan.nodes[i].stage;
        let id = match stage {
            StageKind::SegmentTrack => {
                let scene = self.frames(&ctx.scene_rel)?;
                let masks = stages::segment_track(
                    self.pool,
                    SeqInput {
                        rel: &ctx.scene_rel,
                        seq: &scene,
                    },
                    &cfg.prompt,
                    cfg.segment_tau,
                    &worker_out,
                )?;
                let path = out.join("masks.json");
                fs::write(&path, masks.to_json()).map_err(io_err(&path))?;
                self.ws.put_masks(&masks)?;
                masks.id()
            }
            StageKind::Remove => {
                let scene = self.frames(&ctx.scene_rel)?;
                let seg = &deps[&StageKind::SegmentTrack];
                let masks = self.masks(&seg.rel)?;
                let plate = stages::inpaint(
                    self.pool,
                    SeqInput {
                        rel: &ctx.scene_rel,
                        seq: &scene,
                    },
                    MaskInput {
                        rel: &seg.rel,
                        masks: &masks,
                    },
                    cfg.inpaint_iters,
                    &worker_out,
                )?;
                write_frames(&plate)?;
                plate.id()
            }
            StageKind::PoseEstimate => {
                let scene = self.frames(&ctx.scene_rel)?;
                let seg = &deps[&StageKind::SegmentTrack];
                let masks = self.masks(&seg.rel)?;
                let poses = stages::pose_estimate(
                    self.pool,
                    SeqInput {
                        rel: &ctx.scene_rel,
                        seq: &scene,
                    },
                    MaskInput {
                        rel: &seg.rel,
                        masks: &masks,
                    },
                    &worker_out,
                )?;
                let text = poses.to_json();
                let path = out.join("poses.json");
                fs::write(&path, &text).map_err(io_err(&path))?;
                ArtifactId::of(text.as_bytes())
            }
            StageKind::Animate => {
                let poses = &deps[&StageKind::PoseEstimate];
                let seq = stages::animate(
                    self.pool,
                    &ctx.reference_rel,
                    cfg.reference_anchor.as_deref(),
                    &poses.rel,
                    ctx.scene.frames,
                    ctx.scene.dims,
                    self.fps(),
                    &worker_out,
                )?;
                write_frames(&seq)?;
                seq.id()
            }
            StageKind::Composite => {
                let bg = match deps.get(&StageKind::Remove) {
                    Some(plate) => self.frames(&plate.rel)?,
                    None => self.frames(&ctx.scene_rel)?,
                };
                let fg = self.frames(&deps[&StageKind::Animate].rel)?;
                let seq = composite_sequence::<f64>(&fg, &bg)?;
                write_frames(&seq)?;
                seq.id()
            }
            StageKind::Harmonize => {
                let comp_rel = &deps[&StageKind::Composite].rel;
                let comp = self.frames(comp_rel)?;
                let masks = self.alpha_masks(deps)?;
                let h = &cfg.harmonize;
                let schedule = partition_blocks(comp.len(), h.block_len, h.overlap)?;
                let seq = if h.identity {
                    harmonize_sequence::<f64, _>(&comp, &masks, &IdentityHarmonizer { stride: h.stride }, &schedule)?
                } else {
                    let masks_rel = self.ws.relative(&self.ws.put_masks(&masks)?)?;
                    let grids = stages::harmonize_params(
                        self.pool,
                        SeqInput {
                            rel: comp_rel,
                            seq: &comp,
                        },
                        MaskInput {
                            rel: &masks_rel,
                            masks: &masks,
                        },
                        h.ring_width,
                        h.stride,
                        &schedule,
                        &worker_out,
                    )?;
                    let path = out.join("grids.json");
                    fs::write(&path, serde_json::to_string(&grids)?).map_err(io_err(&path))?;
                    harmonize_sequence(&comp, &masks, &Precomputed(grids), &schedule)?
                };
                write_frames(&seq)?;
                seq.id()
            }
            StageKind::EdgeRefine => {
                let harm_rel = &deps[&StageKind::Harmonize].rel;
                let harm = self.frames(harm_rel)?;
                let bands = edge_band_sequence(&self.alpha_masks(deps)?, &cfg.edge)?;
                let seq = if bands.masks().iter().all(Mask::is_empty) {
                    harm
                } else {
                    let bands_rel = self.ws.relative(&self.ws.put_masks(&bands)?)?;
                    stages::inpaint(
                        self.pool,
                        SeqInput {
                            rel: harm_rel,
                            seq: &harm,
                        },
                        MaskInput {
                            rel: &bands_rel,
                            masks: &bands,
                        },
                        cfg.inpaint_iters,
                        &worker_out,
                    )?
                };
                write_frames(&seq)?;
                seq.id()
            }
        };
        let scratch = out.join("worker");
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
        }
        Ok(id)
    }

    /// Support of the inserted character: animate alpha at or above 128.
    fn alpha_masks(&self, deps: &Deps) -> Result<MaskSequence> {
        let fg = self.frames(&deps[&StageKind::Animate].rel)?;
        MaskSequence::new(fg.frames().iter().map(Mask::from_alpha).collect())
    }
}

/// Execute `plan`, reusing cached stage outputs, and write the final
/// sequence under the configured output name.
pub fn run(plan: &StagePlan, ws: &Workspace, pool: &WorkerPool, opts: &RunOptions) -> Result<RunReport, RunError> {
    let order = plan.topo_order()?;
    let log_path = opts.log_path.clone().unwrap_or_else(|| default_log_path(ws.root()));
    let runner = Runner {
        ws,
        pool,
        plan,
        log: Mutex::new(RunLog::open(Some(&log_path), opts.observer.clone())?),
        start: Instant::now(),
        verify: opts.verify,
        scratch: AtomicU64::new(0),
    };
    let sequential = opts.sequential || opts.halt_after.is_some();
    let n = plan.nodes.len();
    let mut done: HashMap<usize, NodeOutput> = HashMap::new();
    let mut failure: Option<(StageKind, Error)> = None;
    let mut halted = false;

    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, Result<NodeOutput>)>();
        let mut started = vec![false; n];
        let mut in_flight = 0usize;
        loop {
            if failure.is_none() && !halted {
                for &i in &order {
                    if sequential && in_flight > 0 {
                        break;
                    }
                    if started[i] || !plan.deps(i).all(|d| done.contains_key(&d)) {
                        continue;
                    }
                    started[i] = true;
                    in_flight += 1;
                    let deps: Deps = plan
                        .deps(i)
                        .map(|d| (plan.nodes[d].stage, done[&d].clone()))
                        .collect();
                    let tx = tx.clone();
                    let runner = &runner;
                    s.spawn(move || {
                        let _ = tx.send((i, runner.run_node(i, &deps)));
                    });
                }
            }
            if in_flight == 0 {
                break;
            }
            let (i, result) = rx.recv().expect("workers hold a sender");
            in_flight -= 1;
            match result {
                Ok(out) => {
                    done.insert(i, out);
                    if opts.halt_after == Some(plan.nodes[i].stage) {
                        halted = true;
                    }
                }
                Err(e) => {
                    failure.get_or_insert((plan.nodes[i].stage, e));
                }
            }
        }
    });

    if let Some((stage, source)) = failure {
        return Err(RunError::Stage { stage, source });
    }
    let events = runner.log.lock().unwrap_or_else(|p| p.into_inner()).take_events();
    if halted {
        return Ok(RunReport {
            final_id: None,
            events,
            log_path,
        });
    }
    let last = *order.last().ok_or_else(|| Error::Config("empty plan".into()))?;
    let result = &done[&last];
    let output = &plan.context.config.output;
    if ws.sequence_entry(output)?.map(|e| e.id) != Some(result.id) {
        let seq = runner.frames(&result.rel)?;
        ws.write_sequence(output, &seq)?;
    }
    info!(output = %output, id = %result.id, "run complete");
    Ok(RunReport {
        final_id: Some(result.id),
        events,
        log_path,
    })
}

/// Plan, connect the configured workers and run.
pub fn run_config(config: &PipelineConfig, ws: &Workspace, opts: &RunOptions) -> Result<RunReport, RunError> {
    let plan = plan(config, ws)?;
    let pool = WorkerPool::new(ws.clone(), config.workers.clone());
    run(&plan, ws, &pool, opts)
}

/// Re-execute every cached stage of `plan` and compare with what is stored.
pub fn verify_cache(plan: &StagePlan, ws: &Workspace, pool: &WorkerPool) -> Result<RunReport, RunError> {
    run(
        plan,
        ws,
        pool,
        &RunOptions {
            verify: true,
            ..RunOptions::default()
        },
    )
}
