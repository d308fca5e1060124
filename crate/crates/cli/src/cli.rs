//! Argument parsing and dispatch for the `recast` binary.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 when a
//! stage fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use recast_core::protocol::{WorkerSpec, WorkerStage};
use recast_core::workspace::decode_video;
use recast_core::{ArtifactId, Error, Fps, Prompt, Workspace};
use recast_engine::pipeline::run_config;
use recast_engine::stub_service::{DEFAULT_INPAINT_ITERS, DEFAULT_TAU};
use recast_engine::stub_worker::{Fault, StubWorker};
use recast_engine::{plan, verify_cache, PipelineConfig, RunError, RunOptions, StageKind, WorkerPool};

use crate::ops::{self, OpError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "recast", version, about = "Replace a character in a video clip")]
struct Cli {
    /// Workspace root. Relative paths in configs resolve against it.
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a frame directory, or a video through an external decoder.
    Ingest {
        #[arg(long)]
        name: String,
        /// Directory of frame_%06d.png files.
        #[arg(long, conflicts_with = "video")]
        frames: Option<PathBuf>,
        #[arg(long, requires = "decoder")]
        video: Option<PathBuf>,
        /// Shell command template with {in} and {out} placeholders.
        #[arg(long)]
        decoder: Option<String>,
        /// Frame rate as `num/den` or an integer.
        #[arg(long, default_value = "24")]
        fps: String,
    },
    /// Track a prompted subject; prints the mask sequence id.
    Segment {
        #[arg(long)]
        scene: String,
        /// Prompt JSON file.
        #[arg(long)]
        prompt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// JSON map of stage name to worker spec; defaults to the builtin stubs.
        #[arg(long)]
        workers: Option<PathBuf>,
    },
    /// Inpaint a tracked subject out of a sequence.
    Remove {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        masks: String,
        #[arg(long)]
        output: String,
        #[arg(long, default_value_t = DEFAULT_INPAINT_ITERS)]
        iters: usize,
        #[arg(long)]
        workers: Option<PathBuf>,
    },
    /// Estimate poses from tracked masks and animate a reference character.
    Animate {
        #[arg(long)]
        scene: String,
        #[arg(long)]
        masks: String,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        output: String,
        #[arg(long)]
        workers: Option<PathBuf>,
    },
    /// Composite an RGBA sequence over a background sequence.
    Compose {
        #[arg(long)]
        background: String,
        #[arg(long)]
        foreground: String,
        #[arg(long)]
        output: String,
    },
    /// Plan and run the full pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this stage completes.
        #[arg(long)]
        halt_after: Option<String>,
        #[arg(long)]
        sequential: bool,
        /// Run log path; defaults to <workspace>/logs/.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Re-execute cached stages and compare outputs byte for byte.
    VerifyCache {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        workers: Option<PathBuf>,
    },
    /// Run the stub worker on stdin/stdout.
    #[command(hide = true)]
    StubWorker {
        #[arg(long, value_enum)]
        fault: Option<Fault>,
        #[arg(long)]
        fault_stage: Option<String>,
    },
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<OpError> for Failure {
    fn from(e: OpError) -> Self {
        match e {
            OpError::Input(e) => Failure::Config(e.to_string()),
            s @ OpError::Stage(..) => Failure::Stage(s.to_string()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Setup(e) => Failure::Config(e.to_string()),
            s @ RunError::Stage { .. } => Failure::Stage(s.to_string()),
        }
    }
}

fn parse_fps(s: &str) -> Result<Fps, Error> {
    let bad = || Error::Config(format!("invalid frame rate {s:?}"));
    let (n, d) = match s.split_once('/') {
        Some((n, d)) => (n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?),
        None => (s.parse().map_err(|_| bad())?, 1),
    };
    if n == 0 || d == 0 {
        return Err(bad());
    }
    Ok(Fps::new(n, d))
}

fn parse_id(s: &str) -> Result<ArtifactId, Error> {
    s.parse().map_err(|_| Error::Config(format!("invalid artifact id {s:?}")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn load_pool(ws: &Workspace, workers: Option<&Path>) -> Result<WorkerPool, Error> {
    match workers {
        None => Ok(WorkerPool::builtin(ws.clone())),
        Some(p) => {
            let specs: BTreeMap<WorkerStage, WorkerSpec> = read_json(p)?;
            for s in specs.values() {
                s.validate()?;
            }
            Ok(WorkerPool::new(ws.clone(), specs))
        }
    }
}

/// Resolve `p` against the workspace root unless it is absolute.
fn in_ws(ws: &Workspace, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        ws.root().join(p)
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    if let Command::StubWorker { fault, fault_stage } = cli.command {
        let worker = StubWorker {
            ws: Workspace::open(&cli.workspace)?,
            fault,
            fault_stage: fault_stage.map(|s| s.parse()).transpose()?,
            max_batch: recast_core::protocol::DEFAULT_MAX_BATCH,
        };
        worker.serve_stdio(std::io::stdin().lock(), std::io::stdout().lock())?;
        return Ok(());
    }
    let ws = Workspace::open(&cli.workspace)?;
    let mut say = |s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cli.command {
        Command::Ingest {
            name,
            frames,
            video,
            decoder,
            fps,
        } => {
            let fps = parse_fps(&fps)?;
            let dir = match (frames, video, decoder) {
                (Some(dir), None, _) => in_ws(&ws, &dir),
                (None, Some(video), Some(template)) => {
                    let out_dir = ws.root().join("decoded").join(&name);
                    decode_video(&template, &in_ws(&ws, &video), &out_dir)?
                }
                _ => return Err(Failure::Config("pass --frames, or --video with --decoder".into())),
            };
            let seq = ws.ingest_frames(&name, &dir, fps)?;
            say(seq.id().to_string());
        }
        Command::Segment {
            scene,
            prompt,
            tau,
            workers,
        } => {
            let prompt: Prompt = read_json(&in_ws(&ws, &prompt))?;
            let pool = load_pool(&ws, workers.as_deref())?;
            let masks = ops::segment(&ws, &pool, &scene, &prompt, tau)?;
            say(masks.id().to_string());
        }
        Command::Remove {
            scene,
            masks,
            output,
            iters,
            workers,
        } => {
            let pool = load_pool(&ws, workers.as_deref())?;
            let id = ops::remove(&ws, &pool, &scene, &parse_id(&masks)?, iters, &output)?;
            say(id.to_string());
        }
        Command::Animate {
            scene,
            masks,
            reference,
            output,
            workers,
        } => {
            let pool = load_pool(&ws, workers.as_deref())?;
            let id = ops::animate(&ws, &pool, &scene, &parse_id(&masks)?, &in_ws(&ws, &reference), &output)?;
            say(id.to_string());
        }
        Command::Compose {
            background,
            foreground,
            output,
        } => {
            let id = ops::compose(&ws, &background, &foreground, &output)?;
            say(id.to_string());
        }
        Command::Run {
            config,
            halt_after,
            sequential,
            log,
        } => {
            let config = PipelineConfig::load(&in_ws(&ws, &config))?;
            let opts = RunOptions {
                halt_after: halt_after.map(|s| s.parse::<StageKind>()).transpose()?,
                sequential,
                log_path: log.map(|p| in_ws(&ws, &p)),
                ..RunOptions::default()
            };
            let report = run_config(&config, &ws, &opts)?;
            match report.final_id {
                Some(id) => say(id.to_string()),
                None => say("halted".into()),
            }
        }
        Command::VerifyCache { config } => {
            let config = PipelineConfig::load(&in_ws(&ws, &config))?;
            let plan = plan(&config, &ws)?;
            let pool = WorkerPool::new(ws.clone(), config.workers.clone());
            let report = verify_cache(&plan, &ws, &pool)?;
            let bad = report.mismatches();
            if !bad.is_empty() {
                let names: Vec<_> = bad.iter().map(|s| s.as_str()).collect();
                return Err(Failure::Stage(format!("cache mismatch in {}", names.join(", "))));
            }
            say(format!("ok: {} stages verified", report.cache_hits().len()));
        }
        Command::Serve { bind, port, workers } => {
            let pool = load_pool(&ws, workers.as_deref())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Config(e.to_string()))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((bind.as_str(), port))
                    .await
                    .map_err(|e| Failure::Config(format!("bind {bind}:{port}: {e}")))?;
                let addr = listener.local_addr().map_err(|e| Failure::Config(e.to_string()))?;
                say(format!("listening on http://{addr}"));
                axum::serve(listener, crate::api::router(crate::api::AppState::new(ws, pool)))
                    .await
                    .map_err(|e| Failure::Config(e.to_string()))
            })?;
        }
        Command::StubWorker { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// Parse `argv` and run; returns the process exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(m)) => {
            let _ = writeln!(err, "recast: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Stage(m)) => {
            let _ = writeln!(err, "recast: {m}");
            EXIT_STAGE
        }
    }
}
