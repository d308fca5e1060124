use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use recast_core::protocol::{WorkerStage, DEFAULT_MAX_BATCH};
use recast_core::Workspace;
use recast_engine::stub_worker::{Fault, StubWorker};

/// Deterministic stub worker speaking the recast worker protocol.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Workspace root; defaults to $RECAST_WORKSPACE, then the current directory.
    #[arg(long)]
    workspace: Option<PathBuf>,
    #[arg(long, value_enum)]
    fault: Option<Fault>,
    /// Only inject the fault into requests for this stage.
    #[arg(long)]
    fault_stage: Option<String>,
    /// Serve HTTP on this address instead of stdin/stdout.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MAX_BATCH)]
    max_batch: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let args = Args::parse();
    match serve(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("recast-stub-worker: {e}");
            ExitCode::FAILURE
        }
    }
}

fn serve(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let root = match args.workspace {
        Some(p) => p,
        None => std::env::var_os("RECAST_WORKSPACE")
            .map(PathBuf::from)
            .map_or_else(std::env::current_dir, Ok)?,
    };
    let worker = StubWorker {
        ws: Workspace::open(root)?,
        fault: args.fault,
        fault_stage: args.fault_stage.map(|s| s.parse::<WorkerStage>()).transpose()?,
        max_batch: args.max_batch,
    };
    match args.listen {
        None => worker.serve_stdio(std::io::stdin().lock(), std::io::stdout().lock())?,
        Some(addr) => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await?;
                println!("listening on http://{}", listener.local_addr()?);
                worker.serve_http(listener).await
            })?;
        }
    }
    Ok(())
}
