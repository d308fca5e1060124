//! Transports that carry stage requests to workers.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use recast_core::protocol::{
    parse_line, to_line, Capabilities, Control, Hello, Shutdown, StageRequest, StageResponse, Transport,
    WorkerSpec, WorkerStage, PROTOCOL_VERSION,
};
use recast_core::{Error, Result, Workspace};
use tracing::{debug, warn};

use crate::stub_service;

/// A connected worker that has completed the handshake.
pub trait WorkerClient: Send {
    fn capabilities(&self) -> &Capabilities;

    /// Send one request and wait for its response. The echo of
    /// `request_id` is checked by the caller.
    fn invoke(&mut self, req: &StageRequest) -> Result<StageResponse>;
}

/// Connect according to `spec` and check that `required` stages are offered.
pub fn connect(spec: &WorkerSpec, ws: &Workspace, required: &[WorkerStage]) -> Result<Box<dyn WorkerClient>> {
    spec.validate()?;
    Ok(match &spec.transport {
        Transport::Builtin => Box::new(BuiltinWorker::new(ws.clone(), spec.max_batch)),
        Transport::Subprocess { command } => Box::new(SubprocessWorker::spawn(command, ws, spec.timeout, required)?),
        Transport::Http { base_url } => Box::new(HttpWorker::connect(base_url, spec.timeout, required)?),
    })
}

/// In-process stubs behind the same request/response contract.
pub struct BuiltinWorker {
    ws: Workspace,
    caps: Capabilities,
}

impl BuiltinWorker {
    pub fn new(ws: Workspace, max_batch: usize) -> Self {
        Self {
            ws,
            caps: Capabilities {
                stages: WorkerStage::ALL.into_iter().collect(),
                max_batch,
            },
        }
    }
}

impl WorkerClient for BuiltinWorker {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn invoke(&mut self, req: &StageRequest) -> Result<StageResponse> {
        Ok(stub_service::handle(&self.ws, req))
    }
}

/// A child process speaking newline-delimited JSON on stdin/stdout, one
/// request in flight at a time.
pub struct SubprocessWorker {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
    timeout_s: u64,
    caps: Capabilities,
}

impl SubprocessWorker {
    pub fn spawn(command: &[String], ws: &Workspace, timeout_s: u64, required: &[WorkerStage]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Config("empty worker command".into()))?;
        let root = ws.root().canonicalize().unwrap_or_else(|_| ws.root().to_path_buf());
        let mut child = Command::new(program)
            .args(args)
            .current_dir(&root)
            .env("RECAST_WORKSPACE", &root)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Config(format!("cannot start worker {program:?}: {e}")))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut w = Self {
            stdin: child.stdin.take(),
            child,
            lines,
            timeout: Duration::from_secs(timeout_s),
            timeout_s,
            caps: Capabilities {
                stages: Default::default(),
                max_batch: 1,
            },
        };
        w.send(&Control::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
        }))?;
        let reply: Control = parse_line(&w.recv()?)?;
        w.caps = match reply {
            Control::Ready(r) => r.accept(required)?,
            other => return Err(Error::Protocol(format!("expected ready, got {other:?}"))),
        };
        debug!(?command, stages = ?w.caps.stages, "worker ready");
        Ok(w)
    }

    fn send<T: serde::Serialize>(&mut self, msg: &T) -> Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Protocol("worker stdin is closed".into()))?;
        stdin
            .write_all(to_line(msg).as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Protocol(format!("cannot write to worker: {e}")))
    }

    fn recv(&mut self) -> Result<String> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(Error::Protocol(format!("cannot read from worker: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                Err(Error::Timeout(self.timeout_s))
            }
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.wait().ok();
                Err(Error::Protocol(format!("worker exited without replying ({status:?})")))
            }
        }
    }
}

impl WorkerClient for SubprocessWorker {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn invoke(&mut self, req: &StageRequest) -> Result<StageResponse> {
        self.send(req)?;
        let line = self.recv()?;
        parse_line(&line)
    }
}

impl Drop for SubprocessWorker {
    fn drop(&mut self) {
        if self.send(&Control::Shutdown(Shutdown {})).is_ok() {
            self.stdin.take();
            for _ in 0..50 {
                if let Ok(Some(_)) = self.child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(10));
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A worker reached over HTTP: `POST {base}/hello` answers the handshake and
/// `POST {base}/invoke` takes one request.
pub struct HttpWorker {
    client: reqwest::blocking::Client,
    base: String,
    timeout_s: u64,
    caps: Capabilities,
}

impl HttpWorker {
    pub fn connect(base_url: &str, timeout_s: u64, required: &[WorkerStage]) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_s))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let mut w = Self {
            client,
            base: base_url.trim_end_matches('/').to_string(),
            timeout_s,
            caps: Capabilities {
                stages: Default::default(),
                max_batch: 1,
            },
        };
        let reply: Control = w.post("hello", &Control::hello())?;
        w.caps = match reply {
            Control::Ready(r) => r.accept(required)?,
            other => return Err(Error::Protocol(format!("expected ready, got {other:?}"))),
        };
        Ok(w)
    }

    fn post<B: serde::Serialize, R: serde::de::DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let resp = self
            .client
            .post(format!("{}/{path}", self.base))
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    Error::Timeout(self.timeout_s)
                } else {
                    Error::Protocol(format!("http worker: {e}"))
                }
            })?;
        if !resp.status().is_success() {
            return Err(Error::Protocol(format!("http worker answered {}", resp.status())));
        }
        let text = resp.text().map_err(|e| Error::Protocol(format!("http worker: {e}")))?;
        parse_line(&text)
    }
}

impl WorkerClient for HttpWorker {
    fn capabilities(&self) -> &Capabilities {
        &self.caps
    }

    fn invoke(&mut self, req: &StageRequest) -> Result<StageResponse> {
        self.post("invoke", req)
    }
}

type Slot = Arc<Mutex<Option<Box<dyn WorkerClient>>>>;

/// Lazily connected workers, one per stage. Access to each is serialized;
/// a worker that timed out or broke protocol is dropped and reconnected on
/// next use.
pub struct WorkerPool {
    ws: Workspace,
    specs: HashMap<WorkerStage, WorkerSpec>,
    slots: HashMap<WorkerStage, Slot>,
}

impl WorkerPool {
    pub fn new(ws: Workspace, specs: impl IntoIterator<Item = (WorkerStage, WorkerSpec)>) -> Self {
        let specs: HashMap<_, _> = specs.into_iter().collect();
        let slots = specs.keys().map(|&k| (k, Slot::default())).collect();
        Self { ws, specs, slots }
    }

    /// Every stage served by the in-process stubs.
    pub fn builtin(ws: Workspace) -> Self {
        Self::new(ws, WorkerStage::ALL.map(|s| (s, WorkerSpec::builtin())))
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn has(&self, stage: WorkerStage) -> bool {
        self.specs.contains_key(&stage)
    }

    pub fn spec(&self, stage: WorkerStage) -> Option<&WorkerSpec> {
        self.specs.get(&stage)
    }

    /// Run `req` on the worker for its stage.
    pub fn invoke(&self, req: &StageRequest) -> Result<StageResponse> {
        let (spec, slot) = self
            .specs
            .get(&req.stage)
            .zip(self.slots.get(&req.stage))
            .ok_or_else(|| Error::Config(format!("no worker configured for {}", req.stage)))?;
        let mut guard = slot.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(connect(spec, &self.ws, &[req.stage])?);
        }
        let result = guard.as_mut().expect("connected above").invoke(req);
        if matches!(result, Err(Error::Timeout(_) | Error::Protocol(_))) {
            warn!(stage = %req.stage, "dropping worker after transport failure");
            guard.take();
        }
        result
    }
}
