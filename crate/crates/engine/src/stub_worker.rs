//! A protocol-speaking worker around the stubs, with optional injected
//! faults for conformance testing.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::Router;
use recast_core::harmonization::ColorTransformGrid;
use recast_core::protocol::{
    names, parse_line, to_line, Control, Outcome, Ready, StageRequest, StageResponse, WorkerStage, PROTOCOL_VERSION,
};
use recast_core::workspace::{list_frame_files, read_frame_dir, write_frame_dir};
use recast_core::{Error, Fps, Frame, FrameSequence, Mask, MaskSequence, PoseSequence, Result, Workspace};

use crate::stub_service;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Advertise protocol version 2.
    BadVersion,
    /// Advertise a stage the engine does not know.
    UnknownStage,
    /// Answer with someone else's request id.
    WrongRequestId,
    /// Answer with a line that is not JSON.
    Malformed,
    /// Answer with both `ok` and `error`.
    OkAndError,
    /// Answer with an error response.
    Error,
    /// Point the response at a file that does not exist.
    MissingArtifact,
    /// Return one frame, mask, pose or grid too many.
    WrongLength,
    /// Return outputs one pixel wider than the input.
    WrongDims,
    /// Change a pixel outside the inpainting mask; for other stages, write
    /// the output outside the assigned directory.
    OutOfBand,
    /// Write into an input artifact.
    ClobberInput,
    /// Never answer.
    Hang,
    /// Exit without answering.
    Crash,
}

#[derive(Debug, Clone)]
pub struct StubWorker {
    pub ws: Workspace,
    pub fault: Option<Fault>,
    /// Restrict request faults to this stage.
    pub fault_stage: Option<WorkerStage>,
    pub max_batch: usize,
}

impl StubWorker {
    pub fn ready(&self) -> Control {
        let mut stages: Vec<String> = WorkerStage::ALL.iter().map(|s| s.to_string()).collect();
        let mut protocol_version = PROTOCOL_VERSION;
        match self.fault {
            Some(Fault::BadVersion) => protocol_version = 2,
            Some(Fault::UnknownStage) => stages.push("teleport".into()),
            _ => {}
        }
        Control::Ready(Ready {
            protocol_version,
            stages,
            max_batch: self.max_batch,
        })
    }

    /// Serve one request; `None` means "do not answer".
    pub fn answer(&self, req: &StageRequest) -> Option<String> {
        let resp = stub_service::handle(&self.ws, req);
        let fault = self.fault.filter(|_| self.fault_stage.is_none_or(|s| s == req.stage));
        let Some(fault) = fault else {
            return Some(to_line(&resp));
        };
        match fault {
            Fault::BadVersion | Fault::UnknownStage => Some(to_line(&resp)),
            Fault::WrongRequestId => Some(to_line(&StageResponse {
                request_id: format!("{}-not-mine", resp.request_id),
                ..resp
            })),
            Fault::Malformed => Some("this is not json\n".into()),
            Fault::OkAndError => Some(format!(
                "{{\"request_id\":{},\"ok\":{{\"artifacts\":{{}}}},\"error\":{{\"code\":\"x\",\"message\":\"y\"}}}}\n",
                serde_json::to_string(&req.request_id).expect("strings serialize")
            )),
            Fault::Error => Some(to_line(&StageResponse::error(
                &req.request_id,
                "injected",
                "injected failure",
            ))),
            Fault::Hang => {
                std::thread::sleep(Duration::from_secs(3600));
                None
            }
            Fault::Crash => std::process::exit(3),
            _ => {
                let resp = match self.corrupt(fault, req, resp) {
                    Ok(r) => r,
                    Err(e) => StageResponse::error(&req.request_id, e.code(), e.to_string()),
                };
                Some(to_line(&resp))
            }
        }
    }

    fn corrupt(&self, fault: Fault, req: &StageRequest, mut resp: StageResponse) -> Result<StageResponse> {
        let Outcome::Ok(body) = &mut resp.outcome else {
            return Ok(resp);
        };
        let Some((name, rel)) = body.artifacts.iter().next().map(|(n, r)| (n.clone(), r.clone())) else {
            return Ok(resp);
        };
        let path = self.ws.resolve(&rel)?;
        match fault {
            Fault::MissingArtifact => {
                body.artifacts.insert(name, format!("{rel}.missing"));
            }
            Fault::WrongLength => grow(&path)?,
            Fault::WrongDims => widen(&path)?,
            Fault::OutOfBand if req.stage == WorkerStage::Inpaint => {
                let masks_rel = &req.artifacts[names::MASKS];
                let masks = MaskSequence::from_json(&read(&self.ws.resolve(masks_rel)?)?)?;
                touch_outside(&path, &masks.masks()[0])?;
            }
            Fault::OutOfBand => {
                let stray_rel = format!("cache/stray-{}/{}", req.request_id, file_name(&path));
                let stray = self.ws.resolve(&stray_rel)?;
                fs::create_dir_all(stray.parent().expect("has a parent")).map_err(|e| io(&stray, e))?;
                fs::rename(&path, &stray).map_err(|e| io(&stray, e))?;
                body.artifacts.insert(name, stray_rel);
            }
            Fault::ClobberInput => {
                let (_, input) = req
                    .artifacts
                    .iter()
                    .find(|(n, _)| n.as_str() != names::OUT)
                    .ok_or_else(|| Error::Config("request has no inputs".into()))?;
                clobber(&self.ws.resolve(input)?)?;
            }
            _ => {}
        }
        Ok(resp)
    }

    /// Newline-delimited JSON on `input`/`output` until shutdown or EOF.
    pub fn serve_stdio(&self, input: impl BufRead, mut output: impl Write) -> Result<()> {
        let mut send = |line: &str| -> Result<()> {
            output
                .write_all(line.as_bytes())
                .and_then(|_| output.flush())
                .map_err(|e| io(Path::new("<stdout>"), e))
        };
        let mut greeted = false;
        for line in input.lines() {
            let line = line.map_err(|e| io(Path::new("<stdin>"), e))?;
            if line.trim().is_empty() {
                continue;
            }
            if !greeted {
                match parse_line::<Control>(&line)? {
                    Control::Hello(_) => {
                        send(&to_line(&self.ready()))?;
                        greeted = true;
                        continue;
                    }
                    Control::Shutdown(_) => return Ok(()),
                    other => return Err(Error::Protocol(format!("expected hello, got {other:?}"))),
                }
            }
            if let Ok(Control::Shutdown(_)) = parse_line::<Control>(&line) {
                return Ok(());
            }
            let req: StageRequest = parse_line(&line)?;
            if let Some(answer) = self.answer(&req) {
                send(&answer)?;
            }
        }
        Ok(())
    }

    /// `POST /hello` and `POST /invoke` on `listener`.
    pub async fn serve_http(self, listener: tokio::net::TcpListener) -> std::io::Result<()> {
        let state = Arc::new(self);
        let app = Router::new()
            .route("/hello", post(http_hello))
            .route("/invoke", post(http_invoke))
            .with_state(state);
        axum::serve(listener, app).await
    }
}

async fn http_hello(State(w): State<Arc<StubWorker>>, body: String) -> (StatusCode, String) {
    match parse_line::<Control>(&body) {
        Ok(Control::Hello(_)) => (StatusCode::OK, to_line(&w.ready())),
        _ => (StatusCode::BAD_REQUEST, "expected hello".into()),
    }
}

async fn http_invoke(State(w): State<Arc<StubWorker>>, body: String) -> (StatusCode, String) {
    let req: StageRequest = match parse_line(&body) {
        Ok(r) => r,
        Err(e) => return (StatusCode::BAD_REQUEST, e.to_string()),
    };
    match tokio::task::spawn_blocking(move || w.answer(&req)).await {
        Ok(Some(line)) => (StatusCode::OK, line),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, String::new()),
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

const ANY_FPS: (u32, u32) = (1, 1);

fn grow(path: &Path) -> Result<()> {
    match file_name(path).as_str() {
        "masks.json" => {
            let m = MaskSequence::from_json(&read(path)?)?;
            let mut v = m.masks().to_vec();
            v.push(v[v.len() - 1].clone());
            write(path, &MaskSequence::new(v)?.to_json())
        }
        "poses.json" => {
            let mut p = PoseSequence::from_json(&read(path)?)?;
            p.frames.push(p.frames[p.frames.len() - 1].clone());
            write(path, &p.to_json())
        }
        "grids.json" => {
            let mut g: Vec<ColorTransformGrid<f64>> = serde_json::from_str(&read(path)?)?;
            g.push(g[g.len() - 1].clone());
            write(path, &serde_json::to_string(&g)?)
        }
        _ => {
            let files = list_frame_files(path)?;
            let last = files.last().expect("frame dirs are non-empty");
            let copy = path.join(recast_core::workspace::frame_file_name(files.len()));
            fs::copy(last, &copy).map_err(|e| io(&copy, e))?;
            Ok(())
        }
    }
}

fn widen(path: &Path) -> Result<()> {
    match file_name(path).as_str() {
        "masks.json" => {
            let m = MaskSequence::from_json(&read(path)?)?;
            let (w, h) = m.dims();
            let v = m.masks().iter().map(|_| Mask::empty(w + 1, h)).collect();
            write(path, &MaskSequence::new(v)?.to_json())
        }
        "poses.json" => {
            let mut p = PoseSequence::from_json(&read(path)?)?;
            p.dims.0 += 1;
            write(path, &p.to_json())
        }
        "grids.json" => {
            let g: Vec<ColorTransformGrid<f64>> = serde_json::from_str(&read(path)?)?;
            let tiny: Vec<_> = g.iter().map(|_| ColorTransformGrid::<f64>::identity((1, 1), 1)).collect();
            write(path, &serde_json::to_string(&tiny)?)
        }
        _ => {
            let seq = read_frame_dir(path, Fps::new(ANY_FPS.0, ANY_FPS.1))?;
            let (w, h) = seq.dims();
            let px = vec![0u8; seq.channels().count()];
            let wider = seq.frames().iter().map(|_| Frame::filled(w + 1, h, &px)).collect();
            fs::remove_dir_all(path).map_err(|e| io(path, e))?;
            write_frame_dir(path, &FrameSequence::new(wider, seq.fps())?)
        }
    }
}

fn touch_outside(frames_dir: &Path, mask: &Mask) -> Result<()> {
    let first = list_frame_files(frames_dir)?.remove(0);
    let mut f = Frame::read_png(&first)?;
    let i = mask
        .bits()
        .iter()
        .position(|b| !b)
        .ok_or_else(|| Error::Config("mask covers the whole frame".into()))?;
    let (x, y) = ((i % f.width() as usize) as u32, (i / f.width() as usize) as u32);
    f.pixel_mut(x, y)[0] ^= 0x55;
    f.write_png(&first)
}

fn clobber(path: &Path) -> Result<()> {
    if path.is_dir() {
        let first = list_frame_files(path)?.remove(0);
        let mut f = Frame::read_png(&first)?;
        f.pixel_mut(0, 0)[0] ^= 0x55;
        f.write_png(&first)
    } else {
        let mut bytes = fs::read(path).map_err(|e| io(path, e))?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| io(path, e))
    }
}
