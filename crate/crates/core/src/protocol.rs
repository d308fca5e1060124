//! Wire types for the worker protocol.
//!
//! Control messages are single-line JSON objects. Pixel data never travels
//! inline: requests and responses carry workspace-relative paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT_S: u64 = 600;
pub const DEFAULT_MAX_BATCH: usize = 16;

/// Artifact names used in request and response maps.
pub mod names {
    /// Directory of `frame_%06d.png` files.
    pub const FRAMES: &str = "frames";
    /// `masks.json` in RLE form.
    pub const MASKS: &str = "masks";
    /// `poses.json`.
    pub const POSES: &str = "poses";
    /// RGBA reference character PNG.
    pub const REFERENCE: &str = "reference";
    /// `grids.json`, one colour transform grid per block.
    pub const GRIDS: &str = "grids";
    /// Directory the worker must write its outputs into.
    pub const OUT: &str = "out";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerStage {
    SegmentTrack,
    Inpaint,
    PoseEstimate,
    Animate,
    HarmonizeParams,
}

impl WorkerStage {
    pub const ALL: [WorkerStage; 5] = [
        WorkerStage::SegmentTrack,
        WorkerStage::Inpaint,
        WorkerStage::PoseEstimate,
        WorkerStage::Animate,
        WorkerStage::HarmonizeParams,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkerStage::SegmentTrack => "segment_track",
            WorkerStage::Inpaint => "inpaint",
            WorkerStage::PoseEstimate => "pose_estimate",
            WorkerStage::Animate => "animate",
            WorkerStage::HarmonizeParams => "harmonize_params",
        }
    }
}

impl fmt::Display for WorkerStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkerStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkerStage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Protocol(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ready {
    pub protocol_version: u32,
    /// Kept as strings so unknown names can be reported instead of failing to parse.
    pub stages: Vec<String>,
    pub max_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shutdown {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    Hello(Hello),
    Ready(Ready),
    Shutdown(Shutdown),
}

impl Control {
    pub fn hello() -> Self {
        Control::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
        })
    }
}

/// What a worker advertised during the handshake.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capabilities {
    pub stages: BTreeSet<WorkerStage>,
    pub max_batch: usize,
}

impl Ready {
    /// Accept a `ready` reply: right version, only known stage names, and
    /// every stage in `required`.
    pub fn accept(&self, required: &[WorkerStage]) -> Result<Capabilities> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "unsupported protocol version {} (engine speaks {PROTOCOL_VERSION})",
                self.protocol_version
            )));
        }
        let stages = self
            .stages
            .iter()
            .map(|s| s.parse())
            .collect::<Result<BTreeSet<WorkerStage>>>()?;
        if let Some(missing) = required.iter().find(|s| !stages.contains(s)) {
            return Err(Error::Protocol(format!("worker does not offer stage {missing}")));
        }
        if self.max_batch == 0 {
            return Err(Error::Protocol("max_batch must be positive".into()));
        }
        Ok(Capabilities {
            stages,
            max_batch: self.max_batch,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRequest {
    pub protocol_version: u32,
    pub request_id: String,
    pub stage: WorkerStage,
    pub params: serde_json::Map<String, serde_json::Value>,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OkBody {
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok(OkBody),
    Error(ErrorBody),
}

/// `{"request_id":..,"ok":{"artifacts":{..}}}` or
/// `{"request_id":..,"error":{"code":..,"message":..}}`, never both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawResponse", into = "RawResponse")]
pub struct StageResponse {
    pub request_id: String,
    pub outcome: Outcome,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawResponse {
    request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ok: Option<OkBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<ErrorBody>,
}

impl TryFrom<RawResponse> for StageResponse {
    type Error = String;

    fn try_from(raw: RawResponse) -> Result<Self, String> {
        let outcome = match (raw.ok, raw.error) {
            (Some(ok), None) => Outcome::Ok(ok),
            (None, Some(err)) => Outcome::Error(err),
            (Some(_), Some(_)) => return Err("response carries both ok and error".into()),
            (None, None) => return Err("response carries neither ok nor error".into()),
        };
        Ok(StageResponse {
            request_id: raw.request_id,
            outcome,
        })
    }
}

impl From<StageResponse> for RawResponse {
    fn from(r: StageResponse) -> Self {
        let (ok, error) = match r.outcome {
            Outcome::Ok(b) => (Some(b), None),
            Outcome::Error(e) => (None, Some(e)),
        };
        RawResponse {
            request_id: r.request_id,
            ok,
            error,
        }
    }
}

impl StageResponse {
    pub fn ok(request_id: impl Into<String>, artifacts: BTreeMap<String, String>) -> Self {
        Self {
            request_id: request_id.into(),
            outcome: Outcome::Ok(OkBody { artifacts }),
        }
    }

    pub fn error(request_id: impl Into<String>, code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            request_id: request_id.into(),
            outcome: Outcome::Error(ErrorBody {
                code: code.into(),
                message: message.into(),
            }),
        }
    }

    /// Check the echo and unwrap the artifact map, turning a worker error
    /// into a stage error.
    pub fn into_artifacts(self, req: &StageRequest) -> Result<BTreeMap<String, String>> {
        if self.request_id != req.request_id {
            return Err(Error::Protocol(format!(
                "response to {:?} answers request {:?}",
                req.request_id, self.request_id
            )));
        }
        match self.outcome {
            Outcome::Ok(b) => Ok(b.artifacts),
            Outcome::Error(e) => Err(Error::Stage {
                stage: req.stage.to_string(),
                code: e.code,
                message: e.message,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transport {
    /// Spawned process speaking newline-delimited JSON on stdin/stdout.
    Subprocess { command: Vec<String> },
    Http { base_url: String },
    /// In-process deterministic stubs.
    Builtin,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_S
}

fn default_max_batch() -> usize {
    DEFAULT_MAX_BATCH
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSpec {
    pub transport: Transport,
    #[serde(default = "default_timeout")]
    pub timeout: u64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
}

impl WorkerSpec {
    pub fn builtin() -> Self {
        Self {
            transport: Transport::Builtin,
            timeout: DEFAULT_TIMEOUT_S,
            max_batch: DEFAULT_MAX_BATCH,
        }
    }

    pub fn subprocess<S: Into<String>>(command: impl IntoIterator<Item = S>) -> Self {
        Self {
            transport: Transport::Subprocess {
                command: command.into_iter().map(Into::into).collect(),
            },
            ..Self::builtin()
        }
    }

    pub fn http(base_url: impl Into<String>) -> Self {
        Self {
            transport: Transport::Http {
                base_url: base_url.into(),
            },
            ..Self::builtin()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout == 0 {
            return Err(Error::Config("worker timeout must be positive".into()));
        }
        if self.max_batch == 0 {
            return Err(Error::Config("worker max_batch must be positive".into()));
        }
        match &self.transport {
            Transport::Subprocess { command } if command.is_empty() => {
                Err(Error::Config("subprocess worker needs a command".into()))
            }
            Transport::Http { base_url } if base_url.is_empty() => {
                Err(Error::Config("http worker needs a base_url".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Parse one protocol line; any malformed input is a protocol error.
pub fn parse_line<T: DeserializeOwned>(line: &str) -> Result<T> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| Error::Protocol(format!("malformed message: {e}")))
}

/// Serialize a message as one line, newline included.
pub fn to_line<T: Serialize>(msg: &T) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol types always serialize");
    s.push('\n');
    s
}
