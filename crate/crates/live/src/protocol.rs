//! Messages exchanged over the session socket. Each text frame carries one
//! JSON object: `{"schema_version", "seq", "kind", "payload"}`.

use phri_core::dynamics::{ControllerKind, Obstacle, TrajectoryKind};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMessage {
    pub schema_version: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Body,
}

impl SessionMessage {
    pub fn new(seq: u64, body: Body) -> Self {
        SessionMessage {
            schema_version: SCHEMA_VERSION,
            seq,
            body,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("session message serializes")
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let msg: SessionMessage = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
        if msg.schema_version != SCHEMA_VERSION {
            return Err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                msg.schema_version
            ));
        }
        Ok(msg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Body {
    Hello(Hello),
    Configure(Configure),
    Start(Empty),
    ForceInput(ForceInput),
    StateUpdate(StateUpdate),
    PredictionUpdate(PredictionUpdate),
    Stop(Empty),
    RecordToggle(RecordToggle),
    Export(Export),
    TlRequest(TlRequest),
    TlResult(TlResult),
    Error(ErrorPayload),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello(_) => "hello",
            Body::Configure(_) => "configure",
            Body::Start(_) => "start",
            Body::ForceInput(_) => "force_input",
            Body::StateUpdate(_) => "state_update",
            Body::PredictionUpdate(_) => "prediction_update",
            Body::Stop(_) => "stop",
            Body::RecordToggle(_) => "record_toggle",
            Body::Export(_) => "export",
            Body::TlRequest(_) => "tl_request",
            Body::TlResult(_) => "tl_result",
            Body::Error(_) => "error",
        }
    }

    pub fn error(message: impl Into<String>) -> Self {
        Body::Error(ErrorPayload {
            message: message.into(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Empty {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    /// Name and version of the sender.
    pub agent: String,
    /// Server only: loop rates the service accepts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rates_hz: Vec<f64>,
    /// Server only: ids of the loadable models.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configure {
    pub trajectory: TrajectoryKind,
    pub controller: ControllerKind,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub rate_hz: Option<f64>,
    #[serde(default)]
    pub duration: Option<f64>,
    /// Place an obstacle at this arc fraction; none when absent.
    #[serde(default)]
    pub obstacle_at: Option<f64>,
    /// Identifier stored with recordings, e.g. the operator's name.
    #[serde(default)]
    pub human_id: Option<String>,
    /// Set by the server in its reply.
    #[serde(default)]
    pub session: Option<String>,
}

impl Configure {
    pub fn new(trajectory: TrajectoryKind, controller: ControllerKind) -> Self {
        Configure {
            trajectory,
            controller,
            model: None,
            alpha: None,
            rate_hz: None,
            duration: None,
            obstacle_at: None,
            human_id: None,
            session: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceInput {
    /// Human force (N), one entry per axis.
    pub force: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub u_h: Vec<f64>,
    pub u_r: Vec<f64>,
    pub x_ref_r: Vec<f64>,
    pub obstacle: Option<Obstacle>,
    pub recording: bool,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionUpdate {
    pub step: usize,
    pub t: f64,
    pub model: String,
    /// Predicted positions for the next N steps.
    pub positions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordToggle {
    pub recording: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Export {
    /// Server reply: id under which the recording can be downloaded.
    #[serde(default)]
    pub recording: Option<String>,
    #[serde(default)]
    pub records: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TlRequest {
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Switch the session to the fine-tuned model once it is ready.
    #[serde(default)]
    pub swap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlResult {
    pub base_model: String,
    pub model: String,
    /// Longest horizon the errors refer to.
    pub horizon: usize,
    pub pre_e_rms: f64,
    pub post_e_rms: f64,
    pub recordings: Vec<String>,
    pub seconds: f64,
    pub swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub message: String,
}
