//! Wire protocol between the control UI and the session service.
//!
//! Every message is a frame: a 4-byte big-endian length followed by that
//! many bytes of UTF-8 JSON. Client frames carry a [`CommandMessage`];
//! server frames carry a [`ServerMessage`].

use planar_trap::dynamics::SimEvent;
use planar_trap::shuttle::SegmentLevel;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};

pub const PROTOCOL_VERSION: &str = "v1";
pub const MAX_FRAME_LEN: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedPattern {
    CenterC,
    CenterD,
    Split,
    AllOff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PatternSpec {
    Named(NamedPattern),
    Levels { levels: [SegmentLevel; 5] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    SetVariacRms {
        volts: f64,
    },
    SetCentralV {
        volts: f64,
    },
    SetEndcapV {
        volts: f64,
    },
    ApplyPattern {
        pattern: PatternSpec,
    },
    LoadParticles {
        count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_min: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma_max: Option<f64>,
    },
    Reset,
    Pause,
    Resume,
    SetSpeed {
        factor: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub v: String,
    pub seq: u64,
    #[serde(flatten)]
    pub command: Command,
}

impl CommandMessage {
    pub fn new(seq: u64, command: Command) -> Self {
        CommandMessage {
            v: PROTOCOL_VERSION.into(),
            seq,
            command,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Value outside the allowed range; nothing was changed.
    OutOfRange,
    /// Malformed or unknown command.
    Invalid,
    /// The command cannot be accepted in the current mode.
    Busy,
    /// Unsupported protocol version.
    Version,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandError {
    pub code: ErrorCode,
    pub message: String,
}

impl CommandError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        CommandError {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub v: String,
    pub seq: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<CommandError>,
}

impl Ack {
    pub fn from_result(seq: u64, r: Result<(), CommandError>) -> Self {
        Ack {
            v: PROTOCOL_VERSION.into(),
            seq,
            ok: r.is_ok(),
            error: r.err(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Idle,
    Loading,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageView {
    pub central: f64,
    pub variac_rms: f64,
    pub ac_rms: f64,
    pub segments: [f64; 5],
    pub endcap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleView {
    pub id: u32,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

/// Height and micromotion of the tracked particle over the last AC period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub tracked_id: u32,
    pub y_mean_mm: f64,
    pub alpha_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub v: String,
    pub t: f64,
    pub mode: Mode,
    pub paused: bool,
    pub speed: f64,
    pub voltages: VoltageView,
    pub particles: Vec<ParticleView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<Derived>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<SimEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Ack(Ack),
    State(StateMessage),
    /// Fatal session error; the server closes the connection afterwards.
    Fault {
        v: String,
        message: String,
    },
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too long"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one frame body. `Ok(None)` on a clean end of stream before a header.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut head = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut head[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(head) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

/// Parses a client frame. On failure returns the sequence number if one
/// could be recovered, for the error ack.
pub fn decode_command(body: &[u8]) -> Result<CommandMessage, (u64, CommandError)> {
    let value: serde_json::Value = serde_json::from_slice(body)
        .map_err(|e| (0, CommandError::new(ErrorCode::Invalid, e.to_string())))?;
    let seq = value.get("seq").and_then(|s| s.as_u64()).unwrap_or(0);
    match value.get("v").and_then(|v| v.as_str()) {
        Some(PROTOCOL_VERSION) => {}
        other => {
            return Err((
                seq,
                CommandError::new(
                    ErrorCode::Version,
                    format!("unsupported protocol version {other:?}"),
                ),
            ))
        }
    }
    serde_json::from_value(value)
        .map_err(|e| (seq, CommandError::new(ErrorCode::Invalid, e.to_string())))
}
