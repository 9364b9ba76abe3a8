//! Session logs: one JSON object per line, `{"crc":"%08x","entry":{...}}`,
//! where the checksum is the CRC-32 of the exact bytes of `entry`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::config::LabConfig;
use crate::protocol::{Ack, CommandMessage, StateMessage, PROTOCOL_VERSION};
use crate::session::Session;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Header {
        v: String,
        seed: u64,
        config: Box<LabConfig>,
    },
    /// A command handled before the frame with index `frame + 1` was computed.
    Command {
        frame: u64,
        message: CommandMessage,
        ack: Ack,
    },
    State {
        state: StateMessage,
    },
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("replay diverged at line {line}: {reason}")]
    Diverged { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Trap(#[from] planar_trap::TrapError),
}

#[derive(Serialize)]
struct LineOut<'a> {
    crc: String,
    entry: &'a RawValue,
}

#[derive(Deserialize)]
struct LineIn<'a> {
    crc: String,
    #[serde(borrow)]
    entry: &'a RawValue,
}

pub fn checksum(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

pub fn encode_line(entry: &LogEntry) -> serde_json::Result<String> {
    let raw = serde_json::value::to_raw_value(entry)?;
    serde_json::to_string(&LineOut {
        crc: checksum(raw.get().as_bytes()),
        entry: &raw,
    })
}

/// Parses one line; `line` is 1-based and only used in errors.
pub fn decode_line(text: &str, line: usize) -> Result<LogEntry, LogError> {
    let corrupt = |reason: String| LogError::Corrupt { line, reason };
    let outer: LineIn = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    let actual = checksum(outer.entry.get().as_bytes());
    if !actual.eq_ignore_ascii_case(&outer.crc) {
        return Err(corrupt(format!(
            "checksum mismatch: stored {}, computed {actual}",
            outer.crc
        )));
    }
    serde_json::from_str(outer.entry.get()).map_err(|e| corrupt(e.to_string()))
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogEntry>, LogError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_line(&line, k + 1)?);
    }
    Ok(out)
}

pub struct LogWriter<W: Write> {
    w: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(w: W) -> Self {
        LogWriter { w }
    }

    pub fn write(&mut self, entry: &LogEntry) -> std::io::Result<()> {
        let line = encode_line(entry)?;
        self.w.write_all(line.as_bytes())?;
        self.w.write_all(b"\n")?;
        self.w.flush()
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

/// A session whose commands and states are written to a log as they happen.
pub struct Recorder<W: Write> {
    session: Session,
    log: LogWriter<W>,
}

impl<W: Write> Recorder<W> {
    pub fn new(session: Session, w: W) -> std::io::Result<Self> {
        let mut log = LogWriter::new(w);
        log.write(&LogEntry::Header {
            v: PROTOCOL_VERSION.into(),
            seed: session.seed(),
            config: Box::new(session.config().clone()),
        })?;
        Ok(Recorder { session, log })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn handle(&mut self, msg: &CommandMessage) -> std::io::Result<Ack> {
        let frame = self.session.frame();
        let ack = self.session.handle(msg);
        self.log.write(&LogEntry::Command {
            frame,
            message: msg.clone(),
            ack: ack.clone(),
        })?;
        Ok(ack)
    }

    pub fn tick(&mut self) -> Result<StateMessage, LogError> {
        let state = self.session.tick()?;
        self.log.write(&LogEntry::State {
            state: state.clone(),
        })?;
        Ok(state)
    }

    pub fn into_inner(self) -> W {
        self.log.into_inner()
    }
}

/// Re-runs a log from its header and checks that every acknowledgement and
/// state comes out identical. Returns the number of states compared.
pub fn replay(entries: &[LogEntry]) -> Result<usize, LogError> {
    let diverged = |line: usize, reason: String| LogError::Diverged { line, reason };
    let Some(LogEntry::Header { v, seed, config }) = entries.first() else {
        return Err(LogError::Corrupt {
            line: 1,
            reason: "log does not start with a header".into(),
        });
    };
    if v != PROTOCOL_VERSION {
        return Err(LogError::Corrupt {
            line: 1,
            reason: format!("unsupported version {v}"),
        });
    }
    let mut session = Session::new((**config).clone(), *seed)?;
    let mut states = 0;
    for (k, entry) in entries.iter().enumerate().skip(1) {
        let line = k + 1;
        match entry {
            LogEntry::Header { .. } => return Err(diverged(line, "second header".into())),
            LogEntry::Command {
                frame,
                message,
                ack,
            } => {
                if *frame != session.frame() {
                    return Err(diverged(
                        line,
                        format!("command at frame {frame}, session at {}", session.frame()),
                    ));
                }
                let got = session.handle(message);
                if &got != ack {
                    return Err(diverged(
                        line,
                        format!("ack {got:?} differs from logged {ack:?}"),
                    ));
                }
            }
            LogEntry::State { state } => {
                let got = session.tick()?;
                if &got != state {
                    return Err(diverged(line, format!("state {} differs", states + 1)));
                }
                states += 1;
            }
        }
    }
    Ok(states)
}
