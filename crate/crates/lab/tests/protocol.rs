use std::io::{Cursor, ErrorKind};

use planar_trap::shuttle::SegmentLevel;
use serde_json::{json, Value};
use trap_lab::protocol::{
    decode_command, read_frame, write_frame, Ack, Command, CommandError, CommandMessage, ErrorCode,
    NamedPattern, PatternSpec, ServerMessage, MAX_FRAME_LEN, PROTOCOL_VERSION,
};

fn to_value<T: serde::Serialize>(t: &T) -> Value {
    serde_json::to_value(t).unwrap()
}

#[test]
fn frame_roundtrip() {
    let msgs = [
        CommandMessage::new(1, Command::SetCentralV { volts: -120.5 }),
        CommandMessage::new(
            2,
            Command::ApplyPattern {
                pattern: PatternSpec::Named(NamedPattern::Split),
            },
        ),
        CommandMessage::new(
            3,
            Command::LoadParticles {
                count: 4,
                gamma_min: Some(-3e-3),
                gamma_max: None,
            },
        ),
        CommandMessage::new(4, Command::Pause),
    ];
    let mut buf = Vec::new();
    for m in &msgs {
        write_frame(&mut buf, m).unwrap();
    }
    let mut r = Cursor::new(buf);
    for m in &msgs {
        let body = read_frame(&mut r).unwrap().unwrap();
        assert_eq!(&decode_command(&body).unwrap(), m);
    }
    assert!(read_frame(&mut r).unwrap().is_none());
}

#[test]
fn frame_header_is_big_endian_length() {
    let mut buf = Vec::new();
    write_frame(&mut buf, &json!({"a": 1})).unwrap();
    assert_eq!(&buf[..4], &[0, 0, 0, 7]);
    assert_eq!(&buf[4..], br#"{"a":1}"#);
}

#[test]
fn command_json_shapes() {
    assert_eq!(
        to_value(&CommandMessage::new(
            7,
            Command::SetVariacRms { volts: 12.5 }
        )),
        json!({"v": "v1", "seq": 7, "cmd": "set_variac_rms", "volts": 12.5})
    );
    assert_eq!(
        to_value(&CommandMessage::new(
            8,
            Command::ApplyPattern {
                pattern: PatternSpec::Named(NamedPattern::CenterD)
            }
        )),
        json!({"v": "v1", "seq": 8, "cmd": "apply_pattern", "pattern": "center_d"})
    );
    use SegmentLevel::{High, Low, Off};
    assert_eq!(
        to_value(&Command::ApplyPattern {
            pattern: PatternSpec::Levels {
                levels: [High, Off, Low, Off, High]
            }
        }),
        json!({"cmd": "apply_pattern", "pattern": {"levels": ["high", "off", "low", "off", "high"]}})
    );
    assert_eq!(
        to_value(&Command::LoadParticles {
            count: 2,
            gamma_min: None,
            gamma_max: None
        }),
        json!({"cmd": "load_particles", "count": 2})
    );
    assert_eq!(to_value(&Command::Reset), json!({"cmd": "reset"}));
    assert_eq!(
        to_value(&Command::SetSpeed { factor: 4.0 }),
        json!({"cmd": "set_speed", "factor": 4.0})
    );
}

#[test]
fn ack_and_server_message_shapes() {
    assert_eq!(
        to_value(&ServerMessage::Ack(Ack::from_result(5, Ok(())))),
        json!({"type": "ack", "v": "v1", "seq": 5, "ok": true})
    );
    let err = Ack::from_result(6, Err(CommandError::new(ErrorCode::OutOfRange, "too low")));
    assert_eq!(
        to_value(&err),
        json!({"v": "v1", "seq": 6, "ok": false, "error": {"code": "out_of_range", "message": "too low"}})
    );
    let fault = ServerMessage::Fault {
        v: PROTOCOL_VERSION.into(),
        message: "diverged".into(),
    };
    assert_eq!(
        to_value(&fault),
        json!({"type": "fault", "v": "v1", "message": "diverged"})
    );
}

#[test]
fn version_mismatch_is_reported_with_seq() {
    let body = br#"{"v":"v0","seq":41,"cmd":"pause"}"#;
    let (seq, e) = decode_command(body).unwrap_err();
    assert_eq!(seq, 41);
    assert_eq!(e.code, ErrorCode::Version);
    let (_, e) = decode_command(br#"{"seq":2,"cmd":"pause"}"#).unwrap_err();
    assert_eq!(e.code, ErrorCode::Version);
}

#[test]
fn malformed_commands_are_invalid() {
    let (seq, e) = decode_command(b"{not json").unwrap_err();
    assert_eq!((seq, e.code), (0, ErrorCode::Invalid));
    let (seq, e) = decode_command(br#"{"v":"v1","seq":9,"cmd":"launch"}"#).unwrap_err();
    assert_eq!((seq, e.code), (9, ErrorCode::Invalid));
    let (_, e) =
        decode_command(br#"{"v":"v1","seq":10,"cmd":"set_central_v","volts":"high"}"#).unwrap_err();
    assert_eq!(e.code, ErrorCode::Invalid);
    let (_, e) =
        decode_command(br#"{"v":"v1","seq":11,"cmd":"apply_pattern","pattern":"center_x"}"#)
            .unwrap_err();
    assert_eq!(e.code, ErrorCode::Invalid);
}

#[test]
fn truncated_frames_are_errors() {
    let mut full = Vec::new();
    write_frame(&mut full, &CommandMessage::new(1, Command::Resume)).unwrap();
    let cut_body = &full[..full.len() - 3];
    assert_eq!(
        read_frame(&mut Cursor::new(cut_body)).unwrap_err().kind(),
        ErrorKind::UnexpectedEof
    );
    let cut_head = &full[..2];
    assert_eq!(
        read_frame(&mut Cursor::new(cut_head)).unwrap_err().kind(),
        ErrorKind::UnexpectedEof
    );
    assert!(read_frame(&mut Cursor::new(Vec::new())).unwrap().is_none());
}

#[test]
fn oversized_frame_is_rejected_before_reading() {
    let head = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
    assert_eq!(
        read_frame(&mut Cursor::new(head.to_vec()))
            .unwrap_err()
            .kind(),
        ErrorKind::InvalidData
    );
}
