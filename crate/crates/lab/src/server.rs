//! TCP service: one session per connection, states streamed at the
//! configured rate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, SyncSender, TryRecvError, TrySendError};
use std::thread;
use std::time::{Duration, Instant};

use crate::config::LabConfig;
use crate::log::{LogError, Recorder};
use crate::protocol::{
    decode_command, read_frame, write_frame, Ack, CommandMessage, ServerMessage, PROTOCOL_VERSION,
};
use crate::session::Session;

/// Outgoing states waiting for the socket; newer states are dropped while
/// it is full so the stream never reorders.
pub const OUTBOX_CAPACITY: usize = 8;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub config: LabConfig,
    pub seed: u64,
    /// Directory for per-connection session logs.
    pub log_dir: Option<PathBuf>,
}

enum Inbound {
    Command(CommandMessage),
    Rejected(Ack),
}

pub fn serve(listener: TcpListener, opts: ServerOptions) -> std::io::Result<()> {
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let opts = opts.clone();
        thread::spawn(move || {
            let peer = stream
                .peer_addr()
                .map(|a| a.to_string())
                .unwrap_or_default();
            log::info!("connection {n} from {peer}");
            if let Err(e) = run_connection(stream, &opts, n) {
                log::warn!("connection {n} closed: {e}");
            }
        });
    }
    Ok(())
}

fn reader_loop(mut stream: TcpStream, tx: mpsc::Sender<Inbound>) {
    while let Ok(Some(body)) = read_frame(&mut stream) {
        let msg = match decode_command(&body) {
            Ok(m) => Inbound::Command(m),
            Err((seq, e)) => Inbound::Rejected(Ack::from_result(seq, Err(e))),
        };
        if tx.send(msg).is_err() {
            break;
        }
    }
}

fn writer_loop(
    mut stream: TcpStream,
    urgent: Receiver<ServerMessage>,
    states: Receiver<ServerMessage>,
) {
    loop {
        let msg = match urgent.try_recv() {
            Ok(m) => m,
            Err(TryRecvError::Disconnected) => return,
            Err(TryRecvError::Empty) => match states.recv_timeout(Duration::from_millis(5)) {
                Ok(m) => m,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => return,
            },
        };
        if write_frame(&mut stream, &msg).is_err() {
            return;
        }
    }
}

/// Runs a session for one client until it disconnects.
pub fn run_connection(
    stream: TcpStream,
    opts: &ServerOptions,
    index: usize,
) -> Result<(), LogError> {
    stream.set_nodelay(true)?;
    let (cmd_tx, cmd_rx) = mpsc::channel();
    let (ack_tx, ack_rx) = mpsc::channel::<ServerMessage>();
    let (state_tx, state_rx): (SyncSender<ServerMessage>, _) = mpsc::sync_channel(OUTBOX_CAPACITY);
    let rd = stream.try_clone()?;
    let wr = stream.try_clone()?;
    thread::spawn(move || reader_loop(rd, cmd_tx));
    let writer = thread::spawn(move || writer_loop(wr, ack_rx, state_rx));

    let session = Session::new(opts.config.clone(), opts.seed)?;
    let sink: Box<dyn Write + Send> = match &opts.log_dir {
        Some(dir) => Box::new(BufWriter::new(File::create(
            dir.join(format!("session-{index}.jsonl")),
        )?)),
        None => Box::new(std::io::sink()),
    };
    let mut rec = Recorder::new(session, sink)?;
    let frame_dt = Duration::from_secs_f64(rec.session().frame_dt());
    let mut next = Instant::now();
    let mut dropped = 0u64;
    let result = 'session: loop {
        loop {
            match cmd_rx.try_recv() {
                Ok(Inbound::Command(msg)) => {
                    let ack = rec.handle(&msg)?;
                    if ack_tx.send(ServerMessage::Ack(ack)).is_err() {
                        break 'session Ok(());
                    }
                }
                Ok(Inbound::Rejected(ack)) => {
                    let _ = ack_tx.send(ServerMessage::Ack(ack));
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => break 'session Ok(()),
            }
        }
        let state = match rec.tick() {
            Ok(s) => s,
            Err(e) => {
                let _ = ack_tx.send(ServerMessage::Fault {
                    v: PROTOCOL_VERSION.into(),
                    message: e.to_string(),
                });
                break 'session Err(e);
            }
        };
        match state_tx.try_send(ServerMessage::State(state)) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) => dropped += 1,
            Err(TrySendError::Disconnected(_)) => break 'session Ok(()),
        }
        next += frame_dt;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    };
    if dropped > 0 {
        log::info!("connection {index}: {dropped} state frames dropped");
    }
    drop(ack_tx);
    drop(state_tx);
    let _ = stream.shutdown(std::net::Shutdown::Both);
    let _ = writer.join();
    result
}
