use std::sync::Arc;

use planar_trap::dynamics::{
    micromotion_start, settle_particle, EventKind, FieldMode, Particle, SettleOutcome, Simulation,
    Target, TrapField,
};
use planar_trap::shuttle::pattern_center_c;
use planar_trap::Vec3;
use trap_lab::config::{LabConfig, TRANSFORMER_RATIO};
use trap_lab::protocol::{
    Ack, Command, CommandMessage, ErrorCode, Mode, NamedPattern, PatternSpec, StateMessage,
};
use trap_lab::session::Session;

fn session(seed: u64) -> Session {
    Session::new(LabConfig::default(), seed).unwrap()
}

fn send(s: &mut Session, cmd: Command) -> Ack {
    s.handle(&CommandMessage::new(0, cmd))
}

fn code(a: &Ack) -> Option<ErrorCode> {
    a.error.as_ref().map(|e| e.code)
}

fn run(s: &mut Session, frames: usize) -> Vec<StateMessage> {
    (0..frames).map(|_| s.tick().unwrap()).collect()
}

#[test]
fn out_of_range_central_voltage_leaves_state_unchanged() {
    let mut s = session(0);
    let before = s.tick().unwrap().voltages;
    let ack = send(&mut s, Command::SetCentralV { volts: -350.0 });
    assert!(!ack.ok);
    assert_eq!(code(&ack), Some(ErrorCode::OutOfRange));
    assert_eq!(s.tick().unwrap().voltages, before);
    assert!(!send(&mut s, Command::SetCentralV { volts: f64::NAN }).ok);
    assert!(send(&mut s, Command::SetCentralV { volts: -300.0 }).ok);
    assert_eq!(s.tick().unwrap().voltages.central, -300.0);
}

#[test]
fn other_ranges() {
    let mut s = session(0);
    for cmd in [
        Command::SetVariacRms { volts: -1.0 },
        Command::SetVariacRms { volts: 130.0 },
        Command::SetEndcapV { volts: 10.0 },
        Command::SetEndcapV { volts: -700.0 },
        Command::SetSpeed { factor: 0.05 },
        Command::SetSpeed { factor: 101.0 },
    ] {
        assert_eq!(
            code(&send(&mut s, cmd.clone())),
            Some(ErrorCode::OutOfRange),
            "{cmd:?}"
        );
    }
}

#[test]
fn variac_scales_transformer_output() {
    let mut s = session(0);
    assert!(send(&mut s, Command::SetVariacRms { volts: 12.0 }).ok);
    let v = s.tick().unwrap().voltages;
    assert_eq!(v.variac_rms, 12.0);
    assert!((v.ac_rms - 12.0 * TRANSFORMER_RATIO).abs() < 1e-9);
}

#[test]
fn speed_scales_steps_per_frame() {
    let mut s = session(0);
    assert_eq!(s.steps_per_frame(), 100);
    assert!(send(&mut s, Command::SetSpeed { factor: 2.5 }).ok);
    assert_eq!(s.steps_per_frame(), 250);
    let a = s.tick().unwrap().t;
    let b = s.tick().unwrap().t;
    assert!((b - a - 2.5 / 60.0).abs() < 1e-9);
}

#[test]
fn wrong_version_is_rejected() {
    let mut s = session(0);
    let mut msg = CommandMessage::new(3, Command::Pause);
    msg.v = "v2".into();
    let ack = s.handle(&msg);
    assert_eq!((ack.seq, code(&ack)), (3, Some(ErrorCode::Version)));
    assert!(!s.tick().unwrap().paused);
}

#[test]
fn pattern_lands_after_relay_delay() {
    let mut s = session(0);
    let states = run(&mut s, 3);
    let t0 = states[2].t;
    assert!(
        send(
            &mut s,
            Command::ApplyPattern {
                pattern: PatternSpec::Named(NamedPattern::CenterC)
            }
        )
        .ok
    );
    let delay = s.config().relay_delay;
    let next = s.tick().unwrap();
    // One frame is 16.7 ms, longer than the relay delay.
    assert_eq!(next.voltages.segments, pattern_center_c().voltages());
    let changes: Vec<_> = next
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::VoltageChange { .. }))
        .collect();
    assert_eq!(changes.len(), 5);
    for e in changes {
        assert!(
            (e.t - (t0 + delay)).abs() < 1e-12,
            "{} vs {}",
            e.t,
            t0 + delay
        );
    }

    // With a slow stream the old levels are still visible one frame later.
    let cfg = LabConfig {
        stream_rate_hz: 600.0,
        ..LabConfig::default()
    };
    let mut s = Session::new(cfg, 0).unwrap();
    s.tick().unwrap();
    assert!(
        send(
            &mut s,
            Command::ApplyPattern {
                pattern: PatternSpec::Named(NamedPattern::Split)
            }
        )
        .ok
    );
    let first = s.tick().unwrap();
    assert_ne!(first.voltages.segments[2], -495.0);
    let later = run(&mut s, 5);
    let landed = later
        .iter()
        .find(|st| st.voltages.segments[2] == -495.0)
        .unwrap();
    assert!(landed.t >= 1.0 / 600.0 + delay - 1e-12);
}

#[test]
fn loading_busy_and_limits() {
    let mut s = session(0);
    assert_eq!(s.mode(), Mode::Idle);
    assert_eq!(
        code(&send(
            &mut s,
            Command::LoadParticles {
                count: 0,
                gamma_min: None,
                gamma_max: None
            }
        )),
        Some(ErrorCode::OutOfRange)
    );
    assert_eq!(
        code(&send(
            &mut s,
            Command::LoadParticles {
                count: 17,
                gamma_min: None,
                gamma_max: None
            }
        )),
        Some(ErrorCode::OutOfRange)
    );
    assert_eq!(
        code(&send(
            &mut s,
            Command::LoadParticles {
                count: 1,
                gamma_min: Some(-1e-3),
                gamma_max: Some(1e-3)
            }
        )),
        Some(ErrorCode::OutOfRange)
    );
    assert!(
        send(
            &mut s,
            Command::LoadParticles {
                count: 3,
                gamma_min: None,
                gamma_max: None
            }
        )
        .ok
    );
    assert_eq!(s.mode(), Mode::Loading);
    assert_eq!(
        code(&send(
            &mut s,
            Command::LoadParticles {
                count: 1,
                gamma_min: None,
                gamma_max: None
            }
        )),
        Some(ErrorCode::Busy)
    );
    let states = run(&mut s, 150);
    assert_eq!(states[0].mode, Mode::Loading);
    assert_eq!(states.last().unwrap().mode, Mode::Running);
    assert_eq!(states.last().unwrap().particles.len(), 3);
    assert!(
        send(
            &mut s,
            Command::LoadParticles {
                count: 2,
                gamma_min: None,
                gamma_max: None
            }
        )
        .ok
    );
}

#[test]
fn paused_states_repeat_and_running_time_increases() {
    let mut s = session(5);
    send(
        &mut s,
        Command::LoadParticles {
            count: 2,
            gamma_min: None,
            gamma_max: None,
        },
    );
    let running = run(&mut s, 30);
    assert!(running.windows(2).all(|w| w[1].t > w[0].t));
    assert!(send(&mut s, Command::Pause).ok);
    let paused = run(&mut s, 10);
    assert!(paused[0].paused);
    assert!(paused.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(paused[0].t, running.last().unwrap().t);
    assert!(send(&mut s, Command::Resume).ok);
    let resumed = run(&mut s, 3);
    assert!(resumed[0].t > paused[0].t);
}

#[test]
fn same_seed_same_states() {
    let script = |seed| {
        let mut s = session(seed);
        send(
            &mut s,
            Command::LoadParticles {
                count: 4,
                gamma_min: None,
                gamma_max: None,
            },
        );
        run(&mut s, 60)
    };
    assert_eq!(script(9), script(9));
    assert_ne!(script(9), script(10));
}

#[test]
fn reset_restores_a_fresh_session() {
    let mut s = session(3);
    let fresh = run(&mut session(3), 20);
    send(&mut s, Command::SetVariacRms { volts: 15.0 });
    send(
        &mut s,
        Command::LoadParticles {
            count: 2,
            gamma_min: None,
            gamma_max: None,
        },
    );
    run(&mut s, 40);
    assert!(send(&mut s, Command::Reset).ok);
    assert_eq!(s.mode(), Mode::Idle);
    assert_eq!(s.particle_count(), 0);
    let after = run(&mut s, 20);
    assert_eq!(after[1..], fresh[1..]);
}

#[test]
fn derived_height_matches_settled_particle() {
    let gamma = -2.1e-3;
    let mut s = session(2);
    assert!(
        send(
            &mut s,
            Command::LoadParticles {
                count: 1,
                gamma_min: Some(gamma),
                gamma_max: Some(gamma)
            }
        )
        .ok
    );
    let last = run(&mut s, 360).pop().unwrap();
    let derived = last.derived.expect("tracked particle");
    assert_eq!(derived.tracked_id, 0);

    let model = Arc::clone(s.model());
    let volts = *s.simulation().voltages();
    let x = model.geometry().center_x();
    let start = micromotion_start(
        &model,
        &volts.drive,
        gamma,
        &Vec3::new(x, derived.y_mean_mm * 1e-3, 0.0),
    );
    let field = TrapField::new(model, FieldMode::Segmented);
    let mut sim = Simulation::new(
        field,
        volts,
        vec![Particle::with_gamma(0, gamma, start)],
        s.config().sim,
    )
    .unwrap();
    let SettleOutcome::Settled { y_mean, alpha, .. } =
        settle_particle(&mut sim, 0, 10.0, 15).unwrap()
    else {
        panic!("reference particle did not settle");
    };
    assert!(
        (derived.y_mean_mm * 1e-3 - y_mean).abs() < 0.01 * y_mean,
        "{derived:?} vs {y_mean}"
    );
    assert!(
        (derived.alpha_mm * 1e-3 - alpha).abs() < 0.05 * alpha.max(1e-5),
        "{derived:?} vs {alpha}"
    );
}

#[test]
fn lowering_variac_filters_particles() {
    let mut s = session(1);
    assert!(
        send(
            &mut s,
            Command::LoadParticles {
                count: 5,
                gamma_min: None,
                gamma_max: None
            }
        )
        .ok
    );
    let mut counts = vec![run(&mut s, 180).last().unwrap().particles.len()];
    let mut variac = 14.0;
    while variac >= 8.5 {
        assert!(send(&mut s, Command::SetVariacRms { volts: variac }).ok);
        counts.push(run(&mut s, 180).last().unwrap().particles.len());
        variac -= 0.5;
    }
    assert_eq!(counts[0], 5, "{counts:?}");
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    assert!(counts.iter().any(|&n| n == 1 || n == 2), "{counts:?}");
    assert_eq!(*counts.last().unwrap(), 0, "{counts:?}");
    assert_eq!(s.mode(), Mode::Idle);
    let ejections = s.tick().unwrap();
    assert!(ejections.particles.is_empty());
}

#[test]
fn central_voltage_change_is_logged_as_event() {
    let mut s = session(0);
    send(&mut s, Command::SetCentralV { volts: -90.0 });
    let st = s.tick().unwrap();
    assert!(st.events.iter().any(|e| e.kind
        == EventKind::VoltageChange {
            target: Target::Central,
            value: -90.0
        }));
    assert!(s.tick().unwrap().events.is_empty());
}
