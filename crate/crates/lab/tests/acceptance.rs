//! Acceptance report for the trap lab. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use planar_trap::analysis::{
    balance_voltage, ejection_voltage, find_ac_null, find_equilibrium_height,
    fit_gamma_height_curve, null_balance_from_series, HeightVoltageSeries,
};
use planar_trap::dynamics::{
    micromotion_start, simulate_multi, stepped_sweep, voltage_sweep_experiment, Particle,
    SimConfig, SweepOptions, Target, VoltageChange, Waveform,
};
use planar_trap::potential::{
    literal_zero_gap_ac, literal_zero_gap_dc, rect_potential_3d, strip_potential,
};
use planar_trap::shuttle::{
    axial_profile, pattern_center_c, pattern_center_d, pattern_split, run_shuttle_experiment,
    run_split_experiment, ShuttleConfig,
};
use planar_trap::vision::{
    detect_blobs_with, render_frame, series_from_captures, CameraModel, DetectParams,
};
use planar_trap::{
    BoundarySegment, DriveParams, Rect, TrapGeometry, TrapModel, Vec3, VoltageState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trap_lab::config::LabConfig;
use trap_lab::log::{read_log, replay, Recorder};
use trap_lab::protocol::{Command, CommandMessage, NamedPattern, PatternSpec};
use trap_lab::session::Session;

// Targets and tolerances.
const NULL_TARGET_MM: f64 = 4.75;
const NULL_TOL_MM: f64 = 0.005;
const NULL_BAND_MM: (f64, f64) = (4.58, 4.92);
const GAP_VARIATION: f64 = 0.20;
const C2_GAMMA: f64 = -1.08e-3;
const C2_VOLTAGE: f64 = 209.0;
const C2_VOLTAGE_REL: f64 = 0.05;
const C2_HEIGHT_REL: f64 = 0.01;
const ENSEMBLE: usize = 10;
const GAMMA_RANGE: (f64, f64) = (-5e-3, -5e-4);
const REFERENCE_GAMMA: f64 = -2.1e-3;
const SWEEP_START: f64 = -20.0;
const SWEEP_END: f64 = -300.0;
const SWEEP_STEP: f64 = -5.0;
const SWEEP_HOLD: f64 = 1.0;
const HEIGHT_NOISE: f64 = 0.05e-3;
const METHOD1_REL: f64 = 0.05;
const METHOD2_REL: f64 = 0.10;
const MIN_ALPHA_BAND: (f64, f64) = (90.0, 150.0);
const EJECTION_BAND: (f64, f64) = (130.0, 190.0);
const SAMPLES_PER_FRAME: usize = 500;
const SHUTTLE_TARGET_MM: f64 = 19.6;
const SHUTTLE_REL: f64 = 0.10;
const SHUTTLE_PROFILE_REL: f64 = 0.05;
const SPLIT_TARGET_MM: [f64; 2] = [-22.0, 21.1];
const SPLIT_REL: f64 = 0.15;
const SPLIT_WELL_MM: f64 = 1.0;
const FD_STEP: f64 = 1e-7;
const FD_REL: f64 = 1e-6;
const LAPLACE_STEP: f64 = 1e-5;
const LAPLACE_REL: f64 = 1e-4;
const STRIP_LIMIT_REL: f64 = 1e-6;
const LITERAL_ABS: f64 = 1e-12;
const FIELD_POINTS: usize = 100;
const VISION_FIXTURES: usize = 50;
const CENTROID_PX: f64 = 0.5;
const AMPLITUDE_PX: f64 = 1.0;

struct Verdict {
    pass: bool,
    detail: String,
    budget: Option<Duration>,
}

fn verdict(pass: bool, detail: String, budget_s: f64) -> Verdict {
    Verdict {
        pass,
        detail,
        budget: Some(Duration::from_secs_f64(budget_s)),
    }
}

fn model() -> Arc<TrapModel> {
    static M: OnceLock<Arc<TrapModel>> = OnceLock::new();
    M.get_or_init(|| Arc::new(TrapModel::new(TrapGeometry::default()).expect("default geometry")))
        .clone()
}

fn drive() -> DriveParams {
    DriveParams::reference()
}

fn ensemble_gammas() -> Vec<f64> {
    (0..ENSEMBLE)
        .map(|k| GAMMA_RANGE.0 + (GAMMA_RANGE.1 - GAMMA_RANGE.0) * k as f64 / (ENSEMBLE - 1) as f64)
        .collect()
}

struct Member {
    gamma: f64,
    points: usize,
    ejected_at: Option<f64>,
    method1: Result<f64, String>,
    method2: Result<(f64, f64), String>,
}

struct Ensemble {
    members: Vec<Member>,
    reference: Member,
    sim_time: Duration,
    vision_time: Duration,
}

fn run_member(
    gamma: f64,
    seed: u64,
    sim_time: &mut Duration,
    vision_time: &mut Duration,
) -> Member {
    let m = model();
    let d = drive();
    let x = m.geometry().center_x();
    let y0 = find_equilibrium_height(&m, &d, SWEEP_START, gamma)
        .ok()
        .flatten()
        .map(|e| e.y_min)
        .unwrap_or_else(|| find_ac_null(&m).expect("null").y_null);
    let p = Particle::with_gamma(
        0,
        gamma,
        micromotion_start(&m, &d, gamma, &Vec3::new(x, y0, 0.0)),
    );
    let cfg = SimConfig {
        seed,
        ..SimConfig::default()
    };
    let opts = SweepOptions {
        keep_captures: true,
        ..SweepOptions::default()
    };
    let t = Instant::now();
    let sweep = stepped_sweep(SWEEP_START, SWEEP_END, SWEEP_STEP, SWEEP_HOLD);
    let out = voltage_sweep_experiment(m.clone(), d, p, &sweep, cfg, opts).expect("sweep runs");
    *sim_time += t.elapsed();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let noise = Normal::new(0.0, HEIGHT_NOISE).expect("noise");
    let mut noisy = out.series.clone();
    for pt in &mut noisy.points {
        pt.y += noise.sample(&mut rng);
        pt.sigma_y = HEIGHT_NOISE;
    }
    let method1 = fit_gamma_height_curve(&noisy, &m, &d)
        .map(|e| e.gamma)
        .map_err(|e| e.to_string());

    let t = Instant::now();
    let vision: HeightVoltageSeries = series_from_captures(
        &out.captures,
        &CameraModel::side_window(),
        &DetectParams::default(),
        SAMPLES_PER_FRAME,
        &mut rng,
    );
    let method2 = null_balance_from_series(&m, &vision)
        .map(|(e, mm)| (e.gamma, mm.v_vertex.unwrap_or(mm.v_at_min)))
        .map_err(|e| e.to_string());
    *vision_time += t.elapsed();
    Member {
        gamma,
        points: out.series.len(),
        ejected_at: out.ejected_at,
        method1,
        method2,
    }
}

fn ensemble() -> &'static Ensemble {
    static E: OnceLock<Ensemble> = OnceLock::new();
    E.get_or_init(|| {
        let mut sim_time = Duration::ZERO;
        let mut vision_time = Duration::ZERO;
        let members = ensemble_gammas()
            .into_iter()
            .enumerate()
            .map(|(k, g)| run_member(g, 100 + k as u64, &mut sim_time, &mut vision_time))
            .collect();
        let reference = run_member(REFERENCE_GAMMA, 99, &mut sim_time, &mut vision_time);
        Ensemble {
            members,
            reference,
            sim_time,
            vision_time,
        }
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn c1_null_height() -> Verdict {
    let y = find_ac_null(&model()).expect("null").y_null * 1e3;
    let mut lines = vec![format!("default {y:.4} mm")];
    let mut pass = (y - NULL_TARGET_MM).abs() <= NULL_TOL_MM;
    for k in [1.0 - GAP_VARIATION, 1.0 + GAP_VARIATION] {
        let mut g = TrapGeometry::default();
        g.gap_central_ac *= k;
        g.gap_ac_segment *= k;
        let yk = find_ac_null(&TrapModel::new(g).expect("geometry"))
            .expect("null")
            .y_null
            * 1e3;
        pass &= yk >= NULL_BAND_MM.0 && yk <= NULL_BAND_MM.1;
        lines.push(format!("gaps x{k:.1} {yk:.4} mm"));
    }
    verdict(pass, lines.join(", "), 1.0)
}

fn c2_null_balance() -> Verdict {
    let m = model();
    let d = drive();
    let y_null = find_ac_null(&m).expect("null").y_null;
    let v_bal = balance_voltage(&m, y_null, C2_GAMMA).expect("balance");
    let eq = find_equilibrium_height(&m, &d, v_bal, C2_GAMMA).expect("equilibrium");
    let y_eq = eq.map(|e| e.y_min).unwrap_or(f64::NAN);
    let pass = rel(v_bal.abs(), C2_VOLTAGE) <= C2_VOLTAGE_REL
        && (y_eq - y_null).abs() <= C2_HEIGHT_REL * y_null;
    verdict(
        pass,
        format!(
            "balance {:.2} V, equilibrium {:.4} mm vs null {:.4} mm",
            v_bal,
            y_eq * 1e3,
            y_null * 1e3
        ),
        1.0,
    )
}

fn c3_method1() -> Verdict {
    let e = ensemble();
    let mut pass = true;
    let mut parts = Vec::new();
    for m in &e.members {
        match &m.method1 {
            Ok(g) => {
                let r = g / m.gamma - 1.0;
                pass &= r.abs() <= METHOD1_REL;
                parts.push(format!("{:.2e}:{:+.1}%", m.gamma, 100.0 * r));
            }
            Err(err) => {
                pass = false;
                parts.push(format!("{:.2e}:({} pts) {err}", m.gamma, m.points));
            }
        }
    }
    let within = e.sim_time.as_secs_f64() <= 120.0;
    Verdict {
        pass: pass && within,
        detail: format!(
            "{} [sweeps {:.1} s]",
            parts.join(" "),
            e.sim_time.as_secs_f64()
        ),
        budget: None,
    }
}

fn c4_method2() -> Verdict {
    let e = ensemble();
    let mut pass = true;
    let mut parts = Vec::new();
    for m in &e.members {
        match &m.method2 {
            Ok((g, _)) => {
                let r = g / m.gamma - 1.0;
                pass &= r.abs() <= METHOD2_REL;
                parts.push(format!("{:.2e}:{:+.1}%", m.gamma, 100.0 * r));
            }
            Err(err) => {
                pass = false;
                let lost = m
                    .ejected_at
                    .map(|v| format!(", lost at {v} V"))
                    .unwrap_or_default();
                parts.push(format!("{:.2e}:{err}{lost}", m.gamma));
            }
        }
    }
    let v_ref = e
        .reference
        .method2
        .as_ref()
        .map(|(_, v)| v.abs())
        .unwrap_or(f64::NAN);
    pass &= v_ref >= MIN_ALPHA_BAND.0 && v_ref <= MIN_ALPHA_BAND.1;
    let total = (e.sim_time + e.vision_time).as_secs_f64();
    Verdict {
        pass: pass && total <= 300.0,
        detail: format!(
            "{}; min-alpha at {:.1} V for {:.1e} [pipeline {:.1} s]",
            parts.join(" "),
            v_ref,
            REFERENCE_GAMMA,
            total
        ),
        budget: None,
    }
}

fn c5_ejection_order() -> Verdict {
    let m = model();
    let d = drive();
    let y_null = find_ac_null(&m).expect("null").y_null;
    let mut pass = true;
    let mut parts = Vec::new();
    for g in ensemble_gammas() {
        let v_min = balance_voltage(&m, y_null, g).expect("balance").abs();
        let v_ej = ejection_voltage(&m, &d, g, 1000.0)
            .expect("ejection")
            .map(f64::abs)
            .unwrap_or(f64::INFINITY);
        let ok = v_ej > v_min;
        pass &= ok;
        parts.push(format!(
            "{:.2e}:{:.0}/{:.0}{}",
            g,
            v_ej,
            v_min,
            if ok { "" } else { "!" }
        ));
    }
    let v_ref = ejection_voltage(&m, &d, REFERENCE_GAMMA, 1000.0)
        .expect("ejection")
        .map(f64::abs)
        .unwrap_or(f64::NAN);
    pass &= v_ref >= EJECTION_BAND.0 && v_ref <= EJECTION_BAND.1;
    verdict(
        pass,
        format!(
            "ejection/min-alpha V: {}; ejection {:.1} V for {:.1e}",
            parts.join(" "),
            v_ref,
            REFERENCE_GAMMA
        ),
        60.0,
    )
}

fn c6_shuttle() -> Verdict {
    let m = model();
    let d = drive();
    let out = run_shuttle_experiment(m.clone(), REFERENCE_GAMMA, &ShuttleConfig::default())
        .expect("shuttle");
    let disp = out.displacements[0] * 1e3;
    let zc = axial_profile(&m, &pattern_center_c(), &d, REFERENCE_GAMMA, 0.05e-3)
        .expect("profile")
        .nearest_minimum(0.0)
        .expect("C minimum");
    let zd = axial_profile(&m, &pattern_center_d(), &d, REFERENCE_GAMMA, 0.05e-3)
        .expect("profile")
        .nearest_minimum(zc + 20e-3)
        .expect("D minimum");
    let sep = (zd - zc) * 1e3;
    let pass = rel(disp, SHUTTLE_TARGET_MM) <= SHUTTLE_REL && rel(disp, sep) <= SHUTTLE_PROFILE_REL;
    verdict(
        pass,
        format!("displacement {disp:.3} mm, profile minima {sep:.3} mm apart"),
        120.0,
    )
}

fn c7_split() -> Verdict {
    let m = model();
    let d = drive();
    let out = run_split_experiment(
        m.clone(),
        [REFERENCE_GAMMA; 2],
        [-1e-3, 1e-3],
        &ShuttleConfig::default(),
    )
    .expect("split");
    let minima = axial_profile(&m, &pattern_split(), &d, REFERENCE_GAMMA, 0.05e-3)
        .expect("profile")
        .minima;
    let mut pass = true;
    let mut wells = Vec::new();
    for (k, target) in SPLIT_TARGET_MM.iter().enumerate() {
        pass &= rel(out.displacements[k] * 1e3, *target) <= SPLIT_REL;
        let near = minima
            .iter()
            .copied()
            .min_by(|a, b| {
                (a - out.final_z[k])
                    .abs()
                    .total_cmp(&(b - out.final_z[k]).abs())
            })
            .unwrap_or(f64::NAN);
        pass &= (near - out.final_z[k]).abs() * 1e3 <= SPLIT_WELL_MM;
        wells.push(near);
    }
    pass &= wells[0] != wells[1];
    verdict(
        pass,
        format!(
            "displacements ({:.3}, {:.3}) mm, finals ({:.3}, {:.3}) mm, wells ({:.3}, {:.3}) mm",
            out.displacements[0] * 1e3,
            out.displacements[1] * 1e3,
            out.final_z[0] * 1e3,
            out.final_z[1] * 1e3,
            wells[0] * 1e3,
            wells[1] * 1e3
        ),
        120.0,
    )
}

fn random_point(rng: &mut ChaCha8Rng, a: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-a..2.0 * a),
        rng.random_range(0.5e-3..12e-3),
        rng.random_range(-60e-3..60e-3),
    )
}

fn fd_gradient(f: &dyn Fn(&Vec3) -> f64, p: &Vec3, h: f64) -> Vec3 {
    let mut g = Vec3::zeros();
    for i in 0..3 {
        let mut hi = *p;
        let mut lo = *p;
        hi[i] += h;
        lo[i] -= h;
        g[i] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    g
}

fn c8_field_suite() -> Verdict {
    let m = model();
    let a = m.geometry().a;
    let volts = pattern_center_c().apply_to(&VoltageState::with_central(-120.0, drive()));
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let dc = |p: &Vec3| m.dc_potential_3d(&volts, p).expect("above plane");
    let ac = |p: &Vec3| m.ac_potential_2d(p.x, p.y).expect("above plane");
    let u = |p: &Vec3| {
        m.total_potential_energy(&volts, REFERENCE_GAMMA, 1.0, p)
            .expect("above plane")
    };
    let mut worst_fd: f64 = 0.0;
    let mut worst_lap: f64 = 0.0;
    for _ in 0..FIELD_POINTS {
        let p = random_point(&mut rng, a);
        let pairs = [
            (m.dc_gradient_3d(&volts, &p), fd_gradient(&dc, &p, FD_STEP)),
            (m.ac_gradient_3d(&p), fd_gradient(&ac, &p, FD_STEP)),
            (
                m.total_energy_gradient(&volts, REFERENCE_GAMMA, 1.0, &p)
                    .expect("gradient"),
                fd_gradient(&u, &p, FD_STEP),
            ),
        ];
        for (analytic, numeric) in pairs {
            worst_fd = worst_fd.max((analytic - numeric).norm() / analytic.norm());
        }
        let h = LAPLACE_STEP;
        let c = dc(&p);
        let mut sum = 0.0;
        let mut scale = 0.0;
        for i in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[i] += h;
            lo[i] -= h;
            let d2 = (dc(&hi) - 2.0 * c + dc(&lo)) / (h * h);
            sum += d2;
            scale += d2.abs();
        }
        worst_lap = worst_lap.max(sum.abs() / scale);
    }

    let mut worst_strip: f64 = 0.0;
    for _ in 0..20 {
        let x1 = rng.random_range(-5e-3..5e-3);
        let x2 = x1 + rng.random_range(0.5e-3..10e-3);
        let len = 1e4 * (x2 - x1);
        let rect = Rect::new(x1, x2, -len, len);
        let (x, y) = (
            rng.random_range(-10e-3..10e-3),
            rng.random_range(0.5e-3..10e-3),
        );
        let v3 = rect_potential_3d(&rect, 1.0, &Vec3::new(x, y, 0.0)).expect("rect");
        let v2 = strip_potential(&BoundarySegment::electrode(x1, x2, 1.0), x, y).expect("strip");
        worst_strip = worst_strip.max(rel(v3, v2));
    }

    let (la, lb) = (3.2e-3, 4.2e-3);
    let lit = TrapModel::new(TrapGeometry::with_gaps(la, lb, 0.0, 0.0)).expect("zero-gap geometry");
    let mut worst_lit: f64 = 0.0;
    for _ in 0..FIELD_POINTS {
        let (x, y) = (
            rng.random_range(-la..2.0 * la),
            rng.random_range(0.1e-3..12e-3),
        );
        let dac = lit.ac_potential_2d(x, y).expect("ac") - literal_zero_gap_ac(la, lb, lb, x, y);
        let ddc =
            lit.dc_potential_2d(-100.0, x, y).expect("dc") - literal_zero_gap_dc(la, -100.0, x, y);
        worst_lit = worst_lit.max(dac.abs()).max(ddc.abs() / 100.0);
    }
    let pass = worst_fd <= FD_REL
        && worst_lap <= LAPLACE_REL
        && worst_strip <= STRIP_LIMIT_REL
        && worst_lit <= LITERAL_ABS;
    verdict(
        pass,
        format!(
            "gradient vs FD {worst_fd:.1e}, laplacian {worst_lap:.1e}, strip limit {worst_strip:.1e}, literal {worst_lit:.1e}"
        ),
        10.0,
    )
}

fn c9_vision() -> Verdict {
    let cam = CameraModel::side_window();
    let params = DetectParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut worst_c, mut worst_a): (f64, f64) = (0.0, 0.0);
    let mut missed = 0;
    for _ in 0..VISION_FIXTURES {
        let amp = rng.random_range(0.0..0.5e-3);
        let z = rng.random_range(-0.8e-3..0.8e-3);
        let y = rng.random_range(2e-3..9e-3);
        let n = 500;
        let phase = rng.random_range(0.0..2.0 * PI);
        let path: Vec<Vec3> = (0..n)
            .map(|k| {
                Vec3::new(
                    1.6e-3,
                    y + amp * (2.0 * PI * k as f64 / n as f64 + phase).sin(),
                    z,
                )
            })
            .collect();
        let frame = render_frame(&cam, &path, cam.exposure(), 0.0, &mut rng);
        let blobs = detect_blobs_with(&frame, &params);
        let Some(b) = blobs.iter().max_by_key(|b| b.area) else {
            missed += 1;
            continue;
        };
        let (col, row) = cam.project(&Vec3::new(1.6e-3, y, z));
        worst_c = worst_c.max(((b.cx - col).powi(2) + (b.cy - row).powi(2)).sqrt());
        let truth_px = 2.0 * amp * 1e3 / cam.mm_per_px;
        worst_a = worst_a.max((b.amplitude_px - truth_px).abs());
    }
    let pass = missed == 0 && worst_c <= CENTROID_PX && worst_a <= AMPLITUDE_PX;
    verdict(
        pass,
        format!("{VISION_FIXTURES} fixtures, worst centroid {worst_c:.3} px, worst amplitude {worst_a:.3} px, missed {missed}"),
        30.0,
    )
}

fn record_session(seed: u64) -> Vec<u8> {
    let session = Session::new(LabConfig::default(), seed).expect("session");
    let mut rec = Recorder::new(session, Vec::new()).expect("recorder");
    let script: Vec<(u64, Command)> = vec![
        (
            0,
            Command::LoadParticles {
                count: 3,
                gamma_min: None,
                gamma_max: None,
            },
        ),
        (
            30,
            Command::ApplyPattern {
                pattern: PatternSpec::Named(NamedPattern::CenterC),
            },
        ),
        (60, Command::SetCentralV { volts: -60.0 }),
        (90, Command::SetSpeed { factor: 2.0 }),
        (100, Command::SetVariacRms { volts: 18.0 }),
    ];
    let mut seq = 0;
    for frame in 0..150u64 {
        for (_, cmd) in script.iter().filter(|(f, _)| *f == frame) {
            seq += 1;
            rec.handle(&CommandMessage::new(seq, cmd.clone()))
                .expect("log write");
        }
        rec.tick().expect("tick");
    }
    rec.into_inner()
}

fn c10_determinism() -> Verdict {
    let m = model();
    let volts = pattern_center_c().apply_to(&VoltageState::with_central(-100.0, drive()));
    let particles: Vec<Particle> = (0..3)
        .map(|k| {
            Particle::with_gamma(
                k,
                REFERENCE_GAMMA,
                Vec3::new(1.62e-3, 4.5e-3, (k as f64 - 1.0) * 1.5e-3),
            )
        })
        .collect();
    let wave = Waveform {
        changes: vec![VoltageChange(0.2, Target::Central, -110.0)],
    };
    let cfg = SimConfig {
        seed: 5,
        ..SimConfig::default()
    };
    let run =
        || simulate_multi(m.clone(), volts, particles.clone(), &wave, cfg, 0.5).expect("simulate");
    let (t1, t2) = (run(), run());
    let same_traj = serde_json::to_string(&t1).expect("json")
        == serde_json::to_string(&t2).expect("json")
        && t1 == t2;

    let (l1, l2) = (record_session(11), record_session(11));
    let same_log = l1 == l2;
    let replayed = read_log(Cursor::new(&l1)).and_then(|e| replay(&e));
    let ok_replay = matches!(replayed, Ok(150));
    verdict(
        same_traj && same_log && ok_replay,
        format!(
            "trajectories identical: {same_traj} ({} samples), logs identical: {same_log} ({} bytes), replay: {:?}",
            t1.samples.len(),
            l1.len(),
            replayed.map_err(|e| e.to_string())
        ),
        60.0,
    )
}

type Criterion = (&'static str, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        ("C1", "AC null height", c1_null_height),
        ("C2", "null-balance consistency", c2_null_balance),
        ("C3", "charge-to-mass roundtrip, height fit", c3_method1),
        (
            "C4",
            "charge-to-mass roundtrip, micromotion minimum",
            c4_method2,
        ),
        ("C5", "ejection ordering", c5_ejection_order),
        ("C6", "shuttle distance", c6_shuttle),
        ("C7", "split distances", c7_split),
        ("C8", "field correctness suite", c8_field_suite),
        ("C9", "vision oracle", c9_vision),
        ("C10", "determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        let t = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
            budget: None,
        });
        let elapsed = t.elapsed();
        let in_time = v.budget.map_or(true, |b| elapsed <= b);
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = v
            .budget
            .map(|b| format!(" / {:.0} s", b.as_secs_f64()))
            .unwrap_or_default();
        println!(
            "{} {id} {name} ({:.2} s{budget}): {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
