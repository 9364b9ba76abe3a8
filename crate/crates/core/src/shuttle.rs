//! Segment voltage patterns, axial profiles and the shuttling and splitting
//! experiments.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

use crate::analysis::{find_ac_null, Y_CAP};
use crate::dynamics::{
    micromotion_start, steps_per_period, EventKind, FieldMode, Particle, SimConfig, Simulation,
    Target, Trajectory, TrajectorySample, TrapField, VoltageChange, Waveform,
};
use crate::error::{Result, TrapError};
use crate::geometry::{DriveParams, G};
use crate::potential::{pseudo_coefficient, TrapModel, Vec3, VoltageState};
use crate::solve::brent_root;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentLevel {
    High,
    Low,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelVoltages {
    pub high: f64,
    pub low: f64,
    pub off: f64,
}

impl Default for LevelVoltages {
    fn default() -> Self {
        LevelVoltages {
            high: -495.0,
            low: -259.0,
            off: -0.01,
        }
    }
}

impl LevelVoltages {
    pub fn voltage(&self, level: SegmentLevel) -> f64 {
        match level {
            SegmentLevel::High => self.high,
            SegmentLevel::Low => self.low,
            SegmentLevel::Off => self.off,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.high.abs() > self.low.abs() && self.low.abs() > self.off.abs() {
            Ok(())
        } else {
            Err(TrapError::InvalidInput(
                "need |high| > |low| > |off|".into(),
            ))
        }
    }
}

pub const DEFAULT_ENDCAP_V: f64 = -244.1;
pub const DEFAULT_RELAY_DELAY: f64 = 4.2e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPattern {
    /// Levels of A..E.
    pub levels: [SegmentLevel; 5],
    pub endcap: f64,
    #[serde(default)]
    pub values: LevelVoltages,
}

impl SegmentPattern {
    pub fn new(levels: [SegmentLevel; 5]) -> Self {
        SegmentPattern {
            levels,
            endcap: DEFAULT_ENDCAP_V,
            values: LevelVoltages::default(),
        }
    }

    pub fn voltages(&self) -> [f64; 5] {
        self.levels.map(|l| self.values.voltage(l))
    }

    /// Swaps A with E and B with D.
    pub fn mirrored(&self) -> Self {
        let mut p = *self;
        p.levels.reverse();
        p
    }

    /// Segment and endcap voltages on top of `base`.
    pub fn apply_to(&self, base: &VoltageState) -> VoltageState {
        VoltageState {
            segments: self.voltages(),
            endcap: self.endcap,
            ..*base
        }
    }
}

use SegmentLevel::{High, Low, Off};

/// Well over C: A, E high; B, D low; C off.
pub fn pattern_center_c() -> SegmentPattern {
    SegmentPattern::new([High, Low, Off, Low, High])
}

/// Well over D: A, B high; C, E low; D off.
pub fn pattern_center_d() -> SegmentPattern {
    SegmentPattern::new([High, High, Low, Off, Low])
}

/// Double well: C high; A, E low; B, D off.
pub fn pattern_split() -> SegmentPattern {
    SegmentPattern::new([Low, Off, High, Off, Low])
}

/// Every segment off.
pub fn pattern_all_off() -> SegmentPattern {
    SegmentPattern::new([Off; 5])
}

/// Patterns switched at given times; segment changes land `relay_delay` later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageSchedule {
    pub entries: Vec<(f64, SegmentPattern)>,
    pub relay_delay: f64,
}

impl VoltageSchedule {
    pub fn new(entries: Vec<(f64, SegmentPattern)>) -> Self {
        VoltageSchedule {
            entries,
            relay_delay: DEFAULT_RELAY_DELAY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.entries.first() {
            Some((t, _)) if *t == 0.0 => {}
            _ => {
                return Err(TrapError::InvalidInput(
                    "schedule must start at t = 0".into(),
                ))
            }
        }
        if self.entries.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(TrapError::InvalidInput(
                "schedule times must increase".into(),
            ));
        }
        if !(self.relay_delay >= 0.0) {
            return Err(TrapError::InvalidInput("negative relay delay".into()));
        }
        for (_, p) in &self.entries {
            p.values.validate()?;
        }
        Ok(())
    }

    /// Voltages in force at t = 0.
    pub fn initial_state(&self, base: &VoltageState) -> VoltageState {
        self.entries[0].1.apply_to(base)
    }

    /// Voltage changes after t = 0, relay delay included.
    pub fn to_waveform(&self) -> Waveform {
        let mut changes = Vec::new();
        let mut prev = self.entries[0].1;
        for (t, p) in &self.entries[1..] {
            if p.endcap != prev.endcap {
                changes.push(VoltageChange(*t, Target::Endcap, p.endcap));
            }
            let (old, new) = (prev.voltages(), p.voltages());
            for i in 0..5 {
                if old[i] != new[i] {
                    changes.push(VoltageChange(
                        t + self.relay_delay,
                        Target::segment(i),
                        new[i],
                    ));
                }
            }
            prev = *p;
        }
        changes.sort_by(|a, b| a.0.total_cmp(&b.0));
        Waveform { changes }
    }
}

/// U/q sampled along z above the centerline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxialProfile {
    pub height: f64,
    pub gamma: f64,
    pub z: Vec<f64>,
    pub u_per_q: Vec<f64>,
    /// Positions of the strict local minima of U = q·(U/q), refined by a
    /// parabola through the three neighbouring samples.
    pub minima: Vec<f64>,
}

impl AxialProfile {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["z_mm", "U_per_q"])?;
        for (z, u) in self.z.iter().zip(&self.u_per_q) {
            wr.write_record([format!("{}", z * 1e3), format!("{u}")])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Minimum nearest to `z`.
    pub fn nearest_minimum(&self, z: f64) -> Option<f64> {
        self.minima
            .iter()
            .copied()
            .min_by(|a, b| (a - z).abs().total_cmp(&(b - z).abs()))
    }
}

/// Samples U/q along z at x = a/2 and the AC-null height with spacing `step`.
pub fn axial_profile(
    model: &TrapModel,
    pattern: &SegmentPattern,
    drive: &DriveParams,
    gamma: f64,
    step: f64,
) -> Result<AxialProfile> {
    pattern.values.validate()?;
    if !(step > 0.0) || gamma == 0.0 {
        return Err(TrapError::InvalidInput(
            "need step > 0 and nonzero gamma".into(),
        ));
    }
    let geom = model.geometry();
    let y = find_ac_null(model)?.y_null;
    let x = geom.center_x();
    let volts = pattern.apply_to(&VoltageState::with_central(0.0, *drive));
    let half = 0.5 * geom.rail_length_z;
    let n = (2.0 * half / step).floor() as usize;
    let pseudo = pseudo_coefficient(drive, gamma) * model.ac_grad_sq(x, y)?.value;
    let mut z = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let zi = -half + i as f64 * step;
        let phi = model.dc_potential_3d(&volts, &Vec3::new(x, y, zi))?;
        z.push(zi);
        u.push(phi + G * y / gamma + pseudo);
    }
    let minima = local_minima(&z, &u, gamma.signum());
    Ok(AxialProfile {
        height: y,
        gamma,
        z,
        u_per_q: u,
        minima,
    })
}

fn local_minima(z: &[f64], u_per_q: &[f64], sign: f64) -> Vec<f64> {
    let e: Vec<f64> = u_per_q.iter().map(|u| sign * u).collect();
    let mut out = Vec::new();
    for i in 1..e.len().saturating_sub(1) {
        if e[i] < e[i - 1] && e[i] < e[i + 1] {
            let denom = e[i - 1] - 2.0 * e[i] + e[i + 1];
            let shift = if denom > 0.0 {
                0.5 * (e[i - 1] - e[i + 1]) / denom
            } else {
                0.0
            };
            out.push(z[i] + shift * (z[i + 1] - z[i]));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuttleConfig {
    pub drive: DriveParams,
    /// Central rail voltage; `None` balances the particle at the AC null
    /// above the starting well.
    pub central: Option<f64>,
    pub relay_delay: f64,
    /// Time in the initial pattern before switching.
    pub settle_time: f64,
    /// Time after the (last) switch.
    pub transfer_time: f64,
    /// All-off dwell before the split pattern.
    pub dwell_all_off: f64,
    pub sim: SimConfig,
}

impl Default for ShuttleConfig {
    fn default() -> Self {
        ShuttleConfig {
            drive: DriveParams::reference(),
            central: None,
            relay_delay: DEFAULT_RELAY_DELAY,
            settle_time: 4.0,
            transfer_time: 8.0,
            dwell_all_off: 0.5,
            sim: SimConfig {
                sample_stride: 300,
                ..SimConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    /// Net axial displacement of each particle (m), in input order.
    pub displacements: Vec<f64>,
    pub initial_z: Vec<f64>,
    pub final_z: Vec<f64>,
    pub trajectory: Trajectory,
}

fn period_mean_z(sim: &mut Simulation<TrapField>, ids: &[u32]) -> Result<Vec<Option<f64>>> {
    let steps = steps_per_period(&sim.voltages().drive, sim.config().dt);
    let mut sums = vec![0.0; ids.len()];
    let mut counts = vec![0usize; ids.len()];
    for _ in 0..steps {
        sim.step()?;
        for (k, id) in ids.iter().enumerate() {
            if let Some(p) = sim.particle(*id) {
                sums[k] += p.r.z;
                counts[k] += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c == steps).then(|| s / c as f64))
        .collect())
}

fn run_schedule(
    model: Arc<TrapModel>,
    particles: Vec<Particle>,
    schedule: &VoltageSchedule,
    cfg: &ShuttleConfig,
    central: f64,
    t_end: f64,
) -> Result<ExperimentOutcome> {
    schedule.validate()?;
    let base = VoltageState::with_central(central, cfg.drive);
    let field = TrapField::new(model, FieldMode::Segmented);
    let ids: Vec<u32> = particles.iter().map(|p| p.id).collect();
    let mut sim = Simulation::new(field, schedule.initial_state(&base), particles, cfg.sim)?;
    sim.schedule(&schedule.to_waveform().changes)?;
    let mut traj = Trajectory::default();
    let t_switch = schedule.entries.get(1).map(|e| e.0).unwrap_or(t_end);
    let period = cfg.drive.period();
    sim.record_until(t_switch - period, &mut traj)?;
    let initial = period_mean_z(&mut sim, &ids)?;
    sim.record_until(t_end - period, &mut traj)?;
    let fin = period_mean_z(&mut sim, &ids)?;
    let t = sim.time();
    for p in sim.particles() {
        traj.samples.push(TrajectorySample {
            t,
            id: p.id,
            x: p.r.x,
            y: p.r.y,
            z: p.r.z,
        });
    }
    traj.events.extend(sim.take_events());
    let mut displacements = Vec::new();
    let (mut zi, mut zf) = (Vec::new(), Vec::new());
    for (k, id) in ids.iter().enumerate() {
        match (initial[k], fin[k]) {
            (Some(a), Some(b)) => {
                displacements.push(b - a);
                zi.push(a);
                zf.push(b);
            }
            _ => {
                let why = traj
                    .events
                    .iter()
                    .find_map(|e| match &e.kind {
                        EventKind::Ejected { id: lost, reason } if lost == id => {
                            Some(format!("{reason} at t = {:.4} s", e.t))
                        }
                        _ => None,
                    })
                    .unwrap_or_else(|| "lost".into());
                return Err(TrapError::InvalidInput(format!(
                    "particle {id} was lost during the experiment: {why}"
                )));
            }
        }
    }
    Ok(ExperimentOutcome {
        displacements,
        initial_z: zi,
        final_z: zf,
        trajectory: traj,
    })
}

/// Lowest stable height of U along y at (x, z) for the given voltages.
pub fn vertical_equilibrium(
    model: &TrapModel,
    volts: &VoltageState,
    gamma: f64,
    x: f64,
    z: f64,
) -> Option<f64> {
    let slope = |y: f64| {
        model
            .total_energy_gradient(volts, gamma, 1.0, &Vec3::new(x, y, z))
            .map(|g| g.y)
            .unwrap_or(f64::NAN)
    };
    let n = 600;
    let (lo, hi) = (1e-5f64.ln(), Y_CAP.ln());
    let mut prev_y = lo.exp();
    let mut prev = slope(prev_y);
    for k in 1..=n {
        let y = (lo + (hi - lo) * k as f64 / n as f64).exp();
        let cur = slope(y);
        if prev < 0.0 && cur >= 0.0 {
            return brent_root(slope, prev_y, y, 1e-12);
        }
        prev = cur;
        prev_y = y;
    }
    None
}

/// Central voltage that holds a particle of `gamma` at the AC null above
/// `z` when the other electrodes follow `pattern`.
pub fn balancing_central_voltage(
    model: &TrapModel,
    pattern: &SegmentPattern,
    drive: &DriveParams,
    gamma: f64,
    z: f64,
) -> Result<f64> {
    let y = find_ac_null(model)?.y_null;
    let p = Vec3::new(model.geometry().center_x(), y, z);
    let others = model
        .dc_gradient_3d(
            &pattern.apply_to(&VoltageState::with_central(0.0, *drive)),
            &p,
        )
        .y;
    let unit = model.dc_gradient_2d(1.0, p.x, p.y)?[1];
    Ok(-(G / gamma + others) / unit)
}

fn resolve_central(
    model: &TrapModel,
    cfg: &ShuttleConfig,
    pattern: &SegmentPattern,
    gamma: f64,
    z: f64,
) -> Result<f64> {
    match cfg.central {
        Some(v) => Ok(v),
        None => balancing_central_voltage(model, pattern, &cfg.drive, gamma, z),
    }
}

/// Starting position over `z`: the vertical equilibrium for the initial
/// voltages, shifted by the micromotion displacement.
fn start_position(
    model: &TrapModel,
    cfg: &ShuttleConfig,
    volts: &VoltageState,
    gamma: f64,
    z: f64,
) -> Result<Vec3> {
    let x = model.geometry().center_x();
    let y = match vertical_equilibrium(model, volts, gamma, x, z) {
        Some(y) => y,
        None => find_ac_null(model)?.y_null,
    };
    Ok(micromotion_start(
        model,
        &cfg.drive,
        gamma,
        &Vec3::new(x, y, z),
    ))
}

/// Settles a particle in the well over C, switches to the well over D and
/// returns the net axial displacement.
pub fn run_shuttle_experiment(
    model: Arc<TrapModel>,
    gamma: f64,
    cfg: &ShuttleConfig,
) -> Result<ExperimentOutcome> {
    run_shuttle_between(model, gamma, cfg, pattern_center_c(), pattern_center_d())
}

/// Shuttle between arbitrary patterns.
pub fn run_shuttle_between(
    model: Arc<TrapModel>,
    gamma: f64,
    cfg: &ShuttleConfig,
    from: SegmentPattern,
    to: SegmentPattern,
) -> Result<ExperimentOutcome> {
    let z0 = axial_profile(&model, &from, &cfg.drive, gamma, 0.1e-3)?
        .nearest_minimum(0.0)
        .unwrap_or(0.0);
    let central = resolve_central(&model, cfg, &from, gamma, z0)?;
    let volts = from.apply_to(&VoltageState::with_central(central, cfg.drive));
    let p = Particle::with_gamma(0, gamma, start_position(&model, cfg, &volts, gamma, z0)?);
    let mut schedule = VoltageSchedule::new(vec![(0.0, from), (cfg.settle_time, to)]);
    schedule.relay_delay = cfg.relay_delay;
    let t_end = cfg.settle_time + cfg.transfer_time;
    run_schedule(model, vec![p], &schedule, cfg, central, t_end)
}

/// Two particles start near the center in the well over C; the segments go
/// all-off, then to the double-well pattern. Returns signed displacements.
pub fn run_split_experiment(
    model: Arc<TrapModel>,
    gammas: [f64; 2],
    start_z: [f64; 2],
    cfg: &ShuttleConfig,
) -> Result<ExperimentOutcome> {
    let initial = pattern_center_c();
    let central = resolve_central(&model, cfg, &initial, 0.5 * (gammas[0] + gammas[1]), 0.0)?;
    let volts = initial.apply_to(&VoltageState::with_central(central, cfg.drive));
    let particles = vec![
        Particle::with_gamma(
            0,
            gammas[0],
            start_position(&model, cfg, &volts, gammas[0], start_z[0])?,
        ),
        Particle::with_gamma(
            1,
            gammas[1],
            start_position(&model, cfg, &volts, gammas[1], start_z[1])?,
        ),
    ];
    let t1 = cfg.settle_time;
    let t2 = t1 + cfg.dwell_all_off;
    let mut schedule = VoltageSchedule::new(vec![
        (0.0, pattern_center_c()),
        (t1, pattern_all_off()),
        (t2, pattern_split()),
    ]);
    schedule.relay_delay = cfg.relay_delay;
    let mut out = run_schedule(
        model.clone(),
        particles,
        &schedule,
        cfg,
        central,
        t2 + cfg.transfer_time,
    )?;
    let fin = &out.final_z;
    if fin.len() == 2 && fin[0].signum() == fin[1].signum() {
        let t = out.trajectory.samples.last().map(|s| s.t).unwrap_or(0.0);
        out.trajectory.events.push(crate::dynamics::SimEvent {
            t,
            kind: EventKind::SplitFailure,
        });
    }
    Ok(out)
}
