//! Equations of motion: q·E(r, t) − m·g·ŷ − b·v plus pairwise Coulomb forces,
//! integrated with fixed-step RK4.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use crate::analysis::{HeightVoltageSeries, SeriesPoint, Y_CAP};
use crate::error::{Result, TrapError};
use crate::geometry::{DriveParams, COULOMB_K, G};
use crate::potential::{TrapModel, Vec3, VoltageState};

/// Spore radius used for the default mass.
pub const PARTICLE_RADIUS: f64 = 14.6e-6;
/// Contact radius for collision events.
pub const COLLISION_RADIUS: f64 = 15e-6;
pub const AIR_VISCOSITY: f64 = 1.81e-5;
pub const PARTICLE_DENSITY: f64 = 1000.0;
/// Default drag coefficient (kg/s); gives b/m = 100 s⁻¹ for the default mass.
pub const DEFAULT_DRAG: f64 = 100.0 * 1000.0 * 4.0 / 3.0 * PI * 14.6e-6 * 14.6e-6 * 14.6e-6;

pub fn default_mass() -> f64 {
    PARTICLE_DENSITY * 4.0 / 3.0 * PI * PARTICLE_RADIUS.powi(3)
}

/// Position at t = 0 of a particle whose guiding center is `center`: the
/// center shifted by the micromotion displacement γ·V·∇φ_AC/Ω², so that a
/// particle released at rest starts without a secular kick.
pub fn micromotion_start(
    model: &TrapModel,
    drive: &DriveParams,
    gamma: f64,
    center: &Vec3,
) -> Vec3 {
    center + model.ac_gradient_3d(center) * (gamma * drive.v_ac_amplitude / drive.omega.powi(2))
}

/// Stokes drag 6πμR.
pub fn stokes_drag(viscosity: f64, radius: f64) -> f64 {
    6.0 * PI * viscosity * radius
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub id: u32,
    pub q: f64,
    pub m: f64,
    pub r: Vec3,
    pub v: Vec3,
}

impl Particle {
    pub fn with_gamma(id: u32, gamma: f64, r: Vec3) -> Self {
        let m = default_mass();
        Particle {
            id,
            q: gamma * m,
            m,
            r,
            v: Vec3::zeros(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.q / self.m
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.r.iter().chain(self.v.iter()).all(|c| c.is_finite());
        if !(self.m > 0.0) || !finite || !self.q.is_finite() {
            return Err(TrapError::InvalidInput(format!(
                "invalid particle state {:?}",
                self
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub drag_coefficient: f64,
    pub enable_coulomb: bool,
    pub seed: u64,
    /// Record every n-th step in trajectories.
    pub sample_stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0 / (60.0 * 500.0),
            drag_coefficient: DEFAULT_DRAG,
            enable_coulomb: true,
            seed: 0,
            sample_stride: 100,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, drive: &DriveParams) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(TrapError::InvalidInput("dt must be positive".into()));
        }
        if self.dt > drive.period() / 100.0 * (1.0 + 1e-9) {
            return Err(TrapError::InvalidInput(format!(
                "dt = {} s exceeds 1/100 of the AC period",
                self.dt
            )));
        }
        if !(self.drag_coefficient >= 0.0) || self.sample_stride == 0 {
            return Err(TrapError::InvalidInput(
                "invalid drag or sample stride".into(),
            ));
        }
        Ok(())
    }
}

/// DC field and unit-amplitude AC field at a point.
#[derive(Debug, Clone, Copy)]
pub struct FieldEval {
    pub e_dc: Vec3,
    pub e_ac: Vec3,
}

/// Anything that can supply the electric field for the integrator.
pub trait FieldSource {
    fn evaluate(&self, volts: &VoltageState, r: &Vec3) -> FieldEval;

    /// DC potential, used for energy bookkeeping.
    fn dc_potential(&self, volts: &VoltageState, r: &Vec3) -> f64;

    /// Reason a particle at `r` counts as lost, if any.
    fn escaped(&self, _r: &Vec3) -> Option<&'static str> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldMode {
    /// Cross-section only: central rail and AC rails, no z dependence.
    Planar,
    /// Rails plus finite segment and endcap rectangles.
    Segmented,
}

/// The trap's own field.
#[derive(Debug, Clone)]
pub struct TrapField {
    pub model: Arc<TrapModel>,
    pub mode: FieldMode,
    pub lateral_limit: f64,
}

impl TrapField {
    pub fn new(model: Arc<TrapModel>, mode: FieldMode) -> Self {
        TrapField {
            model,
            mode,
            lateral_limit: 25e-3,
        }
    }
}

impl FieldSource for TrapField {
    fn evaluate(&self, volts: &VoltageState, r: &Vec3) -> FieldEval {
        let ac = self.model.ac_gradient_3d(r);
        let dc = match self.mode {
            FieldMode::Planar => {
                let d = self.model.dc_jet(r.x, r.y, 1).gradient();
                Vec3::new(volts.central * d[0], volts.central * d[1], 0.0)
            }
            FieldMode::Segmented => self.model.dc_gradient_3d(volts, r),
        };
        FieldEval {
            e_dc: -dc,
            e_ac: -ac,
        }
    }

    fn dc_potential(&self, volts: &VoltageState, r: &Vec3) -> f64 {
        match self.mode {
            FieldMode::Planar => volts.central * self.model.dc_jet(r.x, r.y, 0).phi(),
            FieldMode::Segmented => self.model.dc_potential_3d(volts, r).unwrap_or(f64::NAN),
        }
    }

    fn escaped(&self, r: &Vec3) -> Option<&'static str> {
        let geom = self.model.geometry();
        if r.y <= 0.0 {
            Some("struck electrode plane")
        } else if r.y > Y_CAP {
            Some("left above trap")
        } else if (r.x - geom.center_x()).abs() > self.lateral_limit {
            Some("lost laterally")
        } else if self.mode == FieldMode::Segmented && r.z.abs() > 0.5 * geom.rail_length_z {
            Some("lost axially")
        } else {
            None
        }
    }
}

/// Electrode addressed by a voltage change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "central")]
    Central,
    /// AC transformer output, RMS volts.
    #[serde(rename = "ac_rms")]
    AcRms,
    #[serde(rename = "endcap")]
    Endcap,
    A,
    B,
    C,
    D,
    E,
}

impl Target {
    pub fn segment(i: usize) -> Target {
        [Target::A, Target::B, Target::C, Target::D, Target::E][i]
    }

    pub fn apply(self, volts: &mut VoltageState, value: f64) {
        match self {
            Target::Central => volts.central = value,
            Target::AcRms => volts.drive.v_ac_amplitude = std::f64::consts::SQRT_2 * value,
            Target::Endcap => volts.endcap = value,
            Target::A => volts.segments[0] = value,
            Target::B => volts.segments[1] = value,
            Target::C => volts.segments[2] = value,
            Target::D => volts.segments[3] = value,
            Target::E => volts.segments[4] = value,
        }
    }
}

/// Timed voltage change; serialized as `[t_s, target, value_V]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageChange(pub f64, pub Target, pub f64);

impl VoltageChange {
    pub fn t(&self) -> f64 {
        self.0
    }
}

/// Time-ordered list of voltage changes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Waveform {
    pub changes: Vec<VoltageChange>,
}

impl Waveform {
    pub fn validate(&self) -> Result<()> {
        if self.changes.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(TrapError::InvalidInput(
                "waveform times must be non-decreasing".into(),
            ));
        }
        if self
            .changes
            .iter()
            .any(|c| !(c.0 >= 0.0) || !c.2.is_finite())
        {
            return Err(TrapError::InvalidInput("invalid waveform entry".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: Waveform = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Ejected { id: u32, reason: String },
    Settled { id: u32 },
    VoltageChange { target: Target, value: f64 },
    Collision { a: u32, b: u32 },
    SplitFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub events: Vec<SimEvent>,
}

impl Trajectory {
    /// Samples of one particle in time order.
    pub fn of(&self, id: u32) -> impl Iterator<Item = &TrajectorySample> {
        self.samples.iter().filter(move |s| s.id == id)
    }

    pub fn last_position(&self, id: u32) -> Option<Vec3> {
        self.of(id).last().map(|s| Vec3::new(s.x, s.y, s.z))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for s in &self.samples {
            wr.serialize(s)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn events_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.events)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    p: Particle,
    active: bool,
}

/// One running simulation. Single-threaded and deterministic.
pub struct Simulation<F: FieldSource> {
    field: F,
    volts: VoltageState,
    slots: Vec<Slot>,
    t: f64,
    step_count: u64,
    cfg: SimConfig,
    pending: Vec<VoltageChange>,
    next: usize,
    events: Vec<SimEvent>,
    contacts: Vec<(u32, u32)>,
    rng: ChaCha8Rng,
}

impl<F: FieldSource> Simulation<F> {
    pub fn new(
        field: F,
        volts: VoltageState,
        particles: Vec<Particle>,
        cfg: SimConfig,
    ) -> Result<Self> {
        cfg.validate(&volts.drive)?;
        for p in &particles {
            p.validate()?;
        }
        Ok(Simulation {
            field,
            volts,
            slots: particles
                .into_iter()
                .map(|p| Slot { p, active: true })
                .collect(),
            t: 0.0,
            step_count: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            pending: Vec::new(),
            next: 0,
            events: Vec::new(),
            contacts: Vec::new(),
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn voltages(&self) -> &VoltageState {
        &self.volts
    }

    pub fn field(&self) -> &F {
        &self.field
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn push_event(&mut self, kind: EventKind) {
        self.events.push(SimEvent { t: self.t, kind });
    }

    pub fn particles(&self) -> impl Iterator<Item = &Particle> {
        self.slots.iter().filter(|s| s.active).map(|s| &s.p)
    }

    pub fn all_particles(&self) -> impl Iterator<Item = (&Particle, bool)> {
        self.slots.iter().map(|s| (&s.p, s.active))
    }

    pub fn particle(&self, id: u32) -> Option<&Particle> {
        self.slots
            .iter()
            .find(|s| s.active && s.p.id == id)
            .map(|s| &s.p)
    }

    pub fn is_active(&self, id: u32) -> bool {
        self.slots.iter().any(|s| s.active && s.p.id == id)
    }

    pub fn add_particle(&mut self, p: Particle) -> Result<()> {
        p.validate()?;
        self.slots.push(Slot { p, active: true });
        Ok(())
    }

    /// Marks a particle as lost and logs the ejection.
    pub fn deactivate(&mut self, id: u32, reason: &str) {
        if let Some(s) = self.slots.iter_mut().find(|s| s.p.id == id && s.active) {
            s.active = false;
            self.push_event(EventKind::Ejected {
                id,
                reason: reason.to_string(),
            });
        }
    }

    pub fn clear_particles(&mut self) {
        self.slots.clear();
        self.contacts.clear();
    }

    /// Seeded Gaussian kick to the lateral position of every active particle.
    pub fn perturb_lateral(&mut self, sigma: f64) {
        if sigma <= 0.0 {
            return;
        }
        let n = Normal::new(0.0, sigma).expect("positive sigma");
        for s in self.slots.iter_mut().filter(|s| s.active) {
            s.p.r.x += n.sample(&mut self.rng);
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Immediate voltage change (logged).
    pub fn set_voltage(&mut self, target: Target, value: f64) {
        target.apply(&mut self.volts, value);
        self.push_event(EventKind::VoltageChange { target, value });
    }

    /// Queue changes at absolute times; they take effect exactly at those times.
    pub fn schedule(&mut self, changes: &[VoltageChange]) -> Result<()> {
        for c in changes {
            if c.0 < self.t {
                return Err(TrapError::InvalidInput(format!(
                    "change at {} s lies in the past",
                    c.0
                )));
            }
        }
        self.pending.drain(..self.next);
        self.next = 0;
        self.pending.extend_from_slice(changes);
        self.pending.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(())
    }

    fn apply_due(&mut self) {
        while self.next < self.pending.len() && self.pending[self.next].0 <= self.t {
            let VoltageChange(_, target, value) = self.pending[self.next];
            self.set_voltage(target, value);
            self.next += 1;
        }
    }

    fn accelerations(&self, pos: &[Vec3], vel: &[Vec3], t: f64, out: &mut [Vec3]) {
        let cos = (self.volts.drive.omega * t).cos() * self.volts.drive.v_ac_amplitude;
        let b = self.cfg.drag_coefficient;
        let active: Vec<usize> = (0..self.slots.len())
            .filter(|&i| self.slots[i].active)
            .collect();
        for &i in &active {
            let p = &self.slots[i].p;
            let f = self.field.evaluate(&self.volts, &pos[i]);
            let e = f.e_dc + f.e_ac * cos;
            let mut a = e * (p.q / p.m) - vel[i] * (b / p.m);
            a.y -= G;
            out[i] = a;
        }
        if self.cfg.enable_coulomb && active.len() > 1 {
            for (k, &i) in active.iter().enumerate() {
                for &j in &active[k + 1..] {
                    let d = pos[i] - pos[j];
                    let r2 = d
                        .norm_squared()
                        .max((2.0 * COLLISION_RADIUS).powi(2) * 1e-4);
                    let f =
                        d * (COULOMB_K * self.slots[i].p.q * self.slots[j].p.q / (r2 * r2.sqrt()));
                    out[i] += f / self.slots[i].p.m;
                    out[j] -= f / self.slots[j].p.m;
                }
            }
        }
    }

    fn rk4(&mut self, h: f64) -> Result<()> {
        let n = self.slots.len();
        let r0: Vec<Vec3> = self.slots.iter().map(|s| s.p.r).collect();
        let v0: Vec<Vec3> = self.slots.iter().map(|s| s.p.v).collect();
        let mut k1 = vec![Vec3::zeros(); n];
        let mut k2 = vec![Vec3::zeros(); n];
        let mut k3 = vec![Vec3::zeros(); n];
        let mut k4 = vec![Vec3::zeros(); n];
        let t = self.t;
        self.accelerations(&r0, &v0, t, &mut k1);
        let r1: Vec<Vec3> = (0..n).map(|i| r0[i] + v0[i] * (0.5 * h)).collect();
        let v1: Vec<Vec3> = (0..n).map(|i| v0[i] + k1[i] * (0.5 * h)).collect();
        self.accelerations(&r1, &v1, t + 0.5 * h, &mut k2);
        let r2: Vec<Vec3> = (0..n).map(|i| r0[i] + v1[i] * (0.5 * h)).collect();
        let v2: Vec<Vec3> = (0..n).map(|i| v0[i] + k2[i] * (0.5 * h)).collect();
        self.accelerations(&r2, &v2, t + 0.5 * h, &mut k3);
        let r3: Vec<Vec3> = (0..n).map(|i| r0[i] + v2[i] * h).collect();
        let v3: Vec<Vec3> = (0..n).map(|i| v0[i] + k3[i] * h).collect();
        self.accelerations(&r3, &v3, t + h, &mut k4);
        for i in 0..n {
            if !self.slots[i].active {
                continue;
            }
            let dr = (v0[i] + v1[i] * 2.0 + v2[i] * 2.0 + v3[i]) * (h / 6.0);
            let dv = (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
            let p = &mut self.slots[i].p;
            p.r += dr;
            p.v += dv;
            if !p.r.iter().chain(p.v.iter()).all(|c| c.is_finite()) {
                return Err(TrapError::Divergence {
                    t: self.t + h,
                    reason: format!("non-finite state for particle {}", p.id),
                });
            }
        }
        self.t += h;
        self.step_count += 1;
        self.check_particles();
        Ok(())
    }

    fn check_particles(&mut self) {
        let mut lost = Vec::new();
        for s in self.slots.iter_mut().filter(|s| s.active) {
            if let Some(reason) = self.field.escaped(&s.p.r) {
                s.active = false;
                lost.push((s.p.id, reason));
            }
        }
        for (id, reason) in lost {
            self.push_event(EventKind::Ejected {
                id,
                reason: reason.to_string(),
            });
        }
        if self.cfg.enable_coulomb {
            let act: Vec<&Particle> = self.particles().collect();
            let mut touching = Vec::new();
            for (k, a) in act.iter().enumerate() {
                for b in &act[k + 1..] {
                    if (a.r - b.r).norm() < 2.0 * COLLISION_RADIUS {
                        touching.push((a.id.min(b.id), a.id.max(b.id)));
                    }
                }
            }
            for pair in &touching {
                if !self.contacts.contains(pair) {
                    self.push_event(EventKind::Collision {
                        a: pair.0,
                        b: pair.1,
                    });
                }
            }
            self.contacts = touching;
        }
    }

    /// Single step of at most `dt`, landing exactly on the next scheduled change.
    pub fn step(&mut self) -> Result<()> {
        self.apply_due();
        let mut h = self.cfg.dt;
        if let Some(c) = self.pending.get(self.next) {
            let gap = c.0 - self.t;
            if gap > 0.0 && gap < h * (1.0 - 1e-9) {
                h = gap;
            }
        }
        self.rk4(h)?;
        if let Some(c) = self.pending.get(self.next) {
            if (c.0 - self.t).abs() <= 1e-12 {
                self.t = c.0;
            }
        }
        self.apply_due();
        Ok(())
    }

    /// Integrate to `t_end`, calling `sink` after every step.
    pub fn run_until<S: FnMut(&Self)>(&mut self, t_end: f64, mut sink: S) -> Result<()> {
        while self.t < t_end - 1e-12 {
            self.step()?;
            sink(self);
            if self.slots.iter().all(|s| !s.active) {
                break;
            }
        }
        Ok(())
    }

    /// Integrate to `t_end`, recording every `sample_stride`-th step.
    pub fn record_until(&mut self, t_end: f64, traj: &mut Trajectory) -> Result<()> {
        let stride = self.cfg.sample_stride as u64;
        if traj.samples.is_empty() {
            push_samples(self, traj);
        }
        self.run_until(t_end, |sim| {
            if sim.step_count % stride == 0 {
                push_samples(sim, traj);
            }
        })?;
        push_samples(self, traj);
        traj.events.extend(self.take_events());
        Ok(())
    }

    /// Kinetic plus potential energy of all active particles (J), without the
    /// AC term.
    pub fn static_energy(&self) -> f64 {
        let act: Vec<&Particle> = self.particles().collect();
        let mut e = 0.0;
        for p in &act {
            e += 0.5 * p.m * p.v.norm_squared()
                + p.m * G * p.r.y
                + p.q * self.field.dc_potential(&self.volts, &p.r);
        }
        if self.cfg.enable_coulomb {
            for (k, a) in act.iter().enumerate() {
                for b in &act[k + 1..] {
                    e += COULOMB_K * a.q * b.q / (a.r - b.r).norm();
                }
            }
        }
        e
    }
}

fn push_samples<F: FieldSource>(sim: &Simulation<F>, traj: &mut Trajectory) {
    let t = sim.time();
    for p in sim.particles() {
        if traj
            .samples
            .iter()
            .rev()
            .take(64)
            .any(|s| s.id == p.id && s.t >= t)
        {
            continue;
        }
        traj.samples.push(TrajectorySample {
            t,
            id: p.id,
            x: p.r.x,
            y: p.r.y,
            z: p.r.z,
        });
    }
}

/// Result of letting one particle come to rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SettleOutcome {
    Settled {
        y_mean: f64,
        alpha: f64,
        sigma_y: f64,
        sigma_alpha: f64,
        t_settled: f64,
    },
    Ejected {
        t: f64,
    },
    Unsettled {
        y_mean: f64,
        alpha: f64,
    },
}

/// Per-period statistics of the vertical coordinate of particle `id`.
struct PeriodStats {
    means: Vec<Vec3>,
    ranges: Vec<f64>,
    y_means: Vec<f64>,
}

fn run_periods<F: FieldSource>(
    sim: &mut Simulation<F>,
    id: u32,
    periods: usize,
    steps: usize,
) -> Result<Option<PeriodStats>> {
    let mut st = PeriodStats {
        means: Vec::with_capacity(periods),
        ranges: Vec::with_capacity(periods),
        y_means: Vec::with_capacity(periods),
    };
    for _ in 0..periods {
        let mut sum = Vec3::zeros();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..steps {
            sim.step()?;
            let Some(p) = sim.particle(id) else {
                return Ok(None);
            };
            sum += p.r;
            lo = lo.min(p.r.y);
            hi = hi.max(p.r.y);
        }
        let mean = sum / steps as f64;
        st.means.push(mean);
        st.y_means.push(mean.y);
        st.ranges.push(hi - lo);
    }
    Ok(Some(st))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Steps per AC period for the current drive.
pub fn steps_per_period(drive: &DriveParams, dt: f64) -> usize {
    ((drive.period() / dt).round() as usize).max(1)
}

/// Integrate until the period-averaged position changes by less than 1 µm
/// over 5 AC periods, then measure the mean height and the peak-to-peak
/// vertical excursion per period over `measure_periods` periods.
pub fn settle_particle<F: FieldSource>(
    sim: &mut Simulation<F>,
    id: u32,
    max_time: f64,
    measure_periods: usize,
) -> Result<SettleOutcome> {
    let steps = steps_per_period(&sim.voltages().drive, sim.config().dt);
    let mut history: Vec<Vec3> = Vec::new();
    let t0 = sim.time();
    loop {
        let Some(st) = run_periods(sim, id, 1, steps)? else {
            return Ok(SettleOutcome::Ejected { t: sim.time() });
        };
        history.push(st.means[0]);
        let k = history.len();
        if k > 5 && (history[k - 1] - history[k - 6]).norm() < 1e-6 {
            break;
        }
        if sim.time() - t0 > max_time {
            let Some(st) = run_periods(sim, id, measure_periods.max(1), steps)? else {
                return Ok(SettleOutcome::Ejected { t: sim.time() });
            };
            return Ok(SettleOutcome::Unsettled {
                y_mean: mean_std(&st.y_means).0,
                alpha: mean_std(&st.ranges).0,
            });
        }
    }
    let t_settled = sim.time();
    sim.push_event(EventKind::Settled { id });
    let Some(st) = run_periods(sim, id, measure_periods.max(1), steps)? else {
        return Ok(SettleOutcome::Ejected { t: sim.time() });
    };
    let (y_mean, sigma_y) = mean_std(&st.y_means);
    let (alpha, sigma_alpha) = mean_std(&st.ranges);
    Ok(SettleOutcome::Settled {
        y_mean,
        alpha,
        sigma_y,
        sigma_alpha,
        t_settled,
    })
}

/// Positions of one particle over a capture window, for rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub v_central: f64,
    pub t0: f64,
    pub dt: f64,
    pub positions: Vec<Vec3>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// AC periods measured at the end of each hold.
    pub measure_periods: usize,
    /// Lateral position kick applied at every voltage step (m).
    pub lateral_kick: f64,
    /// Keep the measured positions for rendering.
    pub keep_captures: bool,
    /// Lateral distance from the centerline beyond which the particle counts
    /// as lost from the trap axis (m).
    pub max_lateral_offset: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            measure_periods: 15,
            lateral_kick: 10e-6,
            keep_captures: false,
            max_lateral_offset: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub series: HeightVoltageSeries,
    pub captures: Vec<Capture>,
    /// Central voltage of the step during which the particle was lost.
    pub ejected_at: Option<f64>,
    pub events: Vec<SimEvent>,
}

/// Steps the central voltage through `sweep` (voltage, hold), measuring height
/// and micromotion at the end of every hold, until the particle is lost.
pub fn voltage_sweep_experiment(
    model: Arc<TrapModel>,
    drive: DriveParams,
    particle: Particle,
    sweep: &[(f64, f64)],
    cfg: SimConfig,
    opts: SweepOptions,
) -> Result<SweepOutcome> {
    if sweep.is_empty() {
        return Err(TrapError::InvalidInput("empty sweep".into()));
    }
    let x_axis = model.geometry().center_x();
    let field = TrapField::new(model, FieldMode::Planar);
    let volts = VoltageState::with_central(sweep[0].0, drive);
    let id = particle.id;
    let mut sim = Simulation::new(field, volts, vec![particle], cfg)?;
    let steps = steps_per_period(&drive, cfg.dt);
    let mut out = SweepOutcome::default();
    for &(v, hold) in sweep {
        sim.set_voltage(Target::Central, v);
        sim.perturb_lateral(opts.lateral_kick);
        let measure = opts.measure_periods.max(1);
        let settle_steps = ((hold / cfg.dt).round() as usize).saturating_sub(measure * steps);
        let mut lost = false;
        for _ in 0..settle_steps {
            sim.step()?;
            if !on_axis(&mut sim, id, x_axis, opts.max_lateral_offset) {
                lost = true;
                break;
            }
        }
        let t0 = sim.time();
        let mut positions = Vec::new();
        let mut stats = None;
        if !lost {
            let mut y_means = Vec::with_capacity(measure);
            let mut ranges = Vec::with_capacity(measure);
            'periods: for _ in 0..measure {
                let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                for _ in 0..steps {
                    sim.step()?;
                    if !on_axis(&mut sim, id, x_axis, opts.max_lateral_offset) {
                        lost = true;
                        break 'periods;
                    }
                    let p = sim.particle(id).expect("active particle");
                    if opts.keep_captures {
                        positions.push(p.r);
                    }
                    sum += p.r.y;
                    lo = lo.min(p.r.y);
                    hi = hi.max(p.r.y);
                }
                y_means.push(sum / steps as f64);
                ranges.push(hi - lo);
            }
            if !lost {
                stats = Some((mean_std(&y_means), mean_std(&ranges)));
            }
        }
        match stats {
            Some(((y, sy), (a, sa))) => {
                out.series.points.push(SeriesPoint {
                    v_central: v,
                    y,
                    sigma_y: sy,
                    alpha: a,
                    sigma_alpha: sa,
                });
                if opts.keep_captures {
                    out.captures.push(Capture {
                        v_central: v,
                        t0,
                        dt: cfg.dt,
                        positions,
                    });
                }
            }
            None => {
                out.ejected_at = Some(v);
                break;
            }
        }
    }
    out.events = sim.take_events();
    Ok(out)
}

fn on_axis<F: FieldSource>(sim: &mut Simulation<F>, id: u32, x_axis: f64, limit: f64) -> bool {
    let Some(p) = sim.particle(id) else {
        return false;
    };
    if (p.r.x - x_axis).abs() <= limit {
        return true;
    }
    sim.deactivate(id, "left the trap axis");
    false
}

/// Stepped protocol: start at `v_start`, step by `v_step` every
/// `hold` seconds up to `v_end` inclusive.
pub fn stepped_sweep(v_start: f64, v_end: f64, v_step: f64, hold: f64) -> Vec<(f64, f64)> {
    let n = ((v_end - v_start) / v_step).round() as i64;
    (0..=n.max(0))
        .map(|k| (v_start + k as f64 * v_step, hold))
        .collect()
}

/// Runs several particles in the segmented field under a waveform.
pub fn simulate_multi(
    model: Arc<TrapModel>,
    initial: VoltageState,
    particles: Vec<Particle>,
    waveform: &Waveform,
    cfg: SimConfig,
    duration: f64,
) -> Result<Trajectory> {
    if particles.len() > 16 {
        return Err(TrapError::InvalidInput("at most 16 particles".into()));
    }
    waveform.validate()?;
    let field = TrapField::new(model, FieldMode::Segmented);
    let mut sim = Simulation::new(field, initial, particles, cfg)?;
    sim.schedule(&waveform.changes)?;
    let mut traj = Trajectory::default();
    sim.record_until(duration, &mut traj)?;
    Ok(traj)
}
