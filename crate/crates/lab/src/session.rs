//! Interactive simulation session driven by wire commands.

use std::collections::VecDeque;
use std::sync::Arc;

use planar_trap::dynamics::{
    steps_per_period, FieldMode, Particle, SimEvent, Simulation, Target, TrapField, VoltageChange,
};
use planar_trap::shuttle::{
    pattern_all_off, pattern_center_c, pattern_center_d, pattern_split, SegmentPattern,
};
use planar_trap::{Result, TrapModel, Vec3, VoltageState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::LabConfig;
use crate::protocol::{
    Ack, Command, CommandError, CommandMessage, Derived, ErrorCode, Mode, NamedPattern,
    ParticleView, PatternSpec, StateMessage, VoltageView, PROTOCOL_VERSION,
};

pub const CENTRAL_RANGE: (f64, f64) = (-300.0, 0.0);
pub const VARIAC_RANGE: (f64, f64) = (0.0, 123.0);
pub const ENDCAP_RANGE: (f64, f64) = (-600.0, 0.0);
pub const SPEED_RANGE: (f64, f64) = (0.1, 100.0);
pub const MAX_PARTICLES: usize = 16;

fn check_range(name: &str, value: f64, range: (f64, f64)) -> std::result::Result<(), CommandError> {
    if value.is_finite() && value >= range.0 && value <= range.1 {
        Ok(())
    } else {
        Err(CommandError::new(
            ErrorCode::OutOfRange,
            format!("{name} = {value} outside [{}, {}]", range.0, range.1),
        ))
    }
}

pub fn pattern_of(spec: &PatternSpec, cfg: &LabConfig) -> SegmentPattern {
    let mut p = match spec {
        PatternSpec::Named(NamedPattern::CenterC) => pattern_center_c(),
        PatternSpec::Named(NamedPattern::CenterD) => pattern_center_d(),
        PatternSpec::Named(NamedPattern::Split) => pattern_split(),
        PatternSpec::Named(NamedPattern::AllOff) => pattern_all_off(),
        PatternSpec::Levels { levels } => SegmentPattern::new(*levels),
    };
    p.values = cfg.levels;
    p
}

pub struct Session {
    cfg: LabConfig,
    seed: u64,
    model: Arc<TrapModel>,
    sim: Simulation<TrapField>,
    mode: Mode,
    paused: bool,
    speed: f64,
    frame: u64,
    variac_rms: f64,
    loading_until: f64,
    next_id: u32,
    rng: ChaCha8Rng,
    tracked: Option<u32>,
    window: VecDeque<f64>,
}

impl Session {
    pub fn new(cfg: LabConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = Arc::new(TrapModel::new(cfg.geometry.clone())?);
        let sim = Self::fresh_sim(&cfg, &model, seed)?;
        Ok(Session {
            variac_rms: cfg.drive.variac_rms,
            seed,
            model,
            sim,
            mode: Mode::Idle,
            paused: false,
            speed: 1.0,
            frame: 0,
            loading_until: 0.0,
            next_id: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed)),
            tracked: None,
            window: VecDeque::new(),
            cfg,
        })
    }

    fn fresh_sim(
        cfg: &LabConfig,
        model: &Arc<TrapModel>,
        seed: u64,
    ) -> Result<Simulation<TrapField>> {
        let volts = VoltageState {
            segments: pattern_of(&PatternSpec::Named(NamedPattern::AllOff), cfg).voltages(),
            endcap: cfg.endcap_v,
            ..VoltageState::with_central(cfg.central_v, cfg.drive.drive())
        };
        let sim_cfg = planar_trap::dynamics::SimConfig { seed, ..cfg.sim };
        Simulation::new(
            TrapField::new(model.clone(), FieldMode::Segmented),
            volts,
            Vec::new(),
            sim_cfg,
        )
    }

    pub fn config(&self) -> &LabConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn model(&self) -> &Arc<TrapModel> {
        &self.model
    }

    pub fn simulation(&self) -> &Simulation<TrapField> {
        &self.sim
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn frame_dt(&self) -> f64 {
        1.0 / self.cfg.stream_rate_hz
    }

    pub fn particle_count(&self) -> usize {
        self.sim.particles().count()
    }

    /// Validates and applies a command, producing its acknowledgement.
    pub fn handle(&mut self, msg: &CommandMessage) -> Ack {
        let r = if msg.v != PROTOCOL_VERSION {
            Err(CommandError::new(
                ErrorCode::Version,
                format!("unsupported protocol version {:?}", msg.v),
            ))
        } else {
            self.apply(&msg.command)
        };
        Ack::from_result(msg.seq, r)
    }

    pub fn apply(&mut self, cmd: &Command) -> std::result::Result<(), CommandError> {
        match *cmd {
            Command::SetVariacRms { volts } => {
                check_range("variac_rms", volts, VARIAC_RANGE)?;
                self.variac_rms = volts;
                self.sim
                    .set_voltage(Target::AcRms, volts * self.cfg.drive.transformer_ratio);
            }
            Command::SetCentralV { volts } => {
                check_range("central_v", volts, CENTRAL_RANGE)?;
                self.sim.set_voltage(Target::Central, volts);
            }
            Command::SetEndcapV { volts } => {
                check_range("endcap_v", volts, ENDCAP_RANGE)?;
                self.sim.set_voltage(Target::Endcap, volts);
            }
            Command::ApplyPattern { ref pattern } => {
                let values = pattern_of(pattern, &self.cfg).voltages();
                let t = self.sim.time() + self.cfg.relay_delay;
                let changes: Vec<VoltageChange> = (0..5)
                    .map(|i| VoltageChange(t, Target::segment(i), values[i]))
                    .collect();
                self.sim
                    .schedule(&changes)
                    .map_err(|e| CommandError::new(ErrorCode::Invalid, e.to_string()))?;
            }
            Command::LoadParticles {
                count,
                gamma_min,
                gamma_max,
            } => self.load(count, gamma_min, gamma_max)?,
            Command::Reset => {
                self.sim = Self::fresh_sim(&self.cfg, &self.model, self.seed)
                    .map_err(|e| CommandError::new(ErrorCode::Invalid, e.to_string()))?;
                self.variac_rms = self.cfg.drive.variac_rms;
                self.mode = Mode::Idle;
                self.paused = false;
                self.next_id = 0;
                self.tracked = None;
                self.window.clear();
            }
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
            Command::SetSpeed { factor } => {
                check_range("speed", factor, SPEED_RANGE)?;
                self.speed = factor;
            }
        }
        Ok(())
    }

    fn load(
        &mut self,
        count: usize,
        gamma_min: Option<f64>,
        gamma_max: Option<f64>,
    ) -> std::result::Result<(), CommandError> {
        if self.mode == Mode::Loading {
            return Err(CommandError::new(
                ErrorCode::Busy,
                "loading already in progress",
            ));
        }
        let present = self.particle_count();
        if count == 0 || present + count > MAX_PARTICLES {
            return Err(CommandError::new(
                ErrorCode::OutOfRange,
                format!("count = {count} with {present} present exceeds {MAX_PARTICLES} particles"),
            ));
        }
        let l = &self.cfg.loading;
        let lo = gamma_min.unwrap_or(l.gamma_min);
        let hi = gamma_max.unwrap_or(l.gamma_max);
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) || lo * hi <= 0.0 {
            return Err(CommandError::new(
                ErrorCode::OutOfRange,
                format!("charge-to-mass range [{lo}, {hi}] must be ordered and exclude zero"),
            ));
        }
        let lateral = Normal::new(0.0, l.lateral_jitter.max(1e-12)).expect("positive jitter");
        let x0 = self.model.geometry().center_x();
        for _ in 0..count {
            let gamma = if hi > lo {
                self.rng.random_range(lo..=hi)
            } else {
                lo
            };
            let r = Vec3::new(
                x0 + lateral.sample(&mut self.rng),
                l.drop_height * (1.0 + 0.1 * self.rng.random::<f64>()),
                l.axial_spread * (2.0 * self.rng.random::<f64>() - 1.0),
            );
            let p = Particle::with_gamma(self.next_id, gamma, r);
            self.next_id += 1;
            self.sim
                .add_particle(p)
                .map_err(|e| CommandError::new(ErrorCode::Invalid, e.to_string()))?;
        }
        self.mode = Mode::Loading;
        self.loading_until = self.sim.time() + l.duration;
        Ok(())
    }

    /// Integration steps per streamed frame at the current speed.
    pub fn steps_per_frame(&self) -> usize {
        ((self.speed * self.frame_dt() / self.sim.config().dt).round() as usize).max(1)
    }

    /// Advances one frame and returns the state at its end.
    pub fn tick(&mut self) -> Result<StateMessage> {
        if !self.paused {
            self.sim
                .perturb_lateral(self.cfg.lateral_noise * self.speed.sqrt());
            let steps = self.steps_per_frame();
            let period_steps = steps_per_period(&self.sim.voltages().drive, self.sim.config().dt);
            for _ in 0..steps {
                self.sim.step()?;
                self.track(period_steps);
            }
            if self.mode == Mode::Loading && self.sim.time() >= self.loading_until {
                self.mode = Mode::Running;
            }
            if self.mode != Mode::Idle && self.particle_count() == 0 {
                self.mode = Mode::Idle;
            }
        }
        self.frame += 1;
        Ok(self.state())
    }

    fn track(&mut self, period_steps: usize) {
        let lowest = self.sim.particles().map(|p| p.id).min();
        if lowest != self.tracked {
            self.tracked = lowest;
            self.window.clear();
        }
        if let Some(p) = lowest.and_then(|id| self.sim.particle(id)) {
            self.window.push_back(p.r.y);
            while self.window.len() > period_steps {
                self.window.pop_front();
            }
        }
    }

    fn derived(&self) -> Option<Derived> {
        let id = self.tracked?;
        let period_steps = steps_per_period(&self.sim.voltages().drive, self.sim.config().dt);
        if self.window.len() < period_steps {
            return None;
        }
        let n = self.window.len() as f64;
        let mean = self.window.iter().sum::<f64>() / n;
        let (lo, hi) = self
            .window
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| {
                (a.min(y), b.max(y))
            });
        Some(Derived {
            tracked_id: id,
            y_mean_mm: mean * 1e3,
            alpha_mm: (hi - lo) * 1e3,
        })
    }

    /// Current state; drains pending simulation events.
    pub fn state(&mut self) -> StateMessage {
        let v = *self.sim.voltages();
        let events: Vec<SimEvent> = self.sim.take_events();
        StateMessage {
            v: PROTOCOL_VERSION.into(),
            t: self.sim.time(),
            mode: self.mode,
            paused: self.paused,
            speed: self.speed,
            voltages: VoltageView {
                central: v.central,
                variac_rms: self.variac_rms,
                ac_rms: v.drive.v_rms(),
                segments: v.segments,
                endcap: v.endcap,
            },
            particles: self
                .sim
                .particles()
                .map(|p| ParticleView {
                    id: p.id,
                    x_mm: p.r.x * 1e3,
                    y_mm: p.r.y * 1e3,
                    z_mm: p.r.z * 1e3,
                })
                .collect(),
            derived: self.derived(),
            events,
        }
    }
}
