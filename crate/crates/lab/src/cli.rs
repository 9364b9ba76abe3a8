//! Command-line front end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use planar_trap::analysis::{
    ejection_voltage, find_ac_null, find_equilibrium_height, fit_gamma_height_curve,
    null_balance_from_series, HeightVoltageSeries,
};
use planar_trap::dynamics::{
    micromotion_start, settle_particle, stepped_sweep, voltage_sweep_experiment, FieldMode,
    Particle, SettleOutcome, SimConfig, Simulation, SweepOptions, TrapField,
};
use planar_trap::shuttle::{run_shuttle_between, run_split_experiment, ShuttleConfig};
use planar_trap::vision::{
    detect_blobs_with, render_sequence, write_blob_csv, DetectParams, Frame,
};
use planar_trap::{TrapError, TrapModel, Vec3, VoltageState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::LabConfig;
use crate::log::{read_log, replay, LogError};
use crate::protocol::{NamedPattern, PatternSpec};
use crate::server::{serve, ServerOptions};
use crate::session::pattern_of;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "trap-lab",
    version,
    about = "Virtual planar five-rail particle trap"
)]
pub struct Cli {
    /// Lab configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

impl Output {
    fn open(&self) -> anyhow::Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => Box::new(std::io::stdout().lock()),
        })
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Method {
    Height,
    Null,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Total potential energy per mass U/m over the cross-section, as CSV.
    PotentialMap {
        #[arg(long, allow_hyphen_values = true, default_value_t = -100.0)]
        v_central: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = -2.1e-3)]
        gamma: f64,
        /// Grid points per axis.
        #[arg(long, default_value_t = 101)]
        n: usize,
        /// Largest height (mm).
        #[arg(long, default_value_t = 12.0)]
        y_max_mm: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Locate the AC null on the centerline.
    FindNull,
    /// Equilibrium height and ejection voltage for one particle.
    Equilibrium {
        #[arg(long, allow_hyphen_values = true)]
        gamma: f64,
        #[arg(long, allow_hyphen_values = true)]
        v_central: f64,
    },
    /// Estimate the charge-to-mass ratio from a height/voltage CSV.
    FitGamma {
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Both)]
        method: Method,
    },
    /// Simulated stepped central-voltage sweep of one particle.
    Sweep {
        #[arg(long, allow_hyphen_values = true, default_value_t = -2.1e-3)]
        gamma: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = -20.0)]
        start: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = -300.0)]
        end: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = -5.0)]
        step: f64,
        /// Hold time per voltage (s).
        #[arg(long, default_value_t = 1.0)]
        hold: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Shuttle a particle from one well to another.
    Shuttle {
        #[arg(long, allow_hyphen_values = true, default_value_t = -2.1e-3)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = PatternArg::CenterC)]
        from: PatternArg,
        #[arg(long, value_enum, default_value_t = PatternArg::CenterD)]
        to: PatternArg,
        #[arg(long, default_value_t = 1.0)]
        settle: f64,
        #[arg(long, default_value_t = 3.0)]
        transfer: f64,
        /// Trajectory CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Split a pair of particles into the two outer wells.
    Split {
        #[arg(long, allow_hyphen_values = true, num_args = 2, default_values_t = [-2.1e-3, -2.1e-3])]
        gammas: Vec<f64>,
        /// Starting axial positions (mm).
        #[arg(long, allow_hyphen_values = true, num_args = 2, default_values_t = [-0.5, 0.5])]
        start_z_mm: Vec<f64>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Settle a particle and render camera frames of it.
    Render {
        #[arg(long, allow_hyphen_values = true, default_value_t = -2.1e-3)]
        gamma: f64,
        #[arg(long, allow_hyphen_values = true, default_value_t = -100.0)]
        v_central: f64,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value = "frames")]
        out_dir: PathBuf,
    },
    /// Detect particles in PGM frames and write the blob table as CSV.
    Track {
        frames: Vec<PathBuf>,
        #[arg(long, default_value_t = 60)]
        threshold: u8,
        #[command(flatten)]
        output: Output,
    },
    /// Run the session service.
    Serve {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Directory for per-connection session logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Verify a session log by re-running it.
    Replay { log: PathBuf },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum PatternArg {
    CenterC,
    CenterD,
    Split,
    AllOff,
}

impl From<PatternArg> for PatternSpec {
    fn from(p: PatternArg) -> Self {
        PatternSpec::Named(match p {
            PatternArg::CenterC => NamedPattern::CenterC,
            PatternArg::CenterD => NamedPattern::CenterD,
            PatternArg::Split => NamedPattern::Split,
            PatternArg::AllOff => NamedPattern::AllOff,
        })
    }
}

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let trap =
            cause
                .downcast_ref::<TrapError>()
                .or_else(|| match cause.downcast_ref::<LogError>() {
                    Some(LogError::Trap(t)) => Some(t),
                    _ => None,
                });
        match trap {
            Some(TrapError::Divergence { .. }) => return EXIT_DIVERGENCE,
            Some(
                TrapError::InvalidInput(_)
                | TrapError::InvalidGeometry(_)
                | TrapError::InvalidDrive(_)
                | TrapError::BelowPlane(_)
                | TrapError::Json(_)
                | TrapError::Csv(_),
            ) => return EXIT_VALIDATION,
            Some(_) => return EXIT_FAILURE,
            None => {}
        }
        if matches!(
            cause.downcast_ref::<LogError>(),
            Some(LogError::Corrupt { .. })
        ) {
            return EXIT_VALIDATION;
        }
    }
    EXIT_FAILURE
}

fn load_config(path: Option<&Path>) -> anyhow::Result<LabConfig> {
    match path {
        Some(p) => LabConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(LabConfig::default()),
    }
}

fn batch_sim(seed: u64) -> SimConfig {
    SimConfig {
        seed,
        ..SimConfig::default()
    }
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let model = Arc::new(TrapModel::new(cfg.geometry.clone())?);
    let drive = cfg.drive.drive();
    match cli.command {
        Cmd::PotentialMap {
            v_central,
            gamma,
            n,
            y_max_mm,
            output,
        } => {
            if n < 2 || !(y_max_mm > 0.0) || gamma == 0.0 {
                return Err(TrapError::InvalidInput(
                    "need n >= 2, y_max_mm > 0 and nonzero gamma".into(),
                )
                .into());
            }
            let volts = VoltageState::with_central(v_central, drive);
            let a = cfg.geometry.a;
            let mut wr = csv::Writer::from_writer(output.open()?);
            wr.write_record(["x_mm", "y_mm", "U_per_m"])?;
            for i in 0..n {
                let x = -a + 3.0 * a * i as f64 / (n - 1) as f64;
                for j in 1..=n {
                    let y = y_max_mm * 1e-3 * j as f64 / n as f64;
                    let u =
                        model.total_potential_energy(&volts, gamma, 1.0, &Vec3::new(x, y, 0.0))?;
                    wr.write_record([
                        format!("{}", x * 1e3),
                        format!("{}", y * 1e3),
                        format!("{u}"),
                    ])?;
                }
            }
            wr.flush()?;
        }
        Cmd::FindNull => {
            let np = find_ac_null(&model)?;
            print_json(&json!({ "x_mm": np.x * 1e3, "y_null_mm": np.y_null * 1e3 }))?;
        }
        Cmd::Equilibrium { gamma, v_central } => {
            let eq = find_equilibrium_height(&model, &drive, v_central, gamma)?;
            let ej = ejection_voltage(&model, &drive, gamma, 1000.0)?;
            print_json(&json!({
                "equilibrium": eq.map(|e| json!({
                    "y_mm": e.y_min * 1e3,
                    "curvature": e.curvature,
                    "lateral_curvature": e.lateral_curvature,
                    "stable": e.stable,
                })),
                "ejection_voltage": ej,
            }))?;
        }
        Cmd::FitGamma { csv, method } => {
            let series = HeightVoltageSeries::read_csv(
                File::open(&csv).with_context(|| format!("opening {}", csv.display()))?,
            )?;
            series.validate()?;
            let mut out = serde_json::Map::new();
            if matches!(method, Method::Height | Method::Both) {
                out.insert(
                    "height_fit".into(),
                    serde_json::to_value(fit_gamma_height_curve(&series, &model, &drive)?)?,
                );
            }
            if matches!(method, Method::Null | Method::Both) {
                let (est, mm) = null_balance_from_series(&model, &series)?;
                out.insert("null_balance".into(), serde_json::to_value(est)?);
                out.insert("micromotion_minimum".into(), serde_json::to_value(mm)?);
            }
            print_json(&serde_json::Value::Object(out))?;
        }
        Cmd::Sweep {
            gamma,
            start,
            end,
            step,
            hold,
            output,
        } => {
            if step == 0.0 || (end - start) * step < 0.0 {
                return Err(
                    TrapError::InvalidInput("step must move from start toward end".into()).into(),
                );
            }
            let center = Vec3::new(
                model.geometry().center_x(),
                find_ac_null(&model)?.y_null,
                0.0,
            );
            let p =
                Particle::with_gamma(0, gamma, micromotion_start(&model, &drive, gamma, &center));
            let sweep = stepped_sweep(start, end, step, hold);
            let out = voltage_sweep_experiment(
                model.clone(),
                drive,
                p,
                &sweep,
                batch_sim(cli.seed),
                SweepOptions::default(),
            )?;
            out.series.write_csv(output.open()?)?;
            let fit = fit_gamma_height_curve(&out.series, &model, &drive).ok();
            let balance = null_balance_from_series(&model, &out.series)
                .ok()
                .map(|r| r.0);
            eprintln!(
                "{}",
                serde_json::to_string(&json!({
                    "points": out.series.len(),
                    "ejected_at": out.ejected_at,
                    "height_fit": fit,
                    "null_balance": balance,
                }))?
            );
        }
        Cmd::Shuttle {
            gamma,
            from,
            to,
            settle,
            transfer,
            trajectory,
        } => {
            let sc = ShuttleConfig {
                drive,
                relay_delay: cfg.relay_delay,
                settle_time: settle,
                transfer_time: transfer,
                ..ShuttleConfig::default()
            };
            let out = run_shuttle_between(
                model,
                gamma,
                &sc,
                pattern_of(&from.into(), &cfg),
                pattern_of(&to.into(), &cfg),
            )?;
            if let Some(p) = trajectory {
                out.trajectory.write_csv(BufWriter::new(File::create(p)?))?;
            }
            print_json(&json!({
                "displacement_mm": out.displacements[0] * 1e3,
                "initial_z_mm": out.initial_z[0] * 1e3,
                "final_z_mm": out.final_z[0] * 1e3,
                "events": out.trajectory.events.len(),
            }))?;
        }
        Cmd::Split {
            gammas,
            start_z_mm,
            trajectory,
        } => {
            let sc = ShuttleConfig {
                drive,
                relay_delay: cfg.relay_delay,
                settle_time: 1.0,
                transfer_time: 3.0,
                ..ShuttleConfig::default()
            };
            let out = run_split_experiment(
                model,
                [gammas[0], gammas[1]],
                [start_z_mm[0] * 1e-3, start_z_mm[1] * 1e-3],
                &sc,
            )?;
            if let Some(p) = trajectory {
                out.trajectory.write_csv(BufWriter::new(File::create(p)?))?;
            }
            let split = out.final_z[0].signum() != out.final_z[1].signum();
            print_json(&json!({
                "displacements_mm": out.displacements.iter().map(|d| d * 1e3).collect::<Vec<_>>(),
                "final_z_mm": out.final_z.iter().map(|z| z * 1e3).collect::<Vec<_>>(),
                "split": split,
            }))?;
        }
        Cmd::Render {
            gamma,
            v_central,
            frames,
            out_dir,
        } => {
            let eq =
                find_equilibrium_height(&model, &drive, v_central, gamma)?.ok_or_else(|| {
                    TrapError::InvalidInput(format!("no equilibrium at {v_central} V"))
                })?;
            let center = Vec3::new(model.geometry().center_x(), eq.y_min, 0.0);
            let p =
                Particle::with_gamma(0, gamma, micromotion_start(&model, &drive, gamma, &center));
            let field = TrapField::new(model.clone(), FieldMode::Planar);
            let sim_cfg = batch_sim(cli.seed);
            let mut sim = Simulation::new(
                field,
                VoltageState::with_central(v_central, drive),
                vec![p],
                sim_cfg,
            )?;
            if let SettleOutcome::Ejected { t } = settle_particle(&mut sim, 0, 5.0, 5)? {
                return Err(
                    TrapError::InvalidInput(format!("particle ejected at t = {t:.3} s")).into(),
                );
            }
            let camera = cfg.camera;
            let per_frame = (camera.exposure() / sim_cfg.dt).round() as usize;
            let mut path = Vec::with_capacity(per_frame * frames);
            let t0 = sim.time();
            while path.len() < per_frame * frames {
                sim.step()?;
                let Some(p) = sim.particle(0) else { break };
                path.push(p.r);
            }
            std::fs::create_dir_all(&out_dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            for (k, f) in render_sequence(&camera, &path, per_frame, t0, &mut rng)
                .iter()
                .enumerate()
            {
                f.save(&out_dir.join(format!("frame_{k:04}")))?;
            }
            eprintln!("wrote {frames} frames to {}", out_dir.display());
        }
        Cmd::Track {
            frames,
            threshold,
            output,
        } => {
            let params = DetectParams {
                threshold,
                spot_sigma_px: cfg.camera.spot_sigma_px,
                ..DetectParams::default()
            };
            let mut rows = Vec::new();
            for (k, path) in frames.iter().enumerate() {
                let frame =
                    Frame::load(path).with_context(|| format!("reading {}", path.display()))?;
                for mut b in detect_blobs_with(&frame, &params) {
                    b.mm_per_px = Some(cfg.camera.mm_per_px);
                    rows.push((k, b));
                }
            }
            write_blob_csv(&rows, output.open()?)?;
        }
        Cmd::Serve {
            port,
            bind,
            log_dir,
        } => {
            if let Some(d) = &log_dir {
                std::fs::create_dir_all(d)?;
            }
            let listener = TcpListener::bind((bind.as_str(), port))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve(
                listener,
                ServerOptions {
                    config: cfg,
                    seed: cli.seed,
                    log_dir,
                },
            )?;
        }
        Cmd::Replay { log } => {
            let entries = read_log(BufReader::new(
                File::open(&log).with_context(|| format!("opening {}", log.display()))?,
            ))?;
            let states = replay(&entries)?;
            print_json(&json!({ "entries": entries.len(), "states_verified": states }))?;
        }
    }
    Ok(())
}
