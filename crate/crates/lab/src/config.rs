//! Lab configuration document.

use planar_trap::dynamics::SimConfig;
use planar_trap::shuttle::{LevelVoltages, DEFAULT_ENDCAP_V, DEFAULT_RELAY_DELAY};
use planar_trap::vision::CameraModel;
use planar_trap::{DriveParams, Result, TrapError, TrapGeometry};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Variac setting to transformer output: 20 V on the Variac gives 963 V RMS.
pub const TRANSFORMER_RATIO: f64 = 963.0 / 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveConfig {
    pub variac_rms: f64,
    pub transformer_ratio: f64,
    pub freq_hz: f64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        DriveConfig {
            variac_rms: 20.0,
            transformer_ratio: TRANSFORMER_RATIO,
            freq_hz: 60.0,
        }
    }
}

impl DriveConfig {
    pub fn drive(&self) -> DriveParams {
        DriveParams::from_rms(self.variac_rms * self.transformer_ratio, self.freq_hz)
    }
}

/// How particles are dropped into the trap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadingConfig {
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Release height above the plane (m).
    pub drop_height: f64,
    /// Standard deviation of the lateral release offset (m).
    pub lateral_jitter: f64,
    /// Half-width of the uniform axial release spread (m).
    pub axial_spread: f64,
    /// Simulated time spent in the loading mode (s).
    pub duration: f64,
}

impl Default for LoadingConfig {
    fn default() -> Self {
        LoadingConfig {
            gamma_min: -3.0e-3,
            gamma_max: -1.5e-3,
            drop_height: 6e-3,
            lateral_jitter: 0.2e-3,
            axial_spread: 3e-3,
            duration: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub geometry: TrapGeometry,
    pub drive: DriveConfig,
    pub sim: SimConfig,
    pub central_v: f64,
    pub endcap_v: f64,
    pub levels: LevelVoltages,
    pub relay_delay: f64,
    pub camera: CameraModel,
    pub loading: LoadingConfig,
    /// State messages per second of wall time.
    pub stream_rate_hz: f64,
    /// Standard deviation of the seeded lateral kick given to every particle
    /// once per frame, standing in for air currents (m).
    pub lateral_noise: f64,
}

impl Default for LabConfig {
    fn default() -> Self {
        let drive = DriveConfig::default();
        LabConfig {
            geometry: TrapGeometry::default(),
            sim: SimConfig {
                dt: drive.drive().period() / 100.0,
                ..SimConfig::default()
            },
            drive,
            central_v: -40.0,
            endcap_v: DEFAULT_ENDCAP_V,
            levels: LevelVoltages::default(),
            relay_delay: DEFAULT_RELAY_DELAY,
            camera: CameraModel::side_window(),
            loading: LoadingConfig::default(),
            stream_rate_hz: 60.0,
            lateral_noise: 1e-6,
        }
    }
}

impl LabConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LabConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let drive = self.drive.drive();
        drive.validate()?;
        self.sim.validate(&drive)?;
        self.levels.validate()?;
        self.camera.validate()?;
        if !(self.stream_rate_hz > 0.0)
            || !(self.relay_delay >= 0.0)
            || !(self.lateral_noise >= 0.0)
        {
            return Err(TrapError::InvalidInput(
                "stream rate, relay delay and noise must be positive".into(),
            ));
        }
        let l = &self.loading;
        if !(l.gamma_min <= l.gamma_max) || l.gamma_max >= 0.0 && l.gamma_min <= 0.0 {
            return Err(TrapError::InvalidInput(
                "loading gamma range must not straddle zero".into(),
            ));
        }
        Ok(())
    }
}
