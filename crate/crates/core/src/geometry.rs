//! Electrode layout, drive parameters and in-plane boundary profiles.
//!
//! Coordinates: x across the rails with x = 0 at the left edge of the central
//! electrode, y up out of the electrode plane, z along the rails with z = 0 at
//! the trap center. All lengths are in meters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrapError};

/// Standard gravity (m/s²).
pub const G: f64 = 9.80665;

/// Coulomb constant (N·m²/C²).
pub const COULOMB_K: f64 = 8.9875e9;

/// Central-to-AC gap of the shipped cross-section calibration.
pub const DEFAULT_GAP_CENTRAL_AC: f64 = 0.300_182_281_55e-3;

/// Width over which the AC rail potential rolls off to zero at its outer edge
/// in the cross-section model.
pub const DEFAULT_AC_OUTER_RAMP: f64 = 15.215_617_577e-3;

/// Number of segment positions per row; the outermost pair in each row acts as
/// endcaps.
pub const SEGMENTS_PER_ROW: usize = 7;

/// Names of the driven segment pairs in order of increasing z.
pub const SEGMENT_NAMES: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

/// Rectangle in the electrode plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub x2: f64,
    pub z1: f64,
    pub z2: f64,
}

impl Rect {
    pub fn new(x1: f64, x2: f64, z1: f64, z2: f64) -> Self {
        Rect { x1, x2, z1, z2 }
    }

    pub fn center_z(&self) -> f64 {
        0.5 * (self.z1 + self.z2)
    }

    fn validate(&self) -> Result<()> {
        if !(self.x2 > self.x1 && self.z2 > self.z1) {
            return Err(TrapError::InvalidGeometry(format!(
                "degenerate rectangle {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// One piece of the in-plane boundary function: an electrode (v1 = v2) or a
/// linear gap ramp (v1 != v2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySegment {
    pub x1: f64,
    pub x2: f64,
    pub v1: f64,
    pub v2: f64,
}

impl BoundarySegment {
    pub fn electrode(x1: f64, x2: f64, v: f64) -> Self {
        BoundarySegment {
            x1,
            x2,
            v1: v,
            v2: v,
        }
    }

    pub fn ramp(x1: f64, x2: f64, v1: f64, v2: f64) -> Self {
        BoundarySegment { x1, x2, v1, v2 }
    }

    pub fn slope(&self) -> f64 {
        (self.v2 - self.v1) / (self.x2 - self.x1)
    }

    /// Boundary voltage at in-plane position `x` (zero outside the segment).
    pub fn boundary_value(&self, x: f64) -> f64 {
        if x < self.x1 || x > self.x2 {
            0.0
        } else {
            self.v1 + self.slope() * (x - self.x1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x2 > self.x1) || !self.v1.is_finite() || !self.v2.is_finite() {
            return Err(TrapError::InvalidGeometry(format!(
                "boundary segment needs x1 < x2 and finite voltages: {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// AC drive. `v_ac_amplitude` is the signed peak voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveParams {
    pub v_ac_amplitude: f64,
    pub omega: f64,
}

impl DriveParams {
    /// Transformer output in the reference setup: 963 V RMS at 60 Hz.
    pub fn reference() -> Self {
        Self::from_rms(963.0, 60.0)
    }

    pub fn from_rms(v_rms: f64, freq_hz: f64) -> Self {
        DriveParams {
            v_ac_amplitude: std::f64::consts::SQRT_2 * v_rms,
            omega: 2.0 * std::f64::consts::PI * freq_hz,
        }
    }

    pub fn v_rms(&self) -> f64 {
        self.v_ac_amplitude / std::f64::consts::SQRT_2
    }

    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(TrapError::InvalidDrive(format!(
                "omega must be positive, got {}",
                self.omega
            )));
        }
        if !self.v_ac_amplitude.is_finite() {
            return Err(TrapError::InvalidDrive("non-finite AC amplitude".into()));
        }
        Ok(())
    }
}

impl Default for DriveParams {
    fn default() -> Self {
        Self::reference()
    }
}

/// Five-rail trap layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapGeometry {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub gap_central_ac: f64,
    pub gap_ac_segment: f64,
    pub gap_segment_segment: f64,
    /// Roll-off width of the AC rails' outer edge in the 2D cross-section.
    /// `None` ramps across `gap_ac_segment` as for any other gap.
    #[serde(default)]
    pub ac_outer_ramp: Option<f64>,
    pub seg_width_z: f64,
    pub seg_depth_x: f64,
    pub rail_length_z: f64,
    /// Row slot (-3..=3) of each driven pair A..E.
    #[serde(default = "default_driven_slots")]
    pub driven_slots: [i32; 5],
    pub endcap_rects: Vec<Rect>,
}

fn default_driven_slots() -> [i32; 5] {
    [-2, -1, 0, 1, 2]
}

impl Default for TrapGeometry {
    fn default() -> Self {
        let mut g = TrapGeometry {
            a: 3.2e-3,
            b: 4.2e-3,
            c: 4.2e-3,
            gap_central_ac: DEFAULT_GAP_CENTRAL_AC,
            gap_ac_segment: DEFAULT_GAP_CENTRAL_AC,
            gap_segment_segment: 0.5e-3,
            ac_outer_ramp: Some(DEFAULT_AC_OUTER_RAMP),
            seg_width_z: 18.9e-3,
            seg_depth_x: 15.5e-3,
            rail_length_z: 139.6e-3,
            driven_slots: default_driven_slots(),
            endcap_rects: Vec::new(),
        };
        g.endcap_rects = g
            .slot_rects(-3)
            .into_iter()
            .chain(g.slot_rects(3))
            .collect();
        g
    }
}

impl TrapGeometry {
    /// Literal layout with the given gaps and no separate AC roll-off.
    pub fn with_gaps(a: f64, b: f64, gap_central_ac: f64, gap_ac_segment: f64) -> Self {
        let mut g = TrapGeometry {
            a,
            b,
            c: b,
            gap_central_ac,
            gap_ac_segment,
            ac_outer_ramp: None,
            ..TrapGeometry::default()
        };
        g.endcap_rects = g
            .slot_rects(-3)
            .into_iter()
            .chain(g.slot_rects(3))
            .collect();
        g
    }

    pub fn center_x(&self) -> f64 {
        0.5 * self.a
    }

    pub fn ac_outer_width(&self) -> f64 {
        self.ac_outer_ramp.unwrap_or(self.gap_ac_segment)
    }

    pub fn segment_pitch(&self) -> f64 {
        self.seg_width_z + self.gap_segment_segment
    }

    pub fn is_symmetric(&self) -> bool {
        (self.b - self.c).abs() <= 1e-12 * self.b.max(self.c)
    }

    /// Scales every length by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let r = |r: &Rect| Rect::new(r.x1 * k, r.x2 * k, r.z1 * k, r.z2 * k);
        TrapGeometry {
            a: self.a * k,
            b: self.b * k,
            c: self.c * k,
            gap_central_ac: self.gap_central_ac * k,
            gap_ac_segment: self.gap_ac_segment * k,
            gap_segment_segment: self.gap_segment_segment * k,
            ac_outer_ramp: self.ac_outer_ramp.map(|w| w * k),
            seg_width_z: self.seg_width_z * k,
            seg_depth_x: self.seg_depth_x * k,
            rail_length_z: self.rail_length_z * k,
            driven_slots: self.driven_slots,
            endcap_rects: self.endcap_rects.iter().map(r).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("seg_width_z", self.seg_width_z),
            ("seg_depth_x", self.seg_depth_x),
            ("rail_length_z", self.rail_length_z),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TrapError::InvalidGeometry(format!(
                    "{name} must be > 0, got {v}"
                )));
            }
        }
        let gaps = [
            ("gap_central_ac", self.gap_central_ac),
            ("gap_ac_segment", self.gap_ac_segment),
            ("gap_segment_segment", self.gap_segment_segment),
            ("ac_outer_ramp", self.ac_outer_ramp.unwrap_or(0.0)),
        ];
        for (name, v) in gaps {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(TrapError::InvalidGeometry(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        for s in self.driven_slots {
            if !(-3..=3).contains(&s) {
                return Err(TrapError::InvalidGeometry(format!(
                    "segment slot {s} out of range"
                )));
            }
        }
        for r in &self.endcap_rects {
            r.validate()?;
        }
        Ok(())
    }

    /// Unit-voltage boundary profile of the central DC electrode and its gap ramps.
    pub fn dc_profile(&self) -> Vec<BoundarySegment> {
        let g1 = self.gap_central_ac;
        let mut segs = Vec::with_capacity(3);
        if g1 > 0.0 {
            segs.push(BoundarySegment::ramp(-g1, 0.0, 0.0, 1.0));
        }
        segs.push(BoundarySegment::electrode(0.0, self.a, 1.0));
        if g1 > 0.0 {
            segs.push(BoundarySegment::ramp(self.a, self.a + g1, 1.0, 0.0));
        }
        segs
    }

    /// Unit-amplitude boundary profile of both AC rails with their ramps.
    pub fn ac_profile(&self) -> Vec<BoundarySegment> {
        let g1 = self.gap_central_ac;
        let w = self.ac_outer_width();
        let (a, b, c) = (self.a, self.b, self.c);
        let mut segs = Vec::with_capacity(6);
        let left_outer = -g1 - c;
        if w > 0.0 {
            segs.push(BoundarySegment::ramp(left_outer - w, left_outer, 0.0, 1.0));
        }
        segs.push(BoundarySegment::electrode(left_outer, -g1, 1.0));
        if g1 > 0.0 {
            segs.push(BoundarySegment::ramp(-g1, 0.0, 1.0, 0.0));
            segs.push(BoundarySegment::ramp(a, a + g1, 0.0, 1.0));
        }
        let right_outer = a + g1 + b;
        segs.push(BoundarySegment::electrode(a + g1, right_outer, 1.0));
        if w > 0.0 {
            segs.push(BoundarySegment::ramp(
                right_outer,
                right_outer + w,
                1.0,
                0.0,
            ));
        }
        segs
    }

    /// x-extent of the right and left segment rows.
    pub fn segment_rows_x(&self) -> [(f64, f64); 2] {
        let right = self.a + self.gap_central_ac + self.b + self.gap_ac_segment;
        let left = -self.gap_central_ac - self.c - self.gap_ac_segment;
        [
            (left - self.seg_depth_x, left),
            (right, right + self.seg_depth_x),
        ]
    }

    /// Both rectangles (left row, right row) of row slot `k` in -3..=3.
    pub fn slot_rects(&self, k: i32) -> [Rect; 2] {
        let zc = k as f64 * self.segment_pitch();
        let hz = 0.5 * self.seg_width_z;
        let rows = self.segment_rows_x();
        [
            Rect::new(rows[0].0, rows[0].1, zc - hz, zc + hz),
            Rect::new(rows[1].0, rows[1].1, zc - hz, zc + hz),
        ]
    }

    /// Rectangles of driven pair `i` (0 = A .. 4 = E).
    pub fn segment_rects(&self, i: usize) -> [Rect; 2] {
        self.slot_rects(self.driven_slots[i])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: TrapGeometry = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }
}
