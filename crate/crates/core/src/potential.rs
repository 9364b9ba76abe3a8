//! Free-space potentials of the electrode plane.
//!
//! Each boundary segment is treated through its complex potential
//! G(z) = (1/π)·v(z)·[ln(z − x2) − ln(z − x1)] with z = x + iy and v the linear
//! boundary profile continued into the plane, so that φ = Im G. Fields and
//! higher derivatives follow from G', G'', G''' without finite differences.

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, TrapError};
use crate::geometry::{BoundarySegment, DriveParams, Rect, TrapGeometry, G};

pub type Vec3 = Vector3<f64>;

/// Complex potential and its first three derivatives.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComplexJet {
    pub g: Complex64,
    pub d1: Complex64,
    pub d2: Complex64,
    pub d3: Complex64,
}

impl std::ops::AddAssign for ComplexJet {
    fn add_assign(&mut self, o: ComplexJet) {
        self.g += o.g;
        self.d1 += o.d1;
        self.d2 += o.d2;
        self.d3 += o.d3;
    }
}

impl ComplexJet {
    pub fn phi(&self) -> f64 {
        self.g.im
    }

    /// (∂φ/∂x, ∂φ/∂y)
    pub fn gradient(&self) -> [f64; 2] {
        [self.d1.im, self.d1.re]
    }

    /// (φxx, φxy, φyy)
    pub fn hessian(&self) -> [f64; 3] {
        [self.d2.im, self.d2.re, -self.d2.im]
    }

    /// |∇φ|² with its gradient and Hessian.
    pub fn grad_sq(&self) -> GradSq {
        let (a, b, c) = (self.d1, self.d2, self.d3);
        let ab = a.conj() * b;
        let ac = a.conj() * c;
        let bb = b.norm_sqr();
        GradSq {
            value: a.norm_sqr(),
            dx: 2.0 * ab.re,
            dy: -2.0 * ab.im,
            dxx: 2.0 * bb + 2.0 * ac.re,
            dxy: -2.0 * ac.im,
            dyy: 2.0 * bb - 2.0 * ac.re,
        }
    }
}

/// |∇φ|² and its derivatives at a point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradSq {
    pub value: f64,
    pub dx: f64,
    pub dy: f64,
    pub dxx: f64,
    pub dxy: f64,
    pub dyy: f64,
}

fn check_height(y: f64) -> Result<()> {
    if y > 0.0 && y.is_finite() {
        Ok(())
    } else {
        Err(TrapError::BelowPlane(y))
    }
}

impl BoundarySegment {
    /// Complex jet up to derivative `order` (0..=3) at `z`. Entries above
    /// `order` are left at zero; `g` is always filled when `order == 0` or the
    /// segment is a ramp.
    pub fn jet(&self, z: Complex64, order: usize) -> ComplexJet {
        let beta = self.slope();
        let v = self.v1 + beta * (z - self.x1);
        let r2 = 1.0 / (z - self.x2);
        let r1 = 1.0 / (z - self.x1);
        let need_log = order == 0 || beta != 0.0;
        let l0 = if need_log {
            (z - self.x2).ln() - (z - self.x1).ln()
        } else {
            Complex64::new(0.0, 0.0)
        };
        let mut jet = ComplexJet {
            g: v * l0 / PI,
            ..Default::default()
        };
        if order >= 1 {
            let l1 = r2 - r1;
            jet.d1 = (beta * l0 + v * l1) / PI;
            if order >= 2 {
                let l2 = r1 * r1 - r2 * r2;
                jet.d2 = (2.0 * beta * l1 + v * l2) / PI;
                if order >= 3 {
                    let l3 = 2.0 * (r2 * r2 * r2 - r1 * r1 * r1);
                    jet.d3 = (3.0 * beta * l2 + v * l3) / PI;
                }
            }
        }
        jet
    }
}

/// Potential above the plane of a single boundary segment.
pub fn strip_potential(seg: &BoundarySegment, x: f64, y: f64) -> Result<f64> {
    seg.validate()?;
    check_height(y)?;
    Ok(seg.jet(Complex64::new(x, y), 0).phi())
}

/// Sum of segment jets.
pub fn profile_jet(segs: &[BoundarySegment], x: f64, y: f64, order: usize) -> ComplexJet {
    let z = Complex64::new(x, y);
    let mut acc = ComplexJet::default();
    for s in segs {
        acc += s.jet(z, order);
    }
    acc
}

/// Solid-angle potential of a rectangle held at `v`.
pub fn rect_potential_3d(rect: &Rect, v: f64, p: &Vec3) -> Result<f64> {
    check_height(p.y)?;
    Ok(v * rect_unit_potential(rect, p))
}

/// Gradient of the rectangle potential for `v = 1`.
pub fn rect_unit_gradient(rect: &Rect, p: &Vec3) -> Vec3 {
    let y = p.y;
    let y2 = y * y;
    let mut g = Vec3::zeros();
    for (i, xi) in [rect.x1, rect.x2].into_iter().enumerate() {
        let x = xi - p.x;
        for (j, zj) in [rect.z1, rect.z2].into_iter().enumerate() {
            let z = zj - p.z;
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            let r = (x * x + y2 + z * z).sqrt();
            let xy = x * x + y2;
            let zy = z * z + y2;
            g.x -= s * z * y / (r * xy);
            g.z -= s * x * y / (r * zy);
            g.y -= s * x * z * (r * r + y2) / (r * xy * zy);
        }
    }
    g / (2.0 * PI)
}

pub fn rect_unit_potential(rect: &Rect, p: &Vec3) -> f64 {
    let y = p.y;
    let mut acc = 0.0;
    for (i, xi) in [rect.x1, rect.x2].into_iter().enumerate() {
        let x = xi - p.x;
        for (j, zj) in [rect.z1, rect.z2].into_iter().enumerate() {
            let z = zj - p.z;
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            let r = (x * x + y * y + z * z).sqrt();
            acc += s * (x * z / (y * r)).atan();
        }
    }
    acc / (2.0 * PI)
}

/// Instantaneous electrode voltages. Segment voltages apply to both rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageState {
    pub central: f64,
    pub drive: DriveParams,
    pub segments: [f64; 5],
    pub endcap: f64,
}

impl Default for VoltageState {
    fn default() -> Self {
        VoltageState {
            central: 0.0,
            drive: DriveParams::reference(),
            segments: [0.0; 5],
            endcap: 0.0,
        }
    }
}

impl VoltageState {
    pub fn with_central(central: f64, drive: DriveParams) -> Self {
        VoltageState {
            central,
            drive,
            ..Default::default()
        }
    }
}

/// Potential, field and pseudopotential at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialSample {
    pub position: [f64; 3],
    pub phi: f64,
    pub e_field: [f64; 3],
    pub pseudo_energy_per_charge: f64,
}

/// Trap geometry with its boundary profiles prepared for evaluation.
#[derive(Debug, Clone)]
pub struct TrapModel {
    geom: TrapGeometry,
    dc: Vec<BoundarySegment>,
    ac: Vec<BoundarySegment>,
    segment_rects: [[Rect; 2]; 5],
}

impl TrapModel {
    pub fn new(geom: TrapGeometry) -> Result<Self> {
        geom.validate()?;
        let dc = geom.dc_profile();
        let ac = geom.ac_profile();
        let segment_rects = std::array::from_fn(|i| geom.segment_rects(i));
        Ok(TrapModel {
            geom,
            dc,
            ac,
            segment_rects,
        })
    }

    pub fn geometry(&self) -> &TrapGeometry {
        &self.geom
    }

    pub fn dc_segments(&self) -> &[BoundarySegment] {
        &self.dc
    }

    pub fn ac_segments(&self) -> &[BoundarySegment] {
        &self.ac
    }

    pub fn segment_rects(&self) -> &[[Rect; 2]; 5] {
        &self.segment_rects
    }

    pub fn dc_jet(&self, x: f64, y: f64, order: usize) -> ComplexJet {
        profile_jet(&self.dc, x, y, order)
    }

    pub fn ac_jet(&self, x: f64, y: f64, order: usize) -> ComplexJet {
        profile_jet(&self.ac, x, y, order)
    }

    /// Central-electrode potential in the cross-section.
    pub fn dc_potential_2d(&self, v_central: f64, x: f64, y: f64) -> Result<f64> {
        check_height(y)?;
        Ok(v_central * self.dc_jet(x, y, 0).phi())
    }

    /// (∂φ/∂x, ∂φ/∂y) of the central-electrode potential.
    pub fn dc_gradient_2d(&self, v_central: f64, x: f64, y: f64) -> Result<[f64; 2]> {
        check_height(y)?;
        let g = self.dc_jet(x, y, 1).gradient();
        Ok([v_central * g[0], v_central * g[1]])
    }

    /// AC rail potential per unit amplitude.
    pub fn ac_potential_2d(&self, x: f64, y: f64) -> Result<f64> {
        check_height(y)?;
        Ok(self.ac_jet(x, y, 0).phi())
    }

    pub fn ac_gradient_2d(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        check_height(y)?;
        Ok(self.ac_jet(x, y, 1).gradient())
    }

    /// |∇φ_AC|² per unit amplitude, with derivatives.
    pub fn ac_grad_sq(&self, x: f64, y: f64) -> Result<GradSq> {
        check_height(y)?;
        Ok(self.ac_jet(x, y, 3).grad_sq())
    }

    /// Pseudopotential per unit charge, ψ/q = γ·V²·|∇φ_AC|²/(4Ω²), in volts.
    pub fn pseudopotential(&self, drive: &DriveParams, gamma: f64, x: f64, y: f64) -> Result<f64> {
        drive.validate()?;
        let gs = self.ac_grad_sq(x, y)?.value;
        Ok(pseudo_coefficient(drive, gamma) * gs)
    }

    /// Pseudopotential energy ψ = q²V²|∇φ_AC|²/(4mΩ²) in joules.
    pub fn pseudopotential_energy(
        &self,
        drive: &DriveParams,
        q: f64,
        m: f64,
        x: f64,
        y: f64,
    ) -> Result<f64> {
        drive.validate()?;
        let gs = self.ac_grad_sq(x, y)?.value;
        Ok(q * q * drive.v_ac_amplitude.powi(2) * gs / (4.0 * m * drive.omega.powi(2)))
    }

    /// DC potential at a 3D point: central rail (2D) plus segments and endcaps.
    pub fn dc_potential_3d(&self, volts: &VoltageState, p: &Vec3) -> Result<f64> {
        check_height(p.y)?;
        let mut phi = volts.central * self.dc_jet(p.x, p.y, 0).phi();
        for (i, pair) in self.segment_rects.iter().enumerate() {
            if volts.segments[i] != 0.0 {
                for r in pair {
                    phi += volts.segments[i] * rect_unit_potential(r, p);
                }
            }
        }
        if volts.endcap != 0.0 {
            for r in &self.geom.endcap_rects {
                phi += volts.endcap * rect_unit_potential(r, p);
            }
        }
        Ok(phi)
    }

    /// ∇φ_DC at a 3D point (all DC electrodes).
    pub fn dc_gradient_3d(&self, volts: &VoltageState, p: &Vec3) -> Vec3 {
        let mut g = Vec3::zeros();
        if volts.central != 0.0 {
            let d = self.dc_jet(p.x, p.y, 1).gradient();
            g.x += volts.central * d[0];
            g.y += volts.central * d[1];
        }
        for (i, pair) in self.segment_rects.iter().enumerate() {
            if volts.segments[i] != 0.0 {
                for r in pair {
                    g += volts.segments[i] * rect_unit_gradient(r, p);
                }
            }
        }
        if volts.endcap != 0.0 {
            for r in &self.geom.endcap_rects {
                g += volts.endcap * rect_unit_gradient(r, p);
            }
        }
        g
    }

    /// ∇φ_AC per unit amplitude at a 3D point (rails are z-independent).
    pub fn ac_gradient_3d(&self, p: &Vec3) -> Vec3 {
        let d = self.ac_jet(p.x, p.y, 1).gradient();
        Vec3::new(d[0], d[1], 0.0)
    }

    /// U = m·g·y + q·φ_DC + ψ in joules.
    pub fn total_potential_energy(
        &self,
        volts: &VoltageState,
        q: f64,
        m: f64,
        p: &Vec3,
    ) -> Result<f64> {
        check_mass_charge(q, m)?;
        let phi = self.dc_potential_3d(volts, p)?;
        let psi = self.pseudopotential_energy(&volts.drive, q, m, p.x, p.y)?;
        Ok(m * G * p.y + q * phi + psi)
    }

    /// ∇U in J/m.
    pub fn total_energy_gradient(
        &self,
        volts: &VoltageState,
        q: f64,
        m: f64,
        p: &Vec3,
    ) -> Result<Vec3> {
        check_mass_charge(q, m)?;
        check_height(p.y)?;
        volts.drive.validate()?;
        let gs = self.ac_jet(p.x, p.y, 2).grad_sq();
        let k = q * q * volts.drive.v_ac_amplitude.powi(2) / (4.0 * m * volts.drive.omega.powi(2));
        let mut grad = q * self.dc_gradient_3d(volts, p);
        grad.x += k * gs.dx;
        grad.y += k * gs.dy + m * G;
        Ok(grad)
    }

    /// Sample of the DC potential, DC field and pseudopotential per charge.
    pub fn sample(&self, volts: &VoltageState, gamma: f64, p: &Vec3) -> Result<PotentialSample> {
        let phi = self.dc_potential_3d(volts, p)?;
        let e = -self.dc_gradient_3d(volts, p);
        let pseudo = self.pseudopotential(&volts.drive, gamma, p.x, p.y)?;
        Ok(PotentialSample {
            position: [p.x, p.y, p.z],
            phi,
            e_field: [e.x, e.y, e.z],
            pseudo_energy_per_charge: pseudo,
        })
    }
}

/// γ·V²/(4Ω²): multiplies |∇φ_AC|² to give ψ/q in volts, or ψ/m when
/// multiplied by γ again.
pub fn pseudo_coefficient(drive: &DriveParams, gamma: f64) -> f64 {
    gamma * drive.v_ac_amplitude.powi(2) / (4.0 * drive.omega.powi(2))
}

fn check_mass_charge(q: f64, m: f64) -> Result<()> {
    if q == 0.0 || !q.is_finite() {
        return Err(TrapError::InvalidInput("charge must be nonzero".into()));
    }
    if !(m > 0.0) || !m.is_finite() {
        return Err(TrapError::InvalidInput("mass must be positive".into()));
    }
    Ok(())
}

/// The zero-gap AC expression per unit amplitude, rails on (−c, 0) and (a, a + b).
pub fn literal_zero_gap_ac(a: f64, b: f64, c: f64, x: f64, y: f64) -> f64 {
    (((a + b - x) / y).atan() + ((c + x) / y).atan() - (((a - x) / y).atan() + (x / y).atan())) / PI
}

/// The zero-gap central-electrode expression.
pub fn literal_zero_gap_dc(a: f64, v: f64, x: f64, y: f64) -> f64 {
    v / PI * (((a - x) / y).atan() + (x / y).atan())
}
