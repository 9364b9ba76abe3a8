//! Null and equilibrium finding, and the two charge-to-mass estimators.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{Result, TrapError};
use crate::geometry::{DriveParams, TrapGeometry, G};
use crate::potential::{pseudo_coefficient, TrapModel};
use crate::solve::{brent_min, brent_root, linspace};

/// Upper end of every height search.
pub const Y_CAP: f64 = 50e-3;
const Y_FLOOR: f64 = 1e-6;
const SCAN_POINTS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NullPoint {
    pub x: f64,
    pub y_null: f64,
}

/// Stationary point of U along the centerline.
///
/// Curvatures are d²U/dy² and d²U/dx² divided by the particle mass (s⁻²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub y_min: f64,
    pub curvature: f64,
    pub lateral_curvature: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    HeightFit,
    NullBalance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    pub sigma: f64,
    pub method: EstimateMethod,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chi2_reduced: Option<f64>,
}

/// One row of a height/micromotion sweep (SI units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub v_central: f64,
    pub y: f64,
    pub sigma_y: f64,
    pub alpha: f64,
    pub sigma_alpha: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeightVoltageSeries {
    pub points: Vec<SeriesPoint>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesRow {
    #[serde(rename = "voltage_V")]
    voltage_v: f64,
    height_mm: f64,
    sigma_height_mm: f64,
    micromotion_mm: f64,
    sigma_micromotion_mm: f64,
}

impl HeightVoltageSeries {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.v_central).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for p in &self.points {
            wr.serialize(SeriesRow {
                voltage_v: p.v_central,
                height_mm: p.y * 1e3,
                sigma_height_mm: p.sigma_y * 1e3,
                micromotion_mm: p.alpha * 1e3,
                sigma_micromotion_mm: p.sigma_alpha * 1e3,
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(r);
        let mut points = Vec::new();
        for row in rd.deserialize() {
            let row: SeriesRow = row?;
            points.push(SeriesPoint {
                v_central: row.voltage_v,
                y: row.height_mm * 1e-3,
                sigma_y: row.sigma_height_mm * 1e-3,
                alpha: row.micromotion_mm * 1e-3,
                sigma_alpha: row.sigma_micromotion_mm * 1e-3,
            });
        }
        Ok(HeightVoltageSeries { points })
    }

    /// Voltages must be monotone in acquisition order.
    pub fn validate(&self) -> Result<()> {
        let v = self.voltages();
        let up = v.windows(2).all(|w| w[1] >= w[0]);
        let down = v.windows(2).all(|w| w[1] <= w[0]);
        if !(up || down) {
            return Err(TrapError::InvalidInput(
                "series voltages are not monotone".into(),
            ));
        }
        if self
            .points
            .iter()
            .any(|p| !p.y.is_finite() || !p.v_central.is_finite())
        {
            return Err(TrapError::InvalidInput("non-finite series entry".into()));
        }
        Ok(())
    }
}

/// AC null on the centerline, found from the sign change of ∂φ_AC/∂y.
pub fn find_ac_null(model: &TrapModel) -> Result<NullPoint> {
    let geom = model.geometry();
    if !geom.is_symmetric() {
        return Err(TrapError::InvalidGeometry(
            "null search requires mirror-symmetric rails (b = c)".into(),
        ));
    }
    let x = geom.center_x();
    let ey = |y: f64| model.ac_jet(x, y, 1).gradient()[1];
    let ys = geomspace(Y_FLOOR, Y_CAP, SCAN_POINTS);
    let mut prev = ey(ys[0]);
    for w in ys.windows(2) {
        let cur = ey(w[1]);
        if prev != 0.0 && cur != 0.0 && prev.signum() != cur.signum() {
            let y = brent_root(ey, w[0], w[1], 1e-14).ok_or(TrapError::NoNull(Y_CAP))?;
            return Ok(NullPoint { x, y_null: y });
        }
        prev = cur;
    }
    Err(TrapError::NoNull(Y_CAP))
}

fn geomspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    linspace(a.ln(), b.ln(), n)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// U/m along the centerline and its derivatives.
#[derive(Debug, Clone, Copy)]
pub struct CenterlinePotential<'a> {
    model: &'a TrapModel,
    x: f64,
    dc: f64,
    pseudo: f64,
}

impl<'a> CenterlinePotential<'a> {
    pub fn new(model: &'a TrapModel, drive: &DriveParams, v_central: f64, gamma: f64) -> Self {
        CenterlinePotential {
            model,
            x: model.geometry().center_x(),
            dc: gamma * v_central,
            pseudo: gamma * pseudo_coefficient(drive, gamma),
        }
    }

    /// U/m (J/kg).
    pub fn value(&self, y: f64) -> f64 {
        let ac = self.model.ac_jet(self.x, y, 1).grad_sq().value;
        let dc = self.model.dc_jet(self.x, y, 0).phi();
        G * y + self.dc * dc + self.pseudo * ac
    }

    /// d(U/m)/dy.
    pub fn slope(&self, y: f64) -> f64 {
        let ac = self.model.ac_jet(self.x, y, 2).grad_sq();
        let dc = self.model.dc_jet(self.x, y, 1).gradient();
        G + self.dc * dc[1] + self.pseudo * ac.dy
    }

    /// (d²/dy², d²/dx²) of U/m.
    pub fn curvatures(&self, y: f64) -> (f64, f64) {
        let ac = self.model.ac_jet(self.x, y, 3).grad_sq();
        let h = self.model.dc_jet(self.x, y, 2).hessian();
        (
            self.dc * h[2] + self.pseudo * ac.dyy,
            self.dc * h[0] + self.pseudo * ac.dxx,
        )
    }
}

/// Lowest local minimum of U along the centerline, or `None` when U has no
/// well below [`Y_CAP`].
pub fn find_equilibrium_height(
    model: &TrapModel,
    drive: &DriveParams,
    v_central: f64,
    gamma: f64,
) -> Result<Option<EquilibriumResult>> {
    drive.validate()?;
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(TrapError::InvalidInput(
            "charge-to-mass ratio must be nonzero".into(),
        ));
    }
    let u = CenterlinePotential::new(model, drive, v_central, gamma);
    let ys = geomspace(Y_FLOOR, Y_CAP, SCAN_POINTS);
    let mut prev = u.slope(ys[0]);
    for w in ys.windows(2) {
        let cur = u.slope(w[1]);
        if prev < 0.0 && cur >= 0.0 {
            let y = brent_root(|y| u.slope(y), w[0], w[1], 1e-15).unwrap_or(w[1]);
            let (cy, cx) = u.curvatures(y);
            return Ok(Some(EquilibriumResult {
                y_min: y,
                curvature: cy,
                lateral_curvature: cx,
                stable: cy > 0.0 && cx > 0.0,
            }));
        }
        prev = cur;
    }
    Ok(None)
}

/// Central voltage that holds a particle at `y` against gravity.
pub fn balance_voltage(model: &TrapModel, y: f64, gamma: f64) -> Result<f64> {
    let dphi = model.dc_gradient_2d(1.0, model.geometry().center_x(), y)?[1];
    if dphi == 0.0 || gamma == 0.0 {
        return Err(TrapError::InvalidInput(
            "zero field gradient or charge".into(),
        ));
    }
    Ok(-G / (gamma * dphi))
}

/// Smallest |V| at which the particle can no longer be held: the centerline
/// well vanishes or becomes laterally unstable. Searched up to `v_limit`
/// in magnitude; the returned voltage carries the sign that pushes the
/// particle up.
pub fn ejection_voltage(
    model: &TrapModel,
    drive: &DriveParams,
    gamma: f64,
    v_limit: f64,
) -> Result<Option<f64>> {
    let sign = gamma.signum();
    let held = |mag: f64| -> Result<bool> {
        Ok(find_equilibrium_height(model, drive, sign * mag, gamma)?.is_some_and(|e| e.stable))
    };
    if !held(0.0)? {
        return Ok(Some(0.0));
    }
    let step = 1.0;
    let mut lo = 0.0;
    while lo < v_limit {
        let hi = (lo + step).min(v_limit);
        if !held(hi)? {
            let (mut a, mut b) = (lo, hi);
            while b - a > 1e-4 {
                let m = 0.5 * (a + b);
                if held(m)? {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Ok(Some(sign * 0.5 * (a + b)));
        }
        lo = hi;
    }
    Ok(None)
}

/// γ from the balance of gravity and the central-electrode force at the null.
pub fn gamma_from_null_balance(
    model: &TrapModel,
    y_null: f64,
    sigma_y: f64,
    v_central: f64,
    sigma_v: f64,
) -> Result<GammaEstimate> {
    if !(y_null > 0.0) {
        return Err(TrapError::BelowPlane(y_null));
    }
    if v_central == 0.0 {
        return Err(TrapError::InvalidInput(
            "zero central voltage gives no balancing force".into(),
        ));
    }
    let jet = model.dc_jet(model.geometry().center_x(), y_null, 2);
    let dy = jet.gradient()[1];
    let dyy = jet.hessian()[2];
    if dy == 0.0 {
        return Err(TrapError::InvalidInput("zero field gradient".into()));
    }
    let gamma = -G / (v_central * dy);
    let rel_v = sigma_v / v_central;
    let rel_y = dyy / dy * sigma_y;
    Ok(GammaEstimate {
        gamma,
        sigma: gamma.abs() * (rel_v * rel_v + rel_y * rel_y).sqrt(),
        method: EstimateMethod::NullBalance,
        chi2_reduced: None,
    })
}

/// Method 2 on a whole sweep: locate the micromotion minimum and balance
/// gravity at the model's null with the vertex voltage. The voltage
/// uncertainty is taken as half the sweep step.
pub fn null_balance_from_series(
    model: &TrapModel,
    series: &HeightVoltageSeries,
) -> Result<(GammaEstimate, MicromotionMinimum)> {
    let mm = micromotion_minimum(series)?;
    let null = find_ac_null(model)?;
    let pts = &series.points;
    let step = (pts[mm.index + 1].v_central - pts[mm.index - 1].v_central).abs() / 2.0;
    let v = mm.v_vertex.unwrap_or(mm.v_at_min);
    let est = gamma_from_null_balance(model, null.y_null, pts[mm.index].sigma_y, v, 0.5 * step)?;
    Ok((est, mm))
}

/// (1/(N − p))·Σ((yᵢ − fᵢ)/σᵢ)².
pub fn reduced_chi_squared(
    model_heights: &[f64],
    series: &HeightVoltageSeries,
    n_params: usize,
) -> Result<f64> {
    let n = series.len();
    if model_heights.len() != n {
        return Err(TrapError::InvalidInput(
            "model and data lengths differ".into(),
        ));
    }
    if n <= n_params {
        return Err(TrapError::InvalidInput(format!(
            "need more than {n_params} points"
        )));
    }
    let mut chi2 = 0.0;
    for (f, p) in model_heights.iter().zip(&series.points) {
        if !(p.sigma_y > 0.0) {
            return Err(TrapError::InvalidInput("zero height uncertainty".into()));
        }
        chi2 += ((p.y - f) / p.sigma_y).powi(2);
    }
    Ok(chi2 / (n - n_params) as f64)
}

/// Model heights for each series voltage; `None` where no well exists.
pub fn model_heights(
    model: &TrapModel,
    drive: &DriveParams,
    series: &HeightVoltageSeries,
    gamma: f64,
) -> Result<Vec<Option<f64>>> {
    series
        .points
        .iter()
        .map(|p| Ok(find_equilibrium_height(model, drive, p.v_central, gamma)?.map(|e| e.y_min)))
        .collect()
}

fn chi2_at(
    model: &TrapModel,
    drive: &DriveParams,
    series: &HeightVoltageSeries,
    gamma: f64,
) -> f64 {
    let mut chi2 = 0.0;
    for p in &series.points {
        let y = find_equilibrium_height(model, drive, p.v_central, gamma)
            .ok()
            .flatten()
            .map(|e| e.y_min)
            .unwrap_or(Y_CAP);
        chi2 += ((p.y - y) / p.sigma_y).powi(2);
    }
    chi2
}

/// Weighted least-squares fit of γ to measured equilibrium heights.
pub fn fit_gamma_height_curve(
    series: &HeightVoltageSeries,
    model: &TrapModel,
    drive: &DriveParams,
) -> Result<GammaEstimate> {
    let pts: Vec<_> = series
        .points
        .iter()
        .copied()
        .filter(|p| p.sigma_y > 0.0)
        .collect();
    if pts.len() < 3 {
        return Err(TrapError::InvalidInput(
            "height fit needs at least 3 points with sigma > 0".into(),
        ));
    }
    let v0 = pts[0].v_central;
    if pts.iter().all(|p| p.v_central == v0) {
        return Err(TrapError::InvalidInput(
            "all sweep voltages are identical".into(),
        ));
    }
    let data = HeightVoltageSeries { points: pts };
    // The central voltage pushes the particle up only when qV > 0.
    let sign = data
        .points
        .iter()
        .map(|p| p.v_central)
        .find(|v| *v != 0.0)
        .map(f64::signum)
        .unwrap_or(-1.0);
    let chi2 = |s: f64| chi2_at(model, drive, &data, sign * s.exp());

    let grid = linspace((1e-5f64).ln(), (1e-1f64).ln(), 61);
    let vals: Vec<f64> = grid.iter().map(|&s| chi2(s)).collect();
    let imin = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| TrapError::FitFailed("empty grid".into()))?;
    if imin == 0 || imin == grid.len() - 1 {
        return Err(TrapError::FitFailed(
            "best charge-to-mass ratio at the edge of the search range".into(),
        ));
    }
    let (s_best, chi2_min) = brent_min(chi2, grid[imin - 1], grid[imin + 1], 1e-12);
    let gamma = sign * s_best.exp();

    // Δχ² = 1 interval in ln|γ|, mapped back to γ.
    let target = |s: f64| chi2(s) - chi2_min - 1.0;
    let mut bounds = [s_best; 2];
    for (k, dir) in [-1.0f64, 1.0].into_iter().enumerate() {
        let mut step = 1e-3;
        let mut inner = s_best;
        let mut found = None;
        while step < 5.0 {
            let s = s_best + dir * step;
            if target(s) > 0.0 {
                found = brent_root(target, inner.min(s), inner.max(s), 1e-12);
                break;
            }
            inner = s;
            step *= 2.0;
        }
        bounds[k] =
            found.ok_or_else(|| TrapError::FitFailed("unbounded uncertainty interval".into()))?;
    }
    let sigma = 0.5 * (bounds[1].exp() - bounds[0].exp());
    let n = data.len();
    Ok(GammaEstimate {
        gamma,
        sigma,
        method: EstimateMethod::HeightFit,
        chi2_reduced: Some(chi2_min / (n - 1) as f64),
    })
}

/// Point of least micromotion in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicromotionMinimum {
    pub index: usize,
    pub v_at_min: f64,
    pub y_at_min: f64,
    /// Vertex of a |V − V₀| fit around the discrete minimum.
    pub v_vertex: Option<f64>,
}

/// Minimal-α point of a sweep with a V-shaped vertex refinement.
pub fn micromotion_minimum(series: &HeightVoltageSeries) -> Result<MicromotionMinimum> {
    let n = series.len();
    if n < 3 {
        return Err(TrapError::InvalidInput("need at least 3 points".into()));
    }
    let pts = &series.points;
    let index = pts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.alpha.total_cmp(&b.1.alpha))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if index == 0 || index == n - 1 {
        return Err(TrapError::NullNotCrossed);
    }
    let lo = index.saturating_sub(4);
    let hi = (index + 4).min(n - 1);
    let window: Vec<(f64, f64)> = pts[lo..=hi]
        .iter()
        .map(|p| (p.v_central, p.alpha))
        .collect();
    let (va, vb) = (pts[index - 1].v_central, pts[index + 1].v_central);
    let sse = |v0: f64| v_fit(&window, v0).2;
    let (v_lo, v_hi) = (va.min(vb), va.max(vb));
    let grid = linspace(v_lo, v_hi, 41);
    let best = grid
        .iter()
        .copied()
        .min_by(|a, b| sse(*a).total_cmp(&sse(*b)))
        .unwrap_or(pts[index].v_central);
    let step = (v_hi - v_lo) / 40.0;
    let (v_vertex, _) = brent_min(sse, (best - step).max(v_lo), (best + step).min(v_hi), 1e-9);
    let ok = v_fit(&window, v_vertex).1 > 0.0;
    let pt = pts[index];
    Ok(MicromotionMinimum {
        index,
        v_at_min: pt.v_central,
        y_at_min: pt.y,
        v_vertex: ok.then_some(v_vertex),
    })
}

/// Least-squares fit of α = c + s·|V − v0|; returns (c, s, sse).
fn v_fit(pts: &[(f64, f64)], v0: f64) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(v, a) in pts {
        let x = (v - v0).abs();
        sx += x;
        sy += a;
        sxx += x * x;
        sxy += x * a;
    }
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return (sy / n, 0.0, f64::INFINITY);
    }
    let s = (n * sxy - sx * sy) / det;
    let c = (sy - s * sx) / n;
    let sse = pts
        .iter()
        .map(|&(v, a)| (a - c - s * (v - v0).abs()).powi(2))
        .sum();
    (c, s, sse)
}

/// Sets the central-to-AC gap so that the null sits at `target_null`, keeping
/// every gap equal and the AC outer edge ramped over the segment gap.
pub fn calibrate_equal_gaps(base: &TrapGeometry, target_null: f64) -> Result<TrapGeometry> {
    let make = |g: f64| {
        let mut geom = base.clone();
        geom.gap_central_ac = g;
        geom.gap_ac_segment = g;
        geom.ac_outer_ramp = None;
        geom
    };
    let resid = |g: f64| -> f64 {
        TrapModel::new(make(g))
            .and_then(|m| find_ac_null(&m))
            .map(|n| n.y_null - target_null)
            .unwrap_or(f64::NAN)
    };
    let g = brent_root(resid, 1e-6, 10e-3, 1e-15).ok_or_else(|| {
        TrapError::InvalidGeometry("null target not reachable by equal gaps".into())
    })?;
    Ok(make(g))
}

/// Sets the AC outer roll-off so that the null sits at `target_null` for the
/// current central gap.
pub fn calibrate_outer_ramp(base: &TrapGeometry, target_null: f64) -> Result<TrapGeometry> {
    let make = |w: f64| {
        let mut geom = base.clone();
        geom.ac_outer_ramp = Some(w);
        geom
    };
    let resid = |w: f64| -> f64 {
        TrapModel::new(make(w))
            .and_then(|m| find_ac_null(&m))
            .map(|n| n.y_null - target_null)
            .unwrap_or(f64::NAN)
    };
    let w = brent_root(resid, 1e-5, 0.2, 1e-15).ok_or_else(|| {
        TrapError::InvalidGeometry("null target not reachable by the AC roll-off".into())
    })?;
    Ok(make(w))
}

/// Jointly fixes the central-to-AC gap and the AC outer roll-off so that the
/// null sits at `target_null` and a particle of `gamma` is balanced there at
/// `v_balance`. The segment gap follows the central gap.
pub fn calibrate_cross_section(
    base: &TrapGeometry,
    target_null: f64,
    gamma: f64,
    v_balance: f64,
) -> Result<TrapGeometry> {
    let stage = |g1: f64| -> Result<TrapGeometry> {
        let mut geom = base.clone();
        geom.gap_central_ac = g1;
        geom.gap_ac_segment = g1;
        calibrate_outer_ramp(&geom, target_null)
    };
    let resid = |g1: f64| -> f64 {
        stage(g1)
            .and_then(TrapModel::new)
            .and_then(|m| balance_voltage(&m, target_null, gamma))
            .map(|v| v - v_balance)
            .unwrap_or(f64::NAN)
    };
    let g1 = brent_root(resid, 0.02e-3, 1.5e-3, 1e-15)
        .ok_or_else(|| TrapError::InvalidGeometry("balance target not reachable".into()))?;
    stage(g1)
}
