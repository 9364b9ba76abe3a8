//! Synthetic camera and the blob pipeline: threshold, 4-connected labeling,
//! area filter, intensity-weighted centroid and streak amplitude.
//!
//! The camera looks along x. Columns map to z and rows to y, with rows
//! growing downward.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::analysis::{HeightVoltageSeries, SeriesPoint};
use crate::dynamics::Capture;
use crate::error::{Result, TrapError};
use crate::potential::Vec3;
use crate::solve::brent_min;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub exposure_s: f64,
    pub timestamp_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub width: usize,
    pub height: usize,
    pub exposure_s: f64,
    pub timestamp_s: f64,
}

impl Frame {
    pub fn blank(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            pixels: vec![0; width * height],
            exposure_s: 0.0,
            timestamp_s: 0.0,
        }
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn meta(&self) -> FrameMeta {
        FrameMeta {
            width: self.width,
            height: self.height,
            exposure_s: self.exposure_s,
            timestamp_s: self.timestamp_s,
        }
    }

    /// Copy shifted by (dc, dr) pixels; uncovered pixels take `fill`.
    pub fn shifted(&self, dc: i64, dr: i64, fill: u8) -> Frame {
        let mut out = Frame {
            pixels: vec![fill; self.pixels.len()],
            ..self.clone()
        };
        for r in 0..self.height as i64 {
            for c in 0..self.width as i64 {
                let (sr, sc) = (r - dr, c - dc);
                if sr >= 0 && sc >= 0 && (sr as usize) < self.height && (sc as usize) < self.width {
                    out.pixels[(r as usize) * self.width + c as usize] =
                        self.get(sc as usize, sr as usize);
                }
            }
        }
        out
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        Ok(())
    }

    pub fn read_pgm<R: BufRead>(mut r: R) -> Result<Frame> {
        let mut fields = Vec::new();
        let mut token = String::new();
        let mut byte = [0u8; 1];
        while fields.len() < 4 {
            if r.read(&mut byte)? == 0 {
                return Err(TrapError::InvalidInput("truncated PGM header".into()));
            }
            let ch = byte[0] as char;
            if ch == '#' && token.is_empty() {
                let mut line = String::new();
                r.read_line(&mut line)?;
                continue;
            }
            if ch.is_ascii_whitespace() {
                if !token.is_empty() {
                    fields.push(std::mem::take(&mut token));
                }
            } else {
                token.push(ch);
            }
        }
        if fields[0] != "P5" {
            return Err(TrapError::InvalidInput(format!(
                "not a binary PGM: {}",
                fields[0]
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| TrapError::InvalidInput(format!("bad PGM header field {s}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 || width == 0 || height == 0 {
            return Err(TrapError::InvalidInput(
                "only non-empty 8-bit PGM is supported".into(),
            ));
        }
        let mut pixels = vec![0u8; width * height];
        r.read_exact(&mut pixels)?;
        Ok(Frame {
            width,
            height,
            pixels,
            exposure_s: 0.0,
            timestamp_s: 0.0,
        })
    }

    /// Writes `<stem>.pgm` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let f = std::fs::File::create(stem.with_extension("pgm"))?;
        self.write_pgm(std::io::BufWriter::new(f))?;
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        Ok(())
    }

    /// Reads a PGM and, when present, its JSON sidecar.
    pub fn load(pgm: &Path) -> Result<Frame> {
        let f = std::fs::File::open(pgm)?;
        let mut frame = Frame::read_pgm(std::io::BufReader::new(f))?;
        let side = pgm.with_extension("json");
        if side.exists() {
            let meta: FrameMeta = serde_json::from_str(&std::fs::read_to_string(side)?)?;
            frame.exposure_s = meta.exposure_s;
            frame.timestamp_s = meta.timestamp_s;
        }
        Ok(frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    pub mm_per_px: f64,
    /// Column of z = 0.
    pub col0: f64,
    /// Row of y = 0 (rows grow downward).
    pub row0: f64,
    pub frame_rate: f64,
    pub spot_sigma_px: f64,
    /// Peak value a stationary spot accumulates over one exposure.
    pub brightness: f64,
    pub background_mean: f64,
    pub background_std: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel {
            width: 1616,
            height: 1240,
            mm_per_px: 0.02,
            col0: 808.0,
            row0: 1200.0,
            frame_rate: 60.0,
            spot_sigma_px: 1.5,
            brightness: 2040.0,
            background_mean: 8.0,
            background_std: 2.0,
        }
    }
}

impl CameraModel {
    /// Narrow window around the centerline, tall enough for 0..12 mm.
    pub fn side_window() -> Self {
        CameraModel {
            width: 160,
            height: 640,
            col0: 80.0,
            row0: 620.0,
            ..CameraModel::default()
        }
    }

    /// Pixel (col, row) of a trap position.
    pub fn project(&self, r: &Vec3) -> (f64, f64) {
        (
            self.col0 + r.z * 1e3 / self.mm_per_px,
            self.row0 - r.y * 1e3 / self.mm_per_px,
        )
    }

    /// (z, y) in meters of a pixel position.
    pub fn unproject(&self, col: f64, row: f64) -> (f64, f64) {
        (
            (col - self.col0) * self.mm_per_px * 1e-3,
            (self.row0 - row) * self.mm_per_px * 1e-3,
        )
    }

    pub fn exposure(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mm_per_px > 0.0)
            || self.width == 0
            || self.height == 0
            || !(self.spot_sigma_px > 0.0)
        {
            return Err(TrapError::InvalidInput("invalid camera model".into()));
        }
        Ok(())
    }

    /// Applies a vertical calibration: sets the scale and the row of y = 0.
    pub fn with_vertical(&self, cal: &AxisCalibration) -> Self {
        CameraModel {
            mm_per_px: cal.mm_per_px(),
            row0: cal.px_of(0.0),
            ..*self
        }
    }
}

/// Accumulates Gaussian spots along `path` (positions sampled uniformly over
/// the exposure) and adds background noise.
pub fn render_frame<R: Rng>(
    camera: &CameraModel,
    path: &[Vec3],
    exposure_s: f64,
    timestamp_s: f64,
    rng: &mut R,
) -> Frame {
    let (w, h) = (camera.width, camera.height);
    let mut acc = vec![0.0f64; w * h];
    if !path.is_empty() {
        let weight = camera.brightness / path.len() as f64;
        let s = camera.spot_sigma_px;
        let reach = (5.0 * s).ceil() as i64;
        let inv = 1.0 / (2.0 * s * s);
        let mut gx = Vec::with_capacity(2 * reach as usize + 1);
        let mut gy = Vec::with_capacity(2 * reach as usize + 1);
        for r in path {
            let (pc, pr) = camera.project(r);
            let (c0, r0) = (pc.round() as i64 - reach, pr.round() as i64 - reach);
            gx.clear();
            gy.clear();
            for k in 0..=2 * reach {
                let dc = (c0 + k) as f64 - pc;
                let dr = (r0 + k) as f64 - pr;
                gx.push((-dc * dc * inv).exp());
                gy.push((-dr * dr * inv).exp());
            }
            for (kr, fy) in gy.iter().enumerate() {
                let row = r0 + kr as i64;
                if row < 0 || row >= h as i64 {
                    continue;
                }
                let base = row as usize * w;
                for (kc, fx) in gx.iter().enumerate() {
                    let col = c0 + kc as i64;
                    if col < 0 || col >= w as i64 {
                        continue;
                    }
                    acc[base + col as usize] += weight * fy * fx;
                }
            }
        }
    }
    let noise =
        Normal::new(camera.background_mean, camera.background_std.max(0.0)).expect("finite noise");
    let pixels = acc
        .into_iter()
        .map(|v| {
            let b = if camera.background_std > 0.0 {
                noise.sample(rng)
            } else {
                camera.background_mean
            };
            (v + b).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Frame {
        width: w,
        height: h,
        pixels,
        exposure_s,
        timestamp_s,
    }
}

/// Vertical ruler of small marks every `spacing_mm`, starting at y = 0.
pub fn render_ruler<R: Rng>(
    camera: &CameraModel,
    spacing_mm: f64,
    marks: usize,
    rng: &mut R,
) -> Frame {
    let mut acc = Frame::blank(camera.width, camera.height);
    let mut sum = vec![0u16; acc.pixels.len()];
    for k in 0..marks {
        let p = Vec3::new(0.0, k as f64 * spacing_mm * 1e-3, 0.0);
        let f = render_frame(
            &CameraModel {
                background_mean: 0.0,
                background_std: 0.0,
                ..*camera
            },
            &[p],
            0.0,
            0.0,
            rng,
        );
        for (s, v) in sum.iter_mut().zip(&f.pixels) {
            *s += *v as u16;
        }
    }
    let noise = Normal::new(camera.background_mean, camera.background_std.max(1e-12))
        .expect("finite noise");
    for (px, s) in acc.pixels.iter_mut().zip(&sum) {
        *px = (*s as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_col: usize,
    pub min_row: usize,
    pub max_col: usize,
    pub max_row: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.max_col - self.min_col + 1
    }

    pub fn height(&self) -> usize {
        self.max_row - self.min_row + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBlob {
    pub cx: f64,
    pub cy: f64,
    pub bbox: BBox,
    pub area: usize,
    /// Subpixel threshold extents (width, height).
    pub extent_w: f64,
    pub extent_h: f64,
    /// Peak-to-peak vertical streak length with the spot size removed.
    pub amplitude_px: f64,
    pub mm_per_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub threshold: u8,
    pub min_area: usize,
    pub max_area: usize,
    pub spot_sigma_px: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            threshold: 60,
            min_area: 4,
            max_area: 100_000,
            spot_sigma_px: 1.5,
        }
    }
}

/// Threshold, label and filter with the default spot model.
pub fn detect_blobs(frame: &Frame, threshold: u8, area_range: (usize, usize)) -> Vec<TrackedBlob> {
    detect_blobs_with(
        frame,
        &DetectParams {
            threshold,
            min_area: area_range.0,
            max_area: area_range.1,
            ..DetectParams::default()
        },
    )
}

pub fn detect_blobs_with(frame: &Frame, params: &DetectParams) -> Vec<TrackedBlob> {
    let (w, h) = (frame.width, frame.height);
    let on: Vec<bool> = frame.pixels.iter().map(|&p| p > params.threshold).collect();
    let mut label = vec![u32::MAX; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !on[start] || label[start] != u32::MAX {
            continue;
        }
        let id = blobs.len() as u32;
        label[start] = id;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (c, r) = (i % w, i / w);
            let mut visit = |j: usize| {
                if on[j] && label[j] == u32::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
        }
        blobs.push(members);
    }
    let mut out = Vec::new();
    for members in blobs {
        if members.len() < params.min_area || members.len() > params.max_area {
            continue;
        }
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        let mut bb = BBox {
            min_col: usize::MAX,
            min_row: usize::MAX,
            max_col: 0,
            max_row: 0,
        };
        for &i in &members {
            let (c, r) = (i % w, i / w);
            let v = frame.pixels[i] as f64;
            sw += v;
            sx += v * c as f64;
            sy += v * r as f64;
            bb.min_col = bb.min_col.min(c);
            bb.max_col = bb.max_col.max(c);
            bb.min_row = bb.min_row.min(r);
            bb.max_row = bb.max_row.max(r);
        }
        let (ew, eh) = subpixel_extents(frame, &bb, params.threshold as f64);
        let amp = streak_amplitude(eh, ew, params.spot_sigma_px);
        out.push(TrackedBlob {
            cx: sx / sw,
            cy: sy / sw,
            bbox: bb,
            area: members.len(),
            extent_w: ew,
            extent_h: eh,
            amplitude_px: amp,
            mm_per_px: None,
        });
    }
    out
}

/// Threshold-crossing extents along each axis, interpolated between the last
/// pixel inside and the first outside the bounding box.
fn subpixel_extents(frame: &Frame, bb: &BBox, thr: f64) -> (f64, f64) {
    let rows: Vec<f64> = (bb.min_row.saturating_sub(1)..=(bb.max_row + 1).min(frame.height - 1))
        .map(|r| {
            (bb.min_col..=bb.max_col)
                .map(|c| frame.get(c, r))
                .max()
                .unwrap_or(0) as f64
        })
        .collect();
    let cols: Vec<f64> = (bb.min_col.saturating_sub(1)..=(bb.max_col + 1).min(frame.width - 1))
        .map(|c| {
            (bb.min_row..=bb.max_row)
                .map(|r| frame.get(c, r))
                .max()
                .unwrap_or(0) as f64
        })
        .collect();
    (profile_extent(&cols, thr), profile_extent(&rows, thr))
}

fn profile_extent(p: &[f64], thr: f64) -> f64 {
    let inside: Vec<usize> = (0..p.len()).filter(|&i| p[i] > thr).collect();
    let (Some(&lo), Some(&hi)) = (inside.first(), inside.last()) else {
        return 0.0;
    };
    let cross = |out: usize, inn: usize| -> f64 {
        let (a, b) = (p[out], p[inn]);
        let f = if b > a {
            ((thr - a) / (b - a)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out as f64 + f * (inn as f64 - out as f64)
    };
    let left = if lo > 0 {
        cross(lo - 1, lo)
    } else {
        lo as f64 - 0.5
    };
    let right = if hi + 1 < p.len() {
        cross(hi + 1, hi)
    } else {
        hi as f64 + 0.5
    };
    right - left
}

/// Normalized vertical profile of a sinusoidally oscillating Gaussian spot,
/// averaged over one period.
fn streak_profile(amp: f64, y: f64, sigma: f64) -> f64 {
    let n = 64 + 4 * (amp / sigma).ceil() as usize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut s = 0.0;
    for k in 0..n {
        let t = (k as f64 + 0.5) / n as f64;
        let d = y - amp * (2.0 * std::f64::consts::PI * t).sin();
        s += (-d * d * inv).exp();
    }
    s / n as f64
}

/// Predicted thresholded streak height for amplitude `amp` when the brightest
/// row sits `ln_ratio` e-folds above threshold.
fn streak_height(amp: f64, ln_ratio: f64, sigma: f64) -> f64 {
    let (y_peak, neg_peak) = if amp < 1e-9 {
        (0.0, -1.0)
    } else {
        brent_min(|y| -streak_profile(amp, y, sigma), 0.0, amp + sigma, 1e-6)
    };
    let target = -neg_peak * (-ln_ratio).exp();
    let (mut lo, mut hi) = (y_peak, amp + 12.0 * sigma);
    for _ in 0..50 {
        let m = 0.5 * (lo + hi);
        if streak_profile(amp, m, sigma) > target {
            lo = m;
        } else {
            hi = m;
        }
    }
    2.0 * lo
}

/// Peak-to-peak amplitude (px) from the measured streak height and width.
///
/// The width fixes how far the brightest row sits above threshold; the
/// amplitude is then the one whose predicted height matches the measured one.
/// This accounts for the dimmer turning points of a long exposure.
pub fn streak_amplitude(height: f64, width: f64, sigma: f64) -> f64 {
    if !(height > 0.0) || !(width > 0.0) {
        return 0.0;
    }
    let ln_ratio = (0.5 * width).powi(2) / (2.0 * sigma * sigma);
    if streak_height(0.0, ln_ratio, sigma) >= height {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 0.5 * height);
    for _ in 0..40 {
        let m = 0.5 * (lo + hi);
        if streak_height(m, ln_ratio, sigma) < height {
            lo = m;
        } else {
            hi = m;
        }
    }
    lo + hi
}

/// α in meters, clamped at zero.
pub fn measure_micromotion(blob: &TrackedBlob, camera: &CameraModel) -> f64 {
    (blob.amplitude_px * camera.mm_per_px * 1e-3).max(0.0)
}

/// Linear pixel ↔ millimeter map along one axis: mm = offset + scale·px.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisCalibration {
    pub scale: f64,
    pub offset: f64,
}

impl AxisCalibration {
    pub fn mm_per_px(&self) -> f64 {
        self.scale.abs()
    }

    /// True when millimeters grow as pixel index shrinks (image rows vs height).
    pub fn inverted(&self) -> bool {
        self.scale < 0.0
    }

    pub fn mm_of(&self, px: f64) -> f64 {
        self.offset + self.scale * px
    }

    pub fn px_of(&self, mm: f64) -> f64 {
        (mm - self.offset) / self.scale
    }
}

/// Calibration from two (px, mm) reference pairs.
pub fn calibrate(p1: (f64, f64), p2: (f64, f64)) -> Result<AxisCalibration> {
    let dp = p2.0 - p1.0;
    let dm = p2.1 - p1.1;
    if dp == 0.0 || dm == 0.0 {
        return Err(TrapError::InvalidInput(
            "calibration points coincide".into(),
        ));
    }
    let scale = dm / dp;
    Ok(AxisCalibration {
        scale,
        offset: p1.1 - scale * p1.0,
    })
}

/// Height and micromotion averaged over a run of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub y: f64,
    pub sigma_y: f64,
    pub z: f64,
    pub alpha: f64,
    pub sigma_alpha: f64,
    pub frames_used: usize,
}

/// Largest blob per frame, averaged. `None` when no frame has a blob.
pub fn summarize_frames(
    frames: &[Frame],
    camera: &CameraModel,
    params: &DetectParams,
) -> Option<FrameSummary> {
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    let mut alphas = Vec::new();
    for f in frames {
        let blobs = detect_blobs_with(f, params);
        if let Some(b) = blobs.iter().max_by_key(|b| b.area) {
            let (z, y) = camera.unproject(b.cx, b.cy);
            ys.push(y);
            zs.push(z);
            alphas.push(measure_micromotion(b, camera));
        }
    }
    if ys.is_empty() {
        return None;
    }
    let ms = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (m, s)
    };
    let (y, sigma_y) = ms(&ys);
    let (alpha, sigma_alpha) = ms(&alphas);
    Some(FrameSummary {
        y,
        sigma_y,
        z: ms(&zs).0,
        alpha,
        sigma_alpha,
        frames_used: ys.len(),
    })
}

/// Splits an evenly sampled path into consecutive exposures of
/// `samples_per_frame` points and renders each.
pub fn render_sequence<R: Rng>(
    camera: &CameraModel,
    path: &[Vec3],
    samples_per_frame: usize,
    t0: f64,
    rng: &mut R,
) -> Vec<Frame> {
    let exposure = camera.exposure();
    path.chunks_exact(samples_per_frame.max(1))
        .enumerate()
        .map(|(k, chunk)| render_frame(camera, chunk, exposure, t0 + k as f64 * exposure, rng))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobRow {
    frame_idx: usize,
    cx_px: f64,
    cy_px: f64,
    area: usize,
    amplitude_px: f64,
}

/// Blob table as CSV (frame_idx, cx_px, cy_px, area, amplitude_px).
pub fn write_blob_csv<W: Write>(rows: &[(usize, TrackedBlob)], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for (k, b) in rows {
        wr.serialize(BlobRow {
            frame_idx: *k,
            cx_px: b.cx,
            cy_px: b.cy,
            area: b.area,
            amplitude_px: b.amplitude_px,
        })?;
    }
    wr.flush()?;
    Ok(())
}

/// Renders every sweep capture as a run of exposures and measures it, giving
/// the series a camera would have recorded. Captures where no frame shows a
/// blob are skipped.
pub fn series_from_captures<R: Rng>(
    captures: &[Capture],
    camera: &CameraModel,
    params: &DetectParams,
    samples_per_frame: usize,
    rng: &mut R,
) -> HeightVoltageSeries {
    let mut series = HeightVoltageSeries::default();
    for cap in captures {
        let frames = render_sequence(camera, &cap.positions, samples_per_frame, cap.t0, rng);
        if let Some(s) = summarize_frames(&frames, camera, params) {
            series.points.push(SeriesPoint {
                v_central: cap.v_central,
                y: s.y,
                sigma_y: s.sigma_y.max(0.5 * camera.mm_per_px * 1e-3),
                alpha: s.alpha,
                sigma_alpha: s.sigma_alpha,
            });
        }
    }
    series
}
