//! Desk-scale tomography workload: parallel-beam Radon transform, spatial
//! Ram-Lak filtered backprojection and image metrics.
//!
//! Images live on `[-1, 1]²` with `n × n` square pixels of side `2/n`,
//! stored row-major with row index increasing along `y`. Detector bins are
//! the centers of `n_s` equal cells covering `[-1, 1]`.
//!
//! The per-angle and per-pixel loops run on rayon when the `parallel`
//! feature is enabled. Every output value is accumulated by a single task in
//! a fixed order, so results are bit-identical across execution modes.

use std::f64::consts::{PI, SQRT_2};

use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TomoError {
    #[error("grid side must be at least 2, got {0}")]
    BadSide(usize),
    #[error("radius must lie in (0, 1], got {0}")]
    BadRadius(f64),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("need at least one angle")]
    NoAngles,
    #[error("bin count must be odd and at least 3, got {0}")]
    BadBins(usize),
    #[error("sample step must be positive")]
    BadStep,
}

/// How the data-parallel kernels are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

#[allow(clippy::derivable_impls)]
impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

fn map_indexed<T, F>(len: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..len).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => (0..len).into_par_iter().map(f).collect(),
    }
}

/// Square grid of reals on `[-1, 1]²`.
pub trait Raster {
    fn side(&self) -> usize;
    fn values(&self) -> &[f64];

    fn pixel_size(&self) -> f64 {
        2.0 / self.side() as f64
    }

    fn at(&self, row: usize, col: usize) -> f64 {
        self.values()[row * self.side() + col]
    }
}

/// Center coordinate of pixel `i` along one axis.
pub fn pixel_center(n: usize, i: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    n: usize,
    values: Vec<f64>,
}

impl Phantom {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, TomoError> {
        if n < 2 {
            return Err(TomoError::BadSide(n));
        }
        if values.len() != n * n {
            return Err(TomoError::ShapeMismatch(format!(
                "{} values for a {n}x{n} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TomoError::NonFinite);
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize) -> Result<Self, TomoError> {
        Self::from_values(n, vec![0.0; n * n])
    }

    /// Sum of pixel values times pixel area.
    pub fn mass(&self) -> f64 {
        let ps = self.pixel_size();
        self.values.iter().sum::<f64>() * ps * ps
    }

    /// Bilinear interpolation of pixel centers, zero outside the grid.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let n = self.n;
        let scale = n as f64 / 2.0;
        let fx = (x + 1.0) * scale - 0.5;
        let fy = (y + 1.0) * scale - 0.5;
        if !(fx > -1.0 && fy > -1.0 && fx < n as f64 && fy < n as f64) {
            return 0.0;
        }
        let j0 = fx.floor();
        let i0 = fy.floor();
        let wx = fx - j0;
        let wy = fy - i0;
        let (j0, i0) = (j0 as isize, i0 as isize);
        let px = |i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
                0.0
            } else {
                self.values[i as usize * n + j as usize]
            }
        };
        (1.0 - wy) * ((1.0 - wx) * px(i0, j0) + wx * px(i0, j0 + 1))
            + wy * ((1.0 - wx) * px(i0 + 1, j0) + wx * px(i0 + 1, j0 + 1))
    }
}

impl Raster for Phantom {
    fn side(&self) -> usize {
        self.n
    }

    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Pixel value `intensity` where the pixel center lies within `radius` of
/// the origin. Radii below half a pixel may select no pixel at all.
pub fn make_disk_phantom(n: usize, radius: f64, intensity: f64) -> Result<Phantom, TomoError> {
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(TomoError::BadRadius(radius));
    }
    if !intensity.is_finite() {
        return Err(TomoError::NonFinite);
    }
    let r2 = radius * radius;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let y = pixel_center(n, i);
        for j in 0..n {
            let x = pixel_center(n, j);
            if x * x + y * y <= r2 {
                values[i * n + j] = intensity;
            }
        }
    }
    Phantom::from_values(n, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconImage {
    n: usize,
    values: Vec<f64>,
}

impl ReconImage {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self, TomoError> {
        if values.len() != n * n {
            return Err(TomoError::ShapeMismatch(format!(
                "{} values for a {n}x{n} grid",
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn to_text(&self) -> String {
        export_text(self.n, self.n, &self.values)
    }
}

impl Raster for ReconImage {
    fn side(&self) -> usize {
        self.n
    }

    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Uniform detector bin centers `-1 + (j + 1/2)·2/n_s`.
pub fn detector_bins(n_s: usize) -> Vec<f64> {
    let ds = 2.0 / n_s as f64;
    (0..n_s).map(|j| -1.0 + (j as f64 + 0.5) * ds).collect()
}

/// Angles `π·k/n` for a half-rotation scan.
pub fn scan_angles(n_angles: usize) -> Vec<f64> {
    (0..n_angles)
        .map(|k| PI * k as f64 / n_angles as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub angles: Vec<f64>,
    pub s_values: Vec<f64>,
    /// Row-major, one row of `n_s` bins per angle.
    pub data: Vec<f64>,
}

impl Sinogram {
    pub fn from_rows(angles: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self, TomoError> {
        if rows.len() != angles.len() {
            return Err(TomoError::ShapeMismatch(format!(
                "{} rows for {} angles",
                rows.len(),
                angles.len()
            )));
        }
        let n_s = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_s) {
            return Err(TomoError::ShapeMismatch("ragged sinogram rows".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TomoError::NonFinite);
        }
        Ok(Self {
            angles,
            s_values: detector_bins(n_s),
            data,
        })
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_s(&self) -> usize {
        self.s_values.len()
    }

    pub fn bin_width(&self) -> f64 {
        2.0 / self.n_s() as f64
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let n_s = self.n_s();
        &self.data[k * n_s..(k + 1) * n_s]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        export_text(self.n_angles(), self.n_s(), &self.data)
    }
}

fn line_samples(step: f64) -> usize {
    (2.0 * SQRT_2 / step + 1e-9).floor() as usize + 1
}

/// Line integrals of `phantom` at one angle: for each bin `s`,
/// `Σ_t f(s·cosθ − t·sinθ, s·sinθ + t·cosθ)·step` with `t` stepping from
/// `-√2` to `√2`.
pub fn project(phantom: &Phantom, theta: f64, s_values: &[f64], step: f64) -> Vec<f64> {
    let (sin, cos) = theta.sin_cos();
    let samples = line_samples(step);
    s_values
        .iter()
        .map(|&s| {
            let mut acc = 0.0;
            for m in 0..samples {
                let t = -SQRT_2 + m as f64 * step;
                acc += phantom.sample(s * cos - t * sin, s * sin + t * cos);
            }
            acc * step
        })
        .collect()
}

pub fn radon(
    phantom: &Phantom,
    angles: &[f64],
    n_s: usize,
    sample_step: f64,
) -> Result<Sinogram, TomoError> {
    radon_with(phantom, angles, n_s, sample_step, Execution::default())
}

pub fn radon_with(
    phantom: &Phantom,
    angles: &[f64],
    n_s: usize,
    sample_step: f64,
    exec: Execution,
) -> Result<Sinogram, TomoError> {
    if !(sample_step > 0.0 && sample_step.is_finite()) {
        return Err(TomoError::BadStep);
    }
    let s_values = detector_bins(n_s);
    let rows = map_indexed(angles.len(), exec, |k| {
        project(phantom, angles[k], &s_values, sample_step)
    });
    Ok(Sinogram {
        angles: angles.to_vec(),
        s_values,
        data: rows.into_iter().flatten().collect(),
    })
}

/// Discrete Ram-Lak kernel `h[-m..=m]`, index `m` holding `h[0]`.
pub fn ramlak_kernel(half_width: usize, ds: f64) -> Vec<f64> {
    let m = half_width as isize;
    (-m..=m)
        .map(|k| {
            if k == 0 {
                1.0 / (4.0 * ds * ds)
            } else if k % 2 == 0 {
                0.0
            } else {
                let kf = k as f64;
                -1.0 / (PI * PI * kf * kf * ds * ds)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    RamLak,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconParams {
    pub filter: Filter,
    pub n_angles: usize,
    pub n_s: usize,
    /// Side of the reconstructed grid.
    pub n: usize,
    pub sample_step: f64,
}

impl ReconParams {
    pub fn new(n: usize, n_angles: usize, n_s: usize) -> Result<Self, TomoError> {
        let params = Self {
            filter: Filter::RamLak,
            n_angles,
            n_s,
            n,
            sample_step: 1.0 / n as f64,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), TomoError> {
        if self.n < 2 {
            return Err(TomoError::BadSide(self.n));
        }
        if self.n_angles < 1 {
            return Err(TomoError::NoAngles);
        }
        if self.n_s < 3 || self.n_s.is_multiple_of(2) {
            return Err(TomoError::BadBins(self.n_s));
        }
        if self.sample_step.is_nan() || self.sample_step <= 0.0 {
            return Err(TomoError::BadStep);
        }
        Ok(())
    }
}

fn filter_row(row: &[f64], kernel: &[f64], ds: f64) -> Vec<f64> {
    let n_s = row.len();
    let m = (kernel.len() - 1) / 2;
    (0..n_s)
        .map(|j| {
            let mut acc = 0.0;
            for (i, &p) in row.iter().enumerate() {
                let off = j as isize - i as isize + m as isize;
                if off >= 0 && (off as usize) < kernel.len() {
                    acc += kernel[off as usize] * p;
                }
            }
            acc * ds
        })
        .collect()
}

pub fn fbp(sinogram: &Sinogram, params: &ReconParams) -> Result<ReconImage, TomoError> {
    fbp_with(sinogram, params, Execution::default())
}

pub fn fbp_with(
    sinogram: &Sinogram,
    params: &ReconParams,
    exec: Execution,
) -> Result<ReconImage, TomoError> {
    params.validate()?;
    if sinogram.n_angles() != params.n_angles || sinogram.n_s() != params.n_s {
        return Err(TomoError::ShapeMismatch(format!(
            "sinogram {}x{} vs params {}x{}",
            sinogram.n_angles(),
            sinogram.n_s(),
            params.n_angles,
            params.n_s
        )));
    }
    let n_s = params.n_s;
    let ds = sinogram.bin_width();
    let filtered: Vec<Vec<f64>> = match params.filter {
        Filter::None => (0..params.n_angles)
            .map(|k| sinogram.row(k).to_vec())
            .collect(),
        Filter::RamLak => {
            let kernel = ramlak_kernel(n_s - 1, ds);
            map_indexed(params.n_angles, exec, |k| {
                filter_row(sinogram.row(k), &kernel, ds)
            })
        }
    };
    let trig: Vec<(f64, f64)> = sinogram.angles.iter().map(|t| t.sin_cos()).collect();
    let s0 = sinogram.s_values[0];
    let n = params.n;
    let scale = PI / params.n_angles as f64;

    let values = map_indexed(n * n, exec, |idx| {
        let y = pixel_center(n, idx / n);
        let x = pixel_center(n, idx % n);
        let mut acc = 0.0;
        for (row, &(sin, cos)) in filtered.iter().zip(&trig) {
            let f = (x * cos + y * sin - s0) / ds;
            let i0 = f.floor();
            let w = f - i0;
            let i0 = i0 as isize;
            let at = |i: isize| {
                if i < 0 || i >= n_s as isize {
                    0.0
                } else {
                    row[i as usize]
                }
            };
            acc += (1.0 - w) * at(i0) + w * at(i0 + 1);
        }
        acc * scale
    });
    ReconImage::from_values(n, values)
}

/// Root-mean-square difference over the masked pixels.
pub fn rmse(a: &impl Raster, b: &impl Raster, mask: Option<&[bool]>) -> Result<f64, TomoError> {
    if a.side() != b.side() {
        return Err(TomoError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.side(),
            a.side(),
            b.side(),
            b.side()
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.values().len() {
            return Err(TomoError::ShapeMismatch("mask size".into()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (x, y)) in a.values().iter().zip(b.values()).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            sum += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 {
        return Err(TomoError::EmptyMask);
    }
    Ok((sum / count as f64).sqrt())
}

/// Pixels whose centers lie within `radius` of the origin.
pub fn disk_mask(n: usize, radius: f64) -> Vec<bool> {
    let r2 = radius * radius;
    (0..n * n)
        .map(|idx| {
            let y = pixel_center(n, idx / n);
            let x = pixel_center(n, idx % n);
            x * x + y * y <= r2
        })
        .collect()
}

/// `%g`-style rendering with six significant digits.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// First line `rows cols`, then one line of space-separated values per row.
pub fn export_text(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut out = format!("{rows} {cols}\n");
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format_sig6(*v))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk() -> Phantom {
        make_disk_phantom(64, 0.5, 1.0).unwrap()
    }

    #[test]
    fn disk_geometry() {
        let p = disk();
        assert_eq!(p.at(32, 32), 1.0);
        assert_eq!(p.at(0, 0), 0.0);
        assert!(make_disk_phantom(64, 0.0, 1.0).is_err());
        assert!(make_disk_phantom(64, 1.5, 1.0).is_err());
        // Radius below half a pixel: no pixel center inside.
        let tiny = make_disk_phantom(64, 0.01, 1.0).unwrap();
        assert!(tiny.values().iter().all(|&v| v == 0.0));
        let zero = make_disk_phantom(64, 0.5, 0.0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_phantom_projects_to_zero() {
        let sino = radon(&Phantom::zeros(16).unwrap(), &scan_angles(8), 15, 1.0 / 16.0).unwrap();
        assert!(sino.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disk_chords_match_frozen_oracle() {
        let sino = radon(&disk(), &[0.0], 95, 1.0 / 64.0).unwrap();
        // Frozen from the numpy evaluation of the same line-integral definition.
        assert!((sino.row(0)[47] - 1.0).abs() < 1e-12);
        assert!((sino.row(0)[66] - 0.60625).abs() < 1e-12);
        assert!((sino.s_values[66] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn kernel_values() {
        let h = ramlak_kernel(3, 1.0);
        assert_eq!(h.len(), 7);
        assert_eq!(h[3], 0.25);
        assert!((h[4] + 1.0 / (PI * PI)).abs() < 1e-15);
        assert!((h[4] + 0.101321).abs() < 1e-6);
        assert_eq!(h[5], 0.0);
        for k in 1..=3 {
            assert_eq!(h[3 + k], h[3 - k]);
        }
    }

    #[test]
    fn fbp_of_zero_is_zero() {
        let params = ReconParams::new(16, 4, 15).unwrap();
        let sino = Sinogram {
            angles: scan_angles(4),
            s_values: detector_bins(15),
            data: vec![0.0; 60],
        };
        let img = fbp(&sino, &params).unwrap();
        assert!(img.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fbp_rejects_shape_mismatch() {
        let params = ReconParams::new(16, 5, 15).unwrap();
        let sino = Sinogram {
            angles: scan_angles(4),
            s_values: detector_bins(15),
            data: vec![0.0; 60],
        };
        assert!(matches!(fbp(&sino, &params), Err(TomoError::ShapeMismatch(_))));
        assert!(ReconParams::new(16, 4, 14).is_err());
    }

    #[test]
    fn rmse_basics() {
        let a = ReconImage::from_values(2, vec![1.0; 4]).unwrap();
        let b = ReconImage::from_values(2, vec![0.0; 4]).unwrap();
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        assert_eq!(rmse(&a, &b, None).unwrap(), 1.0);
        assert_eq!(rmse(&a, &b, Some(&[false; 4])), Err(TomoError::EmptyMask));
        let c = ReconImage::from_values(3, vec![0.0; 9]).unwrap();
        assert!(rmse(&a, &c, None).is_err());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.60625), "0.60625");
        assert_eq!(format_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig6(-123456.7), "-123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(1.5e-7), "1.5e-7");
        assert_eq!(export_text(1, 2, &[0.5, 2.0]), "1 2\n0.5 2\n");
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let p = disk();
        let angles = scan_angles(12);
        let a = radon_with(&p, &angles, 31, 1.0 / 64.0, Execution::Sequential).unwrap();
        let b = radon_with(&p, &angles, 31, 1.0 / 64.0, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let params = ReconParams::new(32, 12, 31).unwrap();
        let ra = fbp_with(&a, &params, Execution::Sequential).unwrap();
        let rb = fbp_with(&a, &params, Execution::Parallel).unwrap();
        assert_eq!(ra, rb);
    }
}
