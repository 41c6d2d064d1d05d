//! Feature image and speed map construction.
//!
//! The speed map is `s = 1 / (1 + (g / beta)^2)` where `g` is the gradient
//! magnitude of the Gaussian-smoothed image. All stencils clamp to the edge.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3D};

/// Edge-stopping scale for [`edge_speed`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum Beta {
    /// Mean of the gradient magnitude over voxels where it is positive.
    #[default]
    Auto,
    Fixed(f64),
}


/// Speed map with values in `(0, 1]` and its precomputed spatial gradient.
#[derive(Clone, Debug)]
pub struct SpeedImage {
    geometry: Geometry,
    data: Vec<f32>,
    /// Central-difference gradient of the speed in per-mm units, in the
    /// index-aligned frame.
    gradient: Vec<[f32; 3]>,
    beta: f64,
}

impl SpeedImage {
    /// Wraps an explicit speed field. Values must lie in `(0, 1]`.
    pub fn from_values(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry("speed sample count does not match geometry".into()));
        }
        if let Some(bad) = data.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::invalid(format!("speed value {bad} outside (0, 1]")));
        }
        let gradient = central_gradient(&geometry, &data);
        Ok(Self {
            geometry,
            data,
            gradient,
            beta: f64::NAN,
        })
    }

    pub fn constant(geometry: Geometry, value: f32) -> Result<Self> {
        let n = geometry.len();
        Self::from_values(geometry, vec![value; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn gradient(&self) -> &[[f32; 3]] {
        &self.gradient
    }

    /// The resolved beta, or NaN when the field was supplied directly.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(self.geometry.clone(), self.data.clone()).expect("matching length")
    }
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_vox).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);
    k
}

/// Convolves every line along `axis` with `kernel`, clamping at the ends.
fn convolve_axis(geometry: &Geometry, src: &[f64], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [nx, ny, _] = geometry.dims;
    let n = geometry.dims[axis] as i64;
    let stride = [1, nx, nx * ny][axis];
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    let slab = nx * ny;
    out.par_chunks_mut(slab).enumerate().for_each(|(k, plane)| {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let pos = [i, j, k][axis] as i64;
                let base = idx - pos as usize * stride;
                let mut acc = 0.0;
                for (t, w) in kernel.iter().enumerate() {
                    let p = (pos + t as i64 - radius).clamp(0, n - 1) as usize;
                    acc += w * src[base + p * stride];
                }
                plane[i + nx * j] = acc;
            }
        }
    });
    out
}

/// Separable Gaussian smoothing with physical `sigma` in millimetres.
///
/// The per-axis kernel width is `sigma / spacing`, truncated at 4 sigma and
/// renormalized to unit sum.
pub fn gaussian_smooth(vol: &Volume3D, sigma: f64) -> Result<Volume3D> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let g = vol.geometry();
    let mut buf: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        if g.dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma / g.spacing[axis]);
        buf = convolve_axis(g, &buf, axis, &kernel);
    }
    Volume3D::new(g.clone(), buf.into_iter().map(|v| v as f32).collect())
}

/// Per-mm derivative along `axis` at `idx`: central inside, one-sided at faces.
#[inline]
fn axis_derivative(field: &[f32], geometry: &Geometry, idx: usize, pos: usize, axis: usize) -> f64 {
    let [nx, ny, _] = geometry.dims;
    let stride = [1, nx, nx * ny][axis];
    let n = geometry.dims[axis];
    let h = geometry.spacing[axis];
    if n < 2 {
        return 0.0;
    }
    if pos == 0 {
        (field[idx + stride] as f64 - field[idx] as f64) / h
    } else if pos == n - 1 {
        (field[idx] as f64 - field[idx - stride] as f64) / h
    } else {
        (field[idx + stride] as f64 - field[idx - stride] as f64) / (2.0 * h)
    }
}

fn central_gradient(geometry: &Geometry, field: &[f32]) -> Vec<[f32; 3]> {
    let [nx, ny, _] = geometry.dims;
    let mut out = vec![[0.0f32; 3]; field.len()];
    out.par_chunks_mut(nx * ny).enumerate().for_each(|(k, plane)| {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let pos = [i, j, k];
                let mut g = [0.0f32; 3];
                for a in 0..3 {
                    g[a] = axis_derivative(field, geometry, idx, pos[a], a) as f32;
                }
                plane[i + nx * j] = g;
            }
        }
    });
    out
}

/// Euclidean norm of the physical-unit gradient.
pub fn gradient_magnitude(vol: &Volume3D) -> Result<Volume3D> {
    let g = vol.geometry();
    if g.dims.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!(
            "gradient magnitude needs at least 2 samples per axis, got {:?}",
            g.dims
        )));
    }
    let grad = central_gradient(g, vol.data());
    let data = grad
        .iter()
        .map(|v| {
            let (x, y, z) = (v[0] as f64, v[1] as f64, v[2] as f64);
            (x * x + y * y + z * z).sqrt() as f32
        })
        .collect();
    Volume3D::new(g.clone(), data)
}

/// Resolves [`Beta::Auto`] against a gradient-magnitude image.
pub fn resolve_beta(gradmag: &Volume3D, beta: Beta) -> Result<f64> {
    match beta {
        Beta::Fixed(b) if b > 0.0 && b.is_finite() => Ok(b),
        Beta::Fixed(b) => Err(Error::invalid(format!("beta must be > 0, got {b}"))),
        Beta::Auto => {
            let (sum, n) = gradmag
                .data()
                .iter()
                .filter(|&&v| v > 0.0)
                .fold((0.0f64, 0usize), |(s, n), &v| (s + v as f64, n + 1));
            Ok(if n == 0 { 1.0 } else { sum / n as f64 })
        }
    }
}

/// Maps gradient magnitude to a speed in `(0, 1]`.
pub fn edge_speed(gradmag: &Volume3D, beta: Beta) -> Result<SpeedImage> {
    if gradmag.data().iter().any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::invalid("gradient magnitude must be non-negative"));
    }
    let b = resolve_beta(gradmag, beta)?;
    let data: Vec<f32> = gradmag
        .data()
        .iter()
        .map(|&g| {
            let r = g as f64 / b;
            ((1.0 / (1.0 + r * r)) as f32).max(f32::MIN_POSITIVE)
        })
        .collect();
    let geometry = gradmag.geometry().clone();
    let gradient = central_gradient(&geometry, &data);
    Ok(SpeedImage {
        geometry,
        data,
        gradient,
        beta: b,
    })
}

/// Settings for building a speed map from a raw image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedConfig {
    pub sigma_mm: f64,
    pub beta: Beta,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            sigma_mm: 1.0,
            beta: Beta::Auto,
        }
    }
}

/// Gaussian smoothing, gradient magnitude and edge speed in one call.
pub fn speed_from_image(vol: &Volume3D, config: &SpeedConfig) -> Result<SpeedImage> {
    let smoothed = gaussian_smooth(vol, config.sigma_mm)?;
    let gm = gradient_magnitude(&smoothed)?;
    edge_speed(&gm, config.beta)
}
