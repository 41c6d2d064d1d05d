//! Annulus curve fitting from user-placed points.
//!
//! Points are interpolated by a closed (periodic) cubic spline with
//! chord-length parameterization, then resampled at uniform arc length. The
//! best-fit plane is the total-least-squares plane of the samples; its normal
//! is oriented toward the probe.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mat3, Vec3};

pub const MIN_POINTS: usize = 6;
pub const CURVE_SAMPLES: usize = 100;
const MIN_POINT_GAP_MM: f64 = 0.1;
// Dense evaluation per spline segment used for arc-length resampling.
const ARC_SUBDIV: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnulusDefinition {
    pub points: Vec<Vec3>,
    /// Unit vector from the valve toward the transducer. `None` means the
    /// negative depth axis of the image.
    pub probe_dir: Option<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusModel {
    pub samples: Vec<Vec3>,
    pub centroid: Vec3,
    pub plane_normal: Vec3,
    pub plane_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusSummary {
    pub centroid: [f64; 3],
    pub plane_normal: [f64; 3],
    pub plane_offset: f64,
    pub mean_radius_mm: f64,
    pub perimeter_mm: f64,
    pub n_samples: usize,
}

impl AnnulusDefinition {
    pub fn new(points: Vec<Vec3>, probe_dir: Option<Vec3>) -> Self {
        Self { points, probe_dir }
    }

    /// The probe direction, falling back to the negative depth (k) axis.
    pub fn resolved_probe_dir(&self, geometry: Option<&Geometry>) -> Vec3 {
        match (self.probe_dir, geometry) {
            (Some(d), _) => d,
            (None, Some(g)) => -g.direction.column(2).into_owned(),
            (None, None) => -Vec3::z(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n < MIN_POINTS {
            return Err(Error::Annulus(format!(
                "too few points: need at least {MIN_POINTS}, got {n}"
            )));
        }
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            if (b - a).norm() < MIN_POINT_GAP_MM {
                return Err(Error::Annulus(format!(
                    "points {i} and {} are closer than {MIN_POINT_GAP_MM} mm",
                    (i + 1) % n
                )));
            }
        }
        if let Some(d) = self.probe_dir {
            if !(d.norm() > 0.0) || !d.iter().all(|v| v.is_finite()) {
                return Err(Error::Annulus("probe direction must be a non-zero vector".into()));
            }
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Accepts either a bare array of `{x,y,z}` or
    /// `{"points": [...], "probe_dir": {x,y,z} | [x,y,z]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: AnnulusFile = serde_json::from_str(text)?;
        Ok(file.into())
    }

    pub fn to_json(&self) -> String {
        let file = AnnulusFile::Object {
            points: self.points.iter().map(|p| XYZ::from(*p)).collect(),
            probe_dir: self.probe_dir.map(|d| DirRepr::Xyz(XYZ::from(d))),
        };
        serde_json::to_string_pretty(&file).expect("plain data serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct XYZ {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<Vec3> for XYZ {
    fn from(v: Vec3) -> Self {
        XYZ { x: v.x, y: v.y, z: v.z }
    }
}

impl From<XYZ> for Vec3 {
    fn from(p: XYZ) -> Self {
        Vec3::new(p.x, p.y, p.z)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DirRepr {
    Xyz(XYZ),
    Array([f64; 3]),
}

impl From<DirRepr> for Vec3 {
    fn from(d: DirRepr) -> Self {
        match d {
            DirRepr::Xyz(p) => p.into(),
            DirRepr::Array(a) => Vec3::from(a),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum AnnulusFile {
    Object {
        points: Vec<XYZ>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probe_dir: Option<DirRepr>,
    },
    Bare(Vec<XYZ>),
}

impl From<AnnulusFile> for AnnulusDefinition {
    fn from(f: AnnulusFile) -> Self {
        match f {
            AnnulusFile::Bare(points) => AnnulusDefinition::new(points.into_iter().map(Vec3::from).collect(), None),
            AnnulusFile::Object { points, probe_dir } => AnnulusDefinition::new(
                points.into_iter().map(Vec3::from).collect(),
                probe_dir.map(Vec3::from),
            ),
        }
    }
}

/// Second derivatives of a periodic cubic spline through `y` at knots with
/// interval lengths `h` (`h[i]` spans knot i to i+1, wrapping).
fn periodic_second_derivatives(h: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let next = (i + 1) % n;
        let hp = h[prev];
        let hi = h[i];
        a[(i, prev)] += hp;
        a[(i, i)] += 2.0 * (hp + hi);
        a[(i, next)] += hi;
        rhs[i] = 6.0 * ((y[next] - y[i]) / hi - (y[i] - y[prev]) / hp);
    }
    let m = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Annulus("spline system is singular".into()))?;
    Ok(m.iter().copied().collect())
}

struct PeriodicSpline {
    knots: Vec<Vec3>,
    h: Vec<f64>,
    m: [Vec<f64>; 3],
}

impl PeriodicSpline {
    fn new(points: &[Vec3]) -> Result<Self> {
        let n = points.len();
        let h: Vec<f64> = (0..n).map(|i| (points[(i + 1) % n] - points[i]).norm()).collect();
        let mut m: [Vec<f64>; 3] = Default::default();
        for (c, mc) in m.iter_mut().enumerate() {
            let y: Vec<f64> = points.iter().map(|p| p[c]).collect();
            *mc = periodic_second_derivatives(&h, &y)?;
        }
        Ok(Self {
            knots: points.to_vec(),
            h,
            m,
        })
    }

    /// Evaluates segment `i` at local parameter `t` in `[0, h_i]`.
    fn eval(&self, i: usize, t: f64) -> Vec3 {
        let n = self.knots.len();
        let j = (i + 1) % n;
        let hi = self.h[i];
        let a = (hi - t) / hi;
        let b = t / hi;
        let mut out = Vec3::zeros();
        for c in 0..3 {
            let (yi, yj) = (self.knots[i][c], self.knots[j][c]);
            let (mi, mj) = (self.m[c][i], self.m[c][j]);
            out[c] = a * yi + b * yj + ((a * a * a - a) * mi + (b * b * b - b) * mj) * hi * hi / 6.0;
        }
        out
    }

    /// Dense closed polyline along the curve (first point not repeated).
    fn dense(&self) -> Vec<Vec3> {
        let mut pts = Vec::with_capacity(self.knots.len() * ARC_SUBDIV);
        for i in 0..self.knots.len() {
            for s in 0..ARC_SUBDIV {
                pts.push(self.eval(i, self.h[i] * s as f64 / ARC_SUBDIV as f64));
            }
        }
        pts
    }
}

/// Resamples a closed polyline at `count` uniform arc-length positions,
/// starting at its first vertex.
fn resample_closed(poly: &[Vec3], count: usize) -> Vec<Vec3> {
    let n = poly.len();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for i in 0..n {
        let d = (poly[(i + 1) % n] - poly[i]).norm();
        cum.push(cum[i] + d);
    }
    let total = cum[n];
    let mut out = Vec::with_capacity(count);
    let mut seg = 0usize;
    for s in 0..count {
        let target = total * s as f64 / count as f64;
        while seg + 1 < n && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 { (target - cum[seg]) / len } else { 0.0 };
        out.push(poly[seg] + (poly[(seg + 1) % n] - poly[seg]) * t);
    }
    out
}

/// Returns the eigenvalues (ascending) and matching unit eigenvectors of the
/// sample covariance.
fn covariance_eigen(points: &[Vec3], centroid: Vec3) -> ([f64; 3], [Vec3; 3]) {
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = order.map(|i| eig.eigenvectors.column(i).normalize());
    (vals, vecs)
}

pub fn fit_annulus(def: &AnnulusDefinition) -> Result<AnnulusModel> {
    fit_annulus_with_probe(def, def.resolved_probe_dir(None))
}

/// Fits the annulus, orienting the plane normal toward `probe_dir`.
pub fn fit_annulus_with_probe(def: &AnnulusDefinition, probe_dir: Vec3) -> Result<AnnulusModel> {
    def.validate()?;

    // Collinearity is judged on the raw points; a spline through collinear
    // points is degenerate anyway.
    let raw_centroid = def.points.iter().sum::<Vec3>() / def.points.len() as f64;
    let (raw_vals, _) = covariance_eigen(&def.points, raw_centroid);
    let scale = raw_vals[2].max(f64::MIN_POSITIVE);
    if raw_vals[1] / scale < 1e-10 {
        return Err(Error::Annulus("points are collinear; the annulus plane is degenerate".into()));
    }

    let spline = PeriodicSpline::new(&def.points)?;
    let samples = resample_closed(&spline.dense(), CURVE_SAMPLES);
    let centroid = samples.iter().sum::<Vec3>() / samples.len() as f64;
    let (vals, vecs) = covariance_eigen(&samples, centroid);
    if vals[1] / vals[2].max(f64::MIN_POSITIVE) < 1e-10 {
        return Err(Error::Annulus("fitted curve is degenerate".into()));
    }
    let mut normal = vecs[0];
    let probe = probe_dir.normalize();
    let along = normal.dot(&probe);
    if along.abs() < 1e-12 {
        return Err(Error::Annulus("probe direction lies in the annulus plane".into()));
    }
    if along < 0.0 {
        normal = -normal;
    }
    Ok(AnnulusModel {
        plane_offset: normal.dot(&centroid),
        samples,
        centroid,
        plane_normal: normal,
    })
}

impl AnnulusModel {
    /// Height above the best-fit plane; positive is the probe (atrial) side.
    pub fn signed_height(&self, p: Vec3) -> f64 {
        self.plane_normal.dot(&p) - self.plane_offset
    }

    pub fn mean_radius(&self) -> f64 {
        self.samples.iter().map(|s| (s - self.centroid).norm()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.samples.len();
        (0..n).map(|i| (self.samples[(i + 1) % n] - self.samples[i]).norm()).sum()
    }

    pub fn summary(&self) -> AnnulusSummary {
        AnnulusSummary {
            centroid: self.centroid.into(),
            plane_normal: self.plane_normal.into(),
            plane_offset: self.plane_offset,
            mean_radius_mm: self.mean_radius(),
            perimeter_mm: self.perimeter(),
            n_samples: self.samples.len(),
        }
    }
}

pub fn signed_height(p: Vec3, model: &AnnulusModel) -> f64 {
    model.signed_height(p)
}
