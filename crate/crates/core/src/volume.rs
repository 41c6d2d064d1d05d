//! Regular 3D grids with physical geometry.
//!
//! Samples are stored x-fastest: `idx = i + nx * (j + ny * k)`. World
//! coordinates follow `world = origin + direction * diag(spacing) * ijk`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-6;

/// Grid layout and physical placement shared by every volumetric type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Vec3,
    /// Columns are the world-space unit directions of the i, j, k axes.
    pub direction: Mat3,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Vec3, direction: Mat3) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Geometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Geometry(format!("spacing must be > 0, got {spacing:?}")));
        }
        for c in 0..3 {
            let col = direction.column(c);
            if (col.norm() - 1.0).abs() > ORTHO_TOL {
                return Err(Error::Geometry(format!("direction column {c} is not unit length")));
            }
            for d in (c + 1)..3 {
                if col.dot(&direction.column(d)).abs() > ORTHO_TOL {
                    return Err(Error::Geometry(format!(
                        "direction columns {c} and {d} are not orthogonal"
                    )));
                }
            }
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            direction,
        })
    }

    /// Axis-aligned grid with the origin at zero.
    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3], Vec3::zeros(), Mat3::identity())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn h_min(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn h_max(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// `direction * diag(spacing)`, the linear part of index→world.
    pub fn index_to_world_matrix(&self) -> Mat3 {
        self.direction * Mat3::from_diagonal(&Vec3::from(self.spacing))
    }

    pub fn index_to_world(&self, ijk: Vec3) -> Vec3 {
        self.origin + self.index_to_world_matrix() * ijk
    }

    pub fn voxel_to_world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.index_to_world(Vec3::new(i as f64, j as f64, k as f64))
    }

    pub fn world_to_index(&self, p: Vec3) -> Vec3 {
        // direction is orthonormal, so its inverse is its transpose.
        let local = self.direction.transpose() * (p - self.origin);
        Vec3::new(
            local.x / self.spacing[0],
            local.y / self.spacing[1],
            local.z / self.spacing[2],
        )
    }

    /// True when `ijk` lies within `[0, dim-1]` on every axis.
    pub fn contains_index(&self, ijk: Vec3) -> bool {
        (0..3).all(|a| ijk[a] >= 0.0 && ijk[a] <= (self.dims[a] - 1) as f64)
    }

    pub fn same_grid(&self, other: &Geometry) -> bool {
        const TOL: f64 = 1e-9;
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= TOL)
            && (self.origin - other.origin).amax() <= TOL
            && (self.direction - other.direction).amax() <= TOL
    }

    pub fn ensure_same_grid(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    /// World-space (min, max) corners of the sampled box.
    pub fn world_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for corner in 0..8 {
            let ijk = Vec3::new(
                if corner & 1 == 0 { 0.0 } else { (self.dims[0] - 1) as f64 },
                if corner & 2 == 0 { 0.0 } else { (self.dims[1] - 1) as f64 },
                if corner & 4 == 0 { 0.0 } else { (self.dims[2] - 1) as f64 },
            );
            let w = self.index_to_world(ijk);
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
        (lo, hi)
    }
}

/// Scalar image with physical geometry. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "expected {} samples, got {}",
                geometry.len(),
                data.len()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![value; n],
        }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn index_to_world(&self, ijk: Vec3) -> Vec3 {
        self.geometry.index_to_world(ijk)
    }

    pub fn world_to_index(&self, p: Vec3) -> Vec3 {
        self.geometry.world_to_index(p)
    }

    /// Trilinear interpolation at a continuous index inside `[0, dim-1]`.
    pub fn trilinear_sample(&self, ijk: Vec3) -> Result<f64> {
        if !ijk.iter().all(|v| v.is_finite()) || !self.geometry.contains_index(ijk) {
            return Err(Error::OutOfBounds(ijk.x, ijk.y, ijk.z));
        }
        let dims = self.geometry.dims;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let top = dims[a] - 1;
            let f = ijk[a].floor() as usize;
            // Points on the far face use the last cell with weight 1.
            let f = f.min(top.saturating_sub(1));
            base[a] = f;
            frac[a] = if top == 0 { 0.0 } else { ijk[a] - f as f64 };
        }
        let next = |a: usize| if dims[a] > 1 { base[a] + 1 } else { base[a] };
        let (i0, j0, k0) = (base[0], base[1], base[2]);
        let (i1, j1, k1) = (next(0), next(1), next(2));
        let [fx, fy, fz] = frac;
        let v = |i, j, k| self.at(i, j, k) as f64;
        let c00 = v(i0, j0, k0) * (1.0 - fx) + v(i1, j0, k0) * fx;
        let c10 = v(i0, j1, k0) * (1.0 - fx) + v(i1, j1, k0) * fx;
        let c01 = v(i0, j0, k1) * (1.0 - fx) + v(i1, j0, k1) * fx;
        let c11 = v(i0, j1, k1) * (1.0 - fx) + v(i1, j1, k1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        Ok(c0 * (1.0 - fz) + c1 * fz)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Values at the given percentiles (0–100), nearest-rank on a sorted copy.
    pub fn percentiles(&self, pcts: &[f64]) -> Vec<f32> {
        let mut sorted = self.data.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        pcts.iter()
            .map(|p| {
                let rank = ((p / 100.0) * (n - 1) as f64).round() as usize;
                sorted[rank.min(n - 1)]
            })
            .collect()
    }

    /// SHA-256 over the raw sample bits, hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in &self.data {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    pub fn threshold_below(&self, level: f32) -> LabelMask {
        LabelMask {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&v| v < level).collect(),
        }
    }
}

/// Binary segmentation on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    geometry: Geometry,
    data: Vec<bool>,
}

impl LabelMask {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "expected {} mask samples, got {}",
                geometry.len(),
                data.len()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![false; n],
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.geometry.voxel_volume()
    }

    pub fn is_empty_region(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_full_region(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn not(&self) -> LabelMask {
        LabelMask {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// Mask as a float volume (1 inside, 0 outside).
    pub fn to_volume(&self) -> Volume3D {
        Volume3D {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Voxels with value >= 0.5 become foreground.
    pub fn from_volume(vol: &Volume3D) -> LabelMask {
        LabelMask {
            geometry: vol.geometry.clone(),
            data: vol.data.iter().map(|&v| v >= 0.5).collect(),
        }
    }

    /// World-space centroid of the foreground voxels, if any.
    pub fn centroid(&self) -> Option<Vec3> {
        let mut sum = Vec3::zeros();
        let mut n = 0usize;
        for (idx, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let [i, j, k] = self.geometry.coords(idx);
            sum += self.geometry.voxel_to_world(i, j, k);
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }
}
