//! Proximal (atrial-side) leaflet surface extraction.
//!
//! Leaflet vertices above the annulus plane are kept when they can be seen
//! from the annulus centroid without crossing the leaflet mesh. Vertices below
//! the plane are kept when their normal opposes the blood pool normal at the
//! nearest blood pool point by more than a threshold angle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annulus::AnnulusModel;
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::spatial::{TriangleGrid, TriangleTree};
use crate::volume::{Geometry, Vec3};

/// How triangles with a mix of kept and rejected vertices are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StraddlePolicy {
    #[default]
    AllKept,
    AnyKept,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximalOptions {
    /// Shortening of the visibility segment at the vertex end, mm.
    pub epsilon_mm: f64,
    /// Below-plane vertices need a normal angle strictly above this, degrees.
    pub min_normal_angle_deg: f64,
    pub straddle: StraddlePolicy,
}

impl ProximalOptions {
    pub fn for_geometry(geometry: &Geometry) -> Self {
        Self {
            epsilon_mm: 0.25 * geometry.h_min(),
            min_normal_angle_deg: 100.0,
            straddle: StraddlePolicy::AllKept,
        }
    }
}

/// Per-vertex keep decisions for `leaflet`.
pub fn classify_proximal(
    leaflet: &TriMesh,
    bloodpool: &TriMesh,
    annulus: &AnnulusModel,
    options: &ProximalOptions,
) -> Result<Vec<bool>> {
    if leaflet.is_empty() {
        return Err(Error::EmptySurface("leaflet mesh is empty".into()));
    }
    if bloodpool.is_empty() {
        return Err(Error::EmptySurface("blood pool mesh is empty".into()));
    }
    let leaf_index = TriangleGrid::new(leaflet);
    let bp_index = TriangleTree::new(bloodpool);
    let cos_limit = options.min_normal_angle_deg.to_radians().cos();
    let origin = annulus.centroid;
    Ok(leaflet
        .vertices
        .par_iter()
        .zip(leaflet.normals.par_iter())
        .map(|(&v, &n)| {
            if annulus.signed_height(v) >= 0.0 {
                let d = v - origin;
                let len = d.norm();
                if len <= options.epsilon_mm {
                    return true;
                }
                let end = origin + d * ((len - options.epsilon_mm) / len);
                !leaf_index.segment_hits(origin, end)
            } else {
                let Some(cp) = bp_index.closest(v) else {
                    return false;
                };
                let bn = interpolated_normal(bloodpool, cp.triangle, cp.point);
                n.dot(&bn) < cos_limit
            }
        })
        .collect())
}

/// The proximal surface as a submesh of `leaflet`.
///
/// Fails with [`Error::EmptySurface`] when every vertex is rejected.
pub fn extract_proximal(
    leaflet: &TriMesh,
    bloodpool: &TriMesh,
    annulus: &AnnulusModel,
    options: &ProximalOptions,
) -> Result<TriMesh> {
    let keep = classify_proximal(leaflet, bloodpool, annulus, options)?;
    let out = leaflet.submesh_with(&keep, options.straddle == StraddlePolicy::AllKept);
    if out.is_empty() {
        return Err(Error::EmptySurface("proximal surface is empty: every leaflet vertex was rejected".into()));
    }
    Ok(out)
}

/// Vertex normals blended with the barycentric weights of `p` in triangle `t`.
pub fn interpolated_normal(mesh: &TriMesh, t: usize, p: Vec3) -> Vec3 {
    let [a, b, c] = mesh.triangle(t);
    let idx = mesh.triangles[t];
    let v0 = b - a;
    let v1 = c - a;
    let v2 = p - a;
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let denom = d00 * d11 - d01 * d01;
    let (u, v, w) = if denom.abs() < f64::MIN_POSITIVE {
        (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    } else {
        let v = (d11 * d20 - d01 * d21) / denom;
        let w = (d00 * d21 - d01 * d20) / denom;
        (1.0 - v - w, v, w)
    };
    let n = mesh.normals[idx[0] as usize] * u + mesh.normals[idx[1] as usize] * v + mesh.normals[idx[2] as usize] * w;
    let len = n.norm();
    if len > 0.0 {
        n / len
    } else {
        mesh.face_normal(t)
    }
}
