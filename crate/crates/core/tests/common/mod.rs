//! Criterion checks shared by the per-module test files and the acceptance
//! report. Each check returns `Ok(detail)` or `Err(detail)`.

#![allow(dead_code)]

pub mod flows;
pub mod interchange;
pub mod oracles;
pub mod pipeline;

use mvseg::volume::{Geometry, Vec3};

pub type Check = Result<String, String>;

pub fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Folds several sub-checks into one; all of them run.
pub fn all_of(parts: Vec<(&str, Check)>) -> Check {
    let ok = parts.iter().all(|(_, c)| c.is_ok());
    let detail = parts
        .iter()
        .map(|(name, c)| match c {
            Ok(d) => format!("{name}: ok ({d})"),
            Err(d) => format!("{name}: FAILED ({d})"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok, detail)
}

/// Exact signed distance to a sphere, sampled at voxel centres.
pub fn sphere_phi(g: &Geometry, center: Vec3, radius: f64) -> Vec<f32> {
    (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            ((g.voxel_to_world(i, j, k) - center).norm() - radius) as f32
        })
        .collect()
}

/// Radius of the ball with the given volume.
pub fn equivalent_radius(volume_mm3: f64) -> f64 {
    (3.0 * volume_mm3 / (4.0 * std::f64::consts::PI)).cbrt()
}
