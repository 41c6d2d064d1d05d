use std::time::{Duration, Instant};

use mvseg::filters::{speed_from_image, SpeedConfig, SpeedImage};
use mvseg::levelset::{advance, init_shell, reinitialize, ContourParams, LevelSetState};
use mvseg::phantom::{generate_phantom, PhantomSpec};
use mvseg::volume::{Geometry, Mat3, Vec3};

use super::{equivalent_radius, sphere_phi, verdict, Check};

pub const RUNTIME_LIMIT: Duration = Duration::from_secs(30);

pub fn params(curvature: f64, advection: f64, propagation: f64) -> ContourParams {
    ContourParams {
        curvature_scale: curvature,
        advection_scale: advection,
        propagation_scale: propagation,
        dt_safety: 0.4,
        reinit_interval: 20,
    }
}

/// Constant unit speed, sphere of 8 mm grown for 2 mm of front travel on a
/// 96³ grid. The growth rate of the volume-equivalent radius must match the
/// propagation scale within 10%.
pub fn expansion() -> Check {
    let start = Instant::now();
    let g = Geometry::isotropic([96, 96, 96], 0.5).unwrap();
    let c = Vec3::new(24.1, 23.8, 24.3);
    let r0 = 8.0;
    let speed = SpeedImage::constant(g.clone(), 1.0).unwrap();
    let p = params(0.0, 0.0, 1.0);
    let mut state = LevelSetState::from_phi(g.clone(), sphere_phi(&g, c, r0)).unwrap();
    let r_start = equivalent_radius(state.inside_volume_mm3());
    let mut t = 0.0;
    while t < 2.0 - 1e-9 {
        state = advance(&state, &speed, &p, 1).map_err(|e| e.to_string())?;
        t += state.time_step().expect("set by advance");
    }
    let r_end = equivalent_radius(state.inside_volume_mm3());
    let rate = (r_end - r_start) / t;
    let elapsed = start.elapsed();
    verdict(
        (rate - 1.0).abs() <= 0.1 && ((r_end - (r0 + t)) / (r0 + t)).abs() <= 0.1 && elapsed < RUNTIME_LIMIT,
        format!(
            "T = {t:.3}, R {r_start:.3} -> {r_end:.3} mm, dR/dt = {rate:.4} (expected 1), {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Curvature-only flow of a 10 mm sphere on a 96³ grid at 1 mm spacing,
/// followed until the radius is down to 0.6 of its start; R² must stay
/// within 10% of R₀² − 4t at every reinit interval.
pub fn curvature() -> Check {
    let start = Instant::now();
    let g = Geometry::isotropic([96, 96, 96], 1.0).unwrap();
    let c = Vec3::new(47.3, 47.6, 47.8);
    let r0 = 10.0;
    let speed = SpeedImage::constant(g.clone(), 1.0).unwrap();
    let p = params(1.0, 0.0, 0.0);
    let mut state = LevelSetState::from_phi(g.clone(), sphere_phi(&g, c, r0)).unwrap();
    let mut t = 0.0;
    let mut worst = 0.0f64;
    let mut checkpoints = 0;
    let t_end = (r0 * r0 - (0.6 * r0) * (0.6 * r0)) / 4.0;
    while t < t_end - 1e-9 {
        state = advance(&state, &speed, &p, p.reinit_interval).map_err(|e| e.to_string())?;
        t += state.time_step().expect("set by advance") * p.reinit_interval as f64;
        let expected = r0 * r0 - 4.0 * t;
        let r = equivalent_radius(state.inside_volume_mm3());
        worst = worst.max(((r * r - expected) / expected).abs());
        checkpoints += 1;
    }
    let r = equivalent_radius(state.inside_volume_mm3());
    let elapsed = start.elapsed();
    verdict(
        worst <= 0.1 && elapsed < RUNTIME_LIMIT,
        format!(
            "t = {t:.2}, final R = {r:.3} mm, worst relative R² error {:.2}% over {checkpoints} checkpoints, {:.1} s",
            100.0 * worst,
            elapsed.as_secs_f64()
        ),
    )
}

/// A smooth field with the zero set of a sphere but far from unit gradient.
pub fn distorted_sphere(g: &Geometry, center: Vec3, radius: f64) -> Vec<f32> {
    (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            let p = g.voxel_to_world(i, j, k);
            let d = (p - center).norm() - radius;
            (d * (2.0 + (0.3 * p.x).sin()) + 0.2 * d * d * d) as f32
        })
        .collect()
}

pub struct ReinitStats {
    pub band_voxels: usize,
    pub unit_gradient: usize,
    pub crossings: usize,
    pub lost_crossings: usize,
    pub max_displacement: f64,
}

/// Central-difference gradients over band voxels, and zero-crossing
/// movement along every grid edge.
pub fn reinit_stats(g: &Geometry, before: &[f32], after: &[f32], band: f64) -> ReinitStats {
    let [nx, ny, nz] = g.dims;
    let strides = [1, nx, nx * ny];
    let mut s = ReinitStats {
        band_voxels: 0,
        unit_gradient: 0,
        crossings: 0,
        lost_crossings: 0,
        max_displacement: 0.0,
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = g.index(i, j, k);
                let pos = [i, j, k];
                if (1..nx - 1).contains(&i)
                    && (1..ny - 1).contains(&j)
                    && (1..nz - 1).contains(&k)
                    && (after[idx] as f64).abs() < band
                {
                    let mut g2 = 0.0;
                    for a in 0..3 {
                        let d = (after[idx + strides[a]] - after[idx - strides[a]]) as f64 / (2.0 * g.spacing[a]);
                        g2 += d * d;
                    }
                    s.band_voxels += 1;
                    s.unit_gradient += (0.9..=1.1).contains(&g2.sqrt()) as usize;
                }
                for a in 0..3 {
                    if pos[a] + 1 >= g.dims[a] {
                        continue;
                    }
                    let (b0, b1) = (before[idx] as f64, before[idx + strides[a]] as f64);
                    if (b0 < 0.0) == (b1 < 0.0) {
                        continue;
                    }
                    s.crossings += 1;
                    let (a0, a1) = (after[idx] as f64, after[idx + strides[a]] as f64);
                    if (a0 < 0.0) == (a1 < 0.0) {
                        s.lost_crossings += 1;
                        continue;
                    }
                    let shift = (b0 / (b0 - b1) - a0 / (a0 - a1)).abs() * g.spacing[a];
                    s.max_displacement = s.max_displacement.max(shift);
                }
            }
        }
    }
    s
}

/// Reinitializes steep, distorted sphere fields on an isotropic and an
/// anisotropic grid.
pub fn reinit() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for spacing in [[0.5, 0.5, 0.5], [0.45, 0.5, 0.6]] {
        let g = Geometry::new([64, 64, 64], spacing, Vec3::zeros(), Mat3::identity()).unwrap();
        let c = g.index_to_world(Vec3::new(31.3, 32.1, 30.7));
        let before = distorted_sphere(&g, c, 9.0);
        let state = LevelSetState::from_phi(g.clone(), before.clone()).unwrap();
        let out = reinitialize(&state).map_err(|e| e.to_string())?;
        let s = reinit_stats(&g, &before, out.phi(), state.band_width());
        let frac = s.unit_gradient as f64 / s.band_voxels as f64;
        let h_min = g.h_min();
        ok &= frac >= 0.99 && s.lost_crossings == 0 && s.max_displacement < 0.25 * h_min;
        lines.push(format!(
            "spacing {spacing:?}: |grad| in [0.9, 1.1] on {:.2}% of {} band voxels, \
             max crossing shift {:.4} mm (limit {:.4}), {} of {} crossings lost",
            100.0 * frac,
            s.band_voxels,
            s.max_displacement,
            0.25 * h_min,
            s.lost_crossings,
            s.crossings
        ));
    }
    verdict(ok, lines.join("; "))
}

/// Inside-voxel counts after each iteration; stops early on collapse.
pub fn count_trace(state: &LevelSetState, speed: &SpeedImage, p: &ContourParams, iters: u32) -> (Vec<usize>, bool) {
    let mut counts = vec![state.inside_count()];
    let mut state = state.clone();
    for _ in 0..iters {
        match advance(&state, speed, p, 1) {
            Ok(next) => state = next,
            Err(mvseg::Error::ContourCollapsed) => {
                counts.push(0);
                return (counts, true);
            }
            Err(e) => panic!("advance failed: {e}"),
        }
        counts.push(state.inside_count());
    }
    (counts, false)
}

/// Propagation-only shrink from the leaflet seed shell on the default
/// phantom's edge speed; the inside count must never rise over 200 iterations.
pub fn shrink_monotone() -> Check {
    let case = generate_phantom(&PhantomSpec::default()).map_err(|e| e.to_string())?;
    let speed = speed_from_image(&case.volume, &SpeedConfig::default()).map_err(|e| e.to_string())?;
    let annulus = mvseg::annulus::fit_annulus(&case.annulus).map_err(|e| e.to_string())?;
    let seed = init_shell(&case.gt_bloodpool, 5.0, &annulus).map_err(|e| e.to_string())?;
    let (counts, collapsed) = count_trace(&seed, &speed, &params(0.0, 0.0, -0.4), 200);
    let rises = counts.windows(2).filter(|w| w[1] > w[0]).count();
    verdict(
        rises == 0,
        format!(
            "inside voxels {} -> {} over {} iterations{}, {rises} increases",
            counts[0],
            counts.last().unwrap(),
            counts.len() - 1,
            if collapsed { " (collapsed)" } else { "" }
        ),
    )
}
