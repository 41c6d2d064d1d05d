//! Narrow-band level-set evolution for the geodesic active contour flow.
//!
//! `phi` is a signed distance in millimetres, negative inside. One
//! iteration applies the explicit update
//!
//! ```text
//! dphi/dt = -a_p s |grad phi|_godunov + a_c s kappa |grad phi|_central + a_a (grad s . grad phi)_upwind
//! ```
//!
//! with a Jacobi sweep over the band (every new value is computed from the
//! previous iteration's field only), so results do not depend on the number
//! of worker threads.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annulus::AnnulusModel;
use crate::distance::{reinitialize_field_within, signed_distance_from_mask, squared_edt};
use crate::error::{Error, Result};
use crate::filters::SpeedImage;
use crate::volume::{Geometry, LabelMask, Vec3, Volume3D};

/// Which of the two contour regimes to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "BLOODPOOL")]
    BloodPool,
    #[serde(rename = "LEAFLET")]
    Leaflet,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::BloodPool => "BLOODPOOL",
            Stage::Leaflet => "LEAFLET",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BLOODPOOL" | "BP" | "BLOOD_POOL" => Ok(Stage::BloodPool),
            "LEAFLET" => Ok(Stage::Leaflet),
            other => Err(Error::invalid(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContourParams {
    pub curvature_scale: f64,
    pub advection_scale: f64,
    /// Positive grows the inside region, negative shrinks it.
    pub propagation_scale: f64,
    /// CFL safety factor in (0, 1).
    pub dt_safety: f64,
    pub reinit_interval: u32,
}

impl ContourParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_safety > 0.0 && self.dt_safety < 1.0) {
            return Err(Error::invalid(format!("dt_safety must be in (0, 1), got {}", self.dt_safety)));
        }
        if self.reinit_interval < 1 {
            return Err(Error::invalid("reinit_interval must be >= 1"));
        }
        for (name, v) in [
            ("curvature_scale", self.curvature_scale),
            ("advection_scale", self.advection_scale),
            ("propagation_scale", self.propagation_scale),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn is_zero_flow(&self) -> bool {
        self.curvature_scale == 0.0 && self.advection_scale == 0.0 && self.propagation_scale == 0.0
    }

    /// Half-width of the update band: three times the furthest the front can
    /// travel between reinitializations.
    pub fn band_width(&self, geometry: &Geometry) -> f64 {
        let per_reinit = self.reinit_interval as f64 * self.dt_safety * geometry.h_min();
        (3.0 * per_reinit).max(4.0 * geometry.h_max())
    }

    fn key(&self) -> [u64; 5] {
        [
            self.curvature_scale.to_bits(),
            self.advection_scale.to_bits(),
            self.propagation_scale.to_bits(),
            self.dt_safety.to_bits(),
            self.reinit_interval as u64,
        ]
    }
}

/// Partial parameter set; unset fields keep the base value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsOverride {
    pub curvature_scale: Option<f64>,
    pub advection_scale: Option<f64>,
    pub propagation_scale: Option<f64>,
    pub dt_safety: Option<f64>,
    pub reinit_interval: Option<u32>,
}

impl ParamsOverride {
    pub fn apply(&self, base: &ContourParams) -> ContourParams {
        ContourParams {
            curvature_scale: self.curvature_scale.unwrap_or(base.curvature_scale),
            advection_scale: self.advection_scale.unwrap_or(base.advection_scale),
            propagation_scale: self.propagation_scale.unwrap_or(base.propagation_scale),
            dt_safety: self.dt_safety.unwrap_or(base.dt_safety),
            reinit_interval: self.reinit_interval.unwrap_or(base.reinit_interval),
        }
    }
}

pub const DEFAULT_DT_SAFETY: f64 = 0.4;
pub const DEFAULT_REINIT_INTERVAL: u32 = 20;

pub fn default_params(stage: Stage) -> ContourParams {
    let (curvature_scale, advection_scale, propagation_scale) = match stage {
        Stage::BloodPool => (1.2, 1.0, 0.9),
        Stage::Leaflet => (0.9, 0.1, -0.4),
    };
    ContourParams {
        curvature_scale,
        advection_scale,
        propagation_scale,
        dt_safety: DEFAULT_DT_SAFETY,
        reinit_interval: DEFAULT_REINIT_INTERVAL,
    }
}

/// Like [`default_params`] but parses the stage tag.
pub fn default_params_for(tag: &str) -> Result<ContourParams> {
    Ok(default_params(tag.parse()?))
}

/// Cached per-interval quantities: rebuilt whenever the global iteration
/// count is a multiple of the reinit interval.
#[derive(Clone, Debug)]
struct IntervalCache {
    params_key: [u64; 5],
    dt: f64,
    band: Arc<[u32]>,
    /// Inside voxels outside the band; they never change within an interval.
    frozen_inside: usize,
}

/// An immutable snapshot of the evolving surface.
#[derive(Clone, Debug)]
pub struct LevelSetState {
    geometry: Geometry,
    phi: Arc<[f32]>,
    band_width: f64,
    iterations_done: u64,
    cache: Option<IntervalCache>,
    /// True when phi changed since the last reinitialization.
    dirty: bool,
}

impl PartialEq for LevelSetState {
    fn eq(&self, other: &Self) -> bool {
        self.geometry == other.geometry
            && self.iterations_done == other.iterations_done
            && self.phi.len() == other.phi.len()
            && self.phi.iter().zip(other.phi.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl LevelSetState {
    pub fn from_phi(geometry: Geometry, phi: Vec<f32>) -> Result<Self> {
        if phi.len() != geometry.len() {
            return Err(Error::Geometry("phi length does not match geometry".into()));
        }
        let band_width = default_params(Stage::BloodPool).band_width(&geometry);
        Ok(Self {
            geometry,
            phi: phi.into(),
            band_width,
            iterations_done: 0,
            cache: None,
            dirty: false,
        })
    }

    pub fn with_iterations(mut self, iterations_done: u64) -> Self {
        self.iterations_done = iterations_done;
        self
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn phi(&self) -> &[f32] {
        &self.phi
    }

    pub fn band_width(&self) -> f64 {
        self.band_width
    }

    pub fn iterations_done(&self) -> u64 {
        self.iterations_done
    }

    /// The time step in use for the current reinit interval, if computed.
    pub fn time_step(&self) -> Option<f64> {
        self.cache.as_ref().map(|c| c.dt)
    }

    pub fn inside_count(&self) -> usize {
        self.phi.iter().filter(|&&v| v < 0.0).count()
    }

    pub fn inside_volume_mm3(&self) -> f64 {
        self.inside_count() as f64 * self.geometry.voxel_volume()
    }

    pub fn to_mask(&self) -> LabelMask {
        to_mask(self)
    }

    /// phi as a float volume, e.g. for NRRD debugging dumps.
    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(self.geometry.clone(), self.phi.to_vec()).expect("matching length")
    }

    /// SHA-256 over the raw phi bits, hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in self.phi.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Everything needed to rebuild a [`LevelSetState`] bit-exactly, including
/// the cached interval quantities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct StateMeta {
    pub band_width: f64,
    pub iterations_done: u64,
    pub dirty: bool,
    pub cache: Option<CacheMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct CacheMeta {
    pub params_key: [u64; 5],
    pub dt_bits: u64,
    pub band: Vec<u32>,
    pub frozen_inside: usize,
}

impl LevelSetState {
    pub(crate) fn meta(&self) -> StateMeta {
        StateMeta {
            band_width: self.band_width,
            iterations_done: self.iterations_done,
            dirty: self.dirty,
            cache: self.cache.as_ref().map(|c| CacheMeta {
                params_key: c.params_key,
                dt_bits: c.dt.to_bits(),
                band: c.band.to_vec(),
                frozen_inside: c.frozen_inside,
            }),
        }
    }

    pub(crate) fn from_meta(geometry: Geometry, phi: Vec<f32>, meta: StateMeta) -> Result<Self> {
        if phi.len() != geometry.len() {
            return Err(Error::Geometry("phi length does not match geometry".into()));
        }
        if let Some(c) = &meta.cache {
            if c.band.iter().any(|&i| i as usize >= phi.len()) {
                return Err(Error::invalid("cached band index out of range"));
            }
        }
        Ok(Self {
            geometry,
            phi: phi.into(),
            band_width: meta.band_width,
            iterations_done: meta.iterations_done,
            cache: meta.cache.map(|c| IntervalCache {
                params_key: c.params_key,
                dt: f64::from_bits(c.dt_bits),
                band: c.band.into(),
                frozen_inside: c.frozen_inside,
            }),
            dirty: meta.dirty,
        })
    }
}

pub fn to_mask(state: &LevelSetState) -> LabelMask {
    LabelMask::new(state.geometry.clone(), state.phi.iter().map(|&v| v < 0.0).collect())
        .expect("matching length")
}

/// Exact signed distance to a sphere.
pub fn init_ball(geometry: &Geometry, center: Vec3, radius: f64) -> Result<LevelSetState> {
    if !geometry.contains_index(geometry.world_to_index(center)) {
        return Err(Error::invalid(format!(
            "seed centre ({:.2}, {:.2}, {:.2}) is outside the volume",
            center.x, center.y, center.z
        )));
    }
    if !(radius > geometry.h_max()) {
        return Err(Error::invalid(format!(
            "seed radius {radius} mm must exceed the largest spacing {} mm",
            geometry.h_max()
        )));
    }
    let [nx, ny, _] = geometry.dims;
    let mut phi = vec![0.0f32; geometry.len()];
    phi.par_chunks_mut(nx * ny).enumerate().for_each(|(k, plane)| {
        for j in 0..ny {
            for i in 0..nx {
                let p = geometry.voxel_to_world(i, j, k);
                plane[i + nx * j] = ((p - center).norm() - radius) as f32;
            }
        }
    });
    LevelSetState::from_phi(geometry.clone(), phi)
}

/// Which side of the blood pool boundary the initial leaflet shell occupies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShellSide {
    #[default]
    Outward,
    Inward,
    Both,
}

/// Voxels within `distance` mm of the blood pool (outward by default).
pub fn shell_region(bp: &LabelMask, distance: f64, side: ShellSide) -> Result<Vec<bool>> {
    if bp.is_empty_region() {
        return Err(Error::Region("blood pool mask is empty".into()));
    }
    if bp.is_full_region() {
        return Err(Error::Region("blood pool mask fills the volume; there is no exterior".into()));
    }
    if !(distance > 0.0) {
        return Err(Error::Region("empty shell: distance must be > 0".into()));
    }
    let g = bp.geometry();
    let d2 = distance * distance;
    let outward = || -> Vec<bool> {
        let to_bp = squared_edt(g, bp.data());
        bp.data().iter().zip(to_bp).map(|(&inside, d)| !inside && d <= d2).collect()
    };
    let inward = || -> Vec<bool> {
        let outside = bp.not();
        let to_out = squared_edt(g, outside.data());
        bp.data().iter().zip(to_out).map(|(&inside, d)| inside && d <= d2).collect()
    };
    let region = match side {
        ShellSide::Outward => outward(),
        ShellSide::Inward => inward(),
        ShellSide::Both => outward().into_iter().zip(inward()).map(|(a, b)| a || b).collect(),
    };
    if !region.iter().any(|&b| b) {
        return Err(Error::Region("empty shell".into()));
    }
    Ok(region)
}

/// Initial leaflet estimate: the shell of voxels within `distance` of the
/// blood pool, as a signed distance field.
///
/// The annulus is accepted for interface parity with the seeding step; the
/// shell itself is defined purely by distance to the blood pool.
pub fn init_shell(bp: &LabelMask, distance: f64, _annulus: &AnnulusModel) -> Result<LevelSetState> {
    init_shell_with(bp, distance, ShellSide::Outward)
}

pub fn init_shell_with(bp: &LabelMask, distance: f64, side: ShellSide) -> Result<LevelSetState> {
    let region = shell_region(bp, distance, side)?;
    let phi = signed_distance_from_mask(bp.geometry(), &region)?;
    LevelSetState::from_phi(bp.geometry().clone(), phi)
}

/// Distances are exact up to a little beyond the update band and clamped there.
fn reinit_cap(geometry: &Geometry, band_width: f64) -> f64 {
    band_width + 3.0 * geometry.h_max()
}

pub fn reinitialize(state: &LevelSetState) -> Result<LevelSetState> {
    let cap = reinit_cap(&state.geometry, state.band_width);
    let phi = reinitialize_field_within(&state.geometry, &state.phi, cap)?;
    Ok(LevelSetState {
        geometry: state.geometry.clone(),
        phi: phi.into(),
        band_width: state.band_width,
        iterations_done: state.iterations_done,
        cache: None,
        dirty: false,
    })
}

/// Cylinder around the annulus axis outside of which the contour is held
/// outside (phi kept >= half a voxel).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiClamp {
    pub center: Vec3,
    pub axis: Vec3,
    pub radius: f64,
    pub half_height: f64,
}

impl RoiClamp {
    /// Cylinder of `radius_scale` times the annulus radius, extending
    /// `half_height` mm on both sides of the annulus plane.
    pub fn around_annulus(annulus: &AnnulusModel, radius_scale: f64, half_height: f64) -> Self {
        Self {
            center: annulus.centroid,
            axis: annulus.plane_normal,
            radius: annulus.mean_radius() * radius_scale,
            half_height,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let d = p - self.center;
        let along = d.dot(&self.axis);
        let radial = (d - self.axis * along).norm();
        along.abs() <= self.half_height && radial <= self.radius
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdvanceOptions {
    pub roi: Option<RoiClamp>,
}

#[inline]
fn clamp_off(pos: usize, n: usize, dir: i64) -> i64 {
    let q = pos as i64 + dir;
    if q < 0 || q >= n as i64 {
        0
    } else {
        dir
    }
}

struct Stencil<'a> {
    phi: &'a [f32],
    nx: usize,
    nxy: usize,
    dims: [usize; 3],
    h: [f64; 3],
}

impl Stencil<'_> {
    #[inline]
    fn at(&self, idx: usize, off: [i64; 3], pos: [usize; 3]) -> f64 {
        let di = clamp_off(pos[0], self.dims[0], off[0]);
        let dj = clamp_off(pos[1], self.dims[1], off[1]);
        let dk = clamp_off(pos[2], self.dims[2], off[2]);
        let n = idx as i64 + di + dj * self.nx as i64 + dk * self.nxy as i64;
        self.phi[n as usize] as f64
    }
}

/// Update rate `dphi/dt` at one voxel.
#[inline]
fn rate(
    st: &Stencil<'_>,
    idx: usize,
    pos: [usize; 3],
    s: f64,
    grad_s: [f32; 3],
    params: &ContourParams,
) -> f64 {
    let c = st.phi[idx] as f64;
    let h = st.h;
    let mut dm = [0.0; 3];
    let mut dp = [0.0; 3];
    let mut central = [0.0; 3];
    let mut second = [0.0; 3];
    let mut unit = [[0i64; 3]; 3];
    for a in 0..3 {
        unit[a][a] = 1;
        let mut neg = [0i64; 3];
        neg[a] = -1;
        let fwd = st.at(idx, unit[a], pos);
        let back = st.at(idx, neg, pos);
        dm[a] = (c - back) / h[a];
        dp[a] = (fwd - c) / h[a];
        central[a] = (fwd - back) / (2.0 * h[a]);
        second[a] = (fwd - 2.0 * c + back) / (h[a] * h[a]);
    }

    let mut total = 0.0;

    let speed = params.propagation_scale * s;
    if speed != 0.0 {
        let mut g2 = 0.0;
        for a in 0..3 {
            if speed > 0.0 {
                g2 += dm[a].max(0.0).powi(2) + dp[a].min(0.0).powi(2);
            } else {
                g2 += dm[a].min(0.0).powi(2) + dp[a].max(0.0).powi(2);
            }
        }
        total -= speed * g2.sqrt();
    }

    if params.advection_scale != 0.0 {
        // Front velocity is -a_a * grad s.
        for a in 0..3 {
            let v = -params.advection_scale * grad_s[a] as f64;
            let d = if v > 0.0 { dm[a] } else { dp[a] };
            total -= v * d;
        }
    }

    if params.curvature_scale != 0.0 {
        let cross = |a: usize, b: usize| -> f64 {
            let mut pp = [0i64; 3];
            let mut pm = [0i64; 3];
            let mut mp = [0i64; 3];
            let mut mm = [0i64; 3];
            pp[a] = 1;
            pp[b] = 1;
            pm[a] = 1;
            pm[b] = -1;
            mp[a] = -1;
            mp[b] = 1;
            mm[a] = -1;
            mm[b] = -1;
            (st.at(idx, pp, pos) - st.at(idx, pm, pos) - st.at(idx, mp, pos) + st.at(idx, mm, pos))
                / (4.0 * h[a] * h[b])
        };
        let [px, py, pz] = central;
        let g2 = px * px + py * py + pz * pz;
        if g2 > 1e-12 {
            let num = second[0] * (py * py + pz * pz) + second[1] * (px * px + pz * pz) + second[2] * (px * px + py * py)
                - 2.0 * (px * py * cross(0, 1) + px * pz * cross(0, 2) + py * pz * cross(1, 2));
            total += params.curvature_scale * s * num / g2;
        }
    }
    total
}

fn build_cache(state: &LevelSetState, speed: &SpeedImage, params: &ContourParams, band_width: f64) -> IntervalCache {
    let bw = band_width as f32;
    let phi = &state.phi;
    let band: Vec<u32> = (0..phi.len() as u32).filter(|&i| phi[i as usize].abs() < bw).collect();
    let frozen_inside = phi.iter().filter(|&&v| v < 0.0 && v.abs() >= bw).count();
    let h_min = state.geometry.h_min();
    let s = speed.data();
    let gs = speed.gradient();
    let max_rate = band
        .par_iter()
        .map(|&i| {
            let i = i as usize;
            let si = s[i] as f64;
            let g = gs[i];
            let gn = ((g[0] as f64).powi(2) + (g[1] as f64).powi(2) + (g[2] as f64).powi(2)).sqrt();
            (params.propagation_scale * si).abs()
                + (params.advection_scale * gn).abs()
                + 6.0 * params.curvature_scale.abs() * si / h_min
        })
        .reduce(|| 0.0, f64::max);
    let dt = if max_rate > 0.0 {
        params.dt_safety * h_min / max_rate
    } else {
        0.0
    };
    IntervalCache {
        params_key: params.key(),
        dt,
        band: band.into(),
        frozen_inside,
    }
}

pub fn advance(state: &LevelSetState, speed: &SpeedImage, params: &ContourParams, n_iters: u32) -> Result<LevelSetState> {
    advance_with(state, speed, params, n_iters, &AdvanceOptions::default())
}

/// Runs `n_iters` iterations and returns the new state; `state` is untouched.
///
/// Fails with [`Error::ContourCollapsed`] when the inside region vanishes.
pub fn advance_with(
    state: &LevelSetState,
    speed: &SpeedImage,
    params: &ContourParams,
    n_iters: u32,
    options: &AdvanceOptions,
) -> Result<LevelSetState> {
    params.validate()?;
    if n_iters < 1 {
        return Err(Error::invalid("iteration count must be >= 1"));
    }
    state.geometry.ensure_same_grid(speed.geometry(), "speed image vs level set")?;

    let geometry = &state.geometry;
    let band_width = params.band_width(geometry);
    let [nx, ny, _] = geometry.dims;
    let dims = geometry.dims;
    let interval = params.reinit_interval as u64;
    let roi_outside: Option<Vec<bool>> = options.roi.map(|roi| {
        (0..geometry.len())
            .into_par_iter()
            .map(|idx| {
                let [i, j, k] = geometry.coords(idx);
                !roi.contains(geometry.voxel_to_world(i, j, k))
            })
            .collect()
    });
    let roi_floor = 0.5 * geometry.h_min() as f32;

    let mut phi: Vec<f32> = state.phi.to_vec();
    let mut iterations = state.iterations_done;
    let mut dirty = state.dirty;
    let mut cache = state.cache.clone().filter(|c| c.params_key == params.key());
    let s = speed.data();
    let gs = speed.gradient();

    for _ in 0..n_iters {
        if iterations.is_multiple_of(interval) || cache.is_none() {
            let snapshot = LevelSetState {
                geometry: geometry.clone(),
                phi: phi.clone().into(),
                band_width,
                iterations_done: iterations,
                cache: None,
                dirty,
            };
            cache = Some(build_cache(&snapshot, speed, params, band_width));
        }
        let c = cache.as_ref().expect("cache built above");
        if c.dt > 0.0 {
            let st = Stencil {
                phi: &phi,
                nx,
                nxy: nx * ny,
                dims,
                h: geometry.spacing,
            };
            let dt = c.dt;
            let updates: Vec<f32> = c
                .band
                .par_iter()
                .map(|&i| {
                    let idx = i as usize;
                    let pos = geometry.coords(idx);
                    let r = rate(&st, idx, pos, s[idx] as f64, gs[idx], params);
                    let mut v = (phi[idx] as f64 + dt * r) as f32;
                    if let Some(outside) = &roi_outside {
                        if outside[idx] {
                            v = v.max(roi_floor);
                        }
                    }
                    v
                })
                .collect();
            let mut changed = false;
            for (&i, v) in c.band.iter().zip(updates) {
                let slot = &mut phi[i as usize];
                if slot.to_bits() != v.to_bits() {
                    changed = true;
                    *slot = v;
                }
            }
            dirty |= changed;
            let band_inside = c.band.iter().any(|&i| phi[i as usize] < 0.0);
            if !band_inside && c.frozen_inside == 0 {
                return Err(Error::ContourCollapsed);
            }
        }
        iterations += 1;
        if iterations.is_multiple_of(interval) && dirty {
            phi = reinitialize_field_within(geometry, &phi, reinit_cap(geometry, band_width))
                .map_err(|_| Error::ContourCollapsed)?;
            dirty = false;
        }
    }

    Ok(LevelSetState {
        geometry: geometry.clone(),
        phi: phi.into(),
        band_width,
        iterations_done: iterations,
        cache,
        dirty,
    })
}
