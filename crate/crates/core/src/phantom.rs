//! Synthetic valve phantom with analytic ground truth.
//!
//! A dark spherical cavity sits in bright tissue. A spherical-cap shell of
//! tissue, attached to the cavity wall along its equator and sagging towards
//! -z, splits the cavity into an upper "atrium" and a lower "ventricle".
//! The probe looks down from +z.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annulus::AnnulusDefinition;
use crate::error::{Error, Result};
use crate::mesh::{isosurface, TriMesh};
use crate::volume::{Geometry, LabelMask, Vec3, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub atrium_radius: f64,
    pub leaflet_thickness: f64,
    /// Fraction of the equatorial opening area closed by the shell, (0, 1].
    pub leaflet_coverage: f64,
    /// Depth of the shell's lowest point below the equator, as a fraction of
    /// the atrium radius.
    pub leaflet_sag: f64,
    /// (blood, tissue).
    pub intensities: (f64, f64),
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96, 96, 96],
            spacing: [0.45, 0.45, 0.45],
            atrium_radius: 16.0,
            leaflet_thickness: 1.5,
            leaflet_coverage: 1.0,
            leaflet_sag: 0.5,
            intensities: (20.0, 180.0),
            noise_sigma: 8.0,
            rng_seed: 42,
        }
    }
}

/// Minimum clearance between the cavity and every volume face, mm.
pub const PHANTOM_MARGIN_MM: f64 = 5.0;

impl PhantomSpec {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, Vec3::zeros(), nalgebra::Matrix3::identity())
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry()?;
        if !(self.leaflet_thickness >= 2.0 * g.h_min()) {
            return Err(Error::invalid(format!(
                "leaflet_thickness {} mm must be at least twice the smallest spacing ({} mm)",
                self.leaflet_thickness,
                g.h_min()
            )));
        }
        if !(self.atrium_radius > 0.0) {
            return Err(Error::invalid("atrium_radius must be > 0"));
        }
        for a in 0..3 {
            let half = (self.dims[a] - 1) as f64 * self.spacing[a] / 2.0;
            if self.atrium_radius + PHANTOM_MARGIN_MM > half + 1e-9 {
                return Err(Error::invalid(format!(
                    "atrium radius {} mm plus {PHANTOM_MARGIN_MM} mm margin does not fit axis {a} (half extent {half:.3} mm)",
                    self.atrium_radius
                )));
            }
        }
        if !(self.leaflet_coverage > 0.0 && self.leaflet_coverage <= 1.0) {
            return Err(Error::invalid("leaflet_coverage must be in (0, 1]"));
        }
        if !(self.leaflet_sag > 0.0 && self.leaflet_sag < 1.0) {
            return Err(Error::invalid("leaflet_sag must be in (0, 1)"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<PhantomShape> {
        self.validate()?;
        let g = self.geometry()?;
        let center = g.index_to_world(Vec3::from_iterator(self.dims.iter().map(|&d| (d - 1) as f64 / 2.0)));
        let r = self.atrium_radius;
        let sag = self.leaflet_sag * r;
        let cap_offset = (r * r - sag * sag) / (2.0 * sag);
        Ok(PhantomShape {
            center,
            atrium_radius: r,
            cap_center: center + Vec3::new(0.0, 0.0, cap_offset),
            cap_radius: cap_offset + sag,
            half_thickness: 0.5 * self.leaflet_thickness,
            hole_radius: r * (1.0 - self.leaflet_coverage).sqrt(),
        })
    }
}

/// The implicit functions behind the phantom, in world mm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomShape {
    pub center: Vec3,
    pub atrium_radius: f64,
    pub cap_center: Vec3,
    pub cap_radius: f64,
    pub half_thickness: f64,
    pub hole_radius: f64,
}

impl PhantomShape {
    pub fn in_cavity(&self, p: Vec3) -> bool {
        (p - self.center).norm() < self.atrium_radius
    }

    fn radial(&self, p: Vec3) -> f64 {
        let d = p - self.center;
        (d.x * d.x + d.y * d.y).sqrt()
    }

    /// Leaflet tissue: within half a thickness of the cap sphere, below the
    /// equator, outside the central opening, inside the cavity.
    pub fn in_leaflet(&self, p: Vec3) -> bool {
        let to_cap = (p - self.cap_center).norm() - self.cap_radius;
        to_cap.abs() <= self.half_thickness
            && p.z <= self.center.z
            && self.radial(p) >= self.hole_radius
            && self.in_cavity(p)
    }

    /// Atrial blood: cavity above the shell.
    pub fn in_atrium(&self, p: Vec3) -> bool {
        self.in_cavity(p)
            && !self.in_leaflet(p)
            && (p.z > self.center.z || (p - self.cap_center).norm() < self.cap_radius)
    }

    pub fn annulus_points(&self, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|m| {
                let a = m as f64 * std::f64::consts::TAU / n as f64;
                self.center + Vec3::new(self.atrium_radius * a.cos(), self.atrium_radius * a.sin(), 0.0)
            })
            .collect()
    }

    /// Signed implicit function of the leaflet slab (negative inside), used
    /// to build a ground-truth surface without voxel staircasing.
    pub fn leaflet_field(&self, p: Vec3) -> f64 {
        let slab = ((p - self.cap_center).norm() - self.cap_radius).abs() - self.half_thickness;
        let below = p.z - self.center.z;
        let cavity = (p - self.center).norm() - self.atrium_radius;
        let hole = self.hole_radius - self.radial(p);
        slab.max(below).max(cavity).max(hole)
    }

    /// Atrial-side face of the shell: the cap sphere shrunk by half a
    /// thickness, limited to the leaflet's extent, tessellated in polar
    /// coordinates around the cap axis.
    pub fn proximal_surface(&self, rings: usize, sectors: usize) -> Result<TriMesh> {
        let rs = self.cap_radius - self.half_thickness;
        // Polar angle from the cap axis (pointing -z) of a point on the inner
        // sphere at radial distance rho from the axis.
        let max_rho = self.atrium_radius_at_inner(rs);
        let theta_max = (max_rho / rs).clamp(-1.0, 1.0).asin();
        let theta_min = (self.hole_radius / rs).clamp(0.0, 1.0).asin();
        let point = |theta: f64, phi: f64| {
            self.cap_center + Vec3::new(rs * theta.sin() * phi.cos(), rs * theta.sin() * phi.sin(), -rs * theta.cos())
        };
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let closed_top = theta_min <= 0.0;
        if closed_top {
            vertices.push(point(0.0, 0.0));
        }
        let first_ring = if closed_top { 1 } else { 0 };
        for r in first_ring..=rings {
            let theta = theta_min + (theta_max - theta_min) * r as f64 / rings as f64;
            for s in 0..sectors {
                vertices.push(point(theta, s as f64 * std::f64::consts::TAU / sectors as f64));
            }
        }
        let ring_start = |r: usize| -> u32 { (if closed_top { 1 + (r - 1) * sectors } else { r * sectors }) as u32 };
        if closed_top {
            for s in 0..sectors {
                let a = ring_start(1) + s as u32;
                let b = ring_start(1) + ((s + 1) % sectors) as u32;
                triangles.push([0, b, a]);
            }
        }
        for r in first_ring.max(1)..rings {
            for s in 0..sectors {
                let s1 = (s + 1) % sectors;
                let (a, b) = (ring_start(r) + s as u32, ring_start(r) + s1 as u32);
                let (c, d) = (ring_start(r + 1) + s as u32, ring_start(r + 1) + s1 as u32);
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        if !closed_top {
            for s in 0..sectors {
                let s1 = (s + 1) % sectors;
                let (a, b) = (ring_start(0) + s as u32, ring_start(0) + s1 as u32);
                let (c, d) = (ring_start(1) + s as u32, ring_start(1) + s1 as u32);
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        TriMesh::new(vertices, triangles)
    }

    /// Radial distance from the axis where the inner cap sphere leaves the
    /// leaflet: at the cavity wall or at the equatorial plane, whichever
    /// comes first.
    fn atrium_radius_at_inner(&self, rs: f64) -> f64 {
        let d = self.cap_center.z - self.center.z;
        // Height (relative to the centre) where the inner sphere meets the cavity wall.
        let z = (self.atrium_radius.powi(2) - rs * rs + d * d) / (2.0 * d);
        if z >= 0.0 {
            (rs * rs - d * d).max(0.0).sqrt()
        } else {
            (self.atrium_radius.powi(2) - z * z).max(0.0).sqrt()
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub spec: PhantomSpec,
    pub shape: PhantomShape,
    pub volume: Volume3D,
    pub gt_bloodpool: LabelMask,
    pub gt_leaflet: LabelMask,
    pub annulus: AnnulusDefinition,
    pub probe_dir: Vec3,
}

impl PhantomCase {
    /// Closed ground-truth leaflet surface from the analytic implicit function.
    pub fn gt_leaflet_mesh(&self) -> Result<TriMesh> {
        let g = self.volume.geometry();
        let field: Vec<f32> = (0..g.len())
            .map(|idx| {
                let [i, j, k] = g.coords(idx);
                self.shape.leaflet_field(g.voxel_to_world(i, j, k)) as f32
            })
            .collect();
        isosurface(g, &field, 0.0, g.h_min())
    }

    /// Open ground-truth proximal surface.
    pub fn gt_proximal_mesh(&self) -> Result<TriMesh> {
        self.shape.proximal_surface(96, 256)
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    let shape = spec.shape()?;
    let g = spec.geometry()?;
    let (blood, tissue) = spec.intensities;
    let mut atrium = Vec::with_capacity(g.len());
    let mut leaflet = Vec::with_capacity(g.len());
    let mut data = Vec::with_capacity(g.len());
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    for idx in 0..g.len() {
        let [i, j, k] = g.coords(idx);
        let p = g.voxel_to_world(i, j, k);
        let in_leaf = shape.in_leaflet(p);
        let is_blood = shape.in_cavity(p) && !in_leaf;
        atrium.push(shape.in_atrium(p));
        leaflet.push(in_leaf);
        let base = if is_blood { blood } else { tissue };
        let v = if spec.noise_sigma > 0.0 {
            base + noise.sample(&mut rng)
        } else {
            base
        };
        data.push(v as f32);
    }
    let probe_dir = Vec3::z();
    Ok(PhantomCase {
        spec: spec.clone(),
        shape,
        volume: Volume3D::new(g.clone(), data)?,
        gt_bloodpool: LabelMask::new(g.clone(), atrium)?,
        gt_leaflet: LabelMask::new(g, leaflet)?,
        annulus: AnnulusDefinition::new(shape.annulus_points(12), Some(probe_dir)),
        probe_dir,
    })
}
