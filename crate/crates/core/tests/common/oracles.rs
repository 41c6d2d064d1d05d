//! Slow, obviously-correct reference implementations.

use mvseg::annulus::{fit_annulus, AnnulusDefinition, AnnulusModel};
use mvseg::filters::gaussian_smooth;
use mvseg::levelset::init_shell;
use mvseg::mesh::{marching_cubes, TriMesh};
use mvseg::metrics::masd;
use mvseg::surface::{classify_proximal, ProximalOptions, StraddlePolicy};
use mvseg::volume::{Geometry, LabelMask, Vec3, Volume3D};

use super::{all_of, verdict, Check};

fn kernel(sigma_vox: f64) -> Vec<f64> {
    let r = (4.0 * sigma_vox).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma_vox * sigma_vox)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable smoothing against a full 3D convolution with clamped borders
/// on a 9³ volume with anisotropic spacing.
pub fn gaussian() -> Check {
    let g = Geometry::isotropic([9, 9, 9], 0.5).unwrap();
    let g = Geometry::new(g.dims, [0.5, 0.7, 0.4], g.origin, g.direction).unwrap();
    let vol = Volume3D::from_fn(g.clone(), |i, j, k| {
        ((i * 31 + j * 17 + k * 7) % 23) as f32 * 3.5 + if (i + j + k) % 4 == 0 { 40.0 } else { 0.0 }
    });
    let sigma = 0.6;
    let fast = gaussian_smooth(&vol, sigma).map_err(|e| e.to_string())?;
    let ks: Vec<Vec<f64>> = (0..3).map(|a| kernel(sigma / g.spacing[a])).collect();
    let n = g.dims[0] as i64;
    let clamp = |v: i64| v.clamp(0, n - 1) as usize;
    let mut worst = 0.0f64;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let mut acc = 0.0;
                let rc = (ks[2].len() / 2) as i64;
                let rb = (ks[1].len() / 2) as i64;
                let ra = (ks[0].len() / 2) as i64;
                for (c, wc) in ks[2].iter().enumerate() {
                    for (b, wb) in ks[1].iter().enumerate() {
                        for (a, wa) in ks[0].iter().enumerate() {
                            let v = vol.at(
                                clamp(i + a as i64 - ra),
                                clamp(j + b as i64 - rb),
                                clamp(k + c as i64 - rc),
                            );
                            acc += wa * wb * wc * v as f64;
                        }
                    }
                }
                let got = fast.at(i as usize, j as usize, k as usize) as f64;
                worst = worst.max((got - acc).abs());
            }
        }
    }
    verdict(worst < 1e-5, format!("max difference {worst:.2e} on 9³"))
}

/// Brute-force shell: exterior voxels whose distance to some blood pool
/// voxel is within `d`. Only boundary voxels can be nearest, so the inner
/// loop runs over those.
pub fn pairwise_shell(bp: &LabelMask, d: f64) -> Vec<bool> {
    let g = bp.geometry();
    let [nx, ny, nz] = g.dims;
    let inside = |i: i64, j: i64, k: i64| {
        i >= 0 && j >= 0 && k >= 0 && (i as usize) < nx && (j as usize) < ny && (k as usize) < nz
            && bp.at(i as usize, j as usize, k as usize)
    };
    let mut boundary = Vec::new();
    for k in 0..nz as i64 {
        for j in 0..ny as i64 {
            for i in 0..nx as i64 {
                if inside(i, j, k)
                    && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|(a, b, c)| !inside(i + a, j + b, k + c))
                {
                    boundary.push(g.voxel_to_world(i as usize, j as usize, k as usize));
                }
            }
        }
    }
    let d2 = d * d;
    (0..g.len())
        .map(|idx| {
            if bp.data()[idx] {
                return false;
            }
            let [i, j, k] = g.coords(idx);
            let p = g.voxel_to_world(i, j, k);
            boundary.iter().any(|q| (p - q).norm_squared() <= d2)
        })
        .collect()
}

pub fn circle_annulus(center: Vec3, r: f64) -> AnnulusModel {
    let pts = (0..10)
        .map(|m| {
            let a = m as f64 * std::f64::consts::TAU / 10.0;
            center + Vec3::new(r * a.cos(), r * a.sin(), 0.0)
        })
        .collect();
    fit_annulus(&AnnulusDefinition::new(pts, Some(Vec3::z()))).unwrap()
}

/// Digital ball of radius 20 voxels on 64³, 5-voxel outward shell.
pub fn shell() -> Check {
    let h = 0.5;
    let g = Geometry::isotropic([64, 64, 64], h).unwrap();
    let c = Vec3::new(31.5, 31.0, 32.25);
    let bp = LabelMask::from_fn(g.clone(), |i, j, k| (Vec3::new(i as f64, j as f64, k as f64) - c).norm() <= 20.0);
    let distance = 5.0 * h;
    let expected = pairwise_shell(&bp, distance);
    let ann = circle_annulus(g.index_to_world(c), 8.0);
    let got = init_shell(&bp, distance, &ann).map_err(|e| e.to_string())?.to_mask();
    let mismatches = got.data().iter().zip(&expected).filter(|(a, b)| a != b).count();
    let size = expected.iter().filter(|&&b| b).count();
    verdict(
        mismatches == 0 && size > 10_000,
        format!("{mismatches} mismatching voxels, shell of {size} voxels on 64³"),
    )
}

/// Independent segment/triangle test: plane crossing, then inside test by
/// same-side edge checks.
pub fn segment_hits(p0: Vec3, p1: Vec3, t: [Vec3; 3]) -> bool {
    let n = (t[1] - t[0]).cross(&(t[2] - t[0]));
    let d0 = n.dot(&(p0 - t[0]));
    let d1 = n.dot(&(p1 - t[0]));
    if d0 == d1 || (d0 > 0.0 && d1 > 0.0) || (d0 < 0.0 && d1 < 0.0) {
        return false;
    }
    let x = p0 + (p1 - p0) * (d0 / (d0 - d1));
    let s0 = (t[1] - t[0]).cross(&(x - t[0])).dot(&n);
    let s1 = (t[2] - t[1]).cross(&(x - t[1])).dot(&n);
    let s2 = (t[0] - t[2]).cross(&(x - t[2])).dot(&n);
    (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
}

/// Whether the shortened segment from the annulus centre to `v` hits any
/// triangle of `mesh`, by checking all of them.
pub fn brute_force_blocked(mesh: &TriMesh, annulus: &AnnulusModel, v: Vec3, epsilon: f64) -> bool {
    let d = v - annulus.centroid;
    let len = d.norm();
    let end = annulus.centroid + d * ((len - epsilon) / len);
    (0..mesh.n_triangles()).any(|t| segment_hits(annulus.centroid, end, mesh.triangle(t)))
}

/// A lumpy surface crossing the annulus plane with an occluding blob above it.
pub fn blob_mesh(seed: u64) -> TriMesh {
    let g = Geometry::isotropic([24, 24, 24], 1.0).unwrap();
    let jitter = (seed as f64 * 0.37).sin();
    let big = Vec3::new(11.5 + 0.7 * jitter, 11.5, 7.0);
    let small = Vec3::new(9.0, 10.5 - 0.7 * jitter, 14.5 + 0.4 * jitter);
    let m = LabelMask::from_fn(g, |i, j, k| {
        let p = Vec3::new(i as f64, j as f64, k as f64);
        (p - big).norm() < 5.6 + 0.2 * jitter || (p - small).norm() < 2.4
    });
    marching_cubes(&m, 0.0).unwrap()
}

/// Above-plane keep decisions against the O(V·T) oracle on four blob meshes.
pub fn visibility() -> Check {
    let mut parts = Vec::new();
    for seed in 0..4 {
        let leaf = blob_mesh(seed);
        let ann = circle_annulus(Vec3::new(11.43, 11.61, 10.37), 7.0);
        let opts = ProximalOptions {
            epsilon_mm: 0.25,
            min_normal_angle_deg: 100.0,
            straddle: StraddlePolicy::AllKept,
        };
        let keep = classify_proximal(&leaf, &leaf, &ann, &opts).map_err(|e| e.to_string())?;
        let (mut above, mut hidden, mut mismatches) = (0, 0, 0);
        for (vi, &v) in leaf.vertices.iter().enumerate() {
            if ann.signed_height(v) < 0.0 {
                continue;
            }
            above += 1;
            let blocked = brute_force_blocked(&leaf, &ann, v, opts.epsilon_mm);
            hidden += blocked as usize;
            mismatches += (keep[vi] == blocked) as usize;
        }
        parts.push((
            "blob",
            verdict(
                mismatches == 0 && leaf.n_triangles() <= 5000 && above > 100 && hidden > 10 && hidden < above,
                format!(
                    "seed {seed}: {} triangles, {above} vertices above, {hidden} hidden, {mismatches} mismatches",
                    leaf.n_triangles()
                ),
            ),
        ));
    }
    all_of(parts)
}

pub fn uv_sphere(center: Vec3, r: f64, rings: usize, sectors: usize) -> TriMesh {
    let mut v = vec![center + Vec3::new(0.0, 0.0, r)];
    for a in 1..rings {
        let th = std::f64::consts::PI * a as f64 / rings as f64;
        for b in 0..sectors {
            let ph = std::f64::consts::TAU * b as f64 / sectors as f64;
            v.push(center + r * Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()));
        }
    }
    v.push(center - Vec3::new(0.0, 0.0, r));
    let s = sectors as u32;
    let ring = |a: u32, b: u32| 1 + a * s + (b % s);
    let mut t = Vec::new();
    for b in 0..s {
        t.push([0, ring(0, b), ring(0, b + 1)]);
    }
    for a in 0..(rings as u32 - 2) {
        for b in 0..s {
            t.push([ring(a, b), ring(a + 1, b), ring(a + 1, b + 1)]);
            t.push([ring(a, b), ring(a + 1, b + 1), ring(a, b + 1)]);
        }
    }
    let last = v.len() as u32 - 1;
    for b in 0..s {
        t.push([ring(rings as u32 - 2, b + 1), ring(rings as u32 - 2, b), last]);
    }
    TriMesh::new(v, t).unwrap()
}

/// Spheres of 10 and 12 mm around a common centre.
pub fn concentric_masd() -> Check {
    let c = Vec3::new(1.0, -2.0, 3.0);
    let a = uv_sphere(c, 10.0, 60, 120);
    let b = uv_sphere(c, 12.0, 70, 140);
    let r = masd(&a, &b).map_err(|e| e.to_string())?;
    let back = masd(&b, &a).map_err(|e| e.to_string())?;
    verdict(
        (r.masd - 2.0).abs() <= 0.1 && back.masd == r.masd,
        format!("masd {:.4} mm (expected 2.0 ± 0.1), reversed {:.4}", r.masd, back.masd),
    )
}
