//! Euclidean distance transforms on anisotropic grids.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::point_triangle_distance;
use crate::volume::{Geometry, Vec3};

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample spacing `h`. Infinite inputs mark non-feature samples.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let h2 = h * h;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + h2 * (q * q) as f64;
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let fp = f[p] + h2 * (p * p) as f64;
            let s = (fq - fp) / (2.0 * h2 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
            } else {
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                break;
            }
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while (j as isize) < k && z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let d = (q as f64 - p as f64) * h;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest voxel
/// where `feature` is true. Infinite everywhere when there is no feature.
pub fn squared_edt(geometry: &Geometry, feature: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = geometry.dims;
    let mut d: Vec<f64> = feature
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1usize, nx, nx * ny];
    for axis in 0..3 {
        let n = geometry.dims[axis];
        if n == 1 {
            continue;
        }
        let h = geometry.spacing[axis];
        // Enumerate line starts: all voxels whose coordinate along `axis` is 0.
        let starts: Vec<usize> = (0..nz)
            .flat_map(|k| (0..ny).flat_map(move |j| (0..nx).map(move |i| (i, j, k))))
            .filter(|&(i, j, k)| [i, j, k][axis] == 0)
            .map(|(i, j, k)| i + nx * (j + ny * k))
            .collect();
        let stride = strides[axis];
        let lines: Vec<Vec<f64>> = starts
            .par_iter()
            .map_init(
                || (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]),
                |(f, out, v, z), &s| {
                    for t in 0..n {
                        f[t] = d[s + t * stride];
                    }
                    edt_1d(f, h, out, v, z);
                    out.clone()
                },
            )
            .collect();
        for (s, line) in starts.iter().zip(lines) {
            for (t, val) in line.into_iter().enumerate() {
                d[s + t * stride] = val;
            }
        }
    }
    d
}

/// Signed distance to the boundary of a binary region: negative inside,
/// positive outside, with the zero level half a voxel (`0.5 * h_min`)
/// outside the region's outermost voxel centres.
pub fn signed_distance_from_mask(geometry: &Geometry, inside: &[bool]) -> Result<Vec<f32>> {
    if !inside.iter().any(|&b| b) {
        return Err(Error::Region("region is empty".into()));
    }
    if inside.iter().all(|&b| b) {
        return Err(Error::Region("region fills the whole volume".into()));
    }
    let outside: Vec<bool> = inside.iter().map(|b| !b).collect();
    let to_inside = squared_edt(geometry, inside);
    let to_outside = squared_edt(geometry, &outside);
    let half = 0.5 * geometry.h_min();
    Ok(inside
        .iter()
        .zip(to_inside.iter().zip(to_outside.iter()))
        .map(|(&b, (&di, &dout))| {
            if b {
                -(dout.sqrt() - half) as f32
            } else {
                (di.sqrt() - half) as f32
            }
        })
        .collect())
}

/// Corners of the six Kuhn tetrahedra of a unit cell (corner bit 0 = +x,
/// bit 1 = +y, bit 2 = +z). The split is conforming across neighbouring cells.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

const NO_CELL: u32 = u32::MAX;

/// Piecewise-linear zero surface of `phi`, grouped by grid cell. Positions
/// are in millimetres along the grid axes (index times spacing).
struct CellSurface {
    /// Per cell (indexed by its lowest corner voxel): range into `tris`.
    start: Vec<u32>,
    count: Vec<u8>,
    tris: Vec<[Vec3; 3]>,
    cells: Vec<u32>,
    /// Per cell: bounding box of its triangles (only meaningful for cut cells).
    boxes: Vec<(Vec3, Vec3)>,
}

fn build_cell_surface(geometry: &Geometry, phi: &[f32], neg: &[bool]) -> CellSurface {
    let [nx, ny, nz] = geometry.dims;
    let h = geometry.spacing;
    let n = phi.len();
    let mut start = vec![0u32; n];
    let mut count = vec![0u8; n];
    let per_slab: Vec<Vec<(u32, Vec<[Vec3; 3]>)>> = (0..nz.saturating_sub(1))
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::new();
            for j in 0..ny.saturating_sub(1) {
                for i in 0..nx.saturating_sub(1) {
                    let base = i + nx * (j + ny * k);
                    let corner_idx: [usize; 8] =
                        std::array::from_fn(|c| base + (c & 1) + nx * ((c >> 1) & 1) + nx * ny * ((c >> 2) & 1));
                    let first = neg[corner_idx[0]];
                    if corner_idx.iter().all(|&c| neg[c] == first) {
                        continue;
                    }
                    let pos: [Vec3; 8] = std::array::from_fn(|c| {
                        Vec3::new(
                            (i + (c & 1)) as f64 * h[0],
                            (j + ((c >> 1) & 1)) as f64 * h[1],
                            (k + ((c >> 2) & 1)) as f64 * h[2],
                        )
                    });
                    let mut tris = Vec::new();
                    for tet in &KUHN {
                        tet_triangles(tet, &corner_idx, &pos, phi, neg, &mut tris);
                    }
                    if !tris.is_empty() {
                        out.push((base as u32, tris));
                    }
                }
            }
            out
        })
        .collect();
    let mut tris = Vec::new();
    let mut cells = Vec::new();
    let mut boxes = vec![(Vec3::zeros(), Vec3::zeros()); n];
    for slab in per_slab {
        for (cell, t) in slab {
            let lo = t.iter().flatten().fold(Vec3::repeat(f64::INFINITY), |a, b| a.inf(b));
            let hi = t.iter().flatten().fold(Vec3::repeat(f64::NEG_INFINITY), |a, b| a.sup(b));
            boxes[cell as usize] = (lo, hi);
            start[cell as usize] = tris.len() as u32;
            count[cell as usize] = t.len() as u8;
            cells.push(cell);
            tris.extend(t);
        }
    }
    CellSurface {
        start,
        count,
        tris,
        cells,
        boxes,
    }
}

fn tet_triangles(
    tet: &[usize; 4],
    corner_idx: &[usize; 8],
    pos: &[Vec3; 8],
    phi: &[f32],
    neg: &[bool],
    out: &mut Vec<[Vec3; 3]>,
) {
    let inside: Vec<usize> = tet.iter().copied().filter(|&c| neg[corner_idx[c]]).collect();
    let outside: Vec<usize> = tet.iter().copied().filter(|&c| !neg[corner_idx[c]]).collect();
    if inside.is_empty() || outside.is_empty() {
        return;
    }
    let cross = |a: usize, b: usize| -> Vec3 {
        let pa = phi[corner_idx[a]] as f64;
        let pb = phi[corner_idx[b]] as f64;
        let t = if pa == pb { 0.5 } else { (pa / (pa - pb)).clamp(0.0, 1.0) };
        pos[a] + (pos[b] - pos[a]) * t
    };
    match (inside.len(), outside.len()) {
        (1, 3) => out.push([cross(inside[0], outside[0]), cross(inside[0], outside[1]), cross(inside[0], outside[2])]),
        (3, 1) => out.push([cross(outside[0], inside[0]), cross(outside[0], inside[1]), cross(outside[0], inside[2])]),
        _ => {
            let (a, b) = (inside[0], inside[1]);
            let (c, d) = (outside[0], outside[1]);
            let q = [cross(a, c), cross(a, d), cross(b, d), cross(b, c)];
            out.push([q[0], q[1], q[2]]);
            out.push([q[0], q[2], q[3]]);
        }
    }
}

impl CellSurface {
    /// Lower bound on the distance from `p` to the surface in `cell`.
    #[inline]
    fn box_distance(&self, cell: u32, p: Vec3) -> f64 {
        let (lo, hi) = &self.boxes[cell as usize];
        let d = (lo - p).sup(&(p - hi)).sup(&Vec3::zeros());
        d.norm()
    }

    fn distance(&self, cell: u32, p: Vec3) -> f64 {
        let s = self.start[cell as usize] as usize;
        let c = self.count[cell as usize] as usize;
        self.tris[s..s + c]
            .iter()
            .map(|t| point_triangle_distance(p, t))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Recomputes `phi` as a signed Euclidean distance to its current zero level
/// set, keeping the sign of every sample.
///
/// The zero level set is approximated by the piecewise-linear surface that
/// linear interpolation gives on a Kuhn tetrahedral split of each cell.
/// Corners of cut cells get the exact distance to the surface in their own
/// cells; the nearest surface cell is then propagated to the rest of the grid
/// with forward/backward raster sweeps over the 26-neighbourhood, each voxel
/// evaluating the exact distance to its candidates' triangles.
pub fn reinitialize_field(geometry: &Geometry, phi: &[f32]) -> Result<Vec<f32>> {
    reinitialize_field_within(geometry, phi, f64::INFINITY)
}

/// Like [`reinitialize_field`], but magnitudes beyond `cap` mm are clamped to
/// `cap`, which skips the exact distance work far from the interface.
pub fn reinitialize_field_within(geometry: &Geometry, phi: &[f32], cap: f64) -> Result<Vec<f32>> {
    let [nx, ny, nz] = geometry.dims;
    let h = geometry.spacing;
    let n = phi.len();
    let neg: Vec<bool> = phi.iter().map(|&v| v < 0.0).collect();
    if !neg.iter().any(|&b| b) {
        return Err(Error::Region("inside region is empty".into()));
    }
    if neg.iter().all(|&b| b) {
        return Err(Error::Region("inside region fills the whole volume".into()));
    }
    let surf = build_cell_surface(geometry, phi, &neg);
    let point = |idx: usize| -> Vec3 {
        let [i, j, k] = geometry.coords(idx);
        Vec3::new(i as f64 * h[0], j as f64 * h[1], k as f64 * h[2])
    };

    let mut src = vec![NO_CELL; n];
    let mut dist = vec![f64::INFINITY; n];
    for &cell in &surf.cells {
        let base = cell as usize;
        for c in 0..8 {
            let idx = base + (c & 1) + nx * ((c >> 1) & 1) + nx * ny * ((c >> 2) & 1);
            let d = surf.distance(cell, point(idx));
            if d < dist[idx] {
                dist[idx] = d;
                src[idx] = cell;
            }
        }
    }

    let mut offsets_fwd: Vec<(i64, i64, i64)> = Vec::with_capacity(13);
    for dk in -1i64..=1 {
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                if (dk, dj, di) < (0, 0, 0) {
                    offsets_fwd.push((di, dj, dk));
                }
            }
        }
    }
    let offsets_bwd: Vec<(i64, i64, i64)> = offsets_fwd.iter().map(|&(a, b, c)| (-a, -b, -c)).collect();

    let dims = [nx as i64, ny as i64, nz as i64];
    let step_len: Vec<f64> = offsets_fwd
        .iter()
        .map(|&(a, b, c)| ((a as f64 * h[0]).powi(2) + (b as f64 * h[1]).powi(2) + (c as f64 * h[2]).powi(2)).sqrt())
        .collect();
    let sweep = |forward: bool, src: &mut Vec<u32>, dist: &mut Vec<f64>| {
        let offs = if forward { &offsets_fwd } else { &offsets_bwd };
        let mut visit = |i: i64, j: i64, k: i64| {
            let idx = (i + dims[0] * (j + dims[1] * k)) as usize;
            let here = point(idx);
            let mut best = dist[idx].min(cap);
            let mut best_src = src[idx];
            let mut tried = [NO_CELL; 13];
            for (slot, &(di, dj, dk)) in offs.iter().enumerate() {
                let (a, b, c) = (i + di, j + dj, k + dk);
                if a < 0 || b < 0 || c < 0 || a >= dims[0] || b >= dims[1] || c >= dims[2] {
                    continue;
                }
                let nidx = (a + dims[0] * (b + dims[1] * c)) as usize;
                let cand = src[nidx];
                if cand == NO_CELL || cand == best_src || tried[..slot].contains(&cand) {
                    continue;
                }
                // Triangle inequality: the neighbour's distance to this cell's
                // surface, less the step, bounds ours from below.
                if dist[nidx] - step_len[slot] >= best || surf.box_distance(cand, here) >= best {
                    continue;
                }
                tried[slot] = cand;
                let d = surf.distance(cand, here);
                if d < best {
                    best = d;
                    best_src = cand;
                }
            }
            dist[idx] = best;
            src[idx] = best_src;
        };
        if forward {
            for k in 0..dims[2] {
                for j in 0..dims[1] {
                    for i in 0..dims[0] {
                        visit(i, j, k);
                    }
                }
            }
        } else {
            for k in (0..dims[2]).rev() {
                for j in (0..dims[1]).rev() {
                    for i in (0..dims[0]).rev() {
                        visit(i, j, k);
                    }
                }
            }
        }
    };
    for _ in 0..2 {
        sweep(true, &mut src, &mut dist);
        sweep(false, &mut src, &mut dist);
    }

    Ok(dist
        .iter()
        .zip(neg.iter())
        .map(|(&d, &inside)| {
            let d = d.min(cap) as f32;
            if inside {
                -d
            } else {
                d
            }
        })
        .collect())
}
