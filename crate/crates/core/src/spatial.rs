//! Spatial indices over mesh triangles: a uniform grid (segment and
//! closest-point queries) and a bounding-volume tree (closest-point queries
//! far from the surface). Query results are identical to exhaustive search.

use crate::geom::{closest_point_on_triangle, segment_hits_triangle};
use crate::mesh::TriMesh;
use crate::volume::Vec3;

pub struct TriangleGrid<'a> {
    mesh: &'a TriMesh,
    lo: Vec3,
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: triangles of cell c are `items[start[c]..start[c + 1]]`.
    start: Vec<u32>,
    items: Vec<u32>,
}

/// Result of a closest-point query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPoint {
    pub triangle: usize,
    pub point: Vec3,
    pub distance: f64,
}

impl<'a> TriangleGrid<'a> {
    /// Cell size is chosen from the mean triangle extent so cells hold a few
    /// triangles each.
    pub fn new(mesh: &'a TriMesh) -> Self {
        let (lo, hi) = mesh.bounds().unwrap_or((Vec3::zeros(), Vec3::zeros()));
        let mean_extent = if mesh.triangles.is_empty() {
            1.0
        } else {
            (0..mesh.n_triangles())
                .map(|t| {
                    let [a, b, c] = mesh.triangle(t);
                    (a.sup(&b).sup(&c) - a.inf(&b).inf(&c)).max()
                })
                .sum::<f64>()
                / mesh.n_triangles() as f64
        };
        let span = hi - lo;
        let mut cell = (2.0 * mean_extent).max(1e-9);
        // Keep the grid to a sane number of cells.
        let max_cells = (8 * mesh.n_triangles()).max(64) as f64;
        while (span / cell).map(|s| s.floor() + 1.0).product() > max_cells {
            cell *= 1.5;
        }
        let dims: [usize; 3] = std::array::from_fn(|a| (span[a] / cell).floor() as usize + 1);
        let ncell = dims.iter().product::<usize>();
        let pad = 1e-9 * cell.max(span.max());

        let cell_range = |t: usize| -> ([usize; 3], [usize; 3]) {
            let [a, b, c] = mesh.triangle(t);
            let tlo = a.inf(&b).inf(&c).add_scalar(-pad);
            let thi = a.sup(&b).sup(&c).add_scalar(pad);
            let from = std::array::from_fn(|ax| Self::axis_cell(tlo[ax], lo[ax], cell, dims[ax]));
            let to = std::array::from_fn(|ax| Self::axis_cell(thi[ax], lo[ax], cell, dims[ax]));
            (from, to)
        };
        let mut counts = vec![0u32; ncell + 1];
        for t in 0..mesh.n_triangles() {
            let (f, to) = cell_range(t);
            for k in f[2]..=to[2] {
                for j in f[1]..=to[1] {
                    for i in f[0]..=to[0] {
                        counts[i + dims[0] * (j + dims[1] * k) + 1] += 1;
                    }
                }
            }
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let start = counts;
        let mut fill = start.clone();
        let mut items = vec![0u32; start[ncell] as usize];
        for t in 0..mesh.n_triangles() {
            let (f, to) = cell_range(t);
            for k in f[2]..=to[2] {
                for j in f[1]..=to[1] {
                    for i in f[0]..=to[0] {
                        let c = i + dims[0] * (j + dims[1] * k);
                        items[fill[c] as usize] = t as u32;
                        fill[c] += 1;
                    }
                }
            }
        }
        Self {
            mesh,
            lo,
            cell,
            dims,
            start,
            items,
        }
    }

    #[inline]
    fn axis_cell(x: f64, lo: f64, cell: f64, n: usize) -> usize {
        let c = ((x - lo) / cell).floor();
        if c < 0.0 {
            0
        } else {
            (c as usize).min(n - 1)
        }
    }

    fn cell_items(&self, i: usize, j: usize, k: usize) -> &[u32] {
        let c = i + self.dims[0] * (j + self.dims[1] * k);
        &self.items[self.start[c] as usize..self.start[c + 1] as usize]
    }

    pub fn mesh(&self) -> &TriMesh {
        self.mesh
    }

    /// Exact closest point on the mesh; `None` for an empty mesh. Ties go to
    /// the lowest triangle index.
    pub fn closest(&self, p: Vec3) -> Option<ClosestPoint> {
        if self.mesh.triangles.is_empty() {
            return None;
        }
        let home: [usize; 3] = std::array::from_fn(|a| Self::axis_cell(p[a], self.lo[a], self.cell, self.dims[a]));
        let mut best: Option<ClosestPoint> = None;
        let max_ring = *self.dims.iter().max().expect("3 dims");
        for r in 0..=max_ring {
            let lo: [i64; 3] = std::array::from_fn(|a| home[a] as i64 - r as i64);
            let hi: [i64; 3] = std::array::from_fn(|a| home[a] as i64 + r as i64);
            for k in lo[2].max(0)..=hi[2].min(self.dims[2] as i64 - 1) {
                for j in lo[1].max(0)..=hi[1].min(self.dims[1] as i64 - 1) {
                    for i in lo[0].max(0)..=hi[0].min(self.dims[0] as i64 - 1) {
                        let on_ring = [i, j, k].iter().zip(lo.iter().zip(&hi)).any(|(&v, (&l, &h))| v == l || v == h);
                        if !on_ring {
                            continue;
                        }
                        for &t in self.cell_items(i as usize, j as usize, k as usize) {
                            let t = t as usize;
                            let [a, b, c] = self.mesh.triangle(t);
                            let q = closest_point_on_triangle(p, a, b, c);
                            let d = (q - p).norm();
                            let better = match &best {
                                None => true,
                                Some(cur) => d < cur.distance || (d == cur.distance && t < cur.triangle),
                            };
                            if better {
                                best = Some(ClosestPoint {
                                    triangle: t,
                                    point: q,
                                    distance: d,
                                });
                            }
                        }
                    }
                }
            }
            if let Some(b) = &best {
                // Unvisited cells are at least r whole cells away.
                if b.distance < r as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.closest(p).map_or(f64::INFINITY, |c| c.distance)
    }

    /// Does the closed segment `p0 -> p1` cross any triangle?
    pub fn segment_hits(&self, p0: Vec3, p1: Vec3) -> bool {
        let mut seen = std::collections::HashSet::new();
        let mut hit = false;
        self.walk_segment(p0, p1, |items| {
            for &t in items {
                if seen.insert(t) && segment_hits_triangle(p0, p1, &self.mesh.triangle(t as usize)) {
                    hit = true;
                    return true;
                }
            }
            false
        });
        hit
    }

    /// Visits every cell within one cell of samples taken every half cell
    /// along the segment, a superset of the cells the segment touches. Stops
    /// when the callback returns true.
    fn walk_segment(&self, p0: Vec3, p1: Vec3, mut visit: impl FnMut(&[u32]) -> bool) {
        let d = p1 - p0;
        let len = d.norm();
        let steps = ((len / (0.5 * self.cell)).ceil() as usize).max(1);
        let mut last: Option<[usize; 3]> = None;
        for s in 0..=steps {
            let q = p0 + d * (s as f64 / steps as f64);
            let c: [usize; 3] = std::array::from_fn(|a| Self::axis_cell(q[a], self.lo[a], self.cell, self.dims[a]));
            if last == Some(c) {
                continue;
            }
            last = Some(c);
            for k in c[2].saturating_sub(1)..=(c[2] + 1).min(self.dims[2] - 1) {
                for j in c[1].saturating_sub(1)..=(c[1] + 1).min(self.dims[1] - 1) {
                    for i in c[0].saturating_sub(1)..=(c[0] + 1).min(self.dims[0] - 1) {
                        if visit(self.cell_items(i, j, k)) {
                            return;
                        }
                    }
                }
            }
        }
    }
}

/// Bounding-volume hierarchy over mesh triangles for exact closest-point
/// queries (branch and bound on box distance).
pub struct TriangleTree<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

#[derive(Clone, Copy, Debug)]
struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: `first..first + count` into `order`. Inner: children at `first`
    /// and `first + 1`, `count == 0`.
    first: u32,
    count: u32,
}

const LEAF_SIZE: usize = 4;

impl<'a> TriangleTree<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let n = mesh.n_triangles();
        let boxes: Vec<(Vec3, Vec3)> = (0..n)
            .map(|t| {
                let [a, b, c] = mesh.triangle(t);
                (a.inf(&b).inf(&c), a.sup(&b).sup(&c))
            })
            .collect();
        let centres: Vec<Vec3> = boxes.iter().map(|(l, h)| (l + h) * 0.5).collect();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = vec![BvhNode {
            lo: Vec3::zeros(),
            hi: Vec3::zeros(),
            first: 0,
            count: 0,
        }];
        if n > 0 {
            // (node index, range start, range end)
            let mut stack = vec![(0usize, 0usize, n)];
            while let Some((node, s, e)) = stack.pop() {
                let (mut lo, mut hi) = boxes[order[s] as usize];
                for &t in &order[s..e] {
                    lo = lo.inf(&boxes[t as usize].0);
                    hi = hi.sup(&boxes[t as usize].1);
                }
                nodes[node].lo = lo;
                nodes[node].hi = hi;
                if e - s <= LEAF_SIZE {
                    nodes[node].first = s as u32;
                    nodes[node].count = (e - s) as u32;
                    continue;
                }
                let (mut clo, mut chi) = (centres[order[s] as usize], centres[order[s] as usize]);
                for &t in &order[s..e] {
                    clo = clo.inf(&centres[t as usize]);
                    chi = chi.sup(&centres[t as usize]);
                }
                let axis = (chi - clo).imax();
                let mid = (s + e) / 2;
                order[s..e].select_nth_unstable_by(mid - s, |&x, &y| {
                    centres[x as usize][axis]
                        .total_cmp(&centres[y as usize][axis])
                        .then(x.cmp(&y))
                });
                let left = nodes.len();
                nodes.push(nodes[node]);
                nodes.push(nodes[node]);
                nodes[node].first = left as u32;
                nodes[node].count = 0;
                stack.push((left, s, mid));
                stack.push((left + 1, mid, e));
            }
        }
        Self { mesh, nodes, order }
    }

    fn box_dist2(lo: &Vec3, hi: &Vec3, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let d = if p[a] < lo[a] {
                lo[a] - p[a]
            } else if p[a] > hi[a] {
                p[a] - hi[a]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    /// Exact closest point; ties go to the lowest triangle index.
    pub fn closest(&self, p: Vec3) -> Option<ClosestPoint> {
        if self.mesh.triangles.is_empty() {
            return None;
        }
        let mut best: Option<(f64, usize, Vec3)> = None;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni];
            if let Some((bd2, _, _)) = best {
                if Self::box_dist2(&node.lo, &node.hi, &p) > bd2 {
                    continue;
                }
            }
            if node.count > 0 {
                for &t in &self.order[node.first as usize..(node.first + node.count) as usize] {
                    let t = t as usize;
                    let [a, b, c] = self.mesh.triangle(t);
                    let q = closest_point_on_triangle(p, a, b, c);
                    let d2 = (q - p).norm_squared();
                    let better = match best {
                        None => true,
                        Some((bd2, bt, _)) => d2 < bd2 || (d2 == bd2 && t < bt),
                    };
                    if better {
                        best = Some((d2, t, q));
                    }
                }
            } else {
                let (l, r) = (node.first as usize, node.first as usize + 1);
                let dl = Self::box_dist2(&self.nodes[l].lo, &self.nodes[l].hi, &p);
                let dr = Self::box_dist2(&self.nodes[r].lo, &self.nodes[r].hi, &p);
                // Visit the nearer child first.
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.map(|(d2, t, q)| ClosestPoint {
            triangle: t,
            point: q,
            distance: d2.sqrt(),
        })
    }

    pub fn distance(&self, p: Vec3) -> f64 {
        self.closest(p).map_or(f64::INFINITY, |c| c.distance)
    }
}
