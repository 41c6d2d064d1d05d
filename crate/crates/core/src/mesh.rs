//! Triangle meshes: isosurface extraction and STL / PLY interchange.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levelset::LevelSetState;
use crate::volume::{Geometry, LabelMask, Vec3};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Unit per-vertex normals, area-weighted from incident faces.
    pub normals: Vec<Vec3>,
}

impl TriMesh {
    /// Builds a mesh and computes its vertex normals. Zero-area triangles are
    /// dropped and out-of-range indices rejected.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&v| v >= n)) {
            return Err(Error::MeshFormat(format!("triangle {t:?} references a missing vertex")));
        }
        let triangles: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|t| {
                let [a, b, c] = t.map(|v| vertices[v as usize]);
                (b - a).cross(&(c - a)).norm() > 0.0
            })
            .collect();
        let normals = vertex_normals(&vertices, &triangles);
        Ok(Self {
            vertices,
            triangles,
            normals,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|v| self.vertices[v as usize])
    }

    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Signed enclosed volume (positive for outward-oriented closed meshes).
    pub fn signed_volume(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangle(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| (lo.inf(v), hi.sup(v))))
    }

    /// Keeps triangles whose three vertices pass `keep`, then drops the
    /// vertices no kept triangle uses. Relative order is preserved.
    pub fn submesh(&self, keep: &[bool]) -> TriMesh {
        self.submesh_with(keep, true)
    }

    /// As [`TriMesh::submesh`]; with `require_all = false` a triangle is kept
    /// when any of its vertices passes.
    pub fn submesh_with(&self, keep: &[bool], require_all: bool) -> TriMesh {
        let tris: Vec<[u32; 3]> = self
            .triangles
            .iter()
            .copied()
            .filter(|t| {
                if require_all {
                    t.iter().all(|&v| keep[v as usize])
                } else {
                    t.iter().any(|&v| keep[v as usize])
                }
            })
            .collect();
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut vertices = Vec::new();
        let mut normals = Vec::new();
        for t in &tris {
            for &v in t {
                if remap[v as usize] == u32::MAX {
                    remap[v as usize] = vertices.len() as u32;
                    vertices.push(self.vertices[v as usize]);
                    normals.push(self.normals[v as usize]);
                }
            }
        }
        let triangles = tris.iter().map(|t| t.map(|v| remap[v as usize])).collect();
        TriMesh {
            vertices,
            triangles,
            normals,
        }
    }

    /// Applies `p -> rotation * p + translation` to vertices and normals.
    pub fn transformed(&self, rotation: &nalgebra::Matrix3<f64>, translation: Vec3) -> TriMesh {
        let flip = rotation.determinant() < 0.0;
        TriMesh {
            vertices: self.vertices.iter().map(|v| rotation * v + translation).collect(),
            triangles: if flip {
                self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect()
            } else {
                self.triangles.clone()
            },
            normals: self.normals.iter().map(|n| rotation * n).collect(),
        }
    }

    pub fn flipped(&self) -> TriMesh {
        TriMesh {
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|&[a, b, c]| [a, c, b]).collect(),
            normals: self.normals.iter().map(|n| -n).collect(),
        }
    }

    pub fn summary(&self) -> MeshSummary {
        MeshSummary {
            n_vertices: self.vertices.len(),
            n_triangles: self.triangles.len(),
            area_mm2: self.area(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSummary {
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub area_mm2: f64,
}

fn vertex_normals(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|v| vertices[v as usize]);
        // Cross product length is twice the area: this is the area weighting.
        let n = (b - a).cross(&(c - a));
        for &v in t {
            acc[v as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::z()
            }
        })
        .collect()
}

/// Kuhn split of a cube into six tetrahedra sharing the 0-7 diagonal.
/// Corner bit 0 is +i, bit 1 is +j, bit 2 is +k.
const KUHN: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Grid point in the padded lattice (one virtual layer on every side).
type Node = [i64; 3];

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum VertexKey {
    Node(u64),
    Edge(u64, u64),
}

struct Padded<'a> {
    values: &'a [f32],
    dims: [usize; 3],
    iso: f64,
    pad: f64,
}

impl Padded<'_> {
    #[inline]
    fn get(&self, n: Node) -> f64 {
        let [nx, ny, nz] = self.dims.map(|d| d as i64);
        if n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= nx || n[1] >= ny || n[2] >= nz {
            return self.pad;
        }
        self.values[(n[0] + nx * (n[1] + ny * n[2])) as usize] as f64 - self.iso
    }

    #[inline]
    fn id(&self, n: Node) -> u64 {
        let [nx, ny, _] = self.dims.map(|d| d as u64 + 2);
        (n[0] + 1) as u64 + nx * ((n[1] + 1) as u64 + ny * (n[2] + 1) as u64)
    }
}

/// Isosurface of `values - iso` on the grid, with a virtual outer layer of
/// value `pad` (relative to iso) so the result is always closed.
///
/// Each cube is split into six tetrahedra; linear interpolation on their
/// edges gives a watertight, consistently oriented surface. Triangles face
/// increasing values.
pub fn isosurface(geometry: &Geometry, values: &[f32], iso: f64, pad: f64) -> Result<TriMesh> {
    if values.len() != geometry.len() {
        return Err(Error::Geometry("field length does not match geometry".into()));
    }
    let field = Padded {
        values,
        dims: geometry.dims,
        iso,
        pad,
    };
    let [nx, ny, nz] = geometry.dims.map(|d| d as i64);

    // Each slab yields (key triple) triangles plus the positions of new keys.
    type SlabOut = (Vec<[VertexKey; 3]>, Vec<(VertexKey, Vec3)>);
    let slabs: Vec<SlabOut> = (-1..nz)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            let mut pts: HashMap<VertexKey, Vec3> = HashMap::new();
            for j in -1..ny {
                for i in -1..nx {
                    let nodes: [Node; 8] =
                        std::array::from_fn(|c| [i + (c & 1) as i64, j + ((c >> 1) & 1) as i64, k + ((c >> 2) & 1) as i64]);
                    let vals: [f64; 8] = nodes.map(|n| field.get(n));
                    let neg0 = vals[0] < 0.0;
                    if vals.iter().all(|&v| (v < 0.0) == neg0) {
                        continue;
                    }
                    for tet in &KUHN {
                        emit_tet(tet, &nodes, &vals, &field, &mut tris, &mut pts);
                    }
                }
            }
            let mut pts: Vec<(VertexKey, Vec3)> = pts.into_iter().collect();
            pts.sort_by_key(|a| a.0);
            (tris, pts)
        })
        .collect();

    let mut index: HashMap<VertexKey, u32> = HashMap::new();
    let mut positions: HashMap<VertexKey, Vec3> = HashMap::new();
    for (_, pts) in &slabs {
        for (key, p) in pts {
            positions.entry(*key).or_insert(*p);
        }
    }
    let left_handed = geometry.direction.determinant() < 0.0;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (tris, _) in &slabs {
        for keys in tris {
            let ids = keys.map(|key| {
                *index.entry(key).or_insert_with(|| {
                    vertices.push(geometry.index_to_world(positions[&key]));
                    (vertices.len() - 1) as u32
                })
            });
            if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                continue;
            }
            triangles.push(if left_handed { [ids[0], ids[2], ids[1]] } else { ids });
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptySurface("empty surface".into()));
    }
    let mesh = TriMesh::new(vertices, triangles)?;
    if mesh.is_empty() {
        return Err(Error::EmptySurface("empty surface".into()));
    }
    Ok(compact(mesh))
}

/// Drops vertices that no triangle references.
fn compact(mesh: TriMesh) -> TriMesh {
    let keep = vec![true; mesh.vertices.len()];
    mesh.submesh(&keep)
}

fn emit_tet(
    tet: &[usize; 4],
    nodes: &[Node; 8],
    vals: &[f64; 8],
    field: &Padded<'_>,
    tris: &mut Vec<[VertexKey; 3]>,
    pts: &mut HashMap<VertexKey, Vec3>,
) {
    let inside: Vec<usize> = tet.iter().copied().filter(|&c| vals[c] < 0.0).collect();
    let outside: Vec<usize> = tet.iter().copied().filter(|&c| vals[c] >= 0.0).collect();
    if inside.is_empty() || outside.is_empty() {
        return;
    }
    let mut vertex = |a: usize, b: usize| -> VertexKey {
        // a inside (negative), b outside (non-negative).
        let (va, vb) = (vals[a], vals[b]);
        let t = va / (va - vb);
        let (pa, pb) = (nodes[a], nodes[b]);
        let key = if t >= 1.0 {
            VertexKey::Node(field.id(pb))
        } else {
            let (ia, ib) = (field.id(pa), field.id(pb));
            VertexKey::Edge(ia.min(ib), ia.max(ib))
        };
        pts.entry(key).or_insert_with(|| {
            let fa = Vec3::new(pa[0] as f64, pa[1] as f64, pa[2] as f64);
            let fb = Vec3::new(pb[0] as f64, pb[1] as f64, pb[2] as f64);
            if t >= 1.0 {
                fb
            } else {
                fa + (fb - fa) * t
            }
        });
        key
    };
    let centre = |set: &[usize]| -> Vec3 {
        set.iter()
            .map(|&c| Vec3::new(nodes[c][0] as f64, nodes[c][1] as f64, nodes[c][2] as f64))
            .sum::<Vec3>()
            / set.len() as f64
    };
    let outward = centre(&outside) - centre(&inside);
    let mut push = |keys: [VertexKey; 3], p: [Vec3; 3]| {
        let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
        if n.dot(&outward) < 0.0 {
            tris.push([keys[0], keys[2], keys[1]]);
        } else {
            tris.push(keys);
        }
    };
    match inside.len() {
        1 | 3 => {
            let keys: [VertexKey; 3] = if inside.len() == 1 {
                std::array::from_fn(|m| vertex(inside[0], outside[m]))
            } else {
                std::array::from_fn(|m| vertex(inside[m], outside[0]))
            };
            let p = keys.map(|k| pts[&k]);
            push(keys, p);
        }
        _ => {
            let (a, b) = (inside[0], inside[1]);
            let (c, d) = (outside[0], outside[1]);
            let q = [vertex(a, c), vertex(a, d), vertex(b, d), vertex(b, c)];
            let p = q.map(|k| pts[&k]);
            push([q[0], q[1], q[2]], [p[0], p[1], p[2]]);
            push([q[0], q[2], q[3]], [p[0], p[2], p[3]]);
        }
    }
}

/// Input accepted by [`marching_cubes`].
pub enum SurfaceSource<'a> {
    Field(&'a LevelSetState),
    Mask(&'a LabelMask),
}

impl<'a> From<&'a LevelSetState> for SurfaceSource<'a> {
    fn from(s: &'a LevelSetState) -> Self {
        SurfaceSource::Field(s)
    }
}

impl<'a> From<&'a LabelMask> for SurfaceSource<'a> {
    fn from(m: &'a LabelMask) -> Self {
        SurfaceSource::Mask(m)
    }
}

/// Closed surface of a level-set state at `iso`, or of a mask (converted to
/// a -0.5 inside / +0.5 outside indicator; `iso` is then ignored and 0 used).
pub fn marching_cubes<'a>(source: impl Into<SurfaceSource<'a>>, iso: f64) -> Result<TriMesh> {
    match source.into() {
        SurfaceSource::Field(state) => {
            let pad = 0.5 * state.geometry().h_min();
            isosurface(state.geometry(), state.phi(), iso, pad)
        }
        SurfaceSource::Mask(mask) => {
            let field: Vec<f32> = mask.data().iter().map(|&b| if b { -0.5 } else { 0.5 }).collect();
            isosurface(mask.geometry(), &field, 0.0, 0.5)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeshFormat {
    #[default]
    #[serde(rename = "STL_BINARY", alias = "stl")]
    StlBinary,
    #[serde(rename = "PLY_ASCII", alias = "ply")]
    PlyAscii,
}

impl MeshFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            MeshFormat::StlBinary => "stl",
            MeshFormat::PlyAscii => "ply",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::MeshFormat(format!("{} has no extension", path.display())))?
            .parse()
    }
}

impl fmt::Display for MeshFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for MeshFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stl" | "stl_binary" => Ok(MeshFormat::StlBinary),
            "ply" | "ply_ascii" => Ok(MeshFormat::PlyAscii),
            other => Err(Error::MeshFormat(format!("unknown mesh format `{other}`"))),
        }
    }
}

pub fn encode_mesh(mesh: &TriMesh, format: MeshFormat) -> Result<Vec<u8>> {
    if mesh.is_empty() {
        return Err(Error::EmptySurface("cannot export an empty mesh".into()));
    }
    Ok(match format {
        MeshFormat::StlBinary => stl_bytes(mesh),
        MeshFormat::PlyAscii => ply_bytes(mesh),
    })
}

pub fn export_mesh(mesh: &TriMesh, format: MeshFormat, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_mesh(mesh, format)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path)?;
    let bytes = std::fs::read(path)?;
    match format {
        MeshFormat::StlBinary => read_stl(&bytes),
        MeshFormat::PlyAscii => read_ply(&bytes[..]),
    }
}

fn stl_bytes(mesh: &TriMesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(84 + 50 * mesh.triangles.len());
    let mut header = [0u8; 80];
    let label = b"mvseg binary STL";
    header[..label.len()].copy_from_slice(label);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in 0..mesh.triangles.len() {
        let n = mesh.face_normal(t);
        for v in std::iter::once(n).chain(mesh.triangle(t)) {
            for c in v.iter() {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

/// Binary STL reader; vertices with identical coordinates are merged.
pub fn read_stl(bytes: &[u8]) -> Result<TriMesh> {
    if bytes.len() < 84 {
        return Err(Error::MeshFormat("STL shorter than its 84-byte header".into()));
    }
    let count = u32::from_le_bytes(bytes[80..84].try_into().expect("4 bytes")) as usize;
    let expected = 84 + 50 * count;
    if bytes.len() != expected {
        return Err(Error::MeshFormat(format!(
            "STL declares {count} facets ({expected} bytes) but has {} bytes",
            bytes.len()
        )));
    }
    let mut index: HashMap<[u32; 3], u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::with_capacity(count);
    for f in 0..count {
        let base = 84 + 50 * f + 12;
        let mut tri = [0u32; 3];
        for (m, slot) in tri.iter_mut().enumerate() {
            let at = base + 12 * m;
            let bits: [u32; 3] =
                std::array::from_fn(|c| u32::from_le_bytes(bytes[at + 4 * c..at + 4 * c + 4].try_into().expect("4 bytes")));
            *slot = *index.entry(bits).or_insert_with(|| {
                vertices.push(Vec3::new(
                    f32::from_bits(bits[0]) as f64,
                    f32::from_bits(bits[1]) as f64,
                    f32::from_bits(bits[2]) as f64,
                ));
                (vertices.len() - 1) as u32
            });
        }
        triangles.push(tri);
    }
    TriMesh::new(vertices, triangles)
}

fn ply_bytes(mesh: &TriMesh) -> Vec<u8> {
    let mut out = Vec::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\ncomment mvseg\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\nelement face {}\n\
         property list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
        let _ = writeln!(out, "{} {} {} {} {} {}", v.x as f32, v.y as f32, v.z as f32, n.x as f32, n.y as f32, n.z as f32);
    }
    for t in &mesh.triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    out
}

/// ASCII PLY reader for triangle meshes (x, y, z required; other vertex
/// properties ignored; polygons with more than three corners fanned).
pub fn read_ply(input: impl Read) -> Result<TriMesh> {
    let mut lines = BufReader::new(input).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::MeshFormat("unexpected end of PLY".into()))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(Error::MeshFormat("missing `ply` magic".into()));
    }
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut props: Vec<String> = Vec::new();
    let mut current = String::new();
    loop {
        let line = next()?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::MeshFormat(format!("unsupported PLY format `{fmt}`")))
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::MeshFormat(format!("bad element count `{count}`")))?;
                current = name.to_string();
                match *name {
                    "vertex" => n_vertices = Some(count),
                    "face" => n_faces = Some(count),
                    _ => {}
                }
            }
            ["property", .., name] if current == "vertex" => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let nv = n_vertices.ok_or_else(|| Error::MeshFormat("PLY has no vertex element".into()))?;
    let nf = n_faces.unwrap_or(0);
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::MeshFormat(format!("PLY vertex lacks property `{name}`")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let parse = |w: &str| -> Result<f64> { w.parse().map_err(|_| Error::MeshFormat(format!("bad number `{w}`"))) };
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = next()?;
        let w: Vec<&str> = line.split_whitespace().collect();
        if w.len() < props.len() {
            return Err(Error::MeshFormat("short PLY vertex line".into()));
        }
        vertices.push(Vec3::new(parse(w[cx])?, parse(w[cy])?, parse(w[cz])?));
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = next()?;
        let w: Vec<u32> = line
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| Error::MeshFormat(format!("bad index `{x}`"))))
            .collect::<Result<_>>()?;
        let k = *w.first().ok_or_else(|| Error::MeshFormat("empty face line".into()))? as usize;
        if w.len() != k + 1 || k < 3 {
            return Err(Error::MeshFormat("malformed face line".into()));
        }
        for m in 1..k - 1 {
            triangles.push([w[1], w[1 + m], w[2 + m]]);
        }
    }
    TriMesh::new(vertices, triangles)
}
