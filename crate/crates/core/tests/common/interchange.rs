use mvseg::mesh::{encode_mesh, MeshFormat, TriMesh};
use mvseg::nrrd::{read_nrrd, write_nrrd, Encoding};
use mvseg::volume::{Geometry, Mat3, Vec3, Volume3D};
use rand::{Rng, SeedableRng};

use super::{verdict, Check};

pub fn oblique_geometry(dims: [usize; 3]) -> Geometry {
    let a = 0.3f64;
    let rot = Mat3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
    Geometry::new(dims, [0.45, 0.6, 0.8], Vec3::new(-3.25, 7.0, 0.125), rot).unwrap()
}

/// Random finite floats with all bit patterns of the mantissa in play.
pub fn random_volume(g: Geometry, seed: u64) -> Volume3D {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..g.len())
        .map(|_| f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff))
        .collect();
    Volume3D::new(g, data).unwrap()
}

/// Raw and gzip round trips of random volumes on an oblique grid.
pub fn nrrd_round_trip() -> Check {
    let mut cases = 0;
    for (seed, dims) in [(1, [7, 5, 3]), (2, [16, 9, 11]), (3, [1, 1, 1]), (4, [33, 2, 8])] {
        let v = random_volume(oblique_geometry(dims), seed);
        for enc in [Encoding::Raw, Encoding::Gzip] {
            let bytes = write_nrrd(&v, enc).map_err(|e| e.to_string())?;
            let back = read_nrrd(&bytes).map_err(|e| e.to_string())?.volume;
            let same_bits = back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let ga = back.geometry();
            let gb = v.geometry();
            if !(same_bits
                && back.dims() == v.dims()
                && ga.spacing == gb.spacing
                && ga.origin == gb.origin
                && (ga.direction - gb.direction).abs().max() < 1e-9)
            {
                return Err(format!("{dims:?} {enc:?}: round trip differs"));
            }
            cases += 1;
        }
    }
    verdict(true, format!("{cases} volumes bit-exact, geometry within 1e-9"))
}

/// Binary STL length is 84 + 50 n for n = 1..=300.
pub fn stl_size_law() -> Check {
    for n in 1..=300usize {
        let vertices = (0..n + 2)
            .map(|i| Vec3::new(i as f64, (i * i % 7) as f64, (i % 3) as f64 + 0.5 * i as f64))
            .collect();
        let triangles = (0..n as u32).map(|i| [i, i + 1, i + 2]).collect();
        let mesh = TriMesh::new(vertices, triangles).map_err(|e| e.to_string())?;
        let bytes = encode_mesh(&mesh, MeshFormat::StlBinary).map_err(|e| e.to_string())?;
        if bytes.len() != 84 + 50 * n {
            return Err(format!("{n} triangles gave {} bytes", bytes.len()));
        }
    }
    verdict(true, "84 + 50 n holds for n = 1..=300".into())
}
