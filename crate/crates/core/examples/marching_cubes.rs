//! Triangulate a sphere mask and export it as STL and PLY.

use mvseg::mesh::{encode_mesh, marching_cubes, MeshFormat};
use mvseg::volume::{Geometry, LabelMask, Vec3};

fn main() -> mvseg::Result<()> {
    let g = Geometry::isotropic([40, 40, 40], 0.5)?;
    let c = Vec3::new(10.0, 10.0, 10.0);
    let bits = (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            (g.voxel_to_world(i, j, k) - c).norm() < 6.0
        })
        .collect();
    let mask = LabelMask::new(g, bits)?;
    let mesh = marching_cubes(&mask, 0.0)?;
    let r = (3.0 * mesh.signed_volume().abs() / (4.0 * std::f64::consts::PI)).cbrt();
    println!("{} vertices, {} triangles, equivalent radius {r:.3} mm", mesh.n_vertices(), mesh.n_triangles());
    for f in [MeshFormat::StlBinary, MeshFormat::PlyAscii] {
        println!("{f:?}: {} bytes", encode_mesh(&mesh, f)?.len());
    }
    Ok(())
}
