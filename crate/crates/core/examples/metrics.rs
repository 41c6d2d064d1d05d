//! MASD between two meshes and Dice between two masks given on the command
//! line, or a built-in pair of concentric spheres.
//!
//! `cargo run --release --example metrics -- [pred gt]`

use std::path::Path;

use mvseg::mesh::{marching_cubes, TriMesh};
use mvseg::metrics::{dice, masd};
use mvseg::pipeline::cmd_evaluate;
use mvseg::volume::{Geometry, LabelMask, Vec3};

fn ball(g: &Geometry, r: f64) -> mvseg::Result<LabelMask> {
    let c = Vec3::new(12.0, 12.0, 12.0);
    let bits = (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            (g.voxel_to_world(i, j, k) - c).norm() < r
        })
        .collect();
    LabelMask::new(g.clone(), bits)
}

fn main() -> mvseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [pred, gt] = &args[..] {
        let report = cmd_evaluate(Path::new(pred), Path::new(gt))?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let g = Geometry::isotropic([48, 48, 48], 0.5)?;
    let (a, b) = (ball(&g, 8.0)?, ball(&g, 10.0)?);
    let (ma, mb): (TriMesh, TriMesh) = (marching_cubes(&a, 0.0)?, marching_cubes(&b, 0.0)?);
    let d = masd(&ma, &mb)?;
    println!("MASD {:.3} mm (max {:.3}), Dice {:.3}", d.masd, d.max_local_error, dice(&a, &b)?);
    Ok(())
}
