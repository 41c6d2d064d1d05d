//! Reinitialize a steepened sphere and measure how far it is from a
//! distance function.

use mvseg::levelset::{reinitialize, LevelSetState};
use mvseg::volume::{Geometry, Vec3};

fn main() -> mvseg::Result<()> {
    let g = Geometry::isotropic([48, 48, 48], 0.5)?;
    let c = Vec3::new(12.0, 11.8, 12.3);
    let exact: Vec<f32> = (0..g.len())
        .map(|idx| {
            let [i, j, k] = g.coords(idx);
            ((g.voxel_to_world(i, j, k) - c).norm() - 7.0) as f32
        })
        .collect();
    let steep = exact.iter().map(|v| 4.0 * v * (1.0 + 0.1 * v.abs())).collect();
    let state = LevelSetState::from_phi(g.clone(), steep)?;
    let out = reinitialize(&state)?;
    let band = state.band_width() as f32;
    let worst = exact
        .iter()
        .zip(out.phi())
        .filter(|(e, _)| e.abs() < band && **e > -6.0)
        .map(|(e, r)| (e - r).abs())
        .fold(0.0f32, f32::max);
    println!("band {band:.2} mm, worst deviation from the distance {worst:.4} mm");
    Ok(())
}
