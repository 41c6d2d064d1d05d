//! Seed the leaflet stage from a shell around the true blood pool and
//! shrink it onto the tissue.

use mvseg::annulus::fit_annulus;
use mvseg::filters::{speed_from_image, SpeedConfig};
use mvseg::levelset::{advance, default_params, init_shell, Stage};
use mvseg::metrics::dice;
use mvseg::phantom::{generate_phantom, PhantomSpec};

fn main() -> mvseg::Result<()> {
    let spec = PhantomSpec {
        dims: [48, 48, 48],
        spacing: [0.9, 0.9, 0.9],
        atrium_radius: 14.0,
        leaflet_thickness: 2.0,
        ..PhantomSpec::default()
    };
    let case = generate_phantom(&spec)?;
    let annulus = fit_annulus(&case.annulus)?;
    let speed = speed_from_image(&case.volume, &SpeedConfig::default())?;
    let mut state = init_shell(&case.gt_bloodpool, 5.0, &annulus)?;
    println!("shell: {} voxels", state.inside_count());
    let params = default_params(Stage::Leaflet);
    for _ in 0..4 {
        state = advance(&state, &speed, &params, 50)?;
        println!(
            "iter {:4}  {} voxels  dice vs leaflet {:.3}",
            state.iterations_done(),
            state.inside_count(),
            dice(&state.to_mask(), &case.gt_leaflet)?
        );
    }
    Ok(())
}
