//! Grow the blood-pool contour from a ball at the annulus centroid.

use mvseg::annulus::fit_annulus;
use mvseg::filters::{speed_from_image, SpeedConfig};
use mvseg::levelset::{advance, default_params, init_ball, Stage};
use mvseg::metrics::dice;
use mvseg::phantom::{generate_phantom, PhantomSpec};
use mvseg::session::SessionSettings;

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
    let params = default_params(Stage::BloodPool);
    let mut state = init_ball(case.volume.geometry(), annulus.centroid, SessionSettings::default().seed_radius_mm)?;
    for _ in 0..6 {
        state = advance(&state, &speed, &params, 50)?;
        println!(
            "iter {:4}  volume {:8.1} mm3  dice {:.3}",
            state.iterations_done(),
            state.inside_volume_mm3(),
            dice(&state.to_mask(), &case.gt_bloodpool)?
        );
    }
    Ok(())
}
