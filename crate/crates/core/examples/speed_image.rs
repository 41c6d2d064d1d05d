//! Edge-stopping speed of a small phantom, with the automatic beta.

use mvseg::filters::{speed_from_image, SpeedConfig};
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
    let speed = speed_from_image(&case.volume, &SpeedConfig::default())?;
    let s = speed.data();
    let mean_in = |mask: &[bool]| {
        let (sum, n) = s.iter().zip(mask).filter(|(_, m)| **m).fold((0.0, 0), |(a, n), (v, _)| (a + *v as f64, n + 1));
        sum / n.max(1) as f64
    };
    println!("beta = {:.3}", speed.beta());
    println!("mean speed in blood pool {:.3}", mean_in(case.gt_bloodpool.data()));
    println!("mean speed in leaflet    {:.3}", mean_in(case.gt_leaflet.data()));
    Ok(())
}
