//! Extract the atrial-side surface of the ground-truth leaflet.

use mvseg::annulus::fit_annulus;
use mvseg::mesh::marching_cubes;
use mvseg::metrics::masd;
use mvseg::phantom::{generate_phantom, PhantomSpec};
use mvseg::surface::{extract_proximal, ProximalOptions};

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
    let leaflet = marching_cubes(&case.gt_leaflet, 0.0)?;
    let bloodpool = marching_cubes(&case.gt_bloodpool, 0.0)?;
    let options = ProximalOptions::for_geometry(case.volume.geometry());
    let proximal = extract_proximal(&leaflet, &bloodpool, &annulus, &options)?;
    println!("leaflet {} triangles, proximal {}", leaflet.n_triangles(), proximal.n_triangles());
    let d = masd(&proximal, &case.gt_proximal_mesh()?)?;
    println!("MASD to the analytic atrial side {:.3} mm", d.masd);
    Ok(())
}
