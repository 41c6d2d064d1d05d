//! Drive a session the way the interactive client does: step, undo,
//! accept, then export and save.

use mvseg::levelset::Stage;
use mvseg::phantom::{generate_phantom, PhantomSpec};
use mvseg::session::{ExportKind, Session, SessionSettings};

fn main() -> mvseg::Result<()> {
    let spec = PhantomSpec {
        dims: [48, 48, 48],
        spacing: [0.9, 0.9, 0.9],
        atrium_radius: 14.0,
        leaflet_thickness: 2.0,
        ..PhantomSpec::default()
    };
    let case = generate_phantom(&spec)?;
    let mut s = Session::from_phantom(&spec, SessionSettings::default())?;
    s.set_annulus(case.annulus)?;
    for _ in 0..3 {
        let step = s.step(Stage::BloodPool, 20, None)?;
        println!("bp step -> {} iterations, {:.0} mm3", step.iterations_done, step.inside_volume_mm3);
    }
    let back = s.undo()?;
    println!("undo   -> {} iterations", back.iterations_done);
    s.accept(Stage::BloodPool)?;
    s.step(Stage::Leaflet, 30, None)?;
    s.accept(Stage::Leaflet)?;
    let surfaces = s.extract_surface()?;
    println!("proximal surface: {} triangles", surfaces.proximal.n_triangles);
    let stl = s.export(ExportKind::ProximalMesh, "stl".parse()?)?;
    println!("export {} ({} bytes)", stl.file_name, stl.bytes.len());
    println!("archive {} bytes", s.save_bytes()?.len());
    Ok(())
}
