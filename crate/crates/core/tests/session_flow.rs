//! The interactive stage machine, driven directly through `Session`.

mod common;

use common::pipeline::{containment, dilate, small_spec, stepping_determinism};
use mvseg::annulus::AnnulusDefinition;
use mvseg::error::Error;
use mvseg::levelset::{ParamsOverride, Stage};
use mvseg::mesh::{read_ply, MeshFormat};
use mvseg::nrrd::read_nrrd;
use mvseg::phantom::{generate_phantom, PhantomCase, PhantomSpec};
use mvseg::session::{
    ExportFormat, ExportKind, Overlay, Session, SessionSettings, SessionStage, SliceAxis, StepStatus, CURRENT_RGBA,
    PREVIOUS_RGBA,
};
use mvseg::volume::{LabelMask, Vec3};

fn small_case() -> (PhantomCase, Session) {
    let spec = small_spec();
    let case = generate_phantom(&spec).unwrap();
    let session = Session::from_phantom(&spec, SessionSettings::default()).unwrap();
    (case, session)
}

/// Small phantom taken through both stages and surface extraction.
fn finished_session(bp: u32, leaflet: u32) -> (PhantomCase, Session) {
    let (case, mut s) = small_case();
    s.set_annulus(case.annulus.clone()).unwrap();
    s.step(Stage::BloodPool, bp, None).unwrap();
    s.accept(Stage::BloodPool).unwrap();
    s.step(Stage::Leaflet, leaflet, None).unwrap();
    s.accept(Stage::Leaflet).unwrap();
    s.extract_surface().unwrap();
    (case, s)
}

#[test]
fn split_steps_and_undo_are_bit_exact() {
    println!("{}", stepping_determinism().unwrap());
}

#[test]
fn phantom_session_holds_the_generated_volume() {
    let spec = small_spec();
    let s = Session::from_phantom(&spec, SessionSettings::default()).unwrap();
    assert_eq!(s.stage(), SessionStage::VolumeLoaded);
    assert_eq!(s.summary().volume_checksum, generate_phantom(&spec).unwrap().volume.checksum());
}

#[test]
fn blood_pool_grows_over_early_steps() {
    let spec = PhantomSpec::default();
    let case = generate_phantom(&spec).unwrap();
    let mut s = Session::from_phantom(&spec, SessionSettings::default()).unwrap();
    s.set_annulus(case.annulus).unwrap();
    let mut last = 0.0;
    for _ in 0..5 {
        let summary = s.step(Stage::BloodPool, 10, None).unwrap();
        assert!(summary.inside_volume_mm3 > last, "{} <= {last}", summary.inside_volume_mm3);
        last = summary.inside_volume_mm3;
    }
    assert_eq!(s.undo_depth(Stage::BloodPool), 5);
}

fn conflict<T>(r: Result<T, Error>) -> bool {
    matches!(r, Err(Error::Conflict(_)))
}

#[test]
fn stage_machine_rejects_out_of_order_commands() {
    let (case, mut s) = small_case();
    assert!(conflict(s.step(Stage::BloodPool, 5, None)));
    assert!(conflict(s.undo()));
    assert!(conflict(s.extract_surface()));
    s.set_annulus(case.annulus.clone()).unwrap();
    assert_eq!(s.stage(), SessionStage::AnnulusSet);
    assert!(conflict(s.undo()));
    assert!(conflict(s.accept(Stage::BloodPool)));
    assert!(conflict(s.step(Stage::Leaflet, 5, None)));
    assert!(matches!(s.step(Stage::BloodPool, 0, None), Err(Error::InvalidArgument(_))));

    s.step(Stage::BloodPool, 5, None).unwrap();
    s.step(Stage::BloodPool, 5, None).unwrap();
    assert_eq!(s.undo_depth(Stage::BloodPool), 2);
    s.undo().unwrap();
    s.undo().unwrap();
    assert_eq!(s.stage(), SessionStage::AnnulusSet);
    assert!(conflict(s.undo()));

    s.step(Stage::BloodPool, 5, None).unwrap();
    assert!(matches!(s.export(ExportKind::BpMask, ExportFormat::Nrrd), Err(Error::NotFound(_))));
    assert_eq!(s.accept(Stage::BloodPool).unwrap(), SessionStage::BpAccepted);
    assert!(conflict(s.step(Stage::BloodPool, 5, None)));
    assert!(conflict(s.set_annulus(case.annulus.clone())));
    assert!(conflict(s.extract_surface()));
    assert!(conflict(s.accept(Stage::Leaflet)));

    s.step(Stage::Leaflet, 3, None).unwrap();
    s.undo().unwrap();
    assert_eq!(s.stage(), SessionStage::BpAccepted);
    assert!(s.accepted(Stage::BloodPool).is_some());
}

#[test]
fn resetting_the_annulus_replaces_the_fit_and_clears_steps() {
    let (case, mut s) = small_case();
    let first = s.set_annulus(case.annulus.clone()).unwrap();
    s.step(Stage::BloodPool, 5, None).unwrap();
    let shifted = AnnulusDefinition::new(
        case.annulus.points.iter().map(|p| p + Vec3::new(1.0, -0.5, 0.0)).collect(),
        case.annulus.probe_dir,
    );
    let second = s.set_annulus(shifted).unwrap();
    let moved = Vec3::from(second.centroid) - Vec3::from(first.centroid);
    assert!((moved - Vec3::new(1.0, -0.5, 0.0)).norm() < 1e-9, "{moved:?}");
    assert_eq!(s.stage(), SessionStage::AnnulusSet);
    assert_eq!(s.undo_depth(Stage::BloodPool), 0);

    let five = AnnulusDefinition::new(case.annulus.points[..5].to_vec(), None);
    assert!(matches!(s.set_annulus(five), Err(Error::Annulus(_))));
}

#[test]
fn parameter_overrides_change_the_step() {
    let (case, mut a) = small_case();
    let (_, mut b) = small_case();
    a.set_annulus(case.annulus.clone()).unwrap();
    b.set_annulus(case.annulus).unwrap();
    let plain = a.step(Stage::BloodPool, 10, None).unwrap();
    let faster = ParamsOverride {
        propagation_scale: Some(2.0),
        ..ParamsOverride::default()
    };
    let fast = b.step(Stage::BloodPool, 10, Some(&faster)).unwrap();
    assert_ne!(plain.checksum, fast.checksum);
    assert_eq!(b.summary().bloodpool.params.unwrap().propagation_scale, 2.0);
}

#[test]
fn over_shrinking_reports_collapse_and_keeps_the_stack() {
    let (case, mut s) = small_case();
    s.set_annulus(case.annulus).unwrap();
    s.step(Stage::BloodPool, 3, None).unwrap();
    let before = s.latest(Stage::BloodPool).unwrap().clone();
    let shrink = ParamsOverride {
        propagation_scale: Some(-1.0),
        curvature_scale: Some(0.0),
        advection_scale: Some(0.0),
        ..ParamsOverride::default()
    };
    let summary = s.step(Stage::BloodPool, 400, Some(&shrink)).unwrap();
    assert_eq!(summary.status, StepStatus::ContourCollapsed);
    assert_eq!(s.undo_depth(Stage::BloodPool), 1);
    assert_eq!(s.latest(Stage::BloodPool).unwrap(), &before);
}

#[test]
fn plain_slice_is_the_windowed_volume() {
    let (_, s) = small_case();
    let v = s.volume();
    let p = v.percentiles(&[1.0, 99.0]);
    let img = s.render_slice(SliceAxis::J, 20, Overlay::NONE).unwrap();
    let [nx, _, nz] = v.dims();
    assert_eq!((img.width, img.height, img.channels), (nx, nz, 1));
    for y in 0..nz {
        for x in 0..nx {
            let expected = ((v.at(x, 20, y) - p[0]) * (255.0 / (p[1] - p[0]))).clamp(0.0, 255.0).round() as u8;
            assert_eq!(img.pixel(x, y)[0], expected);
        }
    }
    let flags: Overlay = "none".parse().unwrap();
    assert_eq!(s.render_slice(SliceAxis::J, 20, flags).unwrap(), img);
    assert!(matches!(s.render_slice(SliceAxis::K, 48, Overlay::NONE), Err(Error::NotFound(_))));
    let png = s.get_slice(SliceAxis::I, 0, Overlay::NONE).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

/// Pixels of `mask` on slice k that have an outside neighbour in the slice.
fn slice_boundary(mask: &LabelMask, k: usize) -> Vec<(usize, usize)> {
    let [nx, ny, _] = mask.geometry().dims;
    let mut out = Vec::new();
    for y in 0..ny {
        for x in 0..nx {
            if !mask.at(x, y, k) {
                continue;
            }
            let near_outside = (x.saturating_sub(1)..=(x + 1).min(nx - 1))
                .any(|a| (y.saturating_sub(1)..=(y + 1).min(ny - 1)).any(|b| !mask.at(a, b, k)));
            if near_outside {
                out.push((x, y));
            }
        }
    }
    out
}

#[test]
fn contour_overlay_follows_the_mask_boundary() {
    let (case, mut s) = small_case();
    s.set_annulus(case.annulus).unwrap();
    s.step(Stage::BloodPool, 30, None).unwrap();
    s.step(Stage::BloodPool, 30, None).unwrap();
    let mask = s.current().unwrap().to_mask();
    let k = mask.centroid().map(|c| s.volume().world_to_index(c).z.round() as usize).unwrap();
    let img = s.render_slice(SliceAxis::K, k, "cur".parse().unwrap()).unwrap();
    assert_eq!(img.channels, 4);
    let boundary = slice_boundary(&mask, k);
    let mut painted = 0;
    for y in 0..img.height {
        for x in 0..img.width {
            if img.pixel(x, y) == CURRENT_RGBA {
                painted += 1;
                assert!(boundary.contains(&(x, y)), "({x}, {y}) is not on the boundary");
            }
        }
    }
    assert!(painted > 20, "{painted} contour pixels");

    let both = s.render_slice(SliceAxis::K, k, "cur,prev".parse().unwrap()).unwrap();
    let count = |c: [u8; 4]| {
        (0..both.height)
            .flat_map(|y| (0..both.width).map(move |x| (x, y)))
            .filter(|&(x, y)| both.pixel(x, y) == c)
            .count()
    };
    assert!(count(CURRENT_RGBA) > 0 && count(PREVIOUS_RGBA) > 0);
}

#[test]
fn surface_extraction_is_idempotent() {
    let (_, mut s) = finished_session(40, 20);
    assert_eq!(s.stage(), SessionStage::SurfaceReady);
    let first = s.summary().surfaces.unwrap();
    assert!(first.proximal.n_triangles > 0);
    assert_eq!(s.extract_surface().unwrap(), first);
}

#[test]
fn exports_reload_to_the_session_state() {
    let (_, s) = finished_session(40, 20);
    for (kind, stage) in [(ExportKind::BpMask, Stage::BloodPool), (ExportKind::LeafletMask, Stage::Leaflet)] {
        let p = s.export(kind, ExportFormat::Nrrd).unwrap();
        let back = LabelMask::from_volume(&read_nrrd(&p.bytes).unwrap().volume);
        assert_eq!(back, s.accepted(stage).unwrap().to_mask());
    }
    let surfaces = s.surfaces().unwrap();
    for (kind, mesh) in [(ExportKind::LeafletMesh, &surfaces.leaflet), (ExportKind::ProximalMesh, &surfaces.proximal)] {
        let stl = s.export(kind, ExportFormat::Mesh(MeshFormat::StlBinary)).unwrap();
        assert_eq!(stl.bytes.len(), 84 + 50 * mesh.n_triangles());
        let ply = s.export(kind, "ply".parse().unwrap()).unwrap();
        let back = read_ply(&ply.bytes[..]).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        let worst = back.vertices.iter().zip(&mesh.vertices).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(worst <= 1e-5, "{worst}");
    }
    assert!(s.export(ExportKind::BpMask, "stl".parse().unwrap()).is_err());
}

#[test]
fn saved_session_resumes_identically() {
    let (case, mut s) = small_case();
    s.set_annulus(case.annulus).unwrap();
    s.step(Stage::BloodPool, 25, None).unwrap();
    s.step(Stage::BloodPool, 10, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.zip");
    s.save(&path).unwrap();
    let mut loaded = Session::load(&path).unwrap();
    assert_eq!(loaded.summary(), s.summary());
    for t in [&mut s, &mut loaded] {
        t.step(Stage::BloodPool, 17, None).unwrap();
        t.accept(Stage::BloodPool).unwrap();
        t.step(Stage::Leaflet, 9, None).unwrap();
    }
    assert_eq!(loaded.latest(Stage::Leaflet), s.latest(Stage::Leaflet));
    loaded.undo().unwrap();
    assert_eq!(loaded.stage(), SessionStage::BpAccepted);
    assert!(Session::load_bytes(b"not a zip").is_err());
}

#[test]
fn finished_session_round_trips_through_an_archive() {
    let (_, s) = finished_session(40, 20);
    let loaded = Session::load_bytes(&s.save_bytes().unwrap()).unwrap();
    assert_eq!(loaded.summary(), s.summary());
    let a = s.export(ExportKind::ProximalMesh, "stl".parse().unwrap()).unwrap();
    let b = loaded.export(ExportKind::ProximalMesh, "stl".parse().unwrap()).unwrap();
    assert_eq!(a.bytes, b.bytes);
}

#[test]
fn default_phantom_proximal_surface_lies_in_the_dilated_leaflet() {
    let spec = PhantomSpec::default();
    let case = generate_phantom(&spec).unwrap();
    let mut s = Session::from_phantom(&spec, SessionSettings::default()).unwrap();
    s.set_annulus(case.annulus.clone()).unwrap();
    s.step(Stage::BloodPool, 300, None).unwrap();
    s.accept(Stage::BloodPool).unwrap();
    s.step(Stage::Leaflet, 200, None).unwrap();
    s.accept(Stage::Leaflet).unwrap();
    s.extract_surface().unwrap();
    let proximal = &s.surfaces().unwrap().proximal;
    let inside = containment(proximal, &dilate(&case.gt_leaflet));
    println!("{} proximal vertices, {:.1}% inside the dilated leaflet", proximal.n_vertices(), 100.0 * inside);
    assert!(!proximal.is_empty());
    assert_eq!(inside, 1.0, "proximal vertices outside the leaflet dilated by one voxel");
}

#[test]
fn containment_oracle_accepts_the_ground_truth_surface() {
    let case = generate_phantom(&small_spec()).unwrap();
    let gt = case.gt_leaflet_mesh().unwrap();
    assert_eq!(containment(&gt, &dilate(&case.gt_leaflet)), 1.0);
}
