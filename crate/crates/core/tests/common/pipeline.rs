use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

use mvseg::levelset::Stage;
use mvseg::mesh::{load_mesh, marching_cubes, MeshFormat, TriMesh};
use mvseg::metrics::{dice, masd};
use mvseg::nrrd::load_mask;
use mvseg::phantom::{generate_phantom, PhantomCase, PhantomSpec};
use mvseg::pipeline::{cmd_phantom, cmd_segment, RunConfig, RunManifest};
use mvseg::service::{router, AppState};
use mvseg::session::{Session, SessionSettings};
use mvseg::volume::{LabelMask, Vec3};

use super::{all_of, verdict, Check};

pub const E2E_RUNTIME_LIMIT: Duration = Duration::from_secs(120);

/// A coarse phantom that runs through the whole pipeline in seconds.
pub fn small_spec() -> PhantomSpec {
    PhantomSpec {
        dims: [48, 48, 48],
        spacing: [0.9, 0.9, 0.9],
        atrium_radius: 14.0,
        leaflet_thickness: 2.0,
        rng_seed: 7,
        ..PhantomSpec::default()
    }
}

pub struct PhantomFiles {
    pub dir: PathBuf,
    pub volume: PathBuf,
    pub annulus: PathBuf,
}

pub fn write_phantom(spec: &PhantomSpec, dir: &Path) -> PhantomFiles {
    cmd_phantom(spec, dir, MeshFormat::StlBinary).expect("phantom files");
    PhantomFiles {
        dir: dir.to_path_buf(),
        volume: dir.join("volume.nrrd"),
        annulus: dir.join("annulus.json"),
    }
}

pub fn run_config(files: &PhantomFiles, out: &Path, bp_iters: u32, leaflet_iters: u32) -> RunConfig {
    RunConfig {
        input: Some(files.volume.clone()),
        annulus: Some(files.annulus.clone()),
        bp_iters,
        leaflet_iters,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

pub fn segment_with_threads(config: &RunConfig, threads: usize) -> RunManifest {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
        .install(|| cmd_segment(config))
        .unwrap_or_else(|e| panic!("{e}"))
}

/// Voxel-index rounding of a world point, if inside the grid.
fn nearest_voxel(mask: &LabelMask, p: Vec3) -> Option<[usize; 3]> {
    let ijk = mask.geometry().world_to_index(p);
    let dims = mask.geometry().dims;
    let mut out = [0; 3];
    for a in 0..3 {
        let r = ijk[a].round();
        if r < 0.0 || r >= dims[a] as f64 {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

/// `mask` grown by the 26-neighbourhood.
pub fn dilate(mask: &LabelMask) -> LabelMask {
    let g = mask.geometry().clone();
    let [nx, ny, nz] = g.dims;
    LabelMask::from_fn(g, |i, j, k| {
        (i.saturating_sub(1)..=(i + 1).min(nx - 1)).any(|a| {
            (j.saturating_sub(1)..=(j + 1).min(ny - 1))
                .any(|b| (k.saturating_sub(1)..=(k + 1).min(nz - 1)).any(|c| mask.at(a, b, c)))
        })
    })
}

/// Fraction of mesh vertices whose nearest voxel is inside `mask`.
pub fn containment(mesh: &TriMesh, mask: &LabelMask) -> f64 {
    let inside = mesh
        .vertices
        .iter()
        .filter(|&&p| nearest_voxel(mask, p).is_some_and(|[i, j, k]| mask.at(i, j, k)))
        .count();
    inside as f64 / mesh.n_vertices().max(1) as f64
}

pub struct EndToEnd {
    pub manifest: RunManifest,
    pub runtime: Duration,
    pub bp_dice: f64,
    pub leaflet_masd: f64,
    pub proximal_masd: f64,
    pub proximal_in_dilated_gt: f64,
}

/// The default phantom through `cmd_segment` with the given budgets; the
/// metrics are computed from the files it wrote.
pub fn run_end_to_end(case: &PhantomCase, bp_iters: u32, leaflet_iters: u32) -> EndToEnd {
    let dir = tempfile::tempdir().unwrap();
    let files = write_phantom(&case.spec, &dir.path().join("phantom"));
    let out = dir.path().join("out");
    let start = Instant::now();
    let manifest = cmd_segment(&run_config(&files, &out, bp_iters, leaflet_iters)).unwrap_or_else(|e| panic!("{e}"));
    let runtime = start.elapsed();
    let bp = load_mask(out.join("bp_mask.nrrd")).unwrap();
    let leaflet = load_mask(out.join("leaflet_mask.nrrd")).unwrap();
    let proximal = load_mesh(out.join("proximal_mesh.stl")).unwrap();
    let leaflet_mesh = marching_cubes(&leaflet, 0.0).unwrap();
    EndToEnd {
        runtime,
        bp_dice: dice(&bp, &case.gt_bloodpool).unwrap(),
        leaflet_masd: masd(&leaflet_mesh, &case.gt_leaflet_mesh().unwrap()).unwrap().masd,
        proximal_masd: masd(&proximal, &case.gt_proximal_mesh().unwrap()).unwrap().masd,
        proximal_in_dilated_gt: containment(&proximal, &dilate(&case.gt_leaflet)),
        manifest,
    }
}

/// Default phantom, default parameters, budgets 300 / 200.
pub fn end_to_end() -> Check {
    let case = generate_phantom(&PhantomSpec::default()).map_err(|e| e.to_string())?;
    let r = run_end_to_end(&case, 300, 200);
    all_of(vec![
        ("leaflet MASD", verdict(r.leaflet_masd <= 1.0, format!("{:.3} mm, limit 1.0", r.leaflet_masd))),
        ("proximal MASD", verdict(r.proximal_masd <= 0.7, format!("{:.3} mm, limit 0.7", r.proximal_masd))),
        ("blood pool Dice", verdict(r.bp_dice >= 0.95, format!("{:.4}, limit 0.95", r.bp_dice))),
        (
            "runtime",
            verdict(
                r.runtime < E2E_RUNTIME_LIMIT,
                format!("{:.1} s on {} threads, limit 120 s", r.runtime.as_secs_f64(), r.manifest.threads),
            ),
        ),
    ])
}

fn artifact_digest(m: &RunManifest) -> &BTreeMap<String, String> {
    &m.artifacts
}

/// Two runs on one worker and one run on three; artifact checksums must agree.
pub fn segment_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let files = write_phantom(&small_spec(), &dir.path().join("phantom"));
    let runs: Vec<(usize, RunManifest)> = [1, 1, 3]
        .iter()
        .enumerate()
        .map(|(n, &threads)| {
            let config = run_config(&files, &dir.path().join(format!("out{n}")), 60, 30);
            (threads, segment_with_threads(&config, threads))
        })
        .collect();
    let first = artifact_digest(&runs[0].1);
    let same = runs.iter().all(|(_, m)| artifact_digest(m) == first);
    verdict(
        same && first.len() == 4,
        format!(
            "{} artifacts, runs on {:?} workers {}",
            first.len(),
            runs.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
            if same { "identical" } else { "differ" }
        ),
    )
}

/// step(10) + step(10) against step(20) in both stages, and undo.
pub fn stepping_determinism() -> Check {
    let spec = small_spec();
    let case = generate_phantom(&spec).map_err(|e| e.to_string())?;
    let fresh = || {
        let mut s = Session::from_phantom(&spec, SessionSettings::default()).unwrap();
        s.set_annulus(case.annulus.clone()).unwrap();
        s
    };
    let mut parts = Vec::new();
    let mut a = fresh();
    let mut b = fresh();
    for stage in [Stage::BloodPool, Stage::Leaflet] {
        a.step(stage, 10, None).unwrap();
        a.step(stage, 10, None).unwrap();
        b.step(stage, 20, None).unwrap();
        let (sa, sb) = (a.latest(stage).unwrap(), b.latest(stage).unwrap());
        parts.push((
            "10+10 vs 20",
            verdict(sa == sb, format!("{stage}: {} vs {}", &sa.checksum()[..12], &sb.checksum()[..12])),
        ));
        let before = a.latest(stage).unwrap().clone();
        let mut stable = true;
        for _ in 0..5 {
            a.step(stage, 7, None).unwrap();
            a.undo().unwrap();
            stable &= a.latest(stage).unwrap() == &before;
        }
        parts.push(("undo", verdict(stable, format!("{stage}: 5 step/undo cycles"))));
        a.accept(stage).unwrap();
        b.accept(stage).unwrap();
    }
    all_of(parts)
}

pub async fn call(app: &Router, method: &str, uri: &str, content_type: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", content_type)
        .body(Body::from(body))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call_json(app: &Router, method: &str, uri: &str, body: serde_json::Value) -> (StatusCode, serde_json::Value) {
    let (status, bytes) = call(app, method, uri, "application/json", body.to_string().into_bytes()).await;
    let value = if bytes.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON reply from {uri}"))
    };
    (status, value)
}

pub fn new_app() -> Router {
    router(AppState::new(SessionSettings::default()), 1 << 30)
}

/// Drives the HTTP API through the same pipeline as `cmd_segment`, in
/// uneven increments, and compares the exports with the CLI files byte for
/// byte.
pub fn service_replay() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let files = write_phantom(&small_spec(), &dir.path().join("phantom"));
    let out = dir.path().join("cli");
    cmd_segment(&run_config(&files, &out, 45, 25)).map_err(|e| e.to_string())?;

    let rt = tokio::runtime::Runtime::new().unwrap();
    let exports = rt.block_on(async {
        let app = new_app();
        let (status, body) = call(&app, "POST", "/sessions", "application/octet-stream", std::fs::read(&files.volume).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        let id = serde_json::from_slice::<serde_json::Value>(&body).unwrap()["id"].as_str().unwrap().to_string();
        let annulus = std::fs::read(&files.annulus).unwrap();
        let (status, _) = call(&app, "POST", &format!("/sessions/{id}/annulus"), "application/json", annulus).await;
        assert_eq!(status, StatusCode::OK);
        for (stage, chunks) in [("BLOODPOOL", [20, 5, 20]), ("LEAFLET", [3, 20, 2])] {
            for n in chunks {
                let (status, reply) = call_json(
                    &app,
                    "POST",
                    &format!("/sessions/{id}/steps"),
                    serde_json::json!({ "stage": stage, "iterations": n }),
                )
                .await;
                assert_eq!(status, StatusCode::OK, "{reply}");
            }
            let (status, reply) =
                call_json(&app, "POST", &format!("/sessions/{id}/accept"), serde_json::json!({ "stage": stage })).await;
            assert_eq!(status, StatusCode::OK, "{reply}");
        }
        let (status, reply) = call_json(&app, "POST", &format!("/sessions/{id}/surface"), serde_json::Value::Null).await;
        assert_eq!(status, StatusCode::OK, "{reply}");
        let mut exports = Vec::new();
        for file in ["bp_mask.nrrd", "leaflet_mask.nrrd", "leaflet_mesh.stl", "proximal_mesh.stl"] {
            let (status, bytes) = call(&app, "GET", &format!("/sessions/{id}/export/{file}"), "", Vec::new()).await;
            assert_eq!(status, StatusCode::OK, "{file}");
            exports.push((file, bytes));
        }
        exports
    });
    let mut differing = Vec::new();
    for (file, bytes) in &exports {
        if std::fs::read(out.join(file)).map_err(|e| e.to_string())? != *bytes {
            differing.push(*file);
        }
    }
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} exports byte-identical to the CLI files", exports.len())
        } else {
            format!("differing: {differing:?}")
        },
    )
}
