//! Batch drivers behind the command-line subcommands.
//!
//! `segment` runs the same [`Session`] calls the HTTP service exposes, with
//! one step per stage, so both paths produce identical artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annulus::{AnnulusDefinition, AnnulusSummary};
use crate::error::{Error, Result};
use crate::filters::{Beta, SpeedConfig};
use crate::levelset::{ContourParams, ParamsOverride, ShellSide, Stage};
use crate::mesh::{export_mesh, load_mesh, marching_cubes, MeshFormat, TriMesh};
use crate::metrics::{dice, masd, SurfaceDistanceJson};
use crate::nrrd::{load_mask, load_nrrd, save_mask, save_nrrd, write_nrrd, Encoding};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::session::{ExportFormat, ExportKind, RoiSettings, Session, SessionSettings, StepStatus};
use crate::surface::ProximalOptions;

pub const RUN_MANIFEST_SCHEMA: &str = "mvseg.run_manifest/1";

/// Settings for one `segment` run; loadable from TOML or JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub annulus: Option<PathBuf>,
    pub bp_iters: u32,
    pub leaflet_iters: u32,
    pub bp_params: ParamsOverride,
    pub leaflet_params: ParamsOverride,
    pub out: PathBuf,
    pub format: MeshFormat,
    /// Also write the final phi of each stage as float NRRD.
    pub dump_phi: bool,
    /// Confine the leaflet stage to a cylinder around the annulus.
    pub roi_clamp: bool,
    pub seed_radius_mm: f64,
    pub shell_distance_mm: f64,
    pub shell_side: ShellSide,
    pub speed: SpeedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SessionSettings::default();
        Self {
            input: None,
            annulus: None,
            bp_iters: 300,
            leaflet_iters: 200,
            bp_params: ParamsOverride::default(),
            leaflet_params: ParamsOverride::default(),
            out: PathBuf::from("out"),
            format: MeshFormat::StlBinary,
            dump_phi: false,
            roi_clamp: false,
            seed_radius_mm: s.seed_radius_mm,
            shell_distance_mm: s.shell_distance_mm,
            shell_side: s.shell_side,
            speed: s.speed,
        }
    }
}

impl RunConfig {
    /// Reads `.toml` or `.json` by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("json") => Ok(serde_json::from_str(&text)?),
            Some("toml") => toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display()))),
            _ => Err(Error::invalid(format!("{}: config must be .toml or .json", path.display()))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bp_iters < 1 || self.leaflet_iters < 1 {
            return Err(Error::invalid("iteration budgets must be >= 1"));
        }
        let input = self.input.as_ref().ok_or_else(|| Error::invalid("no input volume given"))?;
        let annulus = self.annulus.as_ref().ok_or_else(|| Error::invalid("no annulus file given"))?;
        for (what, p) in [("input volume", input), ("annulus file", annulus)] {
            if !p.is_file() {
                return Err(Error::invalid(format!("{what} {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn session_settings(&self) -> SessionSettings {
        let base = SessionSettings::default();
        SessionSettings {
            seed_radius_mm: self.seed_radius_mm,
            shell_distance_mm: self.shell_distance_mm,
            shell_side: self.shell_side,
            speed: self.speed,
            bloodpool_params: self.bp_params.apply(&base.bloodpool_params),
            leaflet_params: self.leaflet_params.apply(&base.leaflet_params),
            roi_clamp: self.roi_clamp.then(RoiSettings::default),
            proximal: None,
        }
    }
}

/// A failed run, tagged with the pipeline stage that failed.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    /// Process exit status: 2 for configuration and usage problems.
    pub fn exit_code(&self) -> i32 {
        match self.stage {
            "config" => 2,
            _ => 1,
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub params: ContourParams,
    pub iterations: u32,
    /// Time step of the last reinit interval.
    pub time_step: Option<f64>,
    pub seed: String,
    pub inside_volume_mm3: f64,
    pub phi_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub input: String,
    pub volume_checksum: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub annulus: AnnulusSummary,
    pub speed_sigma_mm: f64,
    /// `auto` or `fixed`.
    pub beta_mode: String,
    pub beta: f64,
    pub dt_policy: String,
    pub shell_side: ShellSide,
    pub shell_distance_mm: f64,
    pub roi_clamp: Option<RoiSettings>,
    pub proximal: ProximalOptions,
    pub bloodpool: StageRecord,
    pub leaflet: StageRecord,
    pub mesh_format: MeshFormat,
    /// File name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub threads: usize,
    pub timings_s: BTreeMap<String, f64>,
}

pub const DT_POLICY: &str = "dt = dt_safety * h_min / max over band of (|a_p s| + |a_a grad s| + 6 a_c s / h_min), \
recomputed at every multiple of reinit_interval";

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn write_artifact(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    artifacts: &mut BTreeMap<String, String>,
) -> Result<()> {
    std::fs::write(dir.join(name), bytes)?;
    artifacts.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

/// Runs the full pipeline and writes every artifact into `config.out`.
pub fn cmd_segment(config: &RunConfig) -> std::result::Result<RunManifest, StageError> {
    config.validate().at("config")?;
    let total = Instant::now();
    let mut timings = BTreeMap::new();
    let mut lap = |name: &str, t: Instant| {
        timings.insert(name.to_string(), t.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    let input = config.input.clone().expect("validated");
    let volume = load_nrrd(&input).at("load")?;
    let def = AnnulusDefinition::load_json(config.annulus.as_ref().expect("validated")).at("annulus")?;
    lap("load", t);

    let out = &config.out;
    std::fs::create_dir_all(out).map_err(Error::from).at("export")?;
    let settings = config.session_settings();
    let mut session = Session::new(volume, settings.clone());
    let annulus = session.set_annulus(def).at("annulus")?;

    let mut records = Vec::new();
    for (stage, iters, tag) in [
        (Stage::BloodPool, config.bp_iters, "bloodpool"),
        (Stage::Leaflet, config.leaflet_iters, "leaflet"),
    ] {
        let t = Instant::now();
        let summary = session.step(stage, iters, None).at(tag)?;
        if summary.status == StepStatus::ContourCollapsed {
            return Err(Error::ContourCollapsed).at(tag);
        }
        session.accept(stage).at(tag)?;
        lap(tag, t);
        let state = session.accepted(stage).expect("just accepted");
        records.push(StageRecord {
            params: *settings.params(stage),
            iterations: iters,
            time_step: state.time_step(),
            seed: match stage {
                Stage::BloodPool => format!("ball radius {} mm at annulus centroid", settings.seed_radius_mm),
                Stage::Leaflet => format!(
                    "shell {} mm {:?} of the blood pool boundary",
                    settings.shell_distance_mm, settings.shell_side
                )
                .to_lowercase(),
            },
            inside_volume_mm3: state.inside_volume_mm3(),
            phi_checksum: state.checksum(),
        });
    }

    let t = Instant::now();
    let mut artifacts = BTreeMap::new();
    for kind in [ExportKind::BpMask, ExportKind::LeafletMask] {
        let p = session.export(kind, ExportFormat::Nrrd).at("export")?;
        write_artifact(out, &p.file_name, &p.bytes, &mut artifacts).at("export")?;
    }
    if config.dump_phi {
        for (stage, name) in [(Stage::BloodPool, "bp_phi.nrrd"), (Stage::Leaflet, "leaflet_phi.nrrd")] {
            let state = session.accepted(stage).expect("accepted");
            let bytes = write_nrrd(&state.to_volume(), Encoding::Raw).at("export")?;
            write_artifact(out, name, &bytes, &mut artifacts).at("export")?;
        }
    }
    lap("export_masks", t);

    let t = Instant::now();
    session.extract_surface().at("surface")?;
    lap("surface", t);

    let t = Instant::now();
    for kind in [ExportKind::LeafletMesh, ExportKind::ProximalMesh] {
        let p = session.export(kind, ExportFormat::Mesh(config.format)).at("export")?;
        write_artifact(out, &p.file_name, &p.bytes, &mut artifacts).at("export")?;
    }
    lap("export_meshes", t);
    lap("total", total);

    let speed = session.speed_image().expect("computed by the first step");
    let g = session.volume().geometry();
    let manifest = RunManifest {
        schema: RUN_MANIFEST_SCHEMA.into(),
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        input: input.display().to_string(),
        volume_checksum: session.volume().checksum(),
        dims: g.dims,
        spacing: g.spacing,
        annulus,
        speed_sigma_mm: settings.speed.sigma_mm,
        beta_mode: match settings.speed.beta {
            Beta::Auto => "auto".into(),
            Beta::Fixed(_) => "fixed".into(),
        },
        beta: speed.beta(),
        dt_policy: DT_POLICY.into(),
        shell_side: settings.shell_side,
        shell_distance_mm: settings.shell_distance_mm,
        roi_clamp: settings.roi_clamp,
        proximal: settings.proximal.unwrap_or_else(|| ProximalOptions::for_geometry(g)),
        leaflet: records.pop().expect("two stages"),
        bloodpool: records.pop().expect("two stages"),
        mesh_format: config.format,
        artifacts,
        threads: rayon::current_num_threads(),
        timings_s: timings,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from).at("export")?;
    std::fs::write(out.join("run_manifest.json"), text).map_err(Error::from).at("export")?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InputKind {
    Mask,
    Mesh,
}

fn input_kind(path: &Path) -> Result<InputKind> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "nrrd" => Ok(InputKind::Mask),
        "stl" | "ply" => Ok(InputKind::Mesh),
        _ => Err(Error::invalid(format!(
            "{}: expected a .nrrd mask or an .stl/.ply mesh",
            path.display()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub prediction: String,
    pub ground_truth: String,
    pub surface_distance: Option<SurfaceDistanceJson>,
    pub dice: Option<f64>,
}

/// Compares a prediction with a ground truth: MASD for meshes; Dice plus
/// MASD between mask isosurfaces for masks.
pub fn cmd_evaluate(pred: &Path, gt: &Path) -> Result<EvaluationReport> {
    let (kp, kg) = (input_kind(pred)?, input_kind(gt)?);
    if kp != kg {
        return Err(Error::invalid("prediction and ground truth must both be meshes or both be masks"));
    }
    let (surface_distance, dice_value) = match kp {
        InputKind::Mesh => {
            let (a, b) = (load_mesh(pred)?, load_mesh(gt)?);
            (Some(masd(&a, &b)?.to_json()), None)
        }
        InputKind::Mask => {
            let (a, b) = (load_mask(pred)?, load_mask(gt)?);
            let d = dice(&a, &b)?;
            let surface = |m| -> Result<Option<TriMesh>> {
                match marching_cubes(m, 0.0) {
                    Ok(mesh) => Ok(Some(mesh)),
                    Err(Error::EmptySurface(_)) => Ok(None),
                    Err(e) => Err(e),
                }
            };
            let sd = match (surface(&a)?, surface(&b)?) {
                (Some(ma), Some(mb)) => Some(masd(&ma, &mb)?.to_json()),
                _ => None,
            };
            (sd, Some(d))
        }
    };
    Ok(EvaluationReport {
        prediction: pred.display().to_string(),
        ground_truth: gt.display().to_string(),
        surface_distance,
        dice: dice_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomReport {
    pub spec: PhantomSpec,
    /// File name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

/// Writes a phantom volume, its ground truth and a matching annulus file.
pub fn cmd_phantom(spec: &PhantomSpec, out: &Path, format: MeshFormat) -> Result<PhantomReport> {
    let case = generate_phantom(spec)?;
    std::fs::create_dir_all(out)?;
    save_nrrd(&case.volume, out.join("volume.nrrd"))?;
    save_mask(&case.gt_bloodpool, out.join("gt_bloodpool.nrrd"))?;
    save_mask(&case.gt_leaflet, out.join("gt_leaflet.nrrd"))?;
    case.annulus.save_json(out.join("annulus.json"))?;
    let ext = format.extension();
    export_mesh(&case.gt_leaflet_mesh()?, format, out.join(format!("gt_leaflet_mesh.{ext}")))?;
    export_mesh(&case.gt_proximal_mesh()?, format, out.join(format!("gt_proximal_mesh.{ext}")))?;
    let mut artifacts = BTreeMap::new();
    for name in [
        "volume.nrrd".to_string(),
        "gt_bloodpool.nrrd".to_string(),
        "gt_leaflet.nrrd".to_string(),
        "annulus.json".to_string(),
        format!("gt_leaflet_mesh.{ext}"),
        format!("gt_proximal_mesh.{ext}"),
    ] {
        let bytes = std::fs::read(out.join(&name))?;
        artifacts.insert(name, sha256_hex(&bytes));
    }
    let report = PhantomReport {
        spec: spec.clone(),
        artifacts,
    };
    std::fs::write(out.join("phantom.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
