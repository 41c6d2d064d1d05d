//! Interactive segmentation session: a stage machine over the contour
//! stages with one snapshot stack per stage.
//!
//! ```text
//! NEW -> VOLUME_LOADED -> ANNULUS_SET -> BP_ACTIVE -> BP_ACCEPTED
//!     -> LEAFLET_ACTIVE -> LEAFLET_ACCEPTED -> SURFACE_READY
//! ```
//!
//! Every step pushes one full phi snapshot, so undo is a pop.

use std::fmt;
use std::io::{Cursor, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::annulus::{fit_annulus_with_probe, AnnulusDefinition, AnnulusModel, AnnulusSummary};
use crate::error::{Error, Result};
use crate::filters::{speed_from_image, SpeedConfig, SpeedImage};
use crate::levelset::{
    advance_with, default_params, init_ball, init_shell_with, AdvanceOptions, ContourParams, LevelSetState,
    ParamsOverride, RoiClamp, ShellSide, Stage, StateMeta,
};
use crate::mesh::{encode_mesh, marching_cubes, MeshFormat, MeshSummary, TriMesh};
use crate::nrrd::{read_nrrd, write_mask, write_nrrd, Encoding};
use crate::phantom::{generate_phantom, PhantomSpec};
use crate::surface::{extract_proximal, ProximalOptions};
use crate::volume::{Vec3, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStage {
    New,
    VolumeLoaded,
    AnnulusSet,
    BpActive,
    BpAccepted,
    LeafletActive,
    LeafletAccepted,
    SurfaceReady,
}

impl fmt::Display for SessionStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

/// Cylinder clamp for the leaflet stage, sized from the annulus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSettings {
    pub radius_scale: f64,
    pub half_height_mm: f64,
}

impl Default for RoiSettings {
    fn default() -> Self {
        Self {
            radius_scale: 1.5,
            half_height_mm: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSettings {
    pub seed_radius_mm: f64,
    pub shell_distance_mm: f64,
    pub shell_side: ShellSide,
    pub speed: SpeedConfig,
    pub bloodpool_params: ContourParams,
    pub leaflet_params: ContourParams,
    /// Only applied to the leaflet stage.
    pub roi_clamp: Option<RoiSettings>,
    /// `None` picks [`ProximalOptions::for_geometry`].
    pub proximal: Option<ProximalOptions>,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            seed_radius_mm: 5.0,
            shell_distance_mm: 5.0,
            shell_side: ShellSide::Outward,
            speed: SpeedConfig::default(),
            bloodpool_params: default_params(Stage::BloodPool),
            leaflet_params: default_params(Stage::Leaflet),
            roi_clamp: None,
            proximal: None,
        }
    }
}

impl SessionSettings {
    pub fn params(&self, stage: Stage) -> &ContourParams {
        match stage {
            Stage::BloodPool => &self.bloodpool_params,
            Stage::Leaflet => &self.leaflet_params,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepStatus {
    Ok,
    ContourCollapsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub session_stage: SessionStage,
    pub iterations_done: u64,
    pub inside_volume_mm3: f64,
    pub status: StepStatus,
    /// Phi checksum of the current snapshot, if there is one.
    pub checksum: Option<String>,
}

#[derive(Clone, Debug)]
struct Snapshot {
    state: LevelSetState,
    params: ContourParams,
}

#[derive(Clone, Debug)]
pub struct SurfaceSet {
    pub bloodpool: TriMesh,
    pub leaflet: TriMesh,
    pub proximal: TriMesh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSummary {
    pub bloodpool: MeshSummary,
    pub leaflet: MeshSummary,
    pub proximal: MeshSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSummary {
    pub snapshots: usize,
    pub iterations_done: u64,
    pub inside_volume_mm3: f64,
    pub checksum: Option<String>,
    pub params: Option<ContourParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub stage: SessionStage,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub volume_checksum: String,
    pub annulus: Option<AnnulusSummary>,
    pub bloodpool: StackSummary,
    pub leaflet: StackSummary,
    pub surfaces: Option<SurfaceSummary>,
    /// Edge-stopping scale, once the speed image exists.
    pub beta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceAxis {
    I,
    J,
    K,
}

impl SliceAxis {
    fn dim(self) -> usize {
        match self {
            SliceAxis::I => 0,
            SliceAxis::J => 1,
            SliceAxis::K => 2,
        }
    }

    /// Volume axes mapped to image (column, row).
    fn image_axes(self) -> (usize, usize) {
        match self {
            SliceAxis::I => (1, 2),
            SliceAxis::J => (0, 2),
            SliceAxis::K => (0, 1),
        }
    }
}

impl FromStr for SliceAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" => Ok(SliceAxis::I),
            "J" => Ok(SliceAxis::J),
            "K" => Ok(SliceAxis::K),
            other => Err(Error::invalid(format!("unknown slice axis `{other}`, expected I, J or K"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlay {
    pub current: bool,
    pub previous: bool,
    pub annulus: bool,
}

impl Overlay {
    pub const NONE: Overlay = Overlay {
        current: false,
        previous: false,
        annulus: false,
    };

    pub fn any(&self) -> bool {
        self.current || self.previous || self.annulus
    }
}

impl FromStr for Overlay {
    type Err = Error;

    /// Comma-separated subset of `cur`, `prev`, `annulus`; `none` or empty
    /// for no overlay.
    fn from_str(s: &str) -> Result<Self> {
        let mut o = Overlay::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "none" => {}
                "cur" | "current" => o.current = true,
                "prev" | "previous" => o.previous = true,
                "annulus" => o.annulus = true,
                other => return Err(Error::invalid(format!("unknown overlay `{other}`"))),
            }
        }
        Ok(o)
    }
}

pub const CURRENT_RGBA: [u8; 4] = [255, 48, 48, 255];
pub const PREVIOUS_RGBA: [u8; 4] = [64, 160, 255, 255];
pub const ANNULUS_RGBA: [u8; 4] = [255, 220, 0, 255];

/// A rendered slice. `channels` is 1 (gray) without overlays and 4 (RGBA)
/// with them. Row 0, column 0 is the minimum-index corner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl SliceImage {
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.pixels[o..o + self.channels]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(if self.channels == 4 {
                png::ColorType::Rgba
            } else {
                png::ColorType::Grayscale
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExportKind {
    BpMask,
    LeafletMask,
    LeafletMesh,
    ProximalMesh,
}

impl ExportKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            ExportKind::BpMask => "bp_mask",
            ExportKind::LeafletMask => "leaflet_mask",
            ExportKind::LeafletMesh => "leaflet_mesh",
            ExportKind::ProximalMesh => "proximal_mesh",
        }
    }

    pub fn is_mask(self) -> bool {
        matches!(self, ExportKind::BpMask | ExportKind::LeafletMask)
    }
}

impl FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bp_mask" => Ok(ExportKind::BpMask),
            "leaflet_mask" => Ok(ExportKind::LeafletMask),
            "leaflet_mesh" => Ok(ExportKind::LeafletMesh),
            "proximal_mesh" => Ok(ExportKind::ProximalMesh),
            other => Err(Error::invalid(format!("unknown export `{other}`"))),
        }
    }
}

/// Payload format of an export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Nrrd,
    Mesh(MeshFormat),
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("nrrd") {
            Ok(ExportFormat::Nrrd)
        } else {
            Ok(ExportFormat::Mesh(s.parse()?))
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExportPayload {
    pub bytes: Vec<u8>,
    pub content_type: &'static str,
    pub file_name: String,
}

#[derive(Clone, Debug)]
pub struct Session {
    id: String,
    stage: SessionStage,
    volume: Arc<Volume3D>,
    window: (f32, f32),
    settings: SessionSettings,
    speed: Option<Arc<SpeedImage>>,
    annulus_def: Option<AnnulusDefinition>,
    annulus: Option<AnnulusModel>,
    bloodpool: Vec<Snapshot>,
    leaflet: Vec<Snapshot>,
    surfaces: Option<SurfaceSet>,
}

fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

impl Session {
    pub fn new(volume: Volume3D, settings: SessionSettings) -> Self {
        let p = volume.percentiles(&[1.0, 99.0]);
        Self {
            id: new_id(),
            stage: SessionStage::VolumeLoaded,
            volume: Arc::new(volume),
            window: (p[0], p[1]),
            settings,
            speed: None,
            annulus_def: None,
            annulus: None,
            bloodpool: Vec::new(),
            leaflet: Vec::new(),
            surfaces: None,
        }
    }

    pub fn from_nrrd_bytes(bytes: &[u8], settings: SessionSettings) -> Result<Self> {
        let image = read_nrrd(bytes)?;
        for w in &image.warnings {
            log::warn!("uploaded volume: {w}");
        }
        Ok(Self::new(image.volume, settings))
    }

    pub fn from_phantom(spec: &PhantomSpec, settings: SessionSettings) -> Result<Self> {
        Ok(Self::new(generate_phantom(spec)?.volume, settings))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Gives a loaded session a fresh id so it cannot clash with a live one.
    pub fn reassign_id(&mut self) {
        self.id = new_id();
    }

    pub fn stage(&self) -> SessionStage {
        self.stage
    }

    pub fn volume(&self) -> &Volume3D {
        &self.volume
    }

    pub fn settings(&self) -> &SessionSettings {
        &self.settings
    }

    pub fn annulus(&self) -> Option<&AnnulusModel> {
        self.annulus.as_ref()
    }

    pub fn speed_image(&self) -> Option<&SpeedImage> {
        self.speed.as_deref()
    }

    pub fn surfaces(&self) -> Option<&SurfaceSet> {
        self.surfaces.as_ref()
    }

    fn stack(&self, stage: Stage) -> &Vec<Snapshot> {
        match stage {
            Stage::BloodPool => &self.bloodpool,
            Stage::Leaflet => &self.leaflet,
        }
    }

    fn stack_mut(&mut self, stage: Stage) -> &mut Vec<Snapshot> {
        match stage {
            Stage::BloodPool => &mut self.bloodpool,
            Stage::Leaflet => &mut self.leaflet,
        }
    }

    /// Number of snapshots (steps) taken in `stage`.
    pub fn undo_depth(&self, stage: Stage) -> usize {
        self.stack(stage).len()
    }

    /// The most recent snapshot of `stage`.
    pub fn latest(&self, stage: Stage) -> Option<&LevelSetState> {
        self.stack(stage).last().map(|s| &s.state)
    }

    /// The frozen result of `stage`, once accepted.
    pub fn accepted(&self, stage: Stage) -> Option<&LevelSetState> {
        let done = match stage {
            Stage::BloodPool => self.stage >= SessionStage::BpAccepted,
            Stage::Leaflet => self.stage >= SessionStage::LeafletAccepted,
        };
        if done {
            self.latest(stage)
        } else {
            None
        }
    }

    /// The state shown as "current": the active stage's top snapshot, or the
    /// most recent accepted result.
    pub fn current(&self) -> Option<&LevelSetState> {
        match self.stage {
            SessionStage::BpActive | SessionStage::BpAccepted => self.latest(Stage::BloodPool),
            SessionStage::LeafletActive | SessionStage::LeafletAccepted | SessionStage::SurfaceReady => {
                self.latest(Stage::Leaflet)
            }
            _ => None,
        }
    }

    /// The snapshot before the current one in the active stage.
    pub fn previous(&self) -> Option<&LevelSetState> {
        let stack = match self.stage {
            SessionStage::BpActive => &self.bloodpool,
            SessionStage::LeafletActive => &self.leaflet,
            _ => return None,
        };
        stack.len().checked_sub(2).map(|i| &stack[i].state)
    }

    fn summary_of(&self, status: StepStatus) -> StepSummary {
        let cur = self.current();
        StepSummary {
            session_stage: self.stage,
            iterations_done: cur.map_or(0, |s| s.iterations_done()),
            inside_volume_mm3: cur.map_or(0.0, |s| s.inside_volume_mm3()),
            status,
            checksum: cur.map(|s| s.checksum()),
        }
    }

    pub fn set_annulus(&mut self, def: AnnulusDefinition) -> Result<AnnulusSummary> {
        match self.stage {
            SessionStage::VolumeLoaded | SessionStage::AnnulusSet | SessionStage::BpActive => {}
            s => {
                return Err(Error::Conflict(format!(
                    "the annulus can only be set before the blood pool is accepted (stage {s})"
                )))
            }
        }
        let probe = def.resolved_probe_dir(Some(self.volume.geometry()));
        let model = fit_annulus_with_probe(&def, probe)?;
        let summary = model.summary();
        self.annulus_def = Some(def);
        self.annulus = Some(model);
        // The blood pool seed depends on the annulus, so earlier steps are void.
        self.bloodpool.clear();
        self.stage = SessionStage::AnnulusSet;
        Ok(summary)
    }

    fn ensure_speed(&mut self) -> Result<Arc<SpeedImage>> {
        if self.speed.is_none() {
            self.speed = Some(Arc::new(speed_from_image(&self.volume, &self.settings.speed)?));
        }
        Ok(self.speed.clone().expect("set above"))
    }

    pub fn step(&mut self, stage: Stage, iterations: u32, overrides: Option<&ParamsOverride>) -> Result<StepSummary> {
        let allowed = match stage {
            Stage::BloodPool => matches!(self.stage, SessionStage::AnnulusSet | SessionStage::BpActive),
            Stage::Leaflet => matches!(self.stage, SessionStage::BpAccepted | SessionStage::LeafletActive),
        };
        if !allowed {
            return Err(Error::Conflict(format!("cannot step {stage} in stage {}", self.stage)));
        }
        if iterations < 1 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        let base = *self.settings.params(stage);
        let params = overrides.map_or(base, |o| o.apply(&base));
        params.validate()?;

        let speed = self.ensure_speed()?;
        let annulus = self.annulus.clone().ok_or_else(|| Error::Conflict("annulus is not set".into()))?;
        let start = match self.stack(stage).last() {
            Some(s) => s.state.clone(),
            None => self.seed(stage, &annulus)?,
        };
        let options = match (stage, self.settings.roi_clamp) {
            (Stage::Leaflet, Some(roi)) => AdvanceOptions {
                roi: Some(RoiClamp::around_annulus(&annulus, roi.radius_scale, roi.half_height_mm)),
            },
            _ => AdvanceOptions::default(),
        };
        match advance_with(&start, &speed, &params, iterations, &options) {
            Ok(state) => {
                self.stack_mut(stage).push(Snapshot { state, params });
                self.stage = match stage {
                    Stage::BloodPool => SessionStage::BpActive,
                    Stage::Leaflet => SessionStage::LeafletActive,
                };
                Ok(self.summary_of(StepStatus::Ok))
            }
            Err(Error::ContourCollapsed) => Ok(self.summary_of(StepStatus::ContourCollapsed)),
            Err(e) => Err(e),
        }
    }

    fn seed(&self, stage: Stage, annulus: &AnnulusModel) -> Result<LevelSetState> {
        let geometry = self.volume.geometry();
        match stage {
            Stage::BloodPool => init_ball(geometry, annulus.centroid, self.settings.seed_radius_mm),
            Stage::Leaflet => {
                let bp = self
                    .accepted(Stage::BloodPool)
                    .ok_or_else(|| Error::Conflict("blood pool is not accepted".into()))?;
                init_shell_with(&bp.to_mask(), self.settings.shell_distance_mm, self.settings.shell_side)
            }
        }
    }

    pub fn undo(&mut self) -> Result<StepSummary> {
        let stage = match self.stage {
            SessionStage::BpActive => Stage::BloodPool,
            SessionStage::LeafletActive => Stage::Leaflet,
            s => return Err(Error::Conflict(format!("nothing to undo in stage {s}"))),
        };
        self.stack_mut(stage).pop();
        if self.stack(stage).is_empty() {
            self.stage = match stage {
                Stage::BloodPool => SessionStage::AnnulusSet,
                Stage::Leaflet => SessionStage::BpAccepted,
            };
        }
        Ok(self.summary_of(StepStatus::Ok))
    }

    pub fn accept(&mut self, stage: Stage) -> Result<SessionStage> {
        let next = match (stage, self.stage) {
            (Stage::BloodPool, SessionStage::BpActive) => SessionStage::BpAccepted,
            (Stage::Leaflet, SessionStage::LeafletActive) => SessionStage::LeafletAccepted,
            (_, s) => return Err(Error::Conflict(format!("cannot accept {stage} in stage {s}"))),
        };
        if self.stack(stage).is_empty() {
            return Err(Error::Conflict(format!("no {stage} snapshot to accept")));
        }
        self.stage = next;
        Ok(next)
    }

    fn proximal_options(&self) -> ProximalOptions {
        self.settings
            .proximal
            .unwrap_or_else(|| ProximalOptions::for_geometry(self.volume.geometry()))
    }

    pub fn extract_surface(&mut self) -> Result<SurfaceSummary> {
        if !matches!(self.stage, SessionStage::LeafletAccepted | SessionStage::SurfaceReady) {
            return Err(Error::Conflict(format!(
                "surface extraction needs an accepted leaflet (stage {})",
                self.stage
            )));
        }
        let bp = self.accepted(Stage::BloodPool).expect("accepted before leaflet");
        let leaf = self.accepted(Stage::Leaflet).expect("stage checked");
        let annulus = self.annulus.as_ref().expect("set before stepping");
        let bloodpool = marching_cubes(bp, 0.0)?;
        let leaflet = marching_cubes(leaf, 0.0)?;
        let proximal = extract_proximal(&leaflet, &bloodpool, annulus, &self.proximal_options())?;
        let set = SurfaceSet {
            bloodpool,
            leaflet,
            proximal,
        };
        let summary = surface_summary(&set);
        self.surfaces = Some(set);
        self.stage = SessionStage::SurfaceReady;
        Ok(summary)
    }

    pub fn summary(&self) -> SessionSummary {
        let stack_summary = |stage: Stage| {
            let stack = self.stack(stage);
            let top = stack.last();
            StackSummary {
                snapshots: stack.len(),
                iterations_done: top.map_or(0, |s| s.state.iterations_done()),
                inside_volume_mm3: top.map_or(0.0, |s| s.state.inside_volume_mm3()),
                checksum: top.map(|s| s.state.checksum()),
                params: top.map(|s| s.params),
            }
        };
        let g = self.volume.geometry();
        SessionSummary {
            id: self.id.clone(),
            stage: self.stage,
            dims: g.dims,
            spacing: g.spacing,
            volume_checksum: self.volume.checksum(),
            annulus: self.annulus.as_ref().map(|a| a.summary()),
            bloodpool: stack_summary(Stage::BloodPool),
            leaflet: stack_summary(Stage::Leaflet),
            surfaces: self.surfaces.as_ref().map(surface_summary),
            beta: self.speed.as_ref().map(|s| s.beta()),
        }
    }

    /// Renders one slice with the 1st-99th percentile intensity window.
    pub fn render_slice(&self, axis: SliceAxis, index: usize, overlay: Overlay) -> Result<SliceImage> {
        let g = self.volume.geometry();
        let d = axis.dim();
        if index >= g.dims[d] {
            return Err(Error::NotFound(format!(
                "slice {index} on axis {axis:?} (size {})",
                g.dims[d]
            )));
        }
        let (cu, cv) = axis.image_axes();
        let (w, h) = (g.dims[cu], g.dims[cv]);
        let voxel = |x: usize, y: usize| {
            let mut ijk = [0usize; 3];
            ijk[d] = index;
            ijk[cu] = x;
            ijk[cv] = y;
            g.index(ijk[0], ijk[1], ijk[2])
        };
        let (lo, hi) = self.window;
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        let data = self.volume.data();
        let gray: Vec<u8> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| (((data[voxel(x, y)] - lo) * scale).clamp(0.0, 255.0)).round() as u8)
            .collect();
        if !overlay.any() {
            return Ok(SliceImage {
                width: w,
                height: h,
                channels: 1,
                pixels: gray,
            });
        }
        let mut rgba: Vec<u8> = gray.iter().flat_map(|&v| [v, v, v, 255]).collect();
        let mut paint = |x: usize, y: usize, c: [u8; 4]| {
            let o = (y * w + x) * 4;
            rgba[o..o + 4].copy_from_slice(&c);
        };
        let contour = |state: &LevelSetState| -> Vec<(usize, usize)> {
            let phi = state.phi();
            let inside = |x: usize, y: usize| phi[voxel(x, y)] < 0.0;
            let mut out = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !inside(x, y) {
                        continue;
                    }
                    let edge = (x > 0 && !inside(x - 1, y))
                        || (x + 1 < w && !inside(x + 1, y))
                        || (y > 0 && !inside(x, y - 1))
                        || (y + 1 < h && !inside(x, y + 1));
                    if edge {
                        out.push((x, y));
                    }
                }
            }
            out
        };
        if overlay.previous {
            if let Some(prev) = self.previous() {
                for (x, y) in contour(prev) {
                    paint(x, y, PREVIOUS_RGBA);
                }
            }
        }
        if overlay.current {
            if let Some(cur) = self.current() {
                for (x, y) in contour(cur) {
                    paint(x, y, CURRENT_RGBA);
                }
            }
        }
        if overlay.annulus {
            if let Some(model) = &self.annulus {
                for (x, y) in annulus_crossings(model, g, axis, index) {
                    for (dx, dy) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                        let (px, py) = (x + dx, y + dy);
                        if px >= 0 && py >= 0 && (px as usize) < w && (py as usize) < h {
                            paint(px as usize, py as usize, ANNULUS_RGBA);
                        }
                    }
                }
            }
        }
        Ok(SliceImage {
            width: w,
            height: h,
            channels: 4,
            pixels: rgba,
        })
    }

    pub fn get_slice(&self, axis: SliceAxis, index: usize, overlay: Overlay) -> Result<Vec<u8>> {
        self.render_slice(axis, index, overlay)?.to_png()
    }

    pub fn export(&self, what: ExportKind, format: ExportFormat) -> Result<ExportPayload> {
        let stem = what.file_stem();
        match (what.is_mask(), format) {
            (true, ExportFormat::Nrrd) => {
                let stage = if what == ExportKind::BpMask {
                    Stage::BloodPool
                } else {
                    Stage::Leaflet
                };
                let state = self
                    .accepted(stage)
                    .ok_or_else(|| Error::NotFound(format!("{stem}: the {stage} stage is not accepted")))?;
                Ok(ExportPayload {
                    bytes: write_mask(&state.to_mask(), Encoding::Raw)?,
                    content_type: "application/octet-stream",
                    file_name: format!("{stem}.nrrd"),
                })
            }
            (false, ExportFormat::Mesh(mf)) => {
                let set = self
                    .surfaces
                    .as_ref()
                    .ok_or_else(|| Error::NotFound(format!("{stem}: surfaces have not been extracted")))?;
                let mesh = if what == ExportKind::LeafletMesh {
                    &set.leaflet
                } else {
                    &set.proximal
                };
                Ok(ExportPayload {
                    bytes: encode_mesh(mesh, mf)?,
                    content_type: match mf {
                        MeshFormat::StlBinary => "model/stl",
                        MeshFormat::PlyAscii => "text/plain",
                    },
                    file_name: format!("{stem}.{}", mf.extension()),
                })
            }
            (true, _) => Err(Error::invalid(format!("{stem} is exported as nrrd"))),
            (false, _) => Err(Error::invalid(format!("{stem} is exported as stl or ply"))),
        }
    }

    /// Writes the whole session as a zip of NRRD files plus `manifest.json`.
    pub fn save_bytes(&self) -> Result<Vec<u8>> {
        let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
        let opts = zip::write::SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .last_modified_time(zip::DateTime::default());
        let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
            zip.start_file(name, opts).map_err(archive_err)?;
            zip.write_all(bytes)?;
            Ok(())
        };
        put("volume.nrrd", &write_nrrd(&self.volume, Encoding::Raw)?)?;
        let mut stacks = Vec::new();
        for (tag, stack) in [("bloodpool", &self.bloodpool), ("leaflet", &self.leaflet)] {
            let mut entries = Vec::new();
            for (n, snap) in stack.iter().enumerate() {
                let file = format!("{tag}_{n:03}.nrrd");
                put(&file, &write_nrrd(&snap.state.to_volume(), Encoding::Raw)?)?;
                entries.push(SnapshotEntry {
                    file,
                    params: snap.params,
                    state: snap.state.meta(),
                });
            }
            stacks.push(entries);
        }
        let leaflet = stacks.pop().expect("two stacks");
        let bloodpool = stacks.pop().expect("two stacks");
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            id: self.id.clone(),
            stage: self.stage,
            settings: self.settings.clone(),
            annulus: self.annulus_def.as_ref().map(|d| serde_json::from_str(&d.to_json())).transpose()?,
            bloodpool,
            leaflet,
        };
        put("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(zip.finish().map_err(archive_err)?.into_inner())
    }

    pub fn load_bytes(bytes: &[u8]) -> Result<Self> {
        let mut archive = zip::ZipArchive::new(Cursor::new(bytes)).map_err(archive_err)?;
        let mut read = |name: &str| -> Result<Vec<u8>> {
            let mut f = archive
                .by_name(name)
                .map_err(|e| Error::Archive(format!("{name}: {e}")))?;
            let mut buf = Vec::new();
            f.read_to_end(&mut buf)?;
            Ok(buf)
        };
        let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(Error::Archive(format!(
                "unsupported session file {} v{}",
                manifest.format, manifest.version
            )));
        }
        let volume = read_nrrd(&read("volume.nrrd")?)?.volume;
        let mut session = Session::new(volume, manifest.settings);
        session.id = manifest.id;
        if let Some(v) = manifest.annulus {
            let def = AnnulusDefinition::from_json(&v.to_string())?;
            let probe = def.resolved_probe_dir(Some(session.volume.geometry()));
            session.annulus = Some(fit_annulus_with_probe(&def, probe)?);
            session.annulus_def = Some(def);
        }
        let geometry = session.volume.geometry().clone();
        for (stage, entries) in [(Stage::BloodPool, manifest.bloodpool), (Stage::Leaflet, manifest.leaflet)] {
            for e in entries {
                let phi = read_nrrd(&read(&e.file)?)?.volume;
                geometry.ensure_same_grid(phi.geometry(), &e.file)?;
                let state = LevelSetState::from_meta(geometry.clone(), phi.into_data(), e.state)?;
                session.stack_mut(stage).push(Snapshot {
                    state,
                    params: e.params,
                });
            }
        }
        session.stage = manifest.stage;
        session.check_consistency()?;
        if !session.bloodpool.is_empty() {
            session.ensure_speed()?;
        }
        if session.stage == SessionStage::SurfaceReady {
            session.stage = SessionStage::LeafletAccepted;
            session.extract_surface()?;
        }
        Ok(session)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.save_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_bytes(&std::fs::read(path)?)
    }

    fn check_consistency(&self) -> Result<()> {
        use SessionStage::*;
        let (bp, lf) = (self.bloodpool.len(), self.leaflet.len());
        let ok = match self.stage {
            New | VolumeLoaded => self.annulus.is_none() && bp == 0 && lf == 0,
            AnnulusSet => self.annulus.is_some() && bp == 0 && lf == 0,
            BpActive | BpAccepted => self.annulus.is_some() && bp > 0 && lf == 0,
            LeafletActive | LeafletAccepted | SurfaceReady => self.annulus.is_some() && bp > 0 && lf > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Archive(format!("snapshot stacks do not match stage {}", self.stage)))
        }
    }
}

fn surface_summary(set: &SurfaceSet) -> SurfaceSummary {
    SurfaceSummary {
        bloodpool: set.bloodpool.summary(),
        leaflet: set.leaflet.summary(),
        proximal: set.proximal.summary(),
    }
}

/// Image pixels where the annulus curve meets slice `index`: samples within
/// half a voxel of the slice plus segment crossings of the plane.
fn annulus_crossings(
    model: &AnnulusModel,
    g: &crate::volume::Geometry,
    axis: SliceAxis,
    index: usize,
) -> Vec<(i64, i64)> {
    let d = axis.dim();
    let (cu, cv) = axis.image_axes();
    let plane = index as f64;
    let pts: Vec<Vec3> = model.samples.iter().map(|&p| g.world_to_index(p)).collect();
    let pixel = |p: Vec3| (p[cu].round() as i64, p[cv].round() as i64);
    let n = pts.len();
    let mut out = Vec::new();
    for m in 0..n {
        let a = pts[m];
        let b = pts[(m + 1) % n];
        let (da, db) = (a[d] - plane, b[d] - plane);
        if da.abs() <= 0.5 {
            out.push(pixel(a));
        }
        if da != 0.0 && db != 0.0 && da.signum() != db.signum() {
            out.push(pixel(a + (b - a) * (da / (da - db))));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn archive_err(e: zip::result::ZipError) -> Error {
    Error::Archive(e.to_string())
}

const MANIFEST_FORMAT: &str = "mvseg-session";
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    file: String,
    params: ContourParams,
    state: StateMeta,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    id: String,
    stage: SessionStage,
    settings: SessionSettings,
    annulus: Option<serde_json::Value>,
    bloodpool: Vec<SnapshotEntry>,
    leaflet: Vec<SnapshotEntry>,
}
