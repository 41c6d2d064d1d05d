use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvseg::error::Error;
use mvseg::mesh::MeshFormat;
use mvseg::phantom::PhantomSpec;
use mvseg::pipeline::{cmd_evaluate, cmd_phantom, cmd_segment, RunConfig};
use mvseg::service::{serve, ServiceConfig};

/// Mitral valve leaflet segmentation with geodesic active contours.
///
/// Every flag can also be set through an `MVSEG_*` environment variable.
#[derive(Parser)]
#[command(name = "mvseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run both contour stages and write masks, meshes and a run manifest.
    Segment(SegmentArgs),
    /// Compare a prediction with a ground truth (both meshes or both masks).
    Evaluate(EvaluateArgs),
    /// Write a synthetic volume with ground truth and an annulus file.
    Phantom(PhantomArgs),
    /// Serve the interactive session API over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SegmentArgs {
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long, env = "MVSEG_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "MVSEG_INPUT")]
    input: Option<PathBuf>,
    #[arg(long, env = "MVSEG_ANNULUS")]
    annulus: Option<PathBuf>,
    #[arg(long, env = "MVSEG_BP_ITERS", value_parser = clap::value_parser!(u32).range(1..))]
    bp_iters: Option<u32>,
    #[arg(long, env = "MVSEG_LEAFLET_ITERS", value_parser = clap::value_parser!(u32).range(1..))]
    leaflet_iters: Option<u32>,
    #[arg(long, env = "MVSEG_OUT")]
    out: Option<PathBuf>,
    /// Mesh format: stl or ply.
    #[arg(long, env = "MVSEG_FORMAT")]
    format: Option<MeshFormat>,
    /// Also write the final phi of each stage.
    #[arg(long, env = "MVSEG_DUMP_PHI")]
    dump_phi: bool,
    /// Confine the leaflet stage to a cylinder around the annulus.
    #[arg(long, env = "MVSEG_ROI_CLAMP")]
    roi_clamp: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the JSON report; it is always printed.
    #[arg(long, env = "MVSEG_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    /// TOML or JSON phantom spec; flags override its values.
    #[arg(long, env = "MVSEG_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "MVSEG_OUT", default_value = "phantom")]
    out: PathBuf,
    #[arg(long, env = "MVSEG_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "MVSEG_FORMAT", default_value = "stl")]
    format: MeshFormat,
    /// Cubic grid size.
    #[arg(long)]
    size: Option<usize>,
    /// Isotropic spacing in mm.
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    atrium_radius: Option<f64>,
    #[arg(long)]
    leaflet_thickness: Option<f64>,
}

#[derive(Args)]
struct ServeArgs {
    /// TOML or JSON service configuration.
    #[arg(long, env = "MVSEG_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured bind address, e.g. 127.0.0.1:8080.
    #[arg(long, env = "MVSEG_BIND")]
    bind: Option<String>,
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn failure(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn load_spec(path: &Path) -> mvseg::Result<PhantomSpec> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

fn segment(args: SegmentArgs) -> ExitCode {
    let mut config = match &args.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => return usage(e),
        },
        None => RunConfig::default(),
    };
    config.input = args.input.or(config.input);
    config.annulus = args.annulus.or(config.annulus);
    config.bp_iters = args.bp_iters.unwrap_or(config.bp_iters);
    config.leaflet_iters = args.leaflet_iters.unwrap_or(config.leaflet_iters);
    config.out = args.out.unwrap_or(config.out);
    config.format = args.format.unwrap_or(config.format);
    config.dump_phi |= args.dump_phi;
    config.roi_clamp |= args.roi_clamp;
    match cmd_segment(&config) {
        Ok(m) => {
            log::info!(
                "wrote {} artifacts to {} in {:.1} s",
                m.artifacts.len(),
                config.out.display(),
                m.timings_s.get("total").copied().unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn evaluate(args: EvaluateArgs) -> ExitCode {
    match cmd_evaluate(&args.pred, &args.gt) {
        Ok(report) => {
            let text = serde_json::to_string_pretty(&report).expect("plain data");
            println!("{text}");
            if let Some(out) = args.out {
                if let Err(e) = std::fs::write(&out, text) {
                    return failure(format!("{}: {e}", out.display()));
                }
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::InvalidArgument(_)) => usage(e),
        Err(e) => failure(e),
    }
}

fn phantom(args: PhantomArgs) -> ExitCode {
    let mut spec = match &args.config {
        Some(p) => match load_spec(p) {
            Ok(s) => s,
            Err(e) => return usage(e),
        },
        None => PhantomSpec::default(),
    };
    if let Some(n) = args.size {
        spec.dims = [n; 3];
    }
    if let Some(h) = args.spacing {
        spec.spacing = [h; 3];
    }
    spec.rng_seed = args.seed.unwrap_or(spec.rng_seed);
    spec.noise_sigma = args.noise_sigma.unwrap_or(spec.noise_sigma);
    spec.atrium_radius = args.atrium_radius.unwrap_or(spec.atrium_radius);
    spec.leaflet_thickness = args.leaflet_thickness.unwrap_or(spec.leaflet_thickness);
    if let Err(e) = spec.validate() {
        return usage(e);
    }
    match cmd_phantom(&spec, &args.out, args.format) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("plain data"));
            ExitCode::SUCCESS
        }
        Err(e) => failure(e),
    }
}

fn serve_cmd(args: ServeArgs) -> ExitCode {
    let mut config = match &args.config {
        Some(p) => match ServiceConfig::load(p) {
            Ok(c) => c,
            Err(e) => return usage(e),
        },
        None => ServiceConfig::default(),
    };
    if let Some(b) = args.bind {
        config.bind = b;
    }
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => return failure(e),
    };
    match runtime.block_on(serve(config)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::InvalidArgument(_)) => usage(e),
        Err(e) => failure(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Segment(a) => segment(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Phantom(a) => phantom(a),
        Command::Serve(a) => serve_cmd(a),
    }
}
