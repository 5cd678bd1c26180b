//! `tdoa-dtb` command line: simulate → fit-noise → calibrate → position →
//! evaluate, plus `rereference` for DTB tables.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to
//! stderr; results only to files.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::differencing::{MissingReference, ReferencePolicy};
use crate::dtb::{read_dtb, rereference_dtb, samples_csv, write_dtb};
use crate::ekf::{run_filter, EkfConfig};
use crate::geometry::NodeId;
use crate::ingestion::{
    load_epochs, load_epochs_for, load_nodes, load_session, load_trajectory, LoadOptions, UnitMode,
};
use crate::metrics::{
    evaluate, histogram_csv, metrics_json, read_residuals, read_track, residual_histogram, residuals_csv,
    residuals_from_results, track_csv, track_from_results, true_error, HISTOGRAM_BIN_M,
};
use crate::noise_model::{
    estimate_noise_points, fit_noise_model, noise_points_csv, read_noise_model, write_noise_model,
    DEFAULT_MISSING_RSRP_SIGMA,
};
use crate::pipeline::calibrate;
use crate::synthetic::{generate, Scenario};
use crate::table::write_text;

pub const MANIFEST_NAME: &str = "manifest.json";

type BoxError = Box<dyn std::error::Error>;

#[derive(Debug, Parser)]
#[command(name = "tdoa-dtb", version, about = "DTB calibration and DTB-corrected TDoA positioning")]
struct Cli {
    /// Unit of the `toa` column in ToA files.
    #[arg(long, global = true, default_value = "meters")]
    unit: UnitMode,
    /// Rows within this many seconds join the same epoch.
    #[arg(long = "epoch-tol", global = true, default_value_t = 1e-3)]
    epoch_tol: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic session from a scenario file.
    Simulate(SimulateArgs),
    /// Estimate ranging noise versus RSRP and fit the noise model.
    FitNoise(FitNoiseArgs),
    /// Estimate the DTB table of a session with a known trajectory.
    Calibrate(CalibrateArgs),
    /// Run the DTB-corrected TDoA filter.
    Position(PositionArgs),
    /// Compute accuracy metrics for a filtered track.
    Evaluate(EvaluateArgs),
    /// Express a DTB table against another reference node.
    Rereference(RereferenceArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct FitNoiseArgs {
    #[arg(long)]
    toa: PathBuf,
    /// Detrending window, seconds.
    #[arg(long, default_value_t = 2.0)]
    window: f64,
    /// RSRP bin width, dB.
    #[arg(long, default_value_t = 2.0)]
    bin: f64,
    #[arg(long)]
    out: PathBuf,
    /// Scatter of per-bin noise estimates; defaults to noise_points.csv next to --out.
    #[arg(long)]
    points: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    toa: PathBuf,
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    /// `auto` picks the node present in most epochs (ties: smallest id).
    /// Epochs without the reference are dropped.
    #[arg(long = "ref-node", default_value = "auto")]
    ref_node: ReferencePolicy,
    #[arg(long)]
    out: PathBuf,
    /// Session label stored in the table; defaults to the ToA file stem.
    #[arg(long)]
    session: Option<String>,
    /// Discard samples beyond k standard deviations before averaging.
    #[arg(long = "trim-sigma")]
    trim_sigma: Option<f64>,
    /// Per-epoch DTB series output.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PositionArgs {
    #[arg(long)]
    toa: PathBuf,
    #[arg(long)]
    nodes: PathBuf,
    #[arg(long)]
    dtb: PathBuf,
    #[arg(long)]
    noise: PathBuf,
    /// Reference trajectory; when given, the true error is reported on stderr.
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    residuals: PathBuf,
    /// Difference against this node instead of the table's reference.
    #[arg(long = "ref-node")]
    ref_node: Option<NodeId>,
    /// Epochs lacking the reference: `drop` them, or `rereference` through
    /// the smallest-id node present (mixes references within the session).
    #[arg(long = "missing-ref", default_value = "drop")]
    missing_ref: MissingReference,
    /// Process noise density along x, m/sqrt(s).
    #[arg(long = "sigma-x", default_value_t = 0.5)]
    sigma_x: f64,
    #[arg(long = "sigma-y", default_value_t = 0.5)]
    sigma_y: f64,
    /// Innovation gate in predicted sigmas.
    #[arg(long, default_value_t = 5.0)]
    gate: f64,
    #[arg(long = "min-obs", default_value_t = 1)]
    min_obs: usize,
    #[arg(long = "rover-height", default_value_t = 0.0)]
    rover_height: f64,
    /// ToA sigma for observations without RSRP, meters.
    #[arg(long = "missing-rsrp-sigma", default_value_t = DEFAULT_MISSING_RSRP_SIGMA)]
    missing_rsrp_sigma: f64,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    track: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    residuals: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Residual histogram (0.25 m bins).
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RereferenceArgs {
    #[arg(long)]
    dtb: PathBuf,
    #[arg(long = "new-ref")]
    new_ref: NodeId,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first) and runs the command.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

fn run(cli: &Cli) -> Result<(), BoxError> {
    let opts = LoadOptions { unit: cli.unit, epoch_tolerance: cli.epoch_tol };
    let global = json!({ "unit": format!("{:?}", cli.unit).to_lowercase(), "epoch_tol": cli.epoch_tol });
    match &cli.command {
        Command::Simulate(a) => simulate(a, cli.unit, global),
        Command::FitNoise(a) => fit_noise(a, opts, global),
        Command::Calibrate(a) => calibrate_cmd(a, opts, global),
        Command::Position(a) => position(a, opts, global),
        Command::Evaluate(a) => evaluate_cmd(a, global),
        Command::Rereference(a) => rereference(a, global),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn simulate(a: &SimulateArgs, unit: UnitMode, global: Value) -> Result<(), BoxError> {
    let mut scenario = Scenario::load(&a.scenario)?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    let session = generate(&scenario)?;
    session.write(&a.out_dir, unit)?;
    let outputs: Vec<PathBuf> =
        ["toa.csv", "nodes.csv", "traj.csv", "truth_dtb.csv"].iter().map(|f| a.out_dir.join(f)).collect();
    record_run(
        "simulate",
        json!({ "scenario": path_str(&a.scenario) }),
        merge(global, json!({ "seed": scenario.seed })),
        &outputs,
    )
}

fn fit_noise(a: &FitNoiseArgs, opts: LoadOptions, global: Value) -> Result<(), BoxError> {
    let epochs = load_epochs(&a.toa, opts)?;
    let points = estimate_noise_points(&epochs, a.window, a.bin)?;
    let points_path = a.points.clone().unwrap_or_else(|| sibling(&a.out, "noise_points.csv"));
    write_text(&points_path, &noise_points_csv(&points))?;
    let model = fit_noise_model(&points)?;
    write_noise_model(&a.out, &model)?;
    eprintln!("fitted k = {:.3} m·dB, rsrp0 = {:.2} dBm from {} bins", model.k, model.rsrp0, points.len());
    record_run(
        "fit-noise",
        json!({ "toa": path_str(&a.toa) }),
        merge(global, json!({ "window": a.window, "bin": a.bin })),
        &[a.out.clone(), points_path],
    )
}

fn calibrate_cmd(a: &CalibrateArgs, opts: LoadOptions, global: Value) -> Result<(), BoxError> {
    let session = load_session(&a.toa, &a.nodes, &a.traj, opts)?;
    let label = a
        .session
        .clone()
        .unwrap_or_else(|| a.toa.file_stem().map_or_else(|| "session".into(), |s| s.to_string_lossy().into_owned()));
    let cal = calibrate(&session.epochs, &session.catalog, &session.trajectory, a.ref_node, &label, a.trim_sigma)?;
    write_dtb(&a.out, &cal.table)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.samples {
        write_text(p, &samples_csv(&cal.samples))?;
        outputs.push(p.clone());
    }
    if cal.dropped_epochs > 0 {
        eprintln!("dropped {} epochs without reference node {}", cal.dropped_epochs, cal.table.ref_node());
    }
    if cal.uncovered_epochs > 0 {
        eprintln!("skipped {} epochs outside the reference trajectory", cal.uncovered_epochs);
    }
    let ref_node = match a.ref_node {
        ReferencePolicy::MostVisible => "auto".to_string(),
        ReferencePolicy::Fixed(id) => id.to_string(),
    };
    record_run(
        "calibrate",
        json!({ "toa": path_str(&a.toa), "nodes": path_str(&a.nodes), "traj": path_str(&a.traj) }),
        merge(global, json!({ "ref_node": ref_node, "session": label, "trim_sigma": a.trim_sigma })),
        &outputs,
    )
}

fn position(a: &PositionArgs, opts: LoadOptions, global: Value) -> Result<(), BoxError> {
    let catalog = load_nodes(&a.nodes)?;
    let epochs = load_epochs_for(&a.toa, &catalog, opts)?;
    let mut dtb = read_dtb(&a.dtb)?;
    if let Some(r) = a.ref_node {
        dtb = rereference_dtb(&dtb, r)?;
    }
    let noise = read_noise_model(&a.noise)?.with_missing_rsrp_sigma(a.missing_rsrp_sigma);
    let cfg = EkfConfig {
        sigma_x: a.sigma_x,
        sigma_y: a.sigma_y,
        min_obs_per_update: a.min_obs,
        innovation_gate: a.gate,
        rover_height: a.rover_height,
        missing_reference: a.missing_ref,
    };
    let results = run_filter(&epochs, &dtb, &catalog, &noise, &cfg)?;
    let track = track_from_results(&results);
    write_text(&a.out, &track_csv(&track))?;
    write_text(&a.residuals, &residuals_csv(&residuals_from_results(&results)))?;
    if let Some(traj) = &a.traj {
        let traj = load_trajectory(traj)?;
        let (mean, rms) = true_error(&track, &traj)?;
        eprintln!("true error: mean {mean:.3} m, rms {rms:.3} m over {} epochs", track.len());
    }
    let mut inputs = json!({
        "toa": path_str(&a.toa), "nodes": path_str(&a.nodes),
        "dtb": path_str(&a.dtb), "noise": path_str(&a.noise),
    });
    if let Some(t) = &a.traj {
        inputs["traj"] = json!(path_str(t));
    }
    let missing_ref = match a.missing_ref {
        MissingReference::Drop => "drop",
        MissingReference::Rereference => "rereference",
    };
    record_run(
        "position",
        inputs,
        merge(
            global,
            json!({
                "ref_node": dtb.ref_node().0, "missing_ref": missing_ref,
                "sigma_x": a.sigma_x, "sigma_y": a.sigma_y, "gate": a.gate,
                "min_obs": a.min_obs, "rover_height": a.rover_height,
                "missing_rsrp_sigma": a.missing_rsrp_sigma,
            }),
        ),
        &[a.out.clone(), a.residuals.clone()],
    )
}

fn evaluate_cmd(a: &EvaluateArgs, global: Value) -> Result<(), BoxError> {
    let track = read_track(&a.track)?;
    let traj = load_trajectory(&a.traj)?;
    let residuals = read_residuals(&a.residuals)?;
    let m = evaluate(&track, &traj, &residuals)?;
    write_text(&a.out, &metrics_json(&m))?;
    let mut outputs = vec![a.out.clone()];
    if let Some(h) = &a.histogram {
        write_text(h, &histogram_csv(&residual_histogram(&residuals, HISTOGRAM_BIN_M)))?;
        outputs.push(h.clone());
    }
    record_run(
        "evaluate",
        json!({ "track": path_str(&a.track), "traj": path_str(&a.traj), "residuals": path_str(&a.residuals) }),
        global,
        &outputs,
    )
}

fn rereference(a: &RereferenceArgs, global: Value) -> Result<(), BoxError> {
    let table = read_dtb(&a.dtb)?;
    write_dtb(&a.out, &rereference_dtb(&table, a.new_ref)?)?;
    record_run(
        "rereference",
        json!({ "dtb": path_str(&a.dtb) }),
        merge(global, json!({ "new_ref": a.new_ref.0 })),
        std::slice::from_ref(&a.out),
    )
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Some(b), Value::Object(e)) = (base.as_object_mut(), extra) {
        b.extend(e);
    }
    base
}

/// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` overrides the clock.
fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()).unwrap_or_else(|| {
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
    })
}

/// Adds this invocation to the single manifest of every output directory,
/// replacing any previous entry for the same subcommand.
fn record_run(subcommand: &str, inputs: Value, parameters: Value, outputs: &[PathBuf]) -> Result<(), BoxError> {
    let mut dirs: BTreeMap<PathBuf, Vec<String>> = BTreeMap::new();
    for out in outputs {
        let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = out.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        dirs.entry(dir.to_path_buf()).or_default().push(name);
    }
    for (dir, files) in dirs {
        let path = dir.join(MANIFEST_NAME);
        let mut manifest: Value = std::fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .filter(Value::is_object)
            .unwrap_or_else(|| json!({ "tool": "tdoa-dtb", "runs": {} }));
        manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
        if !manifest["runs"].is_object() {
            manifest["runs"] = json!({});
        }
        manifest["runs"][subcommand] = json!({
            "inputs": inputs,
            "parameters": parameters,
            "outputs": files,
            "timestamp_unix": timestamp(),
        });
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_text(&path, &text)?;
    }
    Ok(())
}
