//! Loading ToA sessions, node catalogs and reference trajectories from CSV.
//!
//! File layouts:
//!
//! | file       | header                          |
//! |------------|---------------------------------|
//! | ToA        | `time,node_id,toa[,rsrp]`       |
//! | nodes      | `node_id,x,y[,z]`               |
//! | trajectory | `time,x,y[,z]`                  |
//!
//! `toa` is either meters or seconds of light travel, selected with
//! [`UnitMode`]. Rows are grouped into [`Epoch`]s by timestamp proximity.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, NodeCatalog, NodeId, Position};
use crate::table::{write_text, CsvFile, ParseError};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Pseudoranges beyond this after a seconds-to-meters conversion indicate a
/// file that was actually written in meters (or nanoseconds).
pub const MAX_PLAUSIBLE_RANGE_M: f64 = 1.0e6;

pub const DEFAULT_EPOCH_TOLERANCE_S: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}:{line}: node {node} is not in the node catalog")]
    UnknownNode { path: String, line: u64, node: NodeId },
    #[error(
        "{path}:{line}: toa {value} s converts to {meters} m, beyond any plausible range (is the file in meters?)"
    )]
    Unit { path: String, line: u64, value: f64, meters: f64 },
    #[error("node {node} observed twice in the epoch at t={time}")]
    DuplicateObservation { node: NodeId, time: f64 },
    #[error("invalid reference trajectory: {0}")]
    Trajectory(String),
    #[error("invalid node catalog: {0}")]
    Catalog(#[from] GeometryError),
    #[error("t={t} outside reference trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_path_buf(), source }
}

/// How the `toa` column is expressed on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitMode {
    #[default]
    Meters,
    Seconds,
}

impl FromStr for UnitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "meters" => Ok(Self::Meters),
            "seconds" => Ok(Self::Seconds),
            other => Err(format!("unknown unit `{other}` (expected meters|seconds)")),
        }
    }
}

/// One node's pseudorange at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToaObservation {
    pub time: f64,
    pub node: NodeId,
    /// Meters.
    pub pseudorange: f64,
    /// Received power, dBm.
    pub rsrp: Option<f64>,
}

/// Observations sharing (approximately) one timestamp, at most one per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub time: f64,
    pub observations: Vec<ToaObservation>,
}

impl Epoch {
    pub fn get(&self, node: NodeId) -> Option<&ToaObservation> {
        self.observations.iter().find(|o| o.node == node)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.get(node).is_some()
    }
}

/// Time-ordered ground-truth rover positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    samples: Vec<(f64, Position)>,
}

impl ReferenceTrajectory {
    pub fn new(samples: Vec<(f64, Position)>) -> Result<Self, IngestError> {
        if samples.len() < 2 {
            return Err(IngestError::Trajectory(format!("need at least 2 samples, got {}", samples.len())));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(IngestError::Trajectory(format!(
                    "time not strictly increasing at sample {} ({} after {})",
                    i + 1,
                    w[1].0,
                    w[0].0
                )));
            }
        }
        if let Some((t, _)) = samples.iter().find(|(t, p)| !t.is_finite() || !p.is_finite()) {
            return Err(IngestError::Trajectory(format!("non-finite sample at t={t}")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Position)] {
        &self.samples
    }

    pub fn start(&self) -> f64 {
        self.samples[0].0
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].0
    }

    pub fn covers(&self, t: f64) -> bool {
        t >= self.start() && t <= self.end()
    }

    /// Piecewise-linear position at `t`.
    pub fn interpolate(&self, t: f64) -> Result<Position, IngestError> {
        if !self.covers(t) {
            return Err(IngestError::OutOfRange { t, start: self.start(), end: self.end() });
        }
        // first sample with time >= t
        let hi = self.samples.partition_point(|(ts, _)| *ts < t);
        let (t1, p1) = self.samples[hi];
        if t1 == t || hi == 0 {
            return Ok(p1);
        }
        let (t0, p0) = self.samples[hi - 1];
        let f = (t - t0) / (t1 - t0);
        Ok(Position::new(p0.x + f * (p1.x - p0.x), p0.y + f * (p1.y - p0.y), p0.z + f * (p1.z - p0.z)))
    }
}

/// Parsing knobs shared by every loader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub unit: UnitMode,
    /// Rows whose timestamps lie within this many seconds of an epoch's first
    /// row join that epoch.
    pub epoch_tolerance: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { unit: UnitMode::Meters, epoch_tolerance: DEFAULT_EPOCH_TOLERANCE_S }
    }
}

/// A fully loaded measurement session.
#[derive(Debug, Clone)]
pub struct Session {
    pub epochs: Vec<Epoch>,
    pub catalog: NodeCatalog,
    pub trajectory: ReferenceTrajectory,
}

/// A ToA row with its source line, before grouping.
#[derive(Debug, Clone, Copy)]
struct ToaRow {
    line: u64,
    obs: ToaObservation,
}

fn read_toa_rows(path: &Path, unit: UnitMode) -> Result<(String, Vec<ToaRow>), IngestError> {
    let mut csv = CsvFile::open(path).map_err(io_err(path))?;
    csv.require(&["time", "node_id", "toa"])?;
    let label = csv.path().to_string();
    let mut rows = Vec::new();
    let mut unit_error = None;
    csv.for_each_row(|row| {
        let time = row.f64("time")?;
        let node: NodeId = row.parse("node_id")?;
        let raw = row.f64("toa")?;
        let rsrp = row.opt_f64("rsrp")?;
        let pseudorange = match unit {
            UnitMode::Meters => raw,
            UnitMode::Seconds => {
                let m = raw * SPEED_OF_LIGHT;
                if m.abs() > MAX_PLAUSIBLE_RANGE_M && unit_error.is_none() {
                    unit_error =
                        Some(IngestError::Unit { path: label.clone(), line: row.line(), value: raw, meters: m });
                }
                m
            }
        };
        rows.push(ToaRow { line: row.line(), obs: ToaObservation { time, node, pseudorange, rsrp } });
        Ok(())
    })?;
    if let Some(e) = unit_error {
        return Err(e);
    }
    Ok((label, rows))
}

/// Reads the ToA file and groups its rows into epochs (no catalog check).
pub fn load_epochs(path: &Path, opts: LoadOptions) -> Result<Vec<Epoch>, IngestError> {
    let (_, rows) = read_toa_rows(path, opts.unit)?;
    group_epochs(rows.into_iter().map(|r| r.obs).collect(), opts.epoch_tolerance)
}

/// Sorts observations by time and clusters them: a row joins the current
/// epoch when it lies within `tolerance` of that epoch's first timestamp.
pub fn group_epochs(mut observations: Vec<ToaObservation>, tolerance: f64) -> Result<Vec<Epoch>, IngestError> {
    observations.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut epochs: Vec<Epoch> = Vec::new();
    for obs in observations {
        match epochs.last_mut() {
            Some(epoch) if obs.time - epoch.time <= tolerance => {
                if epoch.contains(obs.node) {
                    return Err(IngestError::DuplicateObservation { node: obs.node, time: epoch.time });
                }
                epoch.observations.push(obs);
            }
            _ => epochs.push(Epoch { time: obs.time, observations: vec![obs] }),
        }
    }
    Ok(epochs)
}

pub fn load_nodes(path: &Path) -> Result<NodeCatalog, IngestError> {
    let mut csv = CsvFile::open(path).map_err(io_err(path))?;
    csv.require(&["node_id", "x", "y"])?;
    let has_z = csv.has("z");
    let mut nodes = Vec::new();
    let mut seen = BTreeSet::new();
    csv.for_each_row(|row| {
        let id: NodeId = row.parse("node_id")?;
        if !seen.insert(id) {
            return Err(row.error(format!("duplicate node_id {id}")));
        }
        let z = if has_z { row.opt_f64("z")?.unwrap_or(0.0) } else { 0.0 };
        nodes.push((id, Position::new(row.f64("x")?, row.f64("y")?, z)));
        Ok(())
    })?;
    Ok(NodeCatalog::new(nodes)?)
}

pub fn load_trajectory(path: &Path) -> Result<ReferenceTrajectory, IngestError> {
    let mut csv = CsvFile::open(path).map_err(io_err(path))?;
    csv.require(&["time", "x", "y"])?;
    let mut samples = Vec::new();
    csv.for_each_row(|row| {
        let z = row.opt_f64("z")?.unwrap_or(0.0);
        samples.push((row.f64("time")?, Position::new(row.f64("x")?, row.f64("y")?, z)));
        Ok(())
    })?;
    ReferenceTrajectory::new(samples)
}

/// Loads all three files of a session and cross-checks node ids.
pub fn load_session(toa: &Path, nodes: &Path, trajectory: &Path, opts: LoadOptions) -> Result<Session, IngestError> {
    let catalog = load_nodes(nodes)?;
    let trajectory = load_trajectory(trajectory)?;
    let epochs = load_epochs_for(toa, &catalog, opts)?;
    Ok(Session { epochs, catalog, trajectory })
}

/// Like [`load_epochs`], but every node id must be in `catalog`.
pub fn load_epochs_for(path: &Path, catalog: &NodeCatalog, opts: LoadOptions) -> Result<Vec<Epoch>, IngestError> {
    let (label, rows) = read_toa_rows(path, opts.unit)?;
    if let Some(bad) = rows.iter().find(|r| !catalog.contains(r.obs.node)) {
        return Err(IngestError::UnknownNode { path: label, line: bad.line, node: bad.obs.node });
    }
    group_epochs(rows.into_iter().map(|r| r.obs).collect(), opts.epoch_tolerance)
}

/// Serializes epochs in the ToA layout. `rsrp` is written only when at
/// least one observation carries it.
pub fn toa_csv(epochs: &[Epoch], unit: UnitMode) -> String {
    let with_rsrp = epochs.iter().flat_map(|e| &e.observations).any(|o| o.rsrp.is_some());
    let mut out = String::from(if with_rsrp { "time,node_id,toa,rsrp\n" } else { "time,node_id,toa\n" });
    for obs in epochs.iter().flat_map(|e| &e.observations) {
        let toa = match unit {
            UnitMode::Meters => obs.pseudorange,
            UnitMode::Seconds => obs.pseudorange / SPEED_OF_LIGHT,
        };
        let _ = write!(out, "{},{},{}", obs.time, obs.node, toa);
        if with_rsrp {
            out.push(',');
            if let Some(r) = obs.rsrp {
                let _ = write!(out, "{r}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn nodes_csv(catalog: &NodeCatalog) -> String {
    let mut out = String::from("node_id,x,y,z\n");
    for (id, p) in catalog.iter() {
        let _ = writeln!(out, "{id},{},{},{}", p.x, p.y, p.z);
    }
    out
}

pub fn trajectory_csv(traj: &ReferenceTrajectory) -> String {
    let mut out = String::from("time,x,y,z\n");
    for (t, p) in traj.samples() {
        let _ = writeln!(out, "{t},{},{},{}", p.x, p.y, p.z);
    }
    out
}

pub fn write_toa(path: &Path, epochs: &[Epoch], unit: UnitMode) -> Result<(), IngestError> {
    write_text(path, &toa_csv(epochs, unit)).map_err(io_err(path))
}

pub fn write_nodes(path: &Path, catalog: &NodeCatalog) -> Result<(), IngestError> {
    write_text(path, &nodes_csv(catalog)).map_err(io_err(path))
}

pub fn write_trajectory(path: &Path, traj: &ReferenceTrajectory) -> Result<(), IngestError> {
    write_text(path, &trajectory_csv(traj)).map_err(io_err(path))
}
