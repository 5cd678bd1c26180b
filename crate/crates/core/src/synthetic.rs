//! Ground-truth scenario generator.
//!
//! Pseudoranges follow `P = rho + b_r(t) - b^n + nlos^n + eps`, with the
//! node biases, rover clock and noise all known, so every estimator in the
//! crate can be checked against exact answers.
//!
//! Generated pseudoranges are quantized to [`TOA_RESOLUTION_M`]. The rover
//! clock contribution is quantized on the same grid and added afterwards,
//! so single differences cancel it exactly, not just to rounding.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use thiserror::Error;

use crate::dtb::{write_dtb, DtbEntry, DtbError, DtbTable};
use crate::geometry::{range, GeometryError, NodeCatalog, NodeId, Position};
use crate::ingestion::{
    write_nodes, write_toa, write_trajectory, Epoch, IngestError, ReferenceTrajectory, ToaObservation, UnitMode,
};
use crate::noise_model::{NoiseError, NoiseModel, ToaNoise};

/// Measurement grid, meters (2^-10 m, just under a millimetre).
pub const TOA_RESOLUTION_M: f64 = 1.0 / 1024.0;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Catalog(#[from] GeometryError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Dtb(#[from] DtbError),
}

/// Rover clock offset, in meters, as a function of time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClockModel {
    #[default]
    Zero,
    Constant {
        offset_m: f64,
    },
    /// Linear drift with periodic resets of fixed magnitude.
    Sawtooth {
        drift_rate_mps: f64,
        reset_period_s: f64,
        reset_magnitude_m: f64,
    },
}

impl ClockModel {
    pub fn offset(&self, t: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Constant { offset_m } => offset_m,
            Self::Sawtooth { drift_rate_mps, reset_period_s, reset_magnitude_m } => {
                drift_rate_mps * t - reset_magnitude_m * (t / reset_period_s).floor()
            }
        }
    }
}

/// Generative ToA noise.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase", deny_unknown_fields)]
pub enum SyntheticNoise {
    Constant {
        sigma_m: f64,
    },
    Rsrp {
        k: f64,
        rsrp0: f64,
        #[serde(default = "default_floor")]
        sigma_floor: f64,
        #[serde(default = "default_cap")]
        sigma_cap: f64,
    },
}

fn default_floor() -> f64 {
    crate::noise_model::DEFAULT_SIGMA_FLOOR
}

fn default_cap() -> f64 {
    crate::noise_model::DEFAULT_SIGMA_CAP
}

impl SyntheticNoise {
    pub fn model(&self) -> Result<Option<NoiseModel>, NoiseError> {
        match *self {
            Self::Constant { .. } => Ok(None),
            Self::Rsrp { k, rsrp0, sigma_floor, sigma_cap } => {
                NoiseModel::with_clamps(k, rsrp0, sigma_floor, sigma_cap).map(Some)
            }
        }
    }
}

impl ToaNoise for SyntheticNoise {
    fn toa_sigma(&self, rsrp: Option<f64>) -> f64 {
        match *self {
            Self::Constant { sigma_m } => sigma_m,
            Self::Rsrp { k, rsrp0, sigma_floor, sigma_cap } => {
                let m = NoiseModel { k, rsrp0, sigma_floor, sigma_cap, missing_rsrp_sigma: sigma_cap };
                m.sigma_for(rsrp)
            }
        }
    }
}

/// Log-distance path loss: `rsrp = p0 - 10 * gamma * log10(rho / 1 m)`.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLoss {
    pub p0_dbm: f64,
    pub gamma: f64,
}

impl Default for PathLoss {
    fn default() -> Self {
        Self { p0_dbm: -40.0, gamma: 2.5 }
    }
}

impl PathLoss {
    pub fn rsrp(&self, rho: f64) -> f64 {
        self.p0_dbm - 10.0 * self.gamma * rho.max(1e-3).log10()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub session: String,
    pub catalog: NodeCatalog,
    /// `b^n` per node, meters; nodes absent here have zero bias.
    pub node_biases: BTreeMap<NodeId, f64>,
    /// Constant extra delay per node, meters.
    pub nlos_offsets: BTreeMap<NodeId, f64>,
    pub rover_clock: ClockModel,
    /// Closed loop traversed at constant speed, starting at the first point.
    pub waypoints: Vec<(f64, f64)>,
    pub speed: f64,
    pub rover_height: f64,
    pub epoch_rate: f64,
    pub n_epochs: usize,
    pub start_time: f64,
    pub noise: SyntheticNoise,
    pub path_loss: PathLoss,
    /// Reference of the emitted truth table; smallest node id when unset.
    pub truth_reference: Option<NodeId>,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSpec {
    id: NodeId,
    x: f64,
    y: f64,
    #[serde(default)]
    z: f64,
    #[serde(default)]
    bias_m: f64,
    #[serde(default)]
    nlos_m: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default = "default_session")]
    session: String,
    seed: u64,
    n_epochs: usize,
    epoch_rate_hz: f64,
    #[serde(default)]
    start_time_s: f64,
    speed_mps: f64,
    #[serde(default)]
    rover_height_m: f64,
    truth_reference: Option<NodeId>,
    waypoints: Vec<[f64; 2]>,
    #[serde(default)]
    clock: ClockModel,
    noise: SyntheticNoise,
    #[serde(default)]
    path_loss: PathLoss,
    nodes: Vec<NodeSpec>,
}

fn default_session() -> String {
    "synthetic".into()
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SyntheticError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| SyntheticError::InvalidScenario(e.to_string()))?;
        let catalog = NodeCatalog::new(file.nodes.iter().map(|n| (n.id, Position::new(n.x, n.y, n.z))))?;
        let scenario = Self {
            session: file.session,
            catalog,
            node_biases: file.nodes.iter().map(|n| (n.id, n.bias_m)).collect(),
            nlos_offsets: file.nodes.iter().filter(|n| n.nlos_m != 0.0).map(|n| (n.id, n.nlos_m)).collect(),
            rover_clock: file.clock,
            waypoints: file.waypoints.iter().map(|w| (w[0], w[1])).collect(),
            speed: file.speed_mps,
            rover_height: file.rover_height_m,
            epoch_rate: file.epoch_rate_hz,
            n_epochs: file.n_epochs,
            start_time: file.start_time_s,
            noise: file.noise,
            path_loss: file.path_loss,
            truth_reference: file.truth_reference,
            seed: file.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, SyntheticError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SyntheticError::Config { path: path.into(), message: e.to_string() })?;
        Self::from_toml(&text).map_err(|e| SyntheticError::Config { path: path.into(), message: e.to_string() })
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let invalid = |m: String| Err(SyntheticError::InvalidScenario(m));
        if !(self.epoch_rate > 0.0 && self.epoch_rate.is_finite()) {
            return invalid(format!("epoch rate must be positive, got {}", self.epoch_rate));
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return invalid(format!("speed must be non-negative, got {}", self.speed));
        }
        if self.n_epochs < 2 {
            return invalid("need at least 2 epochs".into());
        }
        if self.waypoints.is_empty() {
            return invalid("need at least one waypoint".into());
        }
        if self.waypoints.iter().any(|w| !w.0.is_finite() || !w.1.is_finite()) {
            return invalid("non-finite waypoint".into());
        }
        for id in self.node_biases.keys().chain(self.nlos_offsets.keys()) {
            if !self.catalog.contains(*id) {
                return invalid(format!("bias given for node {id} outside the catalog"));
            }
        }
        if let Some(r) = self.truth_reference {
            if !self.catalog.contains(r) {
                return invalid(format!("truth reference {r} outside the catalog"));
            }
        }
        if let ClockModel::Sawtooth { reset_period_s, .. } = self.rover_clock {
            if !(reset_period_s > 0.0) {
                return invalid("sawtooth reset period must be positive".into());
            }
        }
        match self.noise {
            SyntheticNoise::Constant { sigma_m } if !(sigma_m >= 0.0 && sigma_m.is_finite()) => {
                return invalid(format!("noise sigma must be non-negative, got {sigma_m}"));
            }
            SyntheticNoise::Constant { .. } => {}
            SyntheticNoise::Rsrp { .. } => {
                self.noise.model()?;
            }
        }
        Ok(())
    }

    pub fn epoch_time(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.epoch_rate
    }

    /// Rover position after travelling `speed * elapsed` along the loop.
    pub fn rover_position(&self, elapsed: f64) -> Position {
        let pts = &self.waypoints;
        let planar = |(x, y): (f64, f64)| Position::new(x, y, self.rover_height);
        if pts.len() == 1 {
            return planar(pts[0]);
        }
        let segments: Vec<_> = (0..pts.len())
            .map(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                (a, b, (b.0 - a.0).hypot(b.1 - a.1))
            })
            .collect();
        let perimeter: f64 = segments.iter().map(|s| s.2).sum();
        if perimeter == 0.0 {
            return planar(pts[0]);
        }
        let mut d = (self.speed * elapsed).rem_euclid(perimeter);
        for &(a, b, len) in &segments {
            if d <= len && len > 0.0 {
                let f = d / len;
                return planar((a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)));
            }
            d -= len;
        }
        planar(pts[0])
    }

    pub fn bias(&self, node: NodeId) -> f64 {
        self.node_biases.get(&node).copied().unwrap_or(0.0)
    }

    pub fn nlos(&self, node: NodeId) -> f64 {
        self.nlos_offsets.get(&node).copied().unwrap_or(0.0)
    }
}

/// Known answers for a generated session.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub session: String,
    pub node_biases: BTreeMap<NodeId, f64>,
    pub nlos_offsets: BTreeMap<NodeId, f64>,
    pub n_epochs: usize,
    pub default_reference: NodeId,
}

impl Truth {
    /// Expected mean DTB of `node` against `reference`:
    /// `-b^n + b^m + nlos^n - nlos^m`.
    pub fn dtb(&self, node: NodeId, reference: NodeId) -> f64 {
        let b = |n| self.node_biases.get(&n).copied().unwrap_or(0.0);
        let l = |n| self.nlos_offsets.get(&n).copied().unwrap_or(0.0);
        -b(node) + b(reference) + l(node) - l(reference)
    }

    pub fn dtb_table(&self, reference: NodeId) -> DtbTable {
        let entries = self
            .node_biases
            .keys()
            .filter(|&&n| n != reference)
            .map(|&n| (n, DtbEntry { mean: self.dtb(n, reference), std: 0.0, n_samples: self.n_epochs }))
            .collect();
        DtbTable::new(self.session.clone(), reference, entries).expect("finite truth entries")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSession {
    pub epochs: Vec<Epoch>,
    pub catalog: NodeCatalog,
    pub trajectory: ReferenceTrajectory,
    pub truth: Truth,
}

impl SyntheticSession {
    /// Writes `toa.csv`, `nodes.csv`, `traj.csv` and `truth_dtb.csv`.
    pub fn write(&self, dir: &Path, unit: UnitMode) -> Result<(), SyntheticError> {
        write_toa(&dir.join("toa.csv"), &self.epochs, unit)?;
        write_nodes(&dir.join("nodes.csv"), &self.catalog)?;
        write_trajectory(&dir.join("traj.csv"), &self.trajectory)?;
        write_dtb(&dir.join("truth_dtb.csv"), &self.truth.dtb_table(self.truth.default_reference))?;
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    (v / TOA_RESOLUTION_M).round() * TOA_RESOLUTION_M
}

/// Independent stream per (seed, node, epoch).
fn observation_rng(seed: u64, node: NodeId, epoch: usize) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for word in [u64::from(node.0), epoch as u64] {
        h = splitmix64(h ^ splitmix64(word));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate(scenario: &Scenario) -> Result<SyntheticSession, SyntheticError> {
    scenario.validate()?;
    let mut epochs = Vec::with_capacity(scenario.n_epochs);
    let mut samples = Vec::with_capacity(scenario.n_epochs);
    for i in 0..scenario.n_epochs {
        let time = scenario.epoch_time(i);
        let rover = scenario.rover_position(time - scenario.start_time);
        let clock = quantize(scenario.rover_clock.offset(time));
        let observations = scenario
            .catalog
            .iter()
            .map(|(node, pos)| {
                let rho = range(rover, pos);
                let rsrp = scenario.path_loss.rsrp(rho);
                let sigma = scenario.noise.toa_sigma(Some(rsrp));
                let z: f64 = StandardNormal.sample(&mut observation_rng(scenario.seed, node, i));
                let measured = quantize(rho - scenario.bias(node) + scenario.nlos(node) + sigma * z);
                ToaObservation { time, node, pseudorange: measured + clock, rsrp: Some(rsrp) }
            })
            .collect();
        epochs.push(Epoch { time, observations });
        samples.push((time, rover));
    }
    let default_reference =
        scenario.truth_reference.or_else(|| scenario.catalog.ids().next()).expect("catalog has nodes");
    Ok(SyntheticSession {
        epochs,
        catalog: scenario.catalog.clone(),
        trajectory: ReferenceTrajectory::new(samples)?,
        truth: Truth {
            session: scenario.session.clone(),
            node_biases: scenario.catalog.ids().map(|n| (n, scenario.bias(n))).collect(),
            nlos_offsets: scenario.nlos_offsets.clone(),
            n_epochs: scenario.n_epochs,
            default_reference,
        },
    })
}
