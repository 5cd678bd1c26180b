#![allow(dead_code)]

use std::collections::BTreeMap;

use tdoa_dtb::synthetic::{ClockModel, PathLoss, Scenario, SyntheticNoise};
use tdoa_dtb::{NodeCatalog, NodeId, Position};

pub const HALL_NODES: [(u32, f64, f64); 8] = [
    (1, 0.0, 0.0),
    (2, 20.0, -2.0),
    (3, 40.0, 0.0),
    (4, 42.0, 15.0),
    (5, 40.0, 30.0),
    (6, 20.0, 32.0),
    (7, 0.0, 30.0),
    (8, -2.0, 15.0),
];

/// Spans [-25, 25] m; every DTB against node 1 is about 20 m or more.
pub const HALL_BIASES: [(u32, f64); 8] =
    [(1, 25.0), (2, 6.0), (3, 5.0), (4, 7.0), (5, 4.0), (6, 4.5), (7, 5.5), (8, -25.0)];

pub fn hall_catalog() -> NodeCatalog {
    NodeCatalog::new(HALL_NODES.iter().map(|&(id, x, y)| (NodeId(id), Position::new(x, y, 3.0)))).unwrap()
}

/// Eight nodes around a 40 m x 30 m hall, rover looping the inner aisle at
/// 1.2 m/s, 10 Hz epochs.
pub fn hall_scenario(noise: SyntheticNoise, n_epochs: usize, seed: u64) -> Scenario {
    Scenario {
        session: "hall".into(),
        catalog: hall_catalog(),
        node_biases: HALL_BIASES.iter().map(|&(id, b)| (NodeId(id), b)).collect(),
        nlos_offsets: BTreeMap::new(),
        rover_clock: ClockModel::Constant { offset_m: 40.0 },
        waypoints: vec![(5.0, 5.0), (35.0, 5.0), (35.0, 25.0), (5.0, 25.0)],
        speed: 1.2,
        rover_height: 0.0,
        epoch_rate: 10.0,
        n_epochs,
        start_time: 0.0,
        noise,
        path_loss: PathLoss::default(),
        truth_reference: Some(NodeId(1)),
        seed,
    }
}

pub fn constant_noise(sigma_m: f64) -> SyntheticNoise {
    SyntheticNoise::Constant { sigma_m }
}

/// Meter-level RSRP-dependent noise: about 1.2 m close to a node, 2 m across
/// the hall.
pub fn meter_rsrp_noise() -> SyntheticNoise {
    SyntheticNoise::Rsrp { k: 50.0, rsrp0: -105.0, sigma_floor: 0.3, sigma_cap: 15.0 }
}

pub fn sawtooth(drift: f64, period: f64, magnitude: f64) -> ClockModel {
    ClockModel::Sawtooth { drift_rate_mps: drift, reset_period_s: period, reset_magnitude_m: magnitude }
}

pub fn scenario_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/example.toml")
}
