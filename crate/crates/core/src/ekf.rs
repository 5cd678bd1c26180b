//! Extended Kalman filter over the planar rover position.
//!
//! State: `(x, y)` with a 2x2 covariance. Propagation is a random walk
//! (identity transition, process noise growing linearly with elapsed
//! time). Each epoch's DTB-corrected TDoAs are applied jointly with a
//! Joseph-form covariance update.

use nalgebra::{DMatrix, DVector, Dyn, Matrix2, OMatrix, Vector2, U2};
use thiserror::Error;

use crate::differencing::{form_tdoa, MissingReference, TdoaObservation};
use crate::dtb::DtbTable;
use crate::geometry::{range, sd_range, NodeCatalog, NodeId, Position};
use crate::ingestion::Epoch;
use crate::noise_model::ToaNoise;

/// Below this rover-node distance the range gradient is undefined.
pub const MIN_RANGE_M: f64 = 1e-6;
/// Smallest apriori variance per axis, m².
pub const APRIORI_VARIANCE_FLOOR: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("apriori needs at least 2 nodes, catalog has {0}")]
    TooFewNodes(usize),
    #[error("negative propagation interval {0} s")]
    NegativeDt(f64),
    #[error("rover within {MIN_RANGE_M} m of node {0}")]
    SingularGeometry(NodeId),
    #[error("node {0} is not in the node catalog")]
    UnknownNode(NodeId),
    #[error("no DTB for node {node} against reference {reference}")]
    MissingDtb { node: NodeId, reference: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub position: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub time: f64,
    /// Fixed rover height used when evaluating ranges; not estimated.
    pub height: f64,
}

impl EkfState {
    pub fn rover(&self) -> Position {
        Position::new(self.position.x, self.position.y, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfConfig {
    /// Process noise density along x, m/√s.
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Epochs with fewer accepted observations leave the state untouched.
    pub min_obs_per_update: usize,
    /// Innovations beyond this many predicted sigmas are rejected.
    pub innovation_gate: f64,
    pub rover_height: f64,
    pub missing_reference: MissingReference,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            sigma_x: 0.5,
            sigma_y: 0.5,
            min_obs_per_update: 1,
            innovation_gate: 5.0,
            rover_height: 0.0,
            missing_reference: MissingReference::Drop,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochResult {
    pub state: EkfState,
    /// Measured minus modelled TDoA at the updated state, per accepted node.
    pub postfit_residuals: Vec<(NodeId, f64)>,
    pub accepted_obs: usize,
    pub rejected_obs: usize,
}

/// Centroid of the nodes with the coordinate sample variance as uncertainty.
pub fn init_apriori(catalog: &NodeCatalog) -> Result<EkfState, EkfError> {
    let n = catalog.len();
    if n < 2 {
        return Err(EkfError::TooFewNodes(n));
    }
    let nf = n as f64;
    let (sx, sy) = catalog.iter().fold((0.0, 0.0), |(sx, sy), (_, p)| (sx + p.x, sy + p.y));
    let (mx, my) = (sx / nf, sy / nf);
    let (vx, vy) =
        catalog.iter().fold((0.0, 0.0), |(vx, vy), (_, p)| (vx + (p.x - mx).powi(2), vy + (p.y - my).powi(2)));
    let var_x = (vx / (nf - 1.0)).max(APRIORI_VARIANCE_FLOOR);
    let var_y = (vy / (nf - 1.0)).max(APRIORI_VARIANCE_FLOOR);
    Ok(EkfState {
        position: Vector2::new(mx, my),
        covariance: Matrix2::new(var_x, 0.0, 0.0, var_y),
        time: 0.0,
        height: 0.0,
    })
}

pub fn predict(state: &EkfState, dt: f64, cfg: &EkfConfig) -> Result<EkfState, EkfError> {
    if dt < 0.0 {
        return Err(EkfError::NegativeDt(dt));
    }
    let mut next = *state;
    next.time = state.time + dt;
    if dt > 0.0 {
        next.covariance[(0, 0)] += cfg.sigma_x * cfg.sigma_x * dt;
        next.covariance[(1, 1)] += cfg.sigma_y * cfg.sigma_y * dt;
    }
    Ok(next)
}

/// Modelled TDoA `range(node) - range(ref) + DTB(node, ref)` and its
/// gradient with respect to the rover's `(x, y)`.
pub fn measurement_model(
    state: &EkfState,
    obs: &TdoaObservation,
    dtb: &DtbTable,
    catalog: &NodeCatalog,
) -> Result<(f64, [f64; 2]), EkfError> {
    let node = catalog.get(obs.node).ok_or(EkfError::UnknownNode(obs.node))?;
    let reference = catalog.get(obs.ref_node).ok_or(EkfError::UnknownNode(obs.ref_node))?;
    let bias =
        dtb.between(obs.node, obs.ref_node).ok_or(EkfError::MissingDtb { node: obs.node, reference: obs.ref_node })?;
    let rover = state.rover();
    let rho_n = range(rover, node);
    let rho_m = range(rover, reference);
    if rho_n < MIN_RANGE_M {
        return Err(EkfError::SingularGeometry(obs.node));
    }
    if rho_m < MIN_RANGE_M {
        return Err(EkfError::SingularGeometry(obs.ref_node));
    }
    let predicted = sd_range(rover, node, reference) + bias;
    let jac = [
        (rover.x - node.x) / rho_n - (rover.x - reference.x) / rho_m,
        (rover.y - node.y) / rho_n - (rover.y - reference.y) / rho_m,
    ];
    Ok((predicted, jac))
}

struct Linearized {
    obs: TdoaObservation,
    innovation: f64,
    jac: [f64; 2],
    variance: f64,
}

/// Joint update with every gated-in observation of one epoch.
///
/// Observations that cannot be modelled (unknown node, missing DTB,
/// singular geometry) or fail the innovation gate count as rejected.
pub fn update(
    state: &EkfState,
    observations: &[TdoaObservation],
    dtb: &DtbTable,
    catalog: &NodeCatalog,
    noise: &impl ToaNoise,
    cfg: &EkfConfig,
) -> EpochResult {
    let p = state.covariance;
    let mut accepted = Vec::with_capacity(observations.len());
    let mut rejected = 0;
    for obs in observations {
        let Ok((predicted, jac)) = measurement_model(state, obs, dtb, catalog) else {
            rejected += 1;
            continue;
        };
        let variance = noise.toa_sigma(obs.rsrp_node).powi(2) + noise.toa_sigma(obs.rsrp_ref).powi(2);
        let h = Vector2::new(jac[0], jac[1]);
        let innovation = obs.sd_pseudorange - predicted;
        let spread = (h.dot(&(p * h)) + variance).sqrt();
        if innovation.abs() > cfg.innovation_gate * spread {
            rejected += 1;
            continue;
        }
        accepted.push(Linearized { obs: *obs, innovation, jac, variance });
    }

    let unchanged = |rejected| EpochResult {
        state: *state,
        postfit_residuals: Vec::new(),
        accepted_obs: 0,
        rejected_obs: rejected,
    };
    if accepted.is_empty() || accepted.len() < cfg.min_obs_per_update {
        return unchanged(observations.len());
    }

    let m = accepted.len();
    let h = OMatrix::<f64, Dyn, U2>::from_row_iterator(m, accepted.iter().flat_map(|a| a.jac));
    let r = DMatrix::from_diagonal(&DVector::from_iterator(m, accepted.iter().map(|a| a.variance)));
    let innovations = DVector::from_iterator(m, accepted.iter().map(|a| a.innovation));
    let s = &h * p * h.transpose() + &r;
    let Some(s_inv) = s.cholesky().map(|c| c.inverse()) else {
        return unchanged(observations.len());
    };
    let gain = p * h.transpose() * s_inv;
    let correction = &gain * innovations;
    let ikh = Matrix2::identity() - &gain * &h;
    let joseph = ikh * p * ikh.transpose() + &gain * r * gain.transpose();

    let mut next = *state;
    next.position += Vector2::new(correction[0], correction[1]);
    next.covariance = 0.5 * (joseph + joseph.transpose());

    let dx = next.position - state.position;
    let postfit_residuals = accepted
        .iter()
        .map(|a| {
            let predicted = match measurement_model(&next, &a.obs, dtb, catalog) {
                Ok((p, _)) => p,
                // updated state landed on a node: fall back to the linearization
                Err(_) => a.obs.sd_pseudorange - a.innovation + a.jac[0] * dx.x + a.jac[1] * dx.y,
            };
            (a.obs.node, a.obs.sd_pseudorange - predicted)
        })
        .collect();

    EpochResult { state: next, postfit_residuals, accepted_obs: m, rejected_obs: rejected }
}

/// Picks the TDoAs for one epoch according to the missing-reference policy.
fn epoch_tdoas(epoch: &Epoch, dtb: &DtbTable, policy: MissingReference) -> Option<Vec<TdoaObservation>> {
    match form_tdoa(epoch, dtb.ref_node()) {
        Ok(t) => Some(t),
        Err(_) => match policy {
            MissingReference::Drop => None,
            MissingReference::Rereference => {
                let fallback = epoch.observations.iter().map(|o| o.node).filter(|&n| dtb.mean(n).is_some()).min()?;
                form_tdoa(epoch, fallback).ok()
            }
        },
    }
}

/// Filters a time-sorted session. Epochs dropped by the missing-reference
/// policy produce no result.
pub fn run_filter(
    epochs: &[Epoch],
    dtb: &DtbTable,
    catalog: &NodeCatalog,
    noise: &impl ToaNoise,
    cfg: &EkfConfig,
) -> Result<Vec<EpochResult>, EkfError> {
    let mut results = Vec::with_capacity(epochs.len());
    let mut state: Option<EkfState> = None;
    for epoch in epochs {
        let Some(tdoas) = epoch_tdoas(epoch, dtb, cfg.missing_reference) else { continue };
        let prior = match state {
            None => {
                let mut s = init_apriori(catalog)?;
                s.time = epoch.time;
                s.height = cfg.rover_height;
                s
            }
            Some(prev) => predict(&prev, epoch.time - prev.time, cfg)?,
        };
        let result = update(&prior, &tdoas, dtb, catalog, noise, cfg);
        state = Some(result.state);
        results.push(result);
    }
    Ok(results)
}
