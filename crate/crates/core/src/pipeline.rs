//! End-to-end steps shared by the CLI and the integration tests.

use thiserror::Error;

use crate::differencing::{form_tdoa, select_reference, DifferencingError, ReferencePolicy};
use crate::dtb::{aggregate_dtb, instantaneous_dtb, DtbError, DtbSample, DtbTable};
use crate::ekf::{run_filter, EkfConfig, EkfError, EpochResult};
use crate::geometry::{NodeCatalog, NodeId};
use crate::ingestion::{Epoch, ReferenceTrajectory};
use crate::metrics::{evaluate, residuals_from_results, track_from_results, MetricsError, SessionMetrics};
use crate::noise_model::ToaNoise;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Differencing(#[from] DifferencingError),
    #[error(transparent)]
    Dtb(#[from] DtbError),
    #[error(transparent)]
    Ekf(#[from] EkfError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("reference node {0} does not appear in any epoch")]
    ReferenceMissing(NodeId),
    #[error("no epoch with reference node {0} lies inside the reference trajectory")]
    NoCalibrationEpochs(NodeId),
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub table: DtbTable,
    pub samples: Vec<DtbSample>,
    /// Epochs lacking the reference node.
    pub dropped_epochs: usize,
    /// Epochs outside the reference trajectory span.
    pub uncovered_epochs: usize,
}

/// Instantaneous DTBs at every epoch covered by the trajectory, averaged
/// per node.
pub fn calibrate(
    epochs: &[Epoch],
    catalog: &NodeCatalog,
    trajectory: &ReferenceTrajectory,
    policy: ReferencePolicy,
    session: &str,
    trim_sigma: Option<f64>,
) -> Result<Calibration, PipelineError> {
    let reference = select_reference(epochs, policy)?;
    let mut samples = Vec::new();
    let mut dropped_epochs = 0;
    let mut uncovered_epochs = 0;
    for epoch in epochs {
        let tdoas = match form_tdoa(epoch, reference) {
            Ok(t) => t,
            Err(DifferencingError::ReferenceMissing { .. }) => {
                dropped_epochs += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let Ok(rover) = trajectory.interpolate(epoch.time) else {
            uncovered_epochs += 1;
            continue;
        };
        for obs in &tdoas {
            samples.push(instantaneous_dtb(obs, rover, catalog)?);
        }
    }
    if dropped_epochs == epochs.len() {
        return Err(PipelineError::ReferenceMissing(reference));
    }
    if samples.is_empty() {
        return Err(PipelineError::NoCalibrationEpochs(reference));
    }
    let table = aggregate_dtb(&samples, session, trim_sigma)?;
    Ok(Calibration { table, samples, dropped_epochs, uncovered_epochs })
}

#[derive(Debug, Clone)]
pub struct Positioning {
    pub results: Vec<EpochResult>,
    pub metrics: SessionMetrics,
}

/// Filters the session with `dtb` and scores it against `trajectory`.
pub fn position_and_evaluate(
    epochs: &[Epoch],
    dtb: &DtbTable,
    catalog: &NodeCatalog,
    trajectory: &ReferenceTrajectory,
    noise: &impl ToaNoise,
    cfg: &EkfConfig,
) -> Result<Positioning, PipelineError> {
    let results = run_filter(epochs, dtb, catalog, noise, cfg)?;
    let metrics = evaluate(&track_from_results(&results), trajectory, &residuals_from_results(&results))?;
    Ok(Positioning { results, metrics })
}
