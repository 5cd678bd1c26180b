//! Accuracy metrics for a filtered track: error against the reference
//! trajectory, the filter's own formal sigma, and the sigma implied by the
//! postfit residuals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ekf::EpochResult;
use crate::geometry::NodeId;
use crate::ingestion::ReferenceTrajectory;
use crate::table::{write_text, CsvFile, ParseError};

/// Estimated parameters per epoch (planar position).
pub const POSITION_PARAMS: usize = 2;
pub const HISTOGRAM_BIN_M: f64 = 0.25;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("track and reference trajectory do not overlap in time")]
    NoOverlap,
    #[error("track is empty")]
    EmptyTrack,
    #[error("need more than {n_param} residuals, got {n}")]
    InsufficientResiduals { n: usize, n_param: usize },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub cov_xx: f64,
    pub cov_xy: f64,
    pub cov_yy: f64,
    pub n_obs: usize,
    pub n_rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub time: f64,
    pub node: NodeId,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    #[serde(rename = "true_error_mean_m")]
    pub true_error_mean: f64,
    #[serde(rename = "true_error_rms_m")]
    pub true_error_rms: f64,
    #[serde(rename = "sigma_formal_m")]
    pub sigma_formal: f64,
    #[serde(rename = "sigma_postfits_m")]
    pub sigma_postfits: f64,
    pub n_epochs: usize,
}

pub fn track_from_results(results: &[EpochResult]) -> Vec<TrackPoint> {
    results
        .iter()
        .map(|r| {
            let p = &r.state.covariance;
            TrackPoint {
                time: r.state.time,
                x: r.state.position.x,
                y: r.state.position.y,
                cov_xx: p[(0, 0)],
                cov_xy: p[(0, 1)],
                cov_yy: p[(1, 1)],
                n_obs: r.accepted_obs,
                n_rejected: r.rejected_obs,
            }
        })
        .collect()
}

pub fn residuals_from_results(results: &[EpochResult]) -> Vec<Residual> {
    results
        .iter()
        .flat_map(|r| {
            r.postfit_residuals.iter().map(move |&(node, value)| Residual { time: r.state.time, node, value })
        })
        .collect()
}

/// Mean and RMS horizontal distance to the interpolated reference, over
/// the track epochs the trajectory covers.
pub fn true_error(track: &[TrackPoint], traj: &ReferenceTrajectory) -> Result<(f64, f64), MetricsError> {
    let errors: Vec<f64> = track
        .iter()
        .filter_map(|p| {
            let truth = traj.interpolate(p.time).ok()?;
            Some((p.x - truth.x).hypot(p.y - truth.y))
        })
        .collect();
    if errors.is_empty() {
        return Err(MetricsError::NoOverlap);
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok((mean, rms))
}

/// Average over epochs of the square root of the covariance trace.
pub fn sigma_formal(track: &[TrackPoint]) -> Result<f64, MetricsError> {
    if track.is_empty() {
        return Err(MetricsError::EmptyTrack);
    }
    Ok(track.iter().map(|p| (p.cov_xx + p.cov_yy).max(0.0).sqrt()).sum::<f64>() / track.len() as f64)
}

/// `sqrt(sum(e²) / (N - n_param))` over all residuals.
pub fn sigma_postfits(residuals: &[f64], n_param: usize) -> Result<f64, MetricsError> {
    let n = residuals.len();
    if n <= n_param {
        return Err(MetricsError::InsufficientResiduals { n, n_param });
    }
    let ss: f64 = residuals.iter().map(|e| e * e).sum();
    Ok((ss / (n - n_param) as f64).sqrt())
}

pub fn evaluate(
    track: &[TrackPoint],
    traj: &ReferenceTrajectory,
    residuals: &[Residual],
) -> Result<SessionMetrics, MetricsError> {
    let (true_error_mean, true_error_rms) = true_error(track, traj)?;
    let values: Vec<f64> = residuals.iter().map(|r| r.value).collect();
    Ok(SessionMetrics {
        true_error_mean,
        true_error_rms,
        sigma_formal: sigma_formal(track)?,
        sigma_postfits: sigma_postfits(&values, POSITION_PARAMS)?,
        n_epochs: track.len(),
    })
}

pub fn metrics_json(m: &SessionMetrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("plain struct serializes");
    s.push('\n');
    s
}

pub fn track_csv(track: &[TrackPoint]) -> String {
    let mut out = String::from("time,x,y,cov_xx,cov_xy,cov_yy,n_obs,n_rejected\n");
    for p in track {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.time, p.x, p.y, p.cov_xx, p.cov_xy, p.cov_yy, p.n_obs, p.n_rejected
        );
    }
    out
}

pub fn residuals_csv(residuals: &[Residual]) -> String {
    let mut out = String::from("time,node_id,postfit_m\n");
    for r in residuals {
        let _ = writeln!(out, "{},{},{}", r.time, r.node, r.value);
    }
    out
}

/// Residual counts in fixed-width bins, `[low, high)`.
pub fn residual_histogram(residuals: &[Residual], bin_width: f64) -> Vec<(f64, f64, usize)> {
    let mut bins: BTreeMap<i64, usize> = BTreeMap::new();
    for r in residuals.iter().filter(|r| r.value.is_finite()) {
        *bins.entry((r.value / bin_width).floor() as i64).or_default() += 1;
    }
    bins.into_iter().map(|(k, n)| (k as f64 * bin_width, (k + 1) as f64 * bin_width, n)).collect()
}

pub fn histogram_csv(bins: &[(f64, f64, usize)]) -> String {
    let mut out = String::from("bin_low_m,bin_high_m,count\n");
    for (lo, hi, n) in bins {
        let _ = writeln!(out, "{lo},{hi},{n}");
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io { path: path.to_path_buf(), source }
}

pub fn write_file(path: &Path, content: &str) -> Result<(), MetricsError> {
    write_text(path, content).map_err(io_err(path))
}

pub fn read_track(path: &Path) -> Result<Vec<TrackPoint>, MetricsError> {
    let mut csv = CsvFile::open(path).map_err(io_err(path))?;
    csv.require(&["time", "x", "y", "cov_xx", "cov_xy", "cov_yy", "n_obs", "n_rejected"])?;
    let mut track = Vec::new();
    csv.for_each_row(|row| {
        track.push(TrackPoint {
            time: row.f64("time")?,
            x: row.f64("x")?,
            y: row.f64("y")?,
            cov_xx: row.f64("cov_xx")?,
            cov_xy: row.f64("cov_xy")?,
            cov_yy: row.f64("cov_yy")?,
            n_obs: row.parse("n_obs")?,
            n_rejected: row.parse("n_rejected")?,
        });
        Ok(())
    })?;
    Ok(track)
}

pub fn read_residuals(path: &Path) -> Result<Vec<Residual>, MetricsError> {
    let mut csv = CsvFile::open(path).map_err(io_err(path))?;
    csv.require(&["time", "node_id", "postfit_m"])?;
    let mut out = Vec::new();
    csv.for_each_row(|row| {
        out.push(Residual { time: row.f64("time")?, node: row.parse("node_id")?, value: row.f64("postfit_m")? });
        Ok(())
    })?;
    Ok(out)
}
