//! Received-power dependent ranging noise.
//!
//! The one-sigma ToA error is modelled as `k / (rsrp - rsrp0)`, clamped to
//! `[sigma_floor, sigma_cap]`. Empirical sigmas come from detrended ToA
//! series binned by RSRP. Fitting regresses `1/sigma` on RSRP, which is
//! linear in the two parameters, then refines that solution by Gauss-Newton
//! on the squared sigma residuals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::NodeId;
use crate::ingestion::Epoch;
use crate::table::{write_text, CsvFile, ParseError};

pub const DEFAULT_SIGMA_FLOOR: f64 = 0.3;
pub const DEFAULT_SIGMA_CAP: f64 = 15.0;
/// Sigma used for observations without RSRP.
pub const DEFAULT_MISSING_RSRP_SIGMA: f64 = 3.0;
pub const DEFAULT_DETREND_WINDOW_S: f64 = 2.0;
pub const DEFAULT_BIN_WIDTH_DB: f64 = 2.0;
pub const MIN_BIN_SAMPLES: usize = 20;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("detrend window {window} s is not larger than the median sample spacing {spacing} s")]
    WindowTooSmall { window: f64, spacing: f64 },
    #[error("series is not sorted by time")]
    Unsorted,
    #[error("no observation carries RSRP")]
    NoRsrp,
    #[error("noise model fit failed: {0}")]
    Fit(String),
    #[error("invalid noise model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that maps an observation's received power to a ToA sigma (m).
pub trait ToaNoise {
    fn toa_sigma(&self, rsrp: Option<f64>) -> f64;
}

/// Same sigma for every observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantNoise(pub f64);

impl ToaNoise for ConstantNoise {
    fn toa_sigma(&self, _rsrp: Option<f64>) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Scale, m·dB.
    pub k: f64,
    /// Pole of the model, dBm.
    pub rsrp0: f64,
    pub sigma_floor: f64,
    pub sigma_cap: f64,
    /// Not part of the model file; configured by the consumer.
    pub missing_rsrp_sigma: f64,
}

impl NoiseModel {
    pub fn new(k: f64, rsrp0: f64) -> Result<Self, NoiseError> {
        Self::with_clamps(k, rsrp0, DEFAULT_SIGMA_FLOOR, DEFAULT_SIGMA_CAP)
    }

    pub fn with_clamps(k: f64, rsrp0: f64, sigma_floor: f64, sigma_cap: f64) -> Result<Self, NoiseError> {
        if !(k.is_finite() && k > 0.0) {
            return Err(NoiseError::Invalid(format!("k must be positive, got {k}")));
        }
        if !rsrp0.is_finite() {
            return Err(NoiseError::Invalid("rsrp0 must be finite".into()));
        }
        if !(sigma_floor > 0.0 && sigma_cap > sigma_floor && sigma_cap.is_finite()) {
            return Err(NoiseError::Invalid(format!(
                "need 0 < sigma_floor < sigma_cap, got {sigma_floor}, {sigma_cap}"
            )));
        }
        Ok(Self { k, rsrp0, sigma_floor, sigma_cap, missing_rsrp_sigma: DEFAULT_MISSING_RSRP_SIGMA })
    }

    pub fn with_missing_rsrp_sigma(mut self, sigma: f64) -> Self {
        self.missing_rsrp_sigma = sigma;
        self
    }

    /// Unclamped model value; only meaningful for `rsrp > rsrp0`.
    pub fn raw_sigma(&self, rsrp: f64) -> f64 {
        self.k / (rsrp - self.rsrp0)
    }

    pub fn sigma(&self, rsrp: f64) -> f64 {
        if rsrp <= self.rsrp0 {
            return self.sigma_cap;
        }
        self.raw_sigma(rsrp).clamp(self.sigma_floor, self.sigma_cap)
    }

    pub fn sigma_for(&self, rsrp: Option<f64>) -> f64 {
        rsrp.map_or(self.missing_rsrp_sigma, |r| self.sigma(r))
    }
}

impl ToaNoise for NoiseModel {
    fn toa_sigma(&self, rsrp: Option<f64>) -> f64 {
        self.sigma_for(rsrp)
    }
}

/// Empirical noise level of one RSRP bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePoint {
    /// Mean RSRP of the bin's samples, dBm.
    pub rsrp: f64,
    pub sigma_hat: f64,
    pub n_samples: usize,
}

fn median_spacing(series: &[(f64, f64)]) -> Option<f64> {
    let mut gaps: Vec<f64> = series.windows(2).map(|w| w[1].0 - w[0].0).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_by(f64::total_cmp);
    let mid = gaps.len() / 2;
    Some(if gaps.len().is_multiple_of(2) { 0.5 * (gaps[mid - 1] + gaps[mid]) } else { gaps[mid] })
}

/// Subtracts a centered moving average: each value minus the mean of all
/// samples within `window / 2` seconds of it. Near the ends the window is
/// truncated.
pub fn detrend_toa(series: &[(f64, f64)], window: f64) -> Result<Vec<(f64, f64)>, NoiseError> {
    if series.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(NoiseError::Unsorted);
    }
    if let Some(spacing) = median_spacing(series) {
        if !(window > spacing) {
            return Err(NoiseError::WindowTooSmall { window, spacing });
        }
    }
    let half = 0.5 * window;
    let slack = 1e-9 * half;
    let mut lo = 0;
    let mut hi = 0;
    let mut out = Vec::with_capacity(series.len());
    for &(t, v) in series {
        while series[lo].0 < t - half - slack {
            lo += 1;
        }
        while hi < series.len() && series[hi].0 <= t + half + slack {
            hi += 1;
        }
        let span = &series[lo..hi];
        let mean = span.iter().map(|s| s.1).sum::<f64>() / span.len() as f64;
        out.push((t, v - mean));
    }
    Ok(out)
}

/// Detrends each node's ToA series and buckets residuals by RSRP.
///
/// Residuals within half a window of either end of a node's series are
/// skipped, as are bins with fewer than [`MIN_BIN_SAMPLES`] samples.
pub fn estimate_noise_points(epochs: &[Epoch], window: f64, bin_width: f64) -> Result<Vec<NoisePoint>, NoiseError> {
    if !(bin_width > 0.0) {
        return Err(NoiseError::Invalid(format!("bin width must be positive, got {bin_width}")));
    }
    let mut per_node: BTreeMap<NodeId, Vec<(f64, f64, Option<f64>)>> = BTreeMap::new();
    for obs in epochs.iter().flat_map(|e| &e.observations) {
        per_node.entry(obs.node).or_default().push((obs.time, obs.pseudorange, obs.rsrp));
    }
    if !per_node.values().flatten().any(|o| o.2.is_some()) {
        return Err(NoiseError::NoRsrp);
    }

    let mut bins: BTreeMap<i64, Vec<(f64, f64)>> = BTreeMap::new();
    for rows in per_node.values_mut() {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        let series: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
        let residuals = detrend_toa(&series, window)?;
        let (first, last) = (series[0].0, series[series.len() - 1].0);
        for (row, (t, res)) in rows.iter().zip(residuals) {
            let Some(rsrp) = row.2 else { continue };
            if t - first < 0.5 * window || last - t < 0.5 * window {
                continue;
            }
            let key = (rsrp / bin_width).floor() as i64;
            bins.entry(key).or_default().push((rsrp, res));
        }
    }

    Ok(bins
        .into_values()
        .filter(|b| b.len() >= MIN_BIN_SAMPLES)
        .map(|b| {
            let n = b.len() as f64;
            let rsrp = b.iter().map(|s| s.0).sum::<f64>() / n;
            let mean = b.iter().map(|s| s.1).sum::<f64>() / n;
            let ss: f64 = b.iter().map(|s| (s.1 - mean).powi(2)).sum();
            NoisePoint { rsrp, sigma_hat: (ss / (n - 1.0)).sqrt(), n_samples: b.len() }
        })
        .collect())
}

/// Least-squares fit of `sigma = k / (rsrp - rsrp0)`.
///
/// The closed-form regression of `1/sigma` on RSRP gives the starting
/// point; Gauss-Newton steps on `sum (sigma_hat - k / (rsrp - rsrp0))^2`
/// are accepted only while they lower that sum and keep `rsrp0` below the
/// data.
pub fn fit_noise_model(points: &[NoisePoint]) -> Result<NoiseModel, NoiseError> {
    if points.len() < 3 {
        return Err(NoiseError::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    let min = points.iter().map(|p| p.rsrp).fold(f64::INFINITY, f64::min);
    let max = points.iter().map(|p| p.rsrp).fold(f64::NEG_INFINITY, f64::max);
    if max - min < 10.0 {
        return Err(NoiseError::Fit(format!("points span {:.2} dB, need at least 10 dB", max - min)));
    }
    if points.iter().any(|p| !(p.sigma_hat > 0.0 && p.sigma_hat.is_finite())) {
        return Err(NoiseError::Fit("all sigmas must be positive".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.rsrp).sum::<f64>() / n;
    let my = points.iter().map(|p| 1.0 / p.sigma_hat).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.rsrp - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.rsrp - mx) * (1.0 / p.sigma_hat - my)).sum();
    let slope = sxy / sxx;
    if !(slope > 0.0) {
        return Err(NoiseError::Fit(format!("sigma does not decrease with RSRP (slope of 1/sigma = {slope:e})")));
    }
    let intercept = my - slope * mx;
    let k = 1.0 / slope;
    let rsrp0 = -intercept / slope;
    if rsrp0 >= min - 1.0 {
        return Err(NoiseError::Fit(format!(
            "fitted rsrp0 {rsrp0:.2} dBm is not below the data range (min {min:.2} dBm)"
        )));
    }
    let (k, rsrp0) = refine_fit(points, k, rsrp0, min - 1.0);
    NoiseModel::new(k, rsrp0)
}

fn fit_sse(points: &[NoisePoint], k: f64, rsrp0: f64) -> f64 {
    points.iter().map(|p| (p.sigma_hat - k / (p.rsrp - rsrp0)).powi(2)).sum()
}

fn refine_fit(points: &[NoisePoint], mut k: f64, mut rsrp0: f64, rsrp0_max: f64) -> (f64, f64) {
    let mut sse = fit_sse(points, k, rsrp0);
    for _ in 0..100 {
        // Normal equations of the linearized residuals in (k, rsrp0).
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in points {
            let d = p.rsrp - rsrp0;
            let (jk, j0) = (1.0 / d, k / (d * d));
            let r = p.sigma_hat - k / d;
            a11 += jk * jk;
            a12 += jk * j0;
            a22 += j0 * j0;
            g1 += jk * r;
            g2 += j0 * r;
        }
        let det = a11 * a22 - a12 * a12;
        if !(det.abs() > 0.0) {
            break;
        }
        let (dk, d0) = ((a22 * g1 - a12 * g2) / det, (a11 * g2 - a12 * g1) / det);
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-6 {
            let (nk, n0) = (k + t * dk, rsrp0 + t * d0);
            if nk > 0.0 && n0 < rsrp0_max {
                let nsse = fit_sse(points, nk, n0);
                if nsse < sse {
                    (k, rsrp0, sse) = (nk, n0, nsse);
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved || (t * dk).abs() < 1e-12 * k && (t * d0).abs() < 1e-12 {
            break;
        }
    }
    (k, rsrp0)
}

pub fn noise_model_csv(model: &NoiseModel) -> String {
    format!("k,rsrp0,sigma_floor,sigma_cap\n{},{},{},{}\n", model.k, model.rsrp0, model.sigma_floor, model.sigma_cap)
}

pub fn write_noise_model(path: &Path, model: &NoiseModel) -> Result<(), NoiseError> {
    write_text(path, &noise_model_csv(model)).map_err(|source| NoiseError::Io { path: path.into(), source })
}

pub fn read_noise_model(path: &Path) -> Result<NoiseModel, NoiseError> {
    let mut csv = CsvFile::open(path).map_err(|source| NoiseError::Io { path: path.into(), source })?;
    csv.require(&["k", "rsrp0", "sigma_floor", "sigma_cap"])?;
    let mut rows = Vec::new();
    csv.for_each_row(|row| {
        rows.push((row.line(), row.f64("k")?, row.f64("rsrp0")?, row.f64("sigma_floor")?, row.f64("sigma_cap")?));
        Ok(())
    })?;
    match rows.as_slice() {
        [(line, k, rsrp0, floor, cap)] => {
            NoiseModel::with_clamps(*k, *rsrp0, *floor, *cap).map_err(|e| csv.error(*line, e.to_string()).into())
        }
        _ => Err(csv.error(1, format!("expected exactly one model row, found {}", rows.len())).into()),
    }
}

pub fn noise_points_csv(points: &[NoisePoint]) -> String {
    let mut out = String::from("rsrp_dbm,sigma_m,n_samples\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.rsrp, p.sigma_hat, p.n_samples);
    }
    out
}
