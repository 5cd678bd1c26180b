//! Differential transmitter biases.
//!
//! With the rover position known, removing the single-differenced geometry
//! from a TDoA leaves `-b^n + b^m`: the bias of node `n` relative to the
//! reference `m`. Individual node biases are not observable, only these
//! differences. Per-session averages are collected in a [`DtbTable`], which
//! is what a network operator would publish to users.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::differencing::TdoaObservation;
use crate::geometry::{sd_range, NodeCatalog, NodeId, Position};
use crate::table::{write_text, CsvFile, ParseError};

#[derive(Debug, Error)]
pub enum DtbError {
    #[error("node {0} is not known")]
    UnknownNode(NodeId),
    #[error("samples mix reference nodes {0} and {1}")]
    MixedReference(NodeId, NodeId),
    #[error("no DTB samples to aggregate")]
    NoSamples,
    #[error("invalid DTB entry for node {node}: {reason}")]
    InvalidEntry { node: NodeId, reason: String },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Bias of `node` relative to `ref_node` at one epoch, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtbSample {
    pub time: f64,
    pub node: NodeId,
    pub ref_node: NodeId,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtbEntry {
    pub mean: f64,
    pub std: f64,
    pub n_samples: usize,
}

/// Per-node mean DTB against one reference node for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct DtbTable {
    session: String,
    ref_node: NodeId,
    entries: BTreeMap<NodeId, DtbEntry>,
}

impl DtbTable {
    pub fn new(
        session: impl Into<String>,
        ref_node: NodeId,
        entries: BTreeMap<NodeId, DtbEntry>,
    ) -> Result<Self, DtbError> {
        for (&node, e) in &entries {
            let invalid = |reason: &str| DtbError::InvalidEntry { node, reason: reason.into() };
            if node == ref_node {
                return Err(invalid("the reference node has no entry"));
            }
            if e.n_samples == 0 {
                return Err(invalid("n_samples must be at least 1"));
            }
            if !e.mean.is_finite() || !e.std.is_finite() {
                return Err(invalid("non-finite value"));
            }
            if e.std < 0.0 {
                return Err(invalid("negative std"));
            }
        }
        Ok(Self { session: session.into(), ref_node, entries })
    }

    /// Table with a zero bias for every non-reference node, i.e. no correction.
    pub fn zeros(session: impl Into<String>, ref_node: NodeId, nodes: impl IntoIterator<Item = NodeId>) -> Self {
        let entries = nodes
            .into_iter()
            .filter(|&n| n != ref_node)
            .map(|n| (n, DtbEntry { mean: 0.0, std: 0.0, n_samples: 1 }))
            .collect();
        Self { session: session.into(), ref_node, entries }
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    pub fn ref_node(&self) -> NodeId {
        self.ref_node
    }

    pub fn entries(&self) -> &BTreeMap<NodeId, DtbEntry> {
        &self.entries
    }

    pub fn get(&self, node: NodeId) -> Option<&DtbEntry> {
        self.entries.get(&node)
    }

    /// Mean DTB of `node` against this table's reference (zero for the
    /// reference itself).
    pub fn mean(&self, node: NodeId) -> Option<f64> {
        if node == self.ref_node {
            Some(0.0)
        } else {
            self.entries.get(&node).map(|e| e.mean)
        }
    }

    /// Mean DTB of `node` against an arbitrary `reference`, translated through
    /// this table's reference: `DTB(n,k) = DTB(n,m) - DTB(k,m)`.
    pub fn between(&self, node: NodeId, reference: NodeId) -> Option<f64> {
        Some(self.mean(node)? - self.mean(reference)?)
    }
}

pub fn instantaneous_dtb(obs: &TdoaObservation, rover: Position, catalog: &NodeCatalog) -> Result<DtbSample, DtbError> {
    let node = catalog.get(obs.node).ok_or(DtbError::UnknownNode(obs.node))?;
    let reference = catalog.get(obs.ref_node).ok_or(DtbError::UnknownNode(obs.ref_node))?;
    Ok(DtbSample {
        time: obs.time,
        node: obs.node,
        ref_node: obs.ref_node,
        value: obs.sd_pseudorange - sd_range(rover, node, reference),
    })
}

/// Mean and sample standard deviation (n-1 divisor, zero for one value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Averages samples per node. With `trim_sigma = Some(k)` samples farther
/// than `k` standard deviations from a node's first-pass mean are discarded
/// before the final statistics.
pub fn aggregate_dtb(
    samples: &[DtbSample],
    session: impl Into<String>,
    trim_sigma: Option<f64>,
) -> Result<DtbTable, DtbError> {
    let first = samples.first().ok_or(DtbError::NoSamples)?;
    let ref_node = first.ref_node;
    let mut by_node: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    for s in samples {
        if s.ref_node != ref_node {
            return Err(DtbError::MixedReference(ref_node, s.ref_node));
        }
        by_node.entry(s.node).or_default().push(s.value);
    }
    let entries = by_node
        .into_iter()
        .map(|(node, mut values)| {
            if let Some(k) = trim_sigma {
                let (mean, std) = mean_std(&values);
                if std > 0.0 {
                    values.retain(|v| (v - mean).abs() <= k * std);
                }
            }
            let (mean, std) = mean_std(&values);
            (node, DtbEntry { mean, std, n_samples: values.len() })
        })
        .collect();
    DtbTable::new(session, ref_node, entries)
}

/// Expresses `table` against `new_ref`. Standard deviations combine as if
/// independent; the old reference gains an entry.
pub fn rereference_dtb(table: &DtbTable, new_ref: NodeId) -> Result<DtbTable, DtbError> {
    if new_ref == table.ref_node {
        return Ok(table.clone());
    }
    let pivot = *table.entries.get(&new_ref).ok_or(DtbError::UnknownNode(new_ref))?;
    let mut entries: BTreeMap<NodeId, DtbEntry> = table
        .entries
        .iter()
        .filter(|(&n, _)| n != new_ref)
        .map(|(&n, e)| {
            (
                n,
                DtbEntry {
                    mean: e.mean - pivot.mean,
                    std: e.std.hypot(pivot.std),
                    n_samples: e.n_samples.min(pivot.n_samples),
                },
            )
        })
        .collect();
    entries.insert(table.ref_node, DtbEntry { mean: -pivot.mean, ..pivot });
    DtbTable::new(table.session.clone(), new_ref, entries)
}

pub const DTB_HEADER: &str = "session,ref_node,node_id,mean_m,std_m,n_samples";

pub fn dtb_csv(table: &DtbTable) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for (node, e) in &table.entries {
        w.write_record([
            table.session.clone(),
            table.ref_node.to_string(),
            node.to_string(),
            e.mean.to_string(),
            e.std.to_string(),
            e.n_samples.to_string(),
        ])
        .expect("writing to memory");
    }
    let body = String::from_utf8(w.into_inner().expect("writing to memory")).expect("utf-8 input");
    format!("{DTB_HEADER}\n{body}")
}

pub fn write_dtb(path: &Path, table: &DtbTable) -> Result<(), DtbError> {
    write_text(path, &dtb_csv(table)).map_err(|source| DtbError::Io { path: path.into(), source })
}

pub fn read_dtb(path: &Path) -> Result<DtbTable, DtbError> {
    let io = |source| DtbError::Io { path: path.into(), source };
    let mut csv = CsvFile::open(path).map_err(io)?;
    parse_dtb(&mut csv)
}

fn parse_dtb(csv: &mut CsvFile) -> Result<DtbTable, DtbError> {
    csv.require(&["session", "ref_node", "node_id", "mean_m", "std_m", "n_samples"])?;
    let mut header: Option<(String, NodeId)> = None;
    let mut entries = BTreeMap::new();
    csv.for_each_row(|row| {
        let session = row.str("session")?.to_string();
        let ref_node: NodeId = row.parse("ref_node")?;
        let node: NodeId = row.parse("node_id")?;
        let mean = row.f64("mean_m")?;
        let std = row.f64("std_m")?;
        let n_samples: usize = row.parse("n_samples")?;
        match &header {
            None => header = Some((session, ref_node)),
            Some((s, r)) if *s != session || *r != ref_node => {
                return Err(row.error("all rows must share one session and ref_node"));
            }
            Some(_) => {}
        }
        if node == ref_node {
            return Err(row.error("reference node listed as an entry"));
        }
        if std < 0.0 {
            return Err(row.error(format!("negative std_m {std}")));
        }
        if n_samples == 0 {
            return Err(row.error("n_samples must be at least 1"));
        }
        match entries.entry(node) {
            Entry::Occupied(_) => return Err(row.error(format!("duplicate node_id {node}"))),
            Entry::Vacant(v) => {
                v.insert(DtbEntry { mean, std, n_samples });
            }
        }
        Ok(())
    })?;
    let (session, ref_node) = header.ok_or_else(|| csv.error(1, "DTB file has no rows"))?;
    DtbTable::new(session, ref_node, entries)
}

/// Plot-ready per-epoch DTB series.
pub fn samples_csv(samples: &[DtbSample]) -> String {
    let mut out = String::from("time,node_id,ref_node,dtb_m\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{},{}", s.time, s.node, s.ref_node, s.value);
    }
    out
}
