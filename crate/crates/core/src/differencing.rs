//! Single differences (TDoA) against a reference node.
//!
//! Subtracting the reference node's pseudorange from every other node's
//! pseudorange in the same epoch removes any term common to all of them,
//! in particular the rover clock offset.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::NodeId;
use crate::ingestion::Epoch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DifferencingError {
    #[error("reference node {reference} missing from epoch at t={time}")]
    ReferenceMissing { reference: NodeId, time: f64 },
    #[error("session has no epochs")]
    EmptySession,
}

/// Single-differenced pseudorange `P^node - P^ref`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdoaObservation {
    pub time: f64,
    pub node: NodeId,
    pub ref_node: NodeId,
    /// Meters.
    pub sd_pseudorange: f64,
    pub rsrp_node: Option<f64>,
    pub rsrp_ref: Option<f64>,
}

/// How the reference node of a session is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferencePolicy {
    /// Node seen in the most epochs; ties go to the smallest id.
    #[default]
    MostVisible,
    Fixed(NodeId),
}

impl FromStr for ReferencePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Self::MostVisible);
        }
        s.parse::<NodeId>().map(Self::Fixed).map_err(|_| format!("expected `auto` or a node id, got `{s}`"))
    }
}

/// What to do with an epoch lacking the session reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingReference {
    /// Skip the epoch entirely.
    #[default]
    Drop,
    /// Difference against the smallest-id node present and translate biases
    /// through the table's reference.
    Rereference,
}

impl FromStr for MissingReference {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "drop" => Ok(Self::Drop),
            "rereference" => Ok(Self::Rereference),
            other => Err(format!("expected drop|rereference, got `{other}`")),
        }
    }
}

/// One TDoA per non-reference observation of `epoch`.
pub fn form_tdoa(epoch: &Epoch, ref_node: NodeId) -> Result<Vec<TdoaObservation>, DifferencingError> {
    let reference =
        epoch.get(ref_node).ok_or(DifferencingError::ReferenceMissing { reference: ref_node, time: epoch.time })?;
    Ok(epoch
        .observations
        .iter()
        .filter(|o| o.node != ref_node)
        .map(|o| TdoaObservation {
            time: epoch.time,
            node: o.node,
            ref_node,
            sd_pseudorange: o.pseudorange - reference.pseudorange,
            rsrp_node: o.rsrp,
            rsrp_ref: reference.rsrp,
        })
        .collect())
}

pub fn select_reference(epochs: &[Epoch], policy: ReferencePolicy) -> Result<NodeId, DifferencingError> {
    if epochs.is_empty() {
        return Err(DifferencingError::EmptySession);
    }
    match policy {
        ReferencePolicy::Fixed(id) => Ok(id),
        ReferencePolicy::MostVisible => {
            let mut counts: BTreeMap<NodeId, usize> = BTreeMap::new();
            for obs in epochs.iter().flat_map(|e| &e.observations) {
                *counts.entry(obs.node).or_default() += 1;
            }
            // BTreeMap iterates ids ascending, so the first maximum wins ties.
            counts
                .into_iter()
                .fold(None, |best: Option<(NodeId, usize)>, (id, n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((id, n)),
                })
                .map(|(id, _)| id)
                .ok_or(DifferencingError::EmptySession)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::ToaObservation;
    use proptest::prelude::*;

    fn epoch(time: f64, obs: &[(u32, f64)]) -> Epoch {
        Epoch {
            time,
            observations: obs
                .iter()
                .map(|&(n, pr)| ToaObservation {
                    time,
                    node: NodeId(n),
                    pseudorange: pr,
                    rsrp: Some(-70.0 - f64::from(n)),
                })
                .collect(),
        }
    }

    #[test]
    fn subtraction_definition() {
        let e = epoch(1.0, &[(1, 65.0), (2, 62.0)]);
        let t = form_tdoa(&e, NodeId(2)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].sd_pseudorange, 3.0);
        assert_eq!(t[0].node, NodeId(1));
        assert_eq!(t[0].ref_node, NodeId(2));
        assert_eq!(t[0].rsrp_node, Some(-71.0));
        assert_eq!(t[0].rsrp_ref, Some(-72.0));
    }

    #[test]
    fn reference_only_epoch_gives_nothing() {
        assert!(form_tdoa(&epoch(0.0, &[(5, 60.0)]), NodeId(5)).unwrap().is_empty());
    }

    #[test]
    fn missing_reference_is_reported() {
        let err = form_tdoa(&epoch(3.0, &[(1, 60.0)]), NodeId(5)).unwrap_err();
        assert_eq!(err, DifferencingError::ReferenceMissing { reference: NodeId(5), time: 3.0 });
    }

    #[test]
    fn most_visible_reference() {
        let epochs = vec![
            epoch(0.0, &[(1, 0.0), (5, 0.0)]),
            epoch(1.0, &[(2, 0.0), (5, 0.0)]),
            epoch(2.0, &[(5, 0.0), (3, 0.0)]),
        ];
        assert_eq!(select_reference(&epochs, ReferencePolicy::MostVisible).unwrap(), NodeId(5));
    }

    #[test]
    fn tie_goes_to_smallest_id() {
        let epochs = vec![epoch(0.0, &[(7, 0.0), (3, 0.0), (9, 0.0)]), epoch(1.0, &[(3, 0.0), (7, 0.0)])];
        assert_eq!(select_reference(&epochs, ReferencePolicy::MostVisible).unwrap(), NodeId(3));
    }

    #[test]
    fn fixed_reference_and_empty_session() {
        let epochs = vec![epoch(0.0, &[(1, 0.0), (5, 0.0)])];
        assert_eq!(select_reference(&epochs, ReferencePolicy::Fixed(NodeId(5))).unwrap(), NodeId(5));
        assert_eq!(select_reference(&[], ReferencePolicy::MostVisible), Err(DifferencingError::EmptySession));
        assert_eq!("auto".parse::<ReferencePolicy>().unwrap(), ReferencePolicy::MostVisible);
        assert_eq!("5".parse::<ReferencePolicy>().unwrap(), ReferencePolicy::Fixed(NodeId(5)));
        assert!("x5".parse::<ReferencePolicy>().is_err());
    }

    fn ranges() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..200.0f64, 2..9)
    }

    proptest! {
        #[test]
        fn output_count_is_observations_minus_one(prs in ranges()) {
            let obs: Vec<_> = prs.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
            let e = epoch(0.0, &obs);
            prop_assert_eq!(form_tdoa(&e, NodeId(0)).unwrap().len(), prs.len() - 1);
        }

        #[test]
        fn common_offset_cancels(prs in ranges(), c in -100.0..100.0f64) {
            // offsets on a 2^-10 grid keep the additions exact
            let q = |v: f64| (v * 1024.0).round() / 1024.0;
            let obs: Vec<_> = prs.iter().enumerate().map(|(i, &p)| (i as u32, q(p))).collect();
            let shifted: Vec<_> = obs.iter().map(|&(n, p)| (n, p + q(c))).collect();
            let a = form_tdoa(&epoch(0.0, &obs), NodeId(0)).unwrap();
            let b = form_tdoa(&epoch(0.0, &shifted), NodeId(0)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn common_offset_cancels_to_rounding(prs in ranges(), c in -100.0..100.0f64) {
            let obs: Vec<_> = prs.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
            let shifted: Vec<_> = obs.iter().map(|&(n, p)| (n, p + c)).collect();
            let a = form_tdoa(&epoch(0.0, &obs), NodeId(0)).unwrap();
            let b = form_tdoa(&epoch(0.0, &shifted), NodeId(0)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.sd_pseudorange - y.sd_pseudorange).abs() < 1e-12 * 400.0);
            }
        }

        #[test]
        fn swapping_roles_negates(a in 0.0..200.0f64, b in 0.0..200.0f64) {
            let e = epoch(0.0, &[(1, a), (2, b)]);
            let ab = form_tdoa(&e, NodeId(2)).unwrap()[0].sd_pseudorange;
            let ba = form_tdoa(&e, NodeId(1)).unwrap()[0].sd_pseudorange;
            prop_assert_eq!(ab, -ba);
        }
    }
}
