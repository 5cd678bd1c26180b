//! Euclidean and single-differenced ranges over local Cartesian coordinates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a transmitting node (anchor / base station).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for NodeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(NodeId)
    }
}

/// Point in a local Cartesian frame, meters. `z` is zero for planar data.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub z: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn planar(x: f64, y: f64) -> Self {
        Self { x, y, z: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("node catalog needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("nodes {0} and {1} share the same position")]
    CoincidentNodes(NodeId, NodeId),
    #[error("node {0} has a non-finite coordinate")]
    NonFinite(NodeId),
}

/// Fixed node positions keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCatalog {
    nodes: BTreeMap<NodeId, Position>,
}

impl NodeCatalog {
    pub fn new<I>(nodes: I) -> Result<Self, GeometryError>
    where
        I: IntoIterator<Item = (NodeId, Position)>,
    {
        let mut map = BTreeMap::new();
        for (id, pos) in nodes {
            if !pos.is_finite() {
                return Err(GeometryError::NonFinite(id));
            }
            if map.insert(id, pos).is_some() {
                return Err(GeometryError::DuplicateNode(id));
            }
        }
        if map.len() < 2 {
            return Err(GeometryError::TooFewNodes(map.len()));
        }
        let entries: Vec<_> = map.iter().collect();
        for (i, (a, pa)) in entries.iter().enumerate() {
            for (b, pb) in &entries[i + 1..] {
                if pa == pb {
                    return Err(GeometryError::CoincidentNodes(**a, **b));
                }
            }
        }
        Ok(Self { nodes: map })
    }

    pub fn get(&self, id: NodeId) -> Option<Position> {
        self.nodes.get(&id).copied()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Position)> + '_ {
        self.nodes.iter().map(|(id, p)| (*id, *p))
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }
}

/// Euclidean distance between two points.
pub fn range(a: Position, b: Position) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Range to `node` minus range to `ref_node`, as seen from `rover`.
pub fn sd_range(rover: Position, node: Position, ref_node: Position) -> f64 {
    range(rover, node) - range(rover, ref_node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn range_examples() {
        assert_eq!(range(Position::planar(0.0, 0.0), Position::planar(3.0, 4.0)), 5.0);
        assert_eq!(range(Position::planar(1.0, 2.0), Position::planar(1.0, 2.0)), 0.0);
        let d = range(Position::new(0.0, 0.0, 0.0), Position::new(1.0, 1.0, 1.0));
        assert!((d - 3f64.sqrt()).abs() < 1e-12);
        assert!((d - 1.7320508).abs() < 1e-7);
    }

    #[test]
    fn sd_range_examples() {
        let o = Position::planar(0.0, 0.0);
        assert_eq!(sd_range(o, Position::planar(10.0, 0.0), Position::planar(0.0, 10.0)), 0.0);
        assert_eq!(sd_range(o, Position::planar(3.0, 4.0), Position::planar(6.0, 8.0)), -5.0);
        let n = Position::new(4.0, -2.0, 1.0);
        assert_eq!(sd_range(Position::planar(17.0, 3.5), n, n), 0.0);
    }

    #[test]
    fn catalog_validation() {
        let p = |x, y| Position::planar(x, y);
        assert_eq!(NodeCatalog::new([(NodeId(1), p(0.0, 0.0))]).unwrap_err(), GeometryError::TooFewNodes(1));
        assert_eq!(
            NodeCatalog::new([(NodeId(1), p(0.0, 0.0)), (NodeId(1), p(1.0, 0.0))]).unwrap_err(),
            GeometryError::DuplicateNode(NodeId(1))
        );
        assert_eq!(
            NodeCatalog::new([(NodeId(1), p(2.0, 0.0)), (NodeId(2), p(2.0, 0.0))]).unwrap_err(),
            GeometryError::CoincidentNodes(NodeId(1), NodeId(2))
        );
        assert_eq!(
            NodeCatalog::new([(NodeId(1), p(f64::NAN, 0.0)), (NodeId(2), p(2.0, 0.0))]).unwrap_err(),
            GeometryError::NonFinite(NodeId(1))
        );
        let cat = NodeCatalog::new([(NodeId(7), p(0.0, 0.0)), (NodeId(3), p(1.0, 0.0))]).unwrap();
        assert_eq!(cat.ids().collect::<Vec<_>>(), vec![NodeId(3), NodeId(7)]);
    }

    fn pos() -> impl Strategy<Value = Position> {
        (-1e3..1e3f64, -1e3..1e3f64, -50.0..50.0f64).prop_map(|(x, y, z)| Position::new(x, y, z))
    }

    proptest! {
        #[test]
        fn range_is_symmetric(a in pos(), b in pos()) {
            prop_assert_eq!(range(a, b), range(b, a));
        }

        #[test]
        fn triangle_inequality(a in pos(), b in pos(), c in pos()) {
            prop_assert!(range(a, c) <= range(a, b) + range(b, c) + 1e-9);
        }

        #[test]
        fn sd_range_bounded_by_baseline(r in pos(), n in pos(), m in pos()) {
            prop_assert!(sd_range(r, n, m).abs() <= range(n, m) + 1e-9);
        }
    }
}
