//! Versioned JSON document for a whole graph, plus a Graphviz view.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    Axis, Factor, FactorId, FactorKind, GraphError, Node, NodeId, NodeKind, SituationalGraph,
};
use crate::geometry::{Pose, SphericalPlane, Vec3};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("malformed graph document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported graph document version {0}")]
    Version(u32),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Translation plus quaternion `[qx, qy, qz, qw]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let (translation, rotation) = p.to_raw_parts();
        Self {
            translation,
            rotation,
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        Pose::from_raw_parts(r.translation, r.rotation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeValue {
    Keyframe {
        pose: PoseRecord,
    },
    Marker {
        pose: PoseRecord,
        marker_id: u32,
        size: f64,
    },
    Wall {
        azimuth: f64,
        elevation: f64,
        distance: f64,
    },
    Doorway {
        pose: PoseRecord,
    },
    Room {
        center: [f64; 3],
    },
    Corridor {
        center: [f64; 3],
        axis: Axis,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: u64,
    pub fixed: bool,
    #[serde(flatten)]
    pub value: NodeValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorValue {
    Odometry { delta: PoseRecord },
    MarkerObs { local: PoseRecord },
    WallMarker,
    Corridor { marker_center: [f64; 3] },
    Room,
    DoorwayRoom { delta: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub id: u64,
    pub nodes: Vec<u64>,
    #[serde(flatten)]
    pub value: FactorValue,
    /// Row-major.
    pub information: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub version: u32,
    pub next_node: u64,
    pub next_factor: u64,
    pub nodes: Vec<NodeRecord>,
    pub factors: Vec<FactorRecord>,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn node_value(kind: &NodeKind) -> NodeValue {
    match kind {
        NodeKind::Keyframe(p) => NodeValue::Keyframe { pose: p.into() },
        NodeKind::Marker { pose, id, size } => NodeValue::Marker {
            pose: pose.into(),
            marker_id: *id,
            size: *size,
        },
        NodeKind::Wall(w) => NodeValue::Wall {
            azimuth: w.azimuth,
            elevation: w.elevation,
            distance: w.distance,
        },
        NodeKind::Doorway(p) => NodeValue::Doorway { pose: p.into() },
        NodeKind::Room(c) => NodeValue::Room { center: arr(c) },
        NodeKind::Corridor { center, axis } => NodeValue::Corridor {
            center: arr(center),
            axis: *axis,
        },
    }
}

fn node_kind(v: &NodeValue) -> NodeKind {
    match v {
        NodeValue::Keyframe { pose } => NodeKind::Keyframe(pose.into()),
        NodeValue::Marker {
            pose,
            marker_id,
            size,
        } => NodeKind::Marker {
            pose: pose.into(),
            id: *marker_id,
            size: *size,
        },
        NodeValue::Wall {
            azimuth,
            elevation,
            distance,
        } => NodeKind::Wall(SphericalPlane::new(*azimuth, *elevation, *distance)),
        NodeValue::Doorway { pose } => NodeKind::Doorway(pose.into()),
        NodeValue::Room { center } => NodeKind::Room(Vec3::from(*center)),
        NodeValue::Corridor { center, axis } => NodeKind::Corridor {
            center: Vec3::from(*center),
            axis: *axis,
        },
    }
}

fn factor_value(kind: &FactorKind) -> FactorValue {
    match kind {
        FactorKind::Odometry { delta } => FactorValue::Odometry {
            delta: delta.into(),
        },
        FactorKind::MarkerObs { local } => FactorValue::MarkerObs {
            local: local.into(),
        },
        FactorKind::WallMarker => FactorValue::WallMarker,
        FactorKind::Corridor { marker_center } => FactorValue::Corridor {
            marker_center: arr(marker_center),
        },
        FactorKind::Room => FactorValue::Room,
        FactorKind::DoorwayRoom { delta } => FactorValue::DoorwayRoom { delta: arr(delta) },
    }
}

fn factor_kind(v: &FactorValue) -> FactorKind {
    match v {
        FactorValue::Odometry { delta } => FactorKind::Odometry {
            delta: delta.into(),
        },
        FactorValue::MarkerObs { local } => FactorKind::MarkerObs {
            local: local.into(),
        },
        FactorValue::WallMarker => FactorKind::WallMarker,
        FactorValue::Corridor { marker_center } => FactorKind::Corridor {
            marker_center: Vec3::from(*marker_center),
        },
        FactorValue::Room => FactorKind::Room,
        FactorValue::DoorwayRoom { delta } => FactorKind::DoorwayRoom {
            delta: Vec3::from(*delta),
        },
    }
}

impl GraphDocument {
    pub fn from_graph(g: &SituationalGraph) -> Self {
        let (next_node, next_factor) = g.next_ids();
        Self {
            version: GRAPH_FORMAT_VERSION,
            next_node,
            next_factor,
            nodes: g
                .nodes()
                .iter()
                .map(|(id, n)| NodeRecord {
                    id: id.0,
                    fixed: n.fixed,
                    value: node_value(&n.kind),
                })
                .collect(),
            factors: g
                .factors()
                .iter()
                .map(|(id, f)| FactorRecord {
                    id: id.0,
                    nodes: f.nodes.iter().map(|n| n.0).collect(),
                    value: factor_value(&f.kind),
                    information: f
                        .information
                        .row_iter()
                        .map(|r| r.iter().copied().collect())
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_graph(&self) -> Result<SituationalGraph, DocumentError> {
        if self.version != GRAPH_FORMAT_VERSION {
            return Err(DocumentError::Version(self.version));
        }
        let mut nodes = BTreeMap::new();
        for r in &self.nodes {
            let node = Node {
                kind: node_kind(&r.value),
                fixed: r.fixed,
            };
            if nodes.insert(NodeId(r.id), node).is_some() {
                return Err(GraphError::InvalidNode(format!("duplicate node id {}", r.id)).into());
            }
        }
        let mut factors = BTreeMap::new();
        for r in &self.factors {
            let rows = r.information.len();
            if r.information.iter().any(|row| row.len() != rows) {
                return Err(GraphError::BadInformationMatrix(format!(
                    "factor {} information is not square",
                    r.id
                ))
                .into());
            }
            let information = DMatrix::from_fn(rows, rows, |i, j| r.information[i][j]);
            let factor = Factor::new(
                factor_kind(&r.value),
                r.nodes.iter().map(|n| NodeId(*n)).collect(),
                information,
            );
            if factors.insert(FactorId(r.id), factor).is_some() {
                return Err(
                    GraphError::InvalidNode(format!("duplicate factor id {}", r.id)).into(),
                );
            }
        }
        Ok(SituationalGraph::from_parts(
            nodes,
            factors,
            self.next_node,
            self.next_factor,
        )?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph document serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, DocumentError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Graphviz rendering with one cluster per layer.
pub fn to_dot(g: &SituationalGraph) -> String {
    let mut out = String::from("graph sgraph {\n  node [shape=box];\n");
    let layers = [
        (super::Layer::HighLevel, "high_level"),
        (super::Layer::Structural, "structural"),
        (super::Layer::Markers, "markers"),
        (super::Layer::Keyframes, "keyframes"),
    ];
    for (layer, name) in layers {
        let _ = writeln!(out, "  subgraph cluster_{name} {{\n    label=\"{name}\";");
        for (id, n) in g.nodes().iter().filter(|(_, n)| n.tag().layer() == layer) {
            let label = match &n.kind {
                NodeKind::Marker { id: m, .. } => format!("marker {m}"),
                NodeKind::Corridor { axis, .. } => format!("corridor ({axis})"),
                other => format!("{:?}", other.tag()).to_lowercase(),
            };
            let style = if n.fixed { ", style=bold" } else { "" };
            let _ = writeln!(out, "    {id} [label=\"{id}: {label}\"{style}];");
        }
        out.push_str("  }\n");
    }
    for (fid, f) in g.factors() {
        for n in &f.nodes[1..] {
            let _ = writeln!(out, "  {} -- {} [label=\"{fid}\"];", f.nodes[0], n);
        }
    }
    out.push_str("}\n");
    out
}
