//! The layered semantic factor graph.
//!
//! Layers, bottom to top:
//!
//! - keyframes (robot poses),
//! - markers (fiducial landmarks observed from keyframes),
//! - structural entities (walls and doorways),
//! - high-level entities (rooms and corridors).
//!
//! Every factor kind has a fixed node-kind signature (see [`FactorTag::signature`]),
//! which is what keeps edges between the layers in the shape of the hierarchy.

mod export;
mod optimize;
pub mod residuals;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{spherical_to_plane, wrap_angle, Pose, SphericalPlane, Tangent6, Vec3, Vec6};
pub use export::{to_dot, DocumentError, GraphDocument, PoseRecord, GRAPH_FORMAT_VERSION};
pub use optimize::{optimize, JacobianMode, OptimizeReport, OptimizerConfig, Termination};
pub use residuals::{CenterTolerances, ResidualError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

/// Horizontal axis along which a wall pair's normals point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Keyframes,
    Markers,
    Structural,
    HighLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeTag {
    Keyframe,
    Marker,
    Wall,
    Doorway,
    Room,
    Corridor,
}

impl NodeTag {
    pub fn layer(self) -> Layer {
        match self {
            NodeTag::Keyframe => Layer::Keyframes,
            NodeTag::Marker => Layer::Markers,
            NodeTag::Wall | NodeTag::Doorway => Layer::Structural,
            NodeTag::Room | NodeTag::Corridor => Layer::HighLevel,
        }
    }

    /// Dimension of the tangent space the optimizer moves the node in.
    pub fn tangent_dim(self) -> usize {
        match self {
            NodeTag::Keyframe | NodeTag::Marker => 6,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Keyframe(Pose),
    Marker {
        pose: Pose,
        id: u32,
        size: f64,
    },
    Wall(SphericalPlane),
    /// Only the translation is optimized; the rotation stays at its measured
    /// value.
    Doorway(Pose),
    Room(Vec3),
    Corridor {
        center: Vec3,
        axis: Axis,
    },
}

impl NodeKind {
    pub fn tag(&self) -> NodeTag {
        match self {
            NodeKind::Keyframe(_) => NodeTag::Keyframe,
            NodeKind::Marker { .. } => NodeTag::Marker,
            NodeKind::Wall(_) => NodeTag::Wall,
            NodeKind::Doorway(_) => NodeTag::Doorway,
            NodeKind::Room(_) => NodeTag::Room,
            NodeKind::Corridor { .. } => NodeTag::Corridor,
        }
    }

    pub fn pose(&self) -> Option<&Pose> {
        match self {
            NodeKind::Keyframe(p) | NodeKind::Doorway(p) | NodeKind::Marker { pose: p, .. } => {
                Some(p)
            }
            _ => None,
        }
    }

    pub fn wall(&self) -> Option<&SphericalPlane> {
        match self {
            NodeKind::Wall(w) => Some(w),
            _ => None,
        }
    }

    /// Center of a room or corridor.
    pub fn center(&self) -> Option<&Vec3> {
        match self {
            NodeKind::Room(c) | NodeKind::Corridor { center: c, .. } => Some(c),
            _ => None,
        }
    }

    /// Moves the value along a tangent vector of dimension
    /// `self.tag().tangent_dim()`.
    pub fn retract(&self, delta: &[f64]) -> NodeKind {
        let v3 = || Vec3::new(delta[0], delta[1], delta[2]);
        match self {
            NodeKind::Keyframe(p) => NodeKind::Keyframe(p.boxplus(&tangent(delta))),
            NodeKind::Marker { pose, id, size } => NodeKind::Marker {
                pose: pose.boxplus(&tangent(delta)),
                id: *id,
                size: *size,
            },
            NodeKind::Wall(w) => NodeKind::Wall(
                SphericalPlane::new(
                    w.azimuth + delta[0],
                    w.elevation + delta[1],
                    w.distance + delta[2],
                )
                .normalized(),
            ),
            NodeKind::Doorway(p) => NodeKind::Doorway(Pose::new(p.rotation, p.translation + v3())),
            NodeKind::Room(c) => NodeKind::Room(c + v3()),
            NodeKind::Corridor { center, axis } => NodeKind::Corridor {
                center: center + v3(),
                axis: *axis,
            },
        }
    }
}

fn tangent(delta: &[f64]) -> Tangent6 {
    Tangent6::from_vector(&Vec6::from_column_slice(delta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub fixed: bool,
}

impl Node {
    pub fn new(kind: NodeKind) -> Self {
        Self { kind, fixed: false }
    }

    pub fn fixed(kind: NodeKind) -> Self {
        Self { kind, fixed: true }
    }

    pub fn tag(&self) -> NodeTag {
        self.kind.tag()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorTag {
    Odometry,
    MarkerObs,
    WallMarker,
    Corridor,
    Room,
    DoorwayRoom,
}

impl FactorTag {
    pub fn residual_dim(self) -> usize {
        match self {
            FactorTag::Odometry | FactorTag::MarkerObs => 6,
            _ => 3,
        }
    }

    /// Node kinds each endpoint must have, in order. A slot listing several
    /// tags accepts any of them.
    pub fn signature(self) -> &'static [&'static [NodeTag]] {
        use NodeTag::*;
        match self {
            FactorTag::Odometry => &[&[Keyframe], &[Keyframe]],
            FactorTag::MarkerObs => &[&[Keyframe], &[Marker]],
            FactorTag::WallMarker => &[&[Marker], &[Wall]],
            FactorTag::Corridor => &[&[Corridor], &[Wall], &[Wall]],
            FactorTag::Room => &[&[Room], &[Wall], &[Wall], &[Wall], &[Wall]],
            FactorTag::DoorwayRoom => &[&[Doorway], &[Room, Corridor]],
        }
    }

    /// Residual components that are angles and therefore wrap.
    pub fn angular_components(self) -> &'static [usize] {
        match self {
            FactorTag::WallMarker => &[0, 1],
            _ => &[],
        }
    }
}

/// Factor kind together with its measurement.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// Endpoints `(k_i, k_j)`; relative pose of `k_j` in `k_i`.
    Odometry { delta: Pose },
    /// Endpoints `(keyframe, marker)`; marker pose in the keyframe frame.
    MarkerObs { local: Pose },
    /// Endpoints `(marker, wall)`.
    WallMarker,
    /// Endpoints `(corridor, wall_a, wall_b)`; global marker center used to
    /// pin the along-wall components.
    Corridor { marker_center: Vec3 },
    /// Endpoints `(room, wx_a, wx_b, wy_a, wy_b)`.
    Room,
    /// Endpoints `(doorway, room or corridor)`; door position relative to the
    /// space center.
    DoorwayRoom { delta: Vec3 },
}

impl FactorKind {
    pub fn tag(&self) -> FactorTag {
        match self {
            FactorKind::Odometry { .. } => FactorTag::Odometry,
            FactorKind::MarkerObs { .. } => FactorTag::MarkerObs,
            FactorKind::WallMarker => FactorTag::WallMarker,
            FactorKind::Corridor { .. } => FactorTag::Corridor,
            FactorKind::Room => FactorTag::Room,
            FactorKind::DoorwayRoom { .. } => FactorTag::DoorwayRoom,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub nodes: Vec<NodeId>,
    pub information: DMatrix<f64>,
}

impl Factor {
    pub fn new(kind: FactorKind, nodes: Vec<NodeId>, information: DMatrix<f64>) -> Self {
        Self {
            kind,
            nodes,
            information,
        }
    }

    pub fn tag(&self) -> FactorTag {
        self.kind.tag()
    }
}

/// Default information matrices (diagonals) per factor kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InformationConfig {
    pub odometry: [f64; 6],
    pub marker_obs: [f64; 6],
    pub wall_marker: [f64; 3],
    pub corridor: [f64; 3],
    pub room: [f64; 3],
    pub doorway_room: [f64; 3],
}

impl Default for InformationConfig {
    fn default() -> Self {
        Self {
            odometry: [100.0; 6],
            marker_obs: [400.0; 6],
            wall_marker: [100.0, 100.0, 400.0],
            corridor: [25.0; 3],
            room: [25.0; 3],
            doorway_room: [25.0; 3],
        }
    }
}

impl InformationConfig {
    pub fn matrix(&self, tag: FactorTag) -> DMatrix<f64> {
        let diag: &[f64] = match tag {
            FactorTag::Odometry => &self.odometry,
            FactorTag::MarkerObs => &self.marker_obs,
            FactorTag::WallMarker => &self.wall_marker,
            FactorTag::Corridor => &self.corridor,
            FactorTag::Room => &self.room,
            FactorTag::DoorwayRoom => &self.doorway_room,
        };
        DMatrix::from_diagonal(&DVector::from_column_slice(diag))
    }

    pub fn scaled(&self, s: f64) -> InformationConfig {
        let m6 = |a: [f64; 6]| a.map(|v| v * s);
        let m3 = |a: [f64; 3]| a.map(|v| v * s);
        InformationConfig {
            odometry: m6(self.odometry),
            marker_obs: m6(self.marker_obs),
            wall_marker: m3(self.wall_marker),
            corridor: m3(self.corridor),
            room: m3(self.room),
            doorway_room: m3(self.doorway_room),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown factor {0}")]
    UnknownFactor(FactorId),
    #[error("{factor:?} factor cannot connect {found:?}")]
    KindMismatch {
        factor: FactorTag,
        found: Vec<NodeTag>,
    },
    #[error("bad information matrix: {0}")]
    BadInformationMatrix(String),
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("marker id {0} already has a node")]
    DuplicateMarkerId(u32),
    #[error("expected exactly one fixed keyframe, found {0}")]
    NoGaugeFixed(usize),
    #[error("normal equations could not be solved: {0}")]
    LinearSolveFailed(String),
    #[error("factor {factor}: {source}")]
    Residual {
        factor: FactorId,
        source: ResidualError,
    },
}

pub type NodeStore = BTreeMap<NodeId, Node>;

fn check_information(tag: FactorTag, info: &DMatrix<f64>) -> Result<(), GraphError> {
    let dim = tag.residual_dim();
    if info.nrows() != dim || info.ncols() != dim {
        return Err(GraphError::BadInformationMatrix(format!(
            "{tag:?} needs {dim}x{dim}, got {}x{}",
            info.nrows(),
            info.ncols()
        )));
    }
    if info.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::BadInformationMatrix("non-finite entry".into()));
    }
    let scale = info.amax().max(f64::MIN_POSITIVE);
    if (info - info.transpose()).amax() > 1e-12 * scale {
        return Err(GraphError::BadInformationMatrix("not symmetric".into()));
    }
    if info.clone().cholesky().is_none() {
        return Err(GraphError::BadInformationMatrix(
            "not positive definite".into(),
        ));
    }
    Ok(())
}

fn check_node(kind: &NodeKind) -> Result<(), GraphError> {
    match kind {
        NodeKind::Marker { size, .. } if !(*size > 0.0) => Err(GraphError::InvalidNode(format!(
            "marker size {size} must be positive"
        ))),
        NodeKind::Wall(w) if !(w.elevation.abs() < std::f64::consts::FRAC_PI_2) => {
            Err(GraphError::InvalidNode(format!(
                "wall elevation {} outside (-pi/2, pi/2)",
                w.elevation
            )))
        }
        _ => Ok(()),
    }
}

/// Typed node/factor container. Ids are handed out monotonically and never
/// reused, including after removal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SituationalGraph {
    nodes: NodeStore,
    factors: BTreeMap<FactorId, Factor>,
    marker_index: BTreeMap<u32, NodeId>,
    next_node: u64,
    next_factor: u64,
}

impl SituationalGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: Node) -> Result<NodeId, GraphError> {
        check_node(&node.kind)?;
        if let NodeKind::Marker { id, .. } = node.kind {
            if self.marker_index.contains_key(&id) {
                return Err(GraphError::DuplicateMarkerId(id));
            }
        }
        let id = NodeId(self.next_node);
        self.next_node += 1;
        if let NodeKind::Marker { id: marker, .. } = node.kind {
            self.marker_index.insert(marker, id);
        }
        self.nodes.insert(id, node);
        Ok(id)
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<FactorId, GraphError> {
        let tag = factor.tag();
        let found: Vec<NodeTag> = factor
            .nodes
            .iter()
            .map(|id| {
                self.nodes
                    .get(id)
                    .map(Node::tag)
                    .ok_or(GraphError::UnknownNode(*id))
            })
            .collect::<Result<_, _>>()?;
        let sig = tag.signature();
        let matches = found.len() == sig.len()
            && found
                .iter()
                .zip(sig)
                .all(|(t, allowed)| allowed.contains(t));
        if !matches {
            return Err(GraphError::KindMismatch { factor: tag, found });
        }
        check_information(tag, &factor.information)?;
        let id = FactorId(self.next_factor);
        self.next_factor += 1;
        self.factors.insert(id, factor);
        Ok(id)
    }

    /// Removes the node and every factor touching it.
    pub fn remove_node(&mut self, id: NodeId) -> Result<Node, GraphError> {
        let node = self.nodes.remove(&id).ok_or(GraphError::UnknownNode(id))?;
        if let NodeKind::Marker { id: marker, .. } = node.kind {
            self.marker_index.remove(&marker);
        }
        self.factors.retain(|_, f| !f.nodes.contains(&id));
        Ok(node)
    }

    pub fn remove_factor(&mut self, id: FactorId) -> Result<Factor, GraphError> {
        self.factors
            .remove(&id)
            .ok_or(GraphError::UnknownFactor(id))
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn factor(&self, id: FactorId) -> Option<&Factor> {
        self.factors.get(&id)
    }

    pub fn nodes(&self) -> &NodeStore {
        &self.nodes
    }

    pub fn factors(&self) -> &BTreeMap<FactorId, Factor> {
        &self.factors
    }

    pub fn marker_node(&self, marker_id: u32) -> Option<NodeId> {
        self.marker_index.get(&marker_id).copied()
    }

    /// Replaces a node value with one of the same kind.
    pub fn set_value(&mut self, id: NodeId, kind: NodeKind) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?;
        let (old, new) = (node.tag(), kind.tag());
        if old != new {
            return Err(GraphError::InvalidNode(format!(
                "cannot replace {old:?} with {new:?}"
            )));
        }
        if let (NodeKind::Marker { id: a, .. }, NodeKind::Marker { id: b, .. }) =
            (&node.kind, &kind)
        {
            if a != b {
                return Err(GraphError::InvalidNode("marker id is immutable".into()));
            }
        }
        check_node(&kind)?;
        node.kind = kind;
        Ok(())
    }

    pub fn set_fixed(&mut self, id: NodeId, fixed: bool) -> Result<(), GraphError> {
        self.nodes
            .get_mut(&id)
            .ok_or(GraphError::UnknownNode(id))?
            .fixed = fixed;
        Ok(())
    }

    pub(crate) fn replace_values(&mut self, nodes: NodeStore) {
        debug_assert!(nodes.keys().eq(self.nodes.keys()));
        self.nodes = nodes;
    }

    pub fn count_nodes(&self, tag: NodeTag) -> usize {
        self.nodes.values().filter(|n| n.tag() == tag).count()
    }

    pub fn count_factors(&self, tag: FactorTag) -> usize {
        self.factors.values().filter(|f| f.tag() == tag).count()
    }

    pub fn layer_of(&self, id: NodeId) -> Option<Layer> {
        self.nodes.get(&id).map(|n| n.tag().layer())
    }

    /// Re-checks every structural invariant: endpoints exist, signatures
    /// match, information matrices are SPD and marker ids are unique.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = BTreeMap::new();
        for (id, node) in &self.nodes {
            check_node(&node.kind)?;
            if let NodeKind::Marker { id: m, .. } = node.kind {
                if seen.insert(m, *id).is_some() {
                    return Err(GraphError::DuplicateMarkerId(m));
                }
            }
        }
        for factor in self.factors.values() {
            let found: Vec<NodeTag> = factor
                .nodes
                .iter()
                .map(|id| {
                    self.nodes
                        .get(id)
                        .map(Node::tag)
                        .ok_or(GraphError::UnknownNode(*id))
                })
                .collect::<Result<_, _>>()?;
            let sig = factor.tag().signature();
            if found.len() != sig.len() || !found.iter().zip(sig).all(|(t, a)| a.contains(t)) {
                return Err(GraphError::KindMismatch {
                    factor: factor.tag(),
                    found,
                });
            }
            check_information(factor.tag(), &factor.information)?;
        }
        Ok(())
    }

    pub fn residual(&self, id: FactorId) -> Result<DVector<f64>, GraphError> {
        let f = self.factors.get(&id).ok_or(GraphError::UnknownFactor(id))?;
        evaluate_residual(f, &self.nodes)
            .map_err(|source| GraphError::Residual { factor: id, source })
    }

    /// Sum of squared Mahalanobis norms over every factor.
    pub fn total_cost(&self) -> Result<f64, GraphError> {
        let mut cost = 0.0;
        for (id, f) in &self.factors {
            let r = evaluate_residual(f, &self.nodes).map_err(|source| GraphError::Residual {
                factor: *id,
                source,
            })?;
            cost += (r.transpose() * &f.information * &r)[(0, 0)];
        }
        Ok(cost)
    }

    pub(crate) fn next_ids(&self) -> (u64, u64) {
        (self.next_node, self.next_factor)
    }

    pub(crate) fn from_parts(
        nodes: NodeStore,
        factors: BTreeMap<FactorId, Factor>,
        next_node: u64,
        next_factor: u64,
    ) -> Result<Self, GraphError> {
        let marker_index = nodes
            .iter()
            .filter_map(|(id, n)| match n.kind {
                NodeKind::Marker { id: m, .. } => Some((m, *id)),
                _ => None,
            })
            .collect();
        let g = Self {
            nodes,
            factors,
            marker_index,
            next_node,
            next_factor,
        };
        g.validate()?;
        if g.nodes.keys().any(|id| id.0 >= next_node)
            || g.factors.keys().any(|id| id.0 >= next_factor)
        {
            return Err(GraphError::InvalidNode(
                "id counter behind existing ids".into(),
            ));
        }
        Ok(g)
    }
}

fn pose_of(nodes: &NodeStore, id: NodeId) -> &Pose {
    nodes[&id].kind.pose().expect("signature checked")
}

fn wall_of(nodes: &NodeStore, id: NodeId) -> &SphericalPlane {
    nodes[&id].kind.wall().expect("signature checked")
}

fn center_of(nodes: &NodeStore, id: NodeId) -> &Vec3 {
    nodes[&id].kind.center().expect("signature checked")
}

/// Residual of `factor` at the values in `nodes`. Angular components are
/// wrapped into `(-pi, pi]`.
pub fn evaluate_residual(
    factor: &Factor,
    nodes: &NodeStore,
) -> Result<DVector<f64>, ResidualError> {
    let ids = &factor.nodes;
    let tol = CenterTolerances::default();
    let out: Vec<f64> = match &factor.kind {
        FactorKind::Odometry { delta } => {
            residuals::residual_odometry(pose_of(nodes, ids[0]), pose_of(nodes, ids[1]), delta)
                .to_vec()
        }
        FactorKind::MarkerObs { local } => {
            residuals::residual_marker(pose_of(nodes, ids[0]), pose_of(nodes, ids[1]), local)
                .to_vec()
        }
        FactorKind::WallMarker => {
            residuals::residual_wall_marker(wall_of(nodes, ids[1]), pose_of(nodes, ids[0]))?
                .to_vec()
        }
        FactorKind::Corridor { marker_center } => residuals::residual_corridor(
            center_of(nodes, ids[0]),
            &spherical_to_plane(wall_of(nodes, ids[1])),
            &spherical_to_plane(wall_of(nodes, ids[2])),
            marker_center,
            &tol,
        )?
        .as_slice()
        .to_vec(),
        FactorKind::Room => {
            let planes: Vec<_> = ids[1..5]
                .iter()
                .map(|id| spherical_to_plane(wall_of(nodes, *id)))
                .collect();
            residuals::residual_room(
                center_of(nodes, ids[0]),
                [&planes[0], &planes[1], &planes[2], &planes[3]],
                &tol,
            )?
            .as_slice()
            .to_vec()
        }
        FactorKind::DoorwayRoom { delta } => {
            residuals::residual_doorway(pose_of(nodes, ids[0]), center_of(nodes, ids[1]), delta)
                .as_slice()
                .to_vec()
        }
    };
    let mut r = DVector::from_vec(out);
    for &i in factor.tag().angular_components() {
        r[i] = wrap_angle(r[i]);
    }
    Ok(r)
}

/// Analytic Jacobian blocks, one per endpoint, each `residual_dim x tangent_dim`.
pub fn analytic_jacobian(
    factor: &Factor,
    nodes: &NodeStore,
) -> Result<Vec<DMatrix<f64>>, ResidualError> {
    let ids = &factor.nodes;
    let tol = CenterTolerances::default();
    Ok(match &factor.kind {
        FactorKind::Odometry { delta } => {
            let (a, b) =
                residuals::jacobian_odometry(pose_of(nodes, ids[0]), pose_of(nodes, ids[1]), delta);
            vec![to_dyn(&a), to_dyn(&b)]
        }
        FactorKind::MarkerObs { local } => {
            let (a, b) =
                residuals::jacobian_marker(pose_of(nodes, ids[0]), pose_of(nodes, ids[1]), local);
            vec![to_dyn(&a), to_dyn(&b)]
        }
        FactorKind::WallMarker => {
            let (a, b) =
                residuals::jacobian_wall_marker(wall_of(nodes, ids[1]), pose_of(nodes, ids[0]))?;
            vec![to_dyn(&a), to_dyn(&b)]
        }
        FactorKind::Corridor { marker_center } => residuals::jacobian_corridor(
            wall_of(nodes, ids[1]),
            wall_of(nodes, ids[2]),
            marker_center,
            &tol,
        )?
        .iter()
        .map(to_dyn)
        .collect(),
        FactorKind::Room => {
            let walls: Vec<&SphericalPlane> =
                ids[1..5].iter().map(|id| wall_of(nodes, *id)).collect();
            residuals::jacobian_room([walls[0], walls[1], walls[2], walls[3]], &tol)?
                .iter()
                .map(to_dyn)
                .collect()
        }
        FactorKind::DoorwayRoom { .. } => {
            vec![-DMatrix::identity(3, 3), DMatrix::identity(3, 3)]
        }
    })
}

fn to_dyn<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Central-difference Jacobian blocks with step `h` along each tangent
/// direction of each endpoint.
pub fn numeric_jacobian(
    factor: &Factor,
    nodes: &NodeStore,
    h: f64,
) -> Result<Vec<DMatrix<f64>>, ResidualError> {
    let angular = factor.tag().angular_components();
    let mut scratch = nodes.clone();
    let mut blocks = Vec::with_capacity(factor.nodes.len());
    for id in &factor.nodes {
        let base = nodes[id].clone();
        let dim = base.tag().tangent_dim();
        let mut block = DMatrix::zeros(factor.tag().residual_dim(), dim);
        for k in 0..dim {
            let mut step = vec![0.0; dim];
            step[k] = h;
            scratch.get_mut(id).unwrap().kind = base.kind.retract(&step);
            let plus = evaluate_residual(factor, &scratch)?;
            step[k] = -h;
            scratch.get_mut(id).unwrap().kind = base.kind.retract(&step);
            let minus = evaluate_residual(factor, &scratch)?;
            let mut diff = plus - minus;
            for &i in angular {
                diff[i] = wrap_angle(diff[i]);
            }
            block.set_column(k, &(diff / (2.0 * h)));
        }
        scratch.insert(*id, base);
        blocks.push(block);
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests;
