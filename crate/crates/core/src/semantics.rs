//! Marker classification and semantic entity formation.
//!
//! A [`SemanticDictionary`] says, for every known marker id, whether the
//! marker sits on a wall or a doorway and which space it belongs to. The
//! [`SemanticMapper`] turns marker detections into graph nodes and factors
//! and promotes mapped walls to rooms and corridors.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    plane_from_marker, plane_refine, plane_to_spherical, spherical_to_plane, GeometryError, Pose,
    Vec3,
};
use crate::sgraph::residuals::{corridor_center, room_center};
use crate::sgraph::{
    Axis, CenterTolerances, Factor, FactorId, FactorKind, FactorTag, GraphError, InformationConfig,
    Node, NodeId, NodeKind, NodeTag, SituationalGraph,
};

pub const DICTIONARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Wall,
    Doorway,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum AxisHint {
    X,
    Y,
    #[default]
    None,
}

impl AxisHint {
    pub fn axis(self) -> Option<Axis> {
        match self {
            AxisHint::X => Some(Axis::X),
            AxisHint::Y => Some(Axis::Y),
            AxisHint::None => None,
        }
    }
}

/// One marker's role. Carries no geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub marker_id: u32,
    pub entity_kind: EntityKind,
    pub space_id: u32,
    #[serde(default)]
    pub wall_axis_hint: AxisHint,
    /// Which of the two walls along `wall_axis_hint` (0 or 1). Markers that
    /// share a physical wall share the side.
    #[serde(default)]
    pub wall_side: u8,
}

/// A wall position within a space: the axis its normal points along and
/// which of the two parallel walls it is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WallSlot {
    pub axis: Axis,
    pub side: u8,
}

impl fmt::Display for WallSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.axis, self.side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceKind {
    Room,
    Corridor(Axis),
}

#[derive(Debug, Error, PartialEq)]
pub enum DictionaryError {
    #[error("cannot parse dictionary: {0}")]
    Parse(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    version: u32,
    entries: Vec<DictionaryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDictionary {
    entries: BTreeMap<u32, DictionaryEntry>,
    spaces: BTreeMap<u32, SpaceKind>,
}

impl SemanticDictionary {
    /// Validates uniqueness of marker ids and the wall layout of every space.
    pub fn from_entries(entries: Vec<DictionaryEntry>) -> Result<Self, DictionaryError> {
        let mut map = BTreeMap::new();
        for e in entries {
            let id = e.marker_id;
            if map.insert(id, e).is_some() {
                return Err(DictionaryError::Parse(format!("duplicate marker id {id}")));
            }
        }
        let mut slots: BTreeMap<u32, BTreeSet<WallSlot>> = BTreeMap::new();
        for e in map.values().filter(|e| e.entity_kind == EntityKind::Wall) {
            let axis = e.wall_axis_hint.axis().ok_or_else(|| {
                DictionaryError::InvalidTopology(format!(
                    "wall marker {} has no axis hint",
                    e.marker_id
                ))
            })?;
            if e.wall_side > 1 {
                return Err(DictionaryError::InvalidTopology(format!(
                    "wall marker {} has side {}",
                    e.marker_id, e.wall_side
                )));
            }
            slots.entry(e.space_id).or_default().insert(WallSlot {
                axis,
                side: e.wall_side,
            });
        }
        let mut spaces = BTreeMap::new();
        for (space, s) in &slots {
            let has = |axis, side| s.contains(&WallSlot { axis, side });
            let kind = match s.len() {
                2 if has(Axis::X, 0) && has(Axis::X, 1) => SpaceKind::Corridor(Axis::X),
                2 if has(Axis::Y, 0) && has(Axis::Y, 1) => SpaceKind::Corridor(Axis::Y),
                4 => SpaceKind::Room,
                n => {
                    return Err(DictionaryError::InvalidTopology(format!(
                        "space {space} has {n} walls that form neither a corridor nor a room"
                    )))
                }
            };
            spaces.insert(*space, kind);
        }
        for e in map
            .values()
            .filter(|e| e.entity_kind == EntityKind::Doorway)
        {
            if !spaces.contains_key(&e.space_id) {
                return Err(DictionaryError::InvalidTopology(format!(
                    "doorway marker {} references unknown space {}",
                    e.marker_id, e.space_id
                )));
            }
        }
        Ok(Self {
            entries: map,
            spaces,
        })
    }

    pub fn entry(&self, marker_id: u32) -> Option<&DictionaryEntry> {
        self.entries.get(&marker_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DictionaryEntry> {
        self.entries.values()
    }

    pub fn space(&self, space_id: u32) -> Option<SpaceKind> {
        self.spaces.get(&space_id).copied()
    }

    pub fn spaces(&self) -> impl Iterator<Item = (u32, SpaceKind)> + '_ {
        self.spaces.iter().map(|(k, v)| (*k, *v))
    }

    /// Slot of a wall marker, `None` for doorways and unknown ids.
    pub fn wall_slot(&self, marker_id: u32) -> Option<(u32, WallSlot)> {
        let e = self.entries.get(&marker_id)?;
        if e.entity_kind != EntityKind::Wall {
            return None;
        }
        Some((
            e.space_id,
            WallSlot {
                axis: e.wall_axis_hint.axis()?,
                side: e.wall_side,
            },
        ))
    }

    pub fn to_json(&self) -> String {
        let file = DictionaryFile {
            version: DICTIONARY_FORMAT_VERSION,
            entries: self.entries.values().cloned().collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("dictionary serializes");
        s.push('\n');
        s
    }
}

pub fn load_dictionary(source: &str) -> Result<SemanticDictionary, DictionaryError> {
    let file: DictionaryFile =
        serde_json::from_str(source).map_err(|e| DictionaryError::Parse(e.to_string()))?;
    if file.version != DICTIONARY_FORMAT_VERSION {
        return Err(DictionaryError::Parse(format!(
            "unsupported version {}",
            file.version
        )));
    }
    SemanticDictionary::from_entries(file.entries)
}

/// A marker detection made from one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerObservation {
    pub marker_id: u32,
    /// Marker pose in the camera (keyframe) frame.
    pub local_pose: Pose,
    pub keyframe: NodeId,
    /// Side length, meters.
    pub size: f64,
    /// Points on the host surface around the marker, camera frame.
    pub nearby_points: Option<Vec<Vec3>>,
}

/// Which semantic layers ingestion may build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSet {
    pub markers: bool,
    pub walls: bool,
    pub spaces: bool,
    pub doorways: bool,
}

impl LayerSet {
    pub const ALL: LayerSet = LayerSet {
        markers: true,
        walls: true,
        spaces: true,
        doorways: true,
    };
    pub const NONE: LayerSet = LayerSet {
        markers: false,
        walls: false,
        spaces: false,
        doorways: false,
    };

    /// Each layer needs the one below it.
    pub fn is_monotone(&self) -> bool {
        (!self.walls || self.markers)
            && (!self.spaces || self.walls)
            && (!self.doorways || self.spaces)
    }
}

/// Data-association state: which graph node stands for which entity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityLedger {
    pub markers: BTreeMap<u32, NodeId>,
    pub walls: BTreeMap<(u32, WallSlot), NodeId>,
    pub spaces: BTreeMap<u32, NodeId>,
    pub doorways: BTreeMap<u32, NodeId>,
    seen: BTreeSet<(u32, NodeId)>,
    linked_doorways: BTreeSet<u32>,
    /// Latest attached marker per corridor space, with a flag for
    /// observations not yet turned into a corridor factor.
    corridor_latest: BTreeMap<u32, (u32, bool)>,
}

impl EntityLedger {
    /// True when every entry names a live node of the expected kind.
    pub fn is_consistent_with(&self, g: &SituationalGraph) -> bool {
        let is =
            |id: &NodeId, tags: &[NodeTag]| g.node(*id).is_some_and(|n| tags.contains(&n.tag()));
        self.markers
            .iter()
            .all(|(m, id)| is(id, &[NodeTag::Marker]) && g.marker_node(*m) == Some(*id))
            && self.walls.values().all(|id| is(id, &[NodeTag::Wall]))
            && self
                .spaces
                .values()
                .all(|id| is(id, &[NodeTag::Room, NodeTag::Corridor]))
            && self.doorways.values().all(|id| is(id, &[NodeTag::Doorway]))
    }

    pub fn is_formed(&self, space_id: u32) -> bool {
        self.spaces.contains_key(&space_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    Node(NodeId, NodeTag),
    Factor(FactorId, FactorTag),
}

#[derive(Debug, Error, PartialEq)]
pub enum SemanticError {
    #[error("observation references unknown keyframe {0}")]
    UnknownKeyframe(NodeId),
    #[error("marker {0} has non-positive size")]
    BadMarkerSize(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Builds the marker, structural and high-level layers of a graph from
/// detections.
#[derive(Debug, Clone)]
pub struct SemanticMapper {
    pub dictionary: SemanticDictionary,
    pub ledger: EntityLedger,
    pub layers: LayerSet,
    pub tolerances: CenterTolerances,
    pub information: InformationConfig,
}

impl SemanticMapper {
    pub fn new(
        dictionary: SemanticDictionary,
        layers: LayerSet,
        information: InformationConfig,
    ) -> Self {
        Self {
            dictionary,
            ledger: EntityLedger::default(),
            layers,
            tolerances: CenterTolerances::default(),
            information,
        }
    }

    fn add_factor(
        &self,
        g: &mut SituationalGraph,
        out: &mut Vec<Mutation>,
        kind: FactorKind,
        nodes: Vec<NodeId>,
    ) -> Result<(), GraphError> {
        let tag = kind.tag();
        let id = g.add_factor(Factor::new(kind, nodes, self.information.matrix(tag)))?;
        out.push(Mutation::Factor(id, tag));
        Ok(())
    }

    fn add_node(
        g: &mut SituationalGraph,
        out: &mut Vec<Mutation>,
        kind: NodeKind,
    ) -> Result<NodeId, GraphError> {
        let tag = kind.tag();
        let id = g.add_node(Node::new(kind))?;
        out.push(Mutation::Node(id, tag));
        Ok(id)
    }

    /// Adds the nodes and factors one detection implies. Repeating a
    /// `(marker, keyframe)` pair is a no-op.
    pub fn ingest(
        &mut self,
        g: &mut SituationalGraph,
        obs: &MarkerObservation,
    ) -> Result<Vec<Mutation>, SemanticError> {
        let mut out = Vec::new();
        if !self.layers.markers {
            return Ok(out);
        }
        let kf_pose = match g.node(obs.keyframe).map(|n| &n.kind) {
            Some(NodeKind::Keyframe(p)) => *p,
            _ => return Err(SemanticError::UnknownKeyframe(obs.keyframe)),
        };
        if !(obs.size > 0.0) {
            return Err(SemanticError::BadMarkerSize(obs.marker_id));
        }
        if self.ledger.seen.contains(&(obs.marker_id, obs.keyframe)) {
            return Ok(out);
        }
        let entry = self.dictionary.entry(obs.marker_id).cloned();
        let global = kf_pose.compose(&obs.local_pose);

        // Everything fallible happens before the graph is touched.
        let wall_slot = self
            .dictionary
            .wall_slot(obs.marker_id)
            .filter(|_| self.layers.walls);
        let new_wall = match wall_slot {
            Some(key) if !self.ledger.walls.contains_key(&key) => {
                let mut plane =
                    plane_from_marker(&global).canonicalized_toward(&kf_pose.translation);
                if let Some(points) = obs.nearby_points.as_deref().filter(|p| !p.is_empty()) {
                    let world: Vec<Vec3> =
                        points.iter().map(|p| kf_pose.transform_point(p)).collect();
                    plane = plane_refine(&world, &plane)?;
                }
                Some(plane_to_spherical(&plane)?)
            }
            _ => None,
        };

        let marker = match self.ledger.markers.get(&obs.marker_id) {
            Some(id) => *id,
            None => {
                let id = Self::add_node(
                    g,
                    &mut out,
                    NodeKind::Marker {
                        pose: global,
                        id: obs.marker_id,
                        size: obs.size,
                    },
                )?;
                self.ledger.markers.insert(obs.marker_id, id);
                id
            }
        };
        self.ledger.seen.insert((obs.marker_id, obs.keyframe));
        self.add_factor(
            g,
            &mut out,
            FactorKind::MarkerObs {
                local: obs.local_pose,
            },
            vec![obs.keyframe, marker],
        )?;

        if let Some(key) = wall_slot {
            let wall = match new_wall {
                Some(w) => {
                    let id = Self::add_node(g, &mut out, NodeKind::Wall(w))?;
                    self.ledger.walls.insert(key, id);
                    id
                }
                None => self.ledger.walls[&key],
            };
            self.add_factor(g, &mut out, FactorKind::WallMarker, vec![marker, wall])?;
            if let Some(SpaceKind::Corridor(_)) = self.dictionary.space(key.0) {
                self.ledger
                    .corridor_latest
                    .insert(key.0, (obs.marker_id, true));
            }
        }

        if let Some(e) =
            entry.filter(|e| e.entity_kind == EntityKind::Doorway && self.layers.doorways)
        {
            if let Entry::Vacant(slot) = self.ledger.doorways.entry(e.marker_id) {
                slot.insert(Self::add_node(g, &mut out, NodeKind::Doorway(global))?);
            }
            self.link_doorway(g, &mut out, e.marker_id, e.space_id)?;
        }
        Ok(out)
    }

    /// Adds the doorway-to-space factor once both ends exist.
    fn link_doorway(
        &mut self,
        g: &mut SituationalGraph,
        out: &mut Vec<Mutation>,
        marker_id: u32,
        space_id: u32,
    ) -> Result<(), GraphError> {
        if self.ledger.linked_doorways.contains(&marker_id) {
            return Ok(());
        }
        let (Some(door), Some(space)) = (
            self.ledger.doorways.get(&marker_id).copied(),
            self.ledger.spaces.get(&space_id).copied(),
        ) else {
            return Ok(());
        };
        let door_t = g
            .node(door)
            .and_then(|n| n.kind.pose())
            .expect("doorway node")
            .translation;
        let center = *g
            .node(space)
            .and_then(|n| n.kind.center())
            .expect("space node");
        self.add_factor(
            g,
            out,
            FactorKind::DoorwayRoom {
                delta: door_t - center,
            },
            vec![door, space],
        )?;
        self.ledger.linked_doorways.insert(marker_id);
        Ok(())
    }

    fn marker_center(&self, g: &SituationalGraph, marker_id: u32) -> Vec3 {
        let id = self.ledger.markers[&marker_id];
        g.node(id)
            .and_then(|n| n.kind.pose())
            .expect("marker node")
            .translation
    }

    /// Creates the room or corridor for `space_id` once all its walls are
    /// mapped and geometrically consistent. A formed corridor gains one more
    /// center factor per call when new attached-marker detections arrived.
    pub fn try_form_space(&mut self, g: &mut SituationalGraph, space_id: u32) -> bool {
        let mut out = Vec::new();
        self.try_form_space_logged(g, space_id, &mut out)
    }

    fn try_form_space_logged(
        &mut self,
        g: &mut SituationalGraph,
        space_id: u32,
        out: &mut Vec<Mutation>,
    ) -> bool {
        if !self.layers.spaces {
            return false;
        }
        let Some(kind) = self.dictionary.space(space_id) else {
            return false;
        };
        let slots: Vec<WallSlot> = match kind {
            SpaceKind::Corridor(axis) => (0..2).map(|side| WallSlot { axis, side }).collect(),
            SpaceKind::Room => [(Axis::X, 0), (Axis::X, 1), (Axis::Y, 0), (Axis::Y, 1)]
                .map(|(axis, side)| WallSlot { axis, side })
                .to_vec(),
        };
        let Some(walls) = slots
            .iter()
            .map(|s| self.ledger.walls.get(&(space_id, *s)).copied())
            .collect::<Option<Vec<NodeId>>>()
        else {
            return self.ledger.is_formed(space_id);
        };
        let planes: Vec<_> = walls
            .iter()
            .map(|w| spherical_to_plane(g.node(*w).and_then(|n| n.kind.wall()).expect("wall node")))
            .collect();

        if let Some(&node) = self.ledger.spaces.get(&space_id) {
            if let SpaceKind::Corridor(_) = kind {
                if let Some((marker, true)) = self.ledger.corridor_latest.get(&space_id).copied() {
                    let c = self.marker_center(g, marker);
                    if corridor_center(&planes[0], &planes[1], &c, &self.tolerances).is_ok() {
                        self.add_factor(
                            g,
                            out,
                            FactorKind::Corridor { marker_center: c },
                            vec![node, walls[0], walls[1]],
                        )
                        .expect("corridor factor endpoints exist");
                        self.ledger
                            .corridor_latest
                            .insert(space_id, (marker, false));
                    }
                }
            }
            return true;
        }

        let (node_kind, factor_kind) = match kind {
            SpaceKind::Corridor(axis) => {
                let Some((marker, _)) = self.ledger.corridor_latest.get(&space_id).copied() else {
                    return false;
                };
                let c = self.marker_center(g, marker);
                match corridor_center(&planes[0], &planes[1], &c, &self.tolerances) {
                    Ok(center) => (
                        NodeKind::Corridor { center, axis },
                        FactorKind::Corridor { marker_center: c },
                    ),
                    Err(e) => {
                        debug!("corridor {space_id} not formed: {e}");
                        return false;
                    }
                }
            }
            SpaceKind::Room => {
                match room_center(
                    &planes[0],
                    &planes[1],
                    &planes[2],
                    &planes[3],
                    &self.tolerances,
                ) {
                    Ok(center) => (NodeKind::Room(center), FactorKind::Room),
                    Err(e) => {
                        debug!("room {space_id} not formed: {e}");
                        return false;
                    }
                }
            }
        };
        let node = Self::add_node(g, out, node_kind).expect("space node is valid");
        let mut endpoints = vec![node];
        endpoints.extend(&walls);
        self.add_factor(g, out, factor_kind, endpoints)
            .expect("space factor endpoints exist");
        self.ledger.spaces.insert(space_id, node);
        if let Some((marker, _)) = self.ledger.corridor_latest.get(&space_id).copied() {
            self.ledger
                .corridor_latest
                .insert(space_id, (marker, false));
        }
        let doors: Vec<u32> = self
            .dictionary
            .entries()
            .filter(|e| e.entity_kind == EntityKind::Doorway && e.space_id == space_id)
            .map(|e| e.marker_id)
            .collect();
        if self.layers.doorways {
            for d in doors {
                self.link_doorway(g, out, d, space_id)
                    .expect("doorway factor endpoints exist");
            }
        }
        true
    }

    /// Ingests one detection and then gives its space a chance to form.
    pub fn observe(
        &mut self,
        g: &mut SituationalGraph,
        obs: &MarkerObservation,
    ) -> Result<Vec<Mutation>, SemanticError> {
        let mut out = self.ingest(g, obs)?;
        if let Some(e) = self.dictionary.entry(obs.marker_id) {
            let space = e.space_id;
            self.try_form_space_logged(g, space, &mut out);
        }
        Ok(out)
    }
}
