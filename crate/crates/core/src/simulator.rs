//! Synthetic indoor scenes and noisy odometry/marker streams.
//!
//! Scenes are axis-aligned: every space is a rectangle in the xy-plane,
//! markers sit on its walls with their +z axis pointing into the space and
//! their +y axis up. The camera rides at a fixed height looking along the
//! robot's heading (+x of the keyframe frame).

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Plane, Pose, Tangent6, Vec3};
use crate::semantics::{
    AxisHint, DictionaryEntry, DictionaryError, EntityKind, SemanticDictionary,
};
use crate::sgraph::{Axis, PoseRecord};

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;

pub const TEMPLATE_NAMES: [&str; 6] = ["seq01", "seq02", "seq03", "seq04", "seq05", "seq06"];

pub const MARKER_SIZE: f64 = 0.08;
pub const MARKER_HEIGHT: f64 = 1.2;
pub const CAMERA_HEIGHT: f64 = 1.0;
pub const STEPS_PER_METER: f64 = 10.0;
pub const SPEED: f64 = 0.5;
/// Largest heading change per in-place turning step, radians.
pub const MAX_TURN_STEP: f64 = 10.0 * std::f64::consts::PI / 180.0;
pub const NEARBY_POINTS: usize = 16;
pub const NEARBY_RADIUS: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("malformed {what}: {msg}")]
    Parse { what: &'static str, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceType {
    Room,
    Corridor,
}

/// Rectangular space `[min.x, max.x] x [min.y, max.y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub space_id: u32,
    pub kind: SpaceType,
    pub min: [f64; 2],
    pub max: [f64; 2],
}

/// One side of a space footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallGeometry {
    pub axis: Axis,
    pub side: u8,
    /// Normal points into the space.
    pub plane: Plane,
    /// Extent along the wall, in the coordinate the wall runs along.
    pub span: [f64; 2],
}

impl SpaceSpec {
    /// All four sides, inward normals, in `(x0, x1, y0, y1)` order.
    pub fn footprint_walls(&self) -> [WallGeometry; 4] {
        let [x0, y0] = self.min;
        let [x1, y1] = self.max;
        let w = |axis, side, n: Vec3, at: f64, span| WallGeometry {
            axis,
            side,
            plane: Plane::from_point_normal(&(n.abs() * at), &n),
            span,
        };
        [
            w(Axis::X, 0, Vec3::x(), x0, [y0, y1]),
            w(Axis::X, 1, -Vec3::x(), x1, [y0, y1]),
            w(Axis::Y, 0, Vec3::y(), y0, [x0, x1]),
            w(Axis::Y, 1, -Vec3::y(), y1, [x0, x1]),
        ]
    }

    /// Axis of the labeled wall pair of a corridor: the walls run along the
    /// long side, so their normals point across it.
    pub fn corridor_axis(&self) -> Axis {
        if self.max[0] - self.min[0] >= self.max[1] - self.min[1] {
            Axis::Y
        } else {
            Axis::X
        }
    }

    /// Walls that carry semantic labels.
    pub fn labeled_walls(&self) -> Vec<WallGeometry> {
        let all = self.footprint_walls();
        match self.kind {
            SpaceType::Room => all.to_vec(),
            SpaceType::Corridor => {
                let axis = self.corridor_axis();
                all.into_iter().filter(|w| w.axis == axis).collect()
            }
        }
    }

    pub fn wall(&self, axis: Axis, side: u8) -> WallGeometry {
        self.footprint_walls()
            .into_iter()
            .find(|w| w.axis == axis && w.side == side)
            .expect("side is 0 or 1")
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.x > self.min[0] && p.x < self.max[0] && p.y > self.min[1] && p.y < self.max[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum MarkerRole {
    Wall { axis: Axis, side: u8 },
    Door,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub marker_id: u32,
    /// Space the marker belongs to; for doors, the space it faces into.
    pub space_id: u32,
    #[serde(flatten)]
    pub role: MarkerRole,
    pub pose: PoseRecord,
    pub size: f64,
}

impl MarkerSpec {
    pub fn pose(&self) -> Pose {
        (&self.pose).into()
    }
}

/// A passage between two spaces, labeled by a door marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoorSpec {
    pub marker_id: u32,
    pub spaces: [u32; 2],
    /// Center of the opening, xy.
    pub opening: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub version: u32,
    pub name: String,
    pub spaces: Vec<SpaceSpec>,
    pub markers: Vec<MarkerSpec>,
    pub doors: Vec<DoorSpec>,
    /// Robot path in the xy-plane; the robot drives straight between
    /// waypoints and turns in place at each one.
    pub waypoints: Vec<[f64; 2]>,
}

impl SceneSpec {
    pub fn space(&self, id: u32) -> Option<&SpaceSpec> {
        self.spaces.iter().find(|s| s.space_id == id)
    }

    pub fn marker(&self, id: u32) -> Option<&MarkerSpec> {
        self.markers.iter().find(|m| m.marker_id == id)
    }

    /// Dictionary derived from marker roles alone.
    pub fn dictionary(&self) -> Result<SemanticDictionary, DictionaryError> {
        SemanticDictionary::from_entries(self.dictionary_entries())
    }

    fn dictionary_entries(&self) -> Vec<DictionaryEntry> {
        let mut entries: Vec<DictionaryEntry> = self
            .markers
            .iter()
            .map(|m| match m.role {
                MarkerRole::Wall { axis, side } => DictionaryEntry {
                    marker_id: m.marker_id,
                    entity_kind: EntityKind::Wall,
                    space_id: m.space_id,
                    wall_axis_hint: match axis {
                        Axis::X => AxisHint::X,
                        Axis::Y => AxisHint::Y,
                    },
                    wall_side: side,
                },
                MarkerRole::Door => DictionaryEntry {
                    marker_id: m.marker_id,
                    entity_kind: EntityKind::Doorway,
                    space_id: m.space_id,
                    wall_axis_hint: AxisHint::None,
                    wall_side: 0,
                },
            })
            .collect();
        entries.sort_by_key(|e| e.marker_id);
        entries
    }

    /// Footprint wall the marker is mounted on.
    fn host_wall(&self, m: &MarkerSpec) -> Option<WallGeometry> {
        let space = self.space(m.space_id)?;
        let pose = m.pose();
        let on = |w: &WallGeometry| {
            let along = match w.axis {
                Axis::X => pose.translation.y,
                Axis::Y => pose.translation.x,
            };
            w.plane.signed_distance(&pose.translation).abs() <= 1e-9
                && (pose.z_axis() - w.plane.normal).norm() <= 1e-9
                && along >= w.span[0]
                && along <= w.span[1]
        };
        match m.role {
            MarkerRole::Wall { axis, side } => Some(space.wall(axis, side)).filter(on),
            MarkerRole::Door => space.footprint_walls().into_iter().find(on),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScene(m));
        if self.version != SCENE_FORMAT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.spaces {
            if !ids.insert(s.space_id) {
                return bad(format!("duplicate space id {}", s.space_id));
            }
            if !(s.max[0] > s.min[0] && s.max[1] > s.min[1]) {
                return bad(format!("space {} has a non-positive extent", s.space_id));
            }
        }
        let mut marker_ids = std::collections::BTreeSet::new();
        for m in &self.markers {
            if !marker_ids.insert(m.marker_id) {
                return bad(format!("duplicate marker id {}", m.marker_id));
            }
            if !(m.size > 0.0) {
                return bad(format!("marker {} has non-positive size", m.marker_id));
            }
            let Some(space) = self.space(m.space_id) else {
                return bad(format!(
                    "marker {} references unknown space {}",
                    m.marker_id, m.space_id
                ));
            };
            if let MarkerRole::Wall { axis, side } = m.role {
                if side > 1 {
                    return bad(format!("marker {} has side {side}", m.marker_id));
                }
                if space.kind == SpaceType::Corridor && axis != space.corridor_axis() {
                    return bad(format!(
                        "marker {} is on an unlabeled corridor wall",
                        m.marker_id
                    ));
                }
            }
            if self.host_wall(m).is_none() {
                return bad(format!(
                    "marker {} does not lie on its host wall",
                    m.marker_id
                ));
            }
        }
        for d in &self.doors {
            match self.marker(d.marker_id) {
                Some(m) if m.role == MarkerRole::Door => {}
                _ => return bad(format!("door {} has no door marker", d.marker_id)),
            }
            if d.spaces.iter().any(|s| self.space(*s).is_none()) {
                return bad(format!("door {} references an unknown space", d.marker_id));
            }
        }
        if self.waypoints.len() < 2 {
            return bad("trajectory needs at least two waypoints".into());
        }
        self.dictionary()
            .map_err(|e| SimError::InvalidScene(format!("derived dictionary: {e}")))?;
        Ok(())
    }

    /// Camera poses along the waypoint path: straight segments sampled at
    /// [`STEPS_PER_METER`], in-place turns of at most [`MAX_TURN_STEP`].
    pub fn trajectory(&self) -> Vec<Pose> {
        let at = |p: [f64; 2], yaw: f64| Pose::from_yaw(yaw, Vec3::new(p[0], p[1], CAMERA_HEIGHT));
        let wp = &self.waypoints;
        let heading = |i: usize| (wp[i + 1][1] - wp[i][1]).atan2(wp[i + 1][0] - wp[i][0]);
        let mut yaw = heading(0);
        let mut out = vec![at(wp[0], yaw)];
        for i in 0..wp.len() - 1 {
            let target = heading(i);
            let turn = crate::geometry::wrap_angle(target - yaw);
            let n = (turn.abs() / MAX_TURN_STEP - 1e-9).ceil().max(0.0) as usize;
            for j in 1..=n {
                out.push(at(wp[i], yaw + turn * j as f64 / n as f64));
            }
            yaw = target;
            let (a, b) = (
                Vec3::new(wp[i][0], wp[i][1], 0.0),
                Vec3::new(wp[i + 1][0], wp[i + 1][1], 0.0),
            );
            let len = (b - a).norm();
            let n = ((len * STEPS_PER_METER).round() as usize).max(1);
            for j in 1..=n {
                let p = a + (b - a) * (j as f64 / n as f64);
                out.push(at([p.x, p.y], yaw));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let scene: SceneSpec = serde_json::from_str(s).map_err(|e| SimError::Parse {
            what: "scene",
            msg: e.to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Radians per step, per axis.
    pub odom_rot_sigma: f64,
    /// Meters per step, per axis.
    pub odom_trans_sigma: f64,
    pub marker_rot_sigma: f64,
    pub marker_trans_sigma: f64,
    pub detection_range: f64,
    pub detection_half_fov: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            odom_rot_sigma: 0.5f64.to_radians(),
            odom_trans_sigma: 0.01,
            marker_rot_sigma: 0.2f64.to_radians(),
            marker_trans_sigma: 0.005,
            detection_range: 5.0,
            detection_half_fov: FRAC_PI_4,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            odom_rot_sigma: 0.0,
            odom_trans_sigma: 0.0,
            marker_rot_sigma: 0.0,
            marker_trans_sigma: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sigmas = [
            self.odom_rot_sigma,
            self.odom_trans_sigma,
            self.marker_rot_sigma,
            self.marker_trans_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(SimError::InvalidNoise(
                "sigmas must be finite and non-negative".into(),
            ));
        }
        if !(self.detection_half_fov > 0.0 && self.detection_half_fov <= FRAC_PI_2) {
            return Err(SimError::InvalidNoise(
                "half FOV must lie in (0, pi/2]".into(),
            ));
        }
        if !(self.detection_range > 0.0) {
            return Err(SimError::InvalidNoise(
                "detection range must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub t: f64,
    pub pose: PoseRecord,
}

/// Relative motion from step `to - 1` to step `to`, camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryStep {
    pub to: usize,
    pub delta: PoseRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub step: usize,
    pub marker_id: u32,
    /// Marker pose in the camera frame.
    pub local_pose: PoseRecord,
    pub size: f64,
    /// Host-surface samples around the marker, camera frame.
    pub nearby_points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDataset {
    pub version: u32,
    pub scene: SceneSpec,
    pub noise: NoiseModel,
    pub ground_truth: Vec<StampedPose>,
    pub odometry: Vec<OdometryStep>,
    pub detections: Vec<Detection>,
    pub dictionary: Vec<DictionaryEntry>,
}

/// One item of the replay stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event<'a> {
    Odometry(&'a OdometryStep),
    Detection(&'a Detection),
}

impl SimDataset {
    pub fn ground_truth_poses(&self) -> Vec<Pose> {
        self.ground_truth.iter().map(|s| (&s.pose).into()).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.ground_truth.iter().map(|s| s.t).collect()
    }

    /// Odometry steps and detections in timestamp order; at each step the
    /// motion into it comes before the detections made from it.
    pub fn events(&self) -> Vec<Event<'_>> {
        let mut out = Vec::with_capacity(self.odometry.len() + self.detections.len());
        let mut det = self.detections.iter().peekable();
        let mut odo = self.odometry.iter().peekable();
        for step in 0..self.ground_truth.len() {
            while let Some(o) = odo.next_if(|o| o.to == step) {
                out.push(Event::Odometry(o));
            }
            while let Some(d) = det.next_if(|d| d.step == step) {
                out.push(Event::Detection(d));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let d: SimDataset = serde_json::from_str(s).map_err(|e| SimError::Parse {
            what: "dataset",
            msg: e.to_string(),
        })?;
        if d.version != DATASET_FORMAT_VERSION {
            return Err(SimError::Parse {
                what: "dataset",
                msg: format!("unsupported version {}", d.version),
            });
        }
        d.scene.validate()?;
        Ok(d)
    }
}

/// Whether a camera at `cam` sees `marker` under `noise`'s sensor limits.
pub fn is_visible(scene: &SceneSpec, cam: &Pose, marker: &MarkerSpec, noise: &NoiseModel) -> bool {
    let Some(space) = scene.space(marker.space_id) else {
        return false;
    };
    if !space.contains(&cam.translation) {
        return false;
    }
    let m = marker.pose();
    let ray = m.translation - cam.translation;
    let dist = ray.norm();
    if dist > noise.detection_range || dist == 0.0 {
        return false;
    }
    let forward = cam.x_axis();
    let cos_angle = forward.dot(&ray) / dist;
    cos_angle >= noise.detection_half_fov.cos() && m.z_axis().dot(&ray) < 0.0
}

struct Gaussian {
    rot: Option<Normal<f64>>,
    trans: Option<Normal<f64>>,
}

impl Gaussian {
    fn new(rot: f64, trans: f64) -> Self {
        let n = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("validated sigma"));
        Self {
            rot: n(rot),
            trans: n(trans),
        }
    }

    /// Right-perturbs `p`; an exact copy when both sigmas are zero.
    fn perturb(&self, p: &Pose, rng: &mut ChaCha8Rng) -> Pose {
        if self.rot.is_none() && self.trans.is_none() {
            return *p;
        }
        let mut draw = |d: &Option<Normal<f64>>| match d {
            Some(d) => Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng)),
            None => Vec3::zeros(),
        };
        let rot = draw(&self.rot);
        let trans = draw(&self.trans);
        p.boxplus(&Tangent6::new(rot, trans))
    }
}

/// Simulates odometry and marker detections along the scene trajectory.
pub fn generate(scene: &SceneSpec, noise: &NoiseModel) -> Result<SimDataset, SimError> {
    scene.validate()?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let odo_noise = Gaussian::new(noise.odom_rot_sigma, noise.odom_trans_sigma);
    let marker_noise = Gaussian::new(noise.marker_rot_sigma, noise.marker_trans_sigma);
    let point_noise = (noise.marker_trans_sigma > 0.0)
        .then(|| Normal::new(0.0, noise.marker_trans_sigma).expect("validated sigma"));

    let mut markers: Vec<&MarkerSpec> = scene.markers.iter().collect();
    markers.sort_by_key(|m| m.marker_id);
    let truth = scene.trajectory();
    let dt = 1.0 / (STEPS_PER_METER * SPEED);

    let mut odometry = Vec::new();
    let mut detections = Vec::new();
    for (step, cam) in truth.iter().enumerate() {
        if step > 0 {
            let delta = truth[step - 1].inverse().compose(cam);
            odometry.push(OdometryStep {
                to: step,
                delta: (&odo_noise.perturb(&delta, &mut rng)).into(),
            });
        }
        for m in markers.iter().filter(|m| is_visible(scene, cam, m, noise)) {
            let pose = m.pose();
            let local = cam.inverse().compose(&pose);
            let mut points = Vec::with_capacity(NEARBY_POINTS);
            for _ in 0..NEARBY_POINTS {
                // Uniform over the disc of NEARBY_RADIUS in the marker plane.
                let r = NEARBY_RADIUS * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let mut p = pose.transform_point(&Vec3::new(r * a.cos(), r * a.sin(), 0.0));
                if let Some(d) = &point_noise {
                    p += Vec3::new(d.sample(&mut rng), d.sample(&mut rng), d.sample(&mut rng));
                }
                let c = cam.inverse_transform_point(&p);
                points.push([c.x, c.y, c.z]);
            }
            detections.push(Detection {
                step,
                marker_id: m.marker_id,
                local_pose: (&marker_noise.perturb(&local, &mut rng)).into(),
                size: m.size,
                nearby_points: points,
            });
        }
    }
    Ok(SimDataset {
        version: DATASET_FORMAT_VERSION,
        scene: scene.clone(),
        noise: noise.clone(),
        ground_truth: truth
            .iter()
            .enumerate()
            .map(|(i, p)| StampedPose {
                t: i as f64 * dt,
                pose: p.into(),
            })
            .collect(),
        odometry,
        detections,
        dictionary: scene.dictionary_entries(),
    })
}

struct Builder {
    name: &'static str,
    spaces: Vec<SpaceSpec>,
    markers: Vec<MarkerSpec>,
    doors: Vec<DoorSpec>,
    next_wall_marker: u32,
    next_door_marker: u32,
}

fn marker_pose(origin: Vec3, inward: Vec3) -> PoseRecord {
    let pose = Pose::from_axes(Vec3::z().cross(&inward), Vec3::z(), inward, origin);
    (&pose).into()
}

/// Point of `w` at coordinate `along` and height `z`.
fn point_on(w: &WallGeometry, along: f64, z: f64) -> Vec3 {
    let at = -w.plane.offset * w.plane.normal;
    match w.axis {
        Axis::X => Vec3::new(at.x, along, z),
        Axis::Y => Vec3::new(along, at.y, z),
    }
}

impl Builder {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            spaces: Vec::new(),
            markers: Vec::new(),
            doors: Vec::new(),
            next_wall_marker: 1,
            next_door_marker: 100,
        }
    }

    fn space(&mut self, space_id: u32, kind: SpaceType, min: [f64; 2], max: [f64; 2]) -> &mut Self {
        let s = SpaceSpec {
            space_id,
            kind,
            min,
            max,
        };
        for w in s.labeled_walls() {
            let mid = 0.5 * (w.span[0] + w.span[1]);
            self.markers.push(MarkerSpec {
                marker_id: self.next_wall_marker,
                space_id,
                role: MarkerRole::Wall {
                    axis: w.axis,
                    side: w.side,
                },
                pose: marker_pose(point_on(&w, mid, MARKER_HEIGHT), w.plane.normal),
                size: MARKER_SIZE,
            });
            self.next_wall_marker += 1;
        }
        self.spaces.push(s);
        self
    }

    fn room(&mut self, id: u32, min: [f64; 2], max: [f64; 2]) -> &mut Self {
        self.space(id, SpaceType::Room, min, max)
    }

    fn corridor(&mut self, id: u32, min: [f64; 2], max: [f64; 2]) -> &mut Self {
        self.space(id, SpaceType::Corridor, min, max)
    }

    /// Door marker on side `(axis, side)` of `parent` at coordinate `along`,
    /// labeling the opening at `opening` between `parent` and `other`.
    fn door(
        &mut self,
        parent: u32,
        other: u32,
        axis: Axis,
        side: u8,
        along: f64,
        opening: [f64; 2],
    ) -> &mut Self {
        let w = self
            .spaces
            .iter()
            .find(|s| s.space_id == parent)
            .expect("parent added first")
            .wall(axis, side);
        let id = self.next_door_marker;
        self.next_door_marker += 1;
        self.markers.push(MarkerSpec {
            marker_id: id,
            space_id: parent,
            role: MarkerRole::Door,
            pose: marker_pose(point_on(&w, along, MARKER_HEIGHT), w.plane.normal),
            size: MARKER_SIZE,
        });
        self.doors.push(DoorSpec {
            marker_id: id,
            spaces: [parent, other],
            opening,
        });
        self
    }

    fn finish(&mut self, waypoints: &[[f64; 2]]) -> SceneSpec {
        SceneSpec {
            version: SCENE_FORMAT_VERSION,
            name: self.name.to_string(),
            spaces: std::mem::take(&mut self.spaces),
            markers: std::mem::take(&mut self.markers),
            doors: std::mem::take(&mut self.doors),
            waypoints: waypoints.to_vec(),
        }
    }
}

/// Built-in layouts. Rooms are 4 m x 6 m, corridors 2 m x 10 m, walls
/// between neighbouring spaces 0.2 m thick. Every labeled wall carries one
/// marker at its midpoint, 1.2 m up.
///
/// - `seq01`: two rooms connected via a door.
/// - `seq02`: a corridor connected to a room and another corridor.
/// - `seq03`: five rooms connected to a corridor.
/// - `seq04`: two corridors connected via a landing area.
/// - `seq05`: four corridors connected to a room, forming a loop.
/// - `seq06`: a single room connected to a corridor.
pub fn template_scene(name: &str) -> Result<SceneSpec, SimError> {
    use Axis::{X, Y};
    let scene = match name {
        "seq01" => Builder::new("seq01")
            .room(0, [0.0, 0.0], [4.0, 6.0])
            .room(1, [4.2, 0.0], [8.2, 6.0])
            .door(0, 1, X, 1, 2.0, [4.1, 1.0])
            .finish(&[
                [1.0, 1.0],
                [3.0, 1.0],
                [3.0, 5.0],
                [1.0, 5.0],
                [1.0, 1.0],
                [5.2, 1.0],
                [7.2, 1.0],
                [7.2, 5.0],
                [5.2, 5.0],
                [5.2, 1.0],
                [1.0, 1.0],
                [1.0, 3.0],
            ]),
        "seq02" => Builder::new("seq02")
            .corridor(0, [0.0, 0.0], [10.0, 2.0])
            .room(1, [3.0, 2.2], [7.0, 8.2])
            .corridor(2, [0.0, 8.4], [10.0, 10.4])
            .door(1, 0, Y, 0, 5.0, [4.0, 2.1])
            .door(2, 1, Y, 0, 7.5, [6.0, 8.3])
            .finish(&[
                [0.5, 1.0],
                [9.5, 1.0],
                [4.0, 1.0],
                [4.0, 3.2],
                [4.0, 7.2],
                [6.0, 7.2],
                [6.0, 3.2],
                [6.0, 9.4],
                [9.5, 9.4],
                [0.5, 9.4],
            ]),
        "seq03" => Builder::new("seq03")
            .corridor(0, [0.0, 0.0], [10.0, 2.0])
            .room(1, [0.0, -6.2], [4.0, -0.2])
            .room(2, [4.2, -6.2], [8.2, -0.2])
            .room(3, [0.0, 2.2], [4.0, 8.2])
            .room(4, [4.2, 2.2], [8.2, 8.2])
            .room(5, [10.2, -1.0], [16.2, 3.0])
            .door(1, 0, Y, 1, 3.0, [2.0, -0.1])
            .door(2, 0, Y, 1, 7.2, [6.2, -0.1])
            .door(3, 0, Y, 0, 3.0, [2.0, 2.1])
            .door(4, 0, Y, 0, 7.2, [6.2, 2.1])
            .door(5, 0, X, 0, 2.0, [10.1, 1.0])
            .finish(&[
                [0.5, 1.0],
                [2.0, 1.0],
                [2.0, -1.2],
                [3.0, -1.2],
                [3.0, -5.2],
                [1.0, -5.2],
                [1.0, -1.2],
                [2.0, -1.2],
                [2.0, 1.0],
                [2.0, 3.2],
                [3.0, 3.2],
                [3.0, 7.2],
                [1.0, 7.2],
                [1.0, 3.2],
                [2.0, 3.2],
                [2.0, 1.0],
                [6.2, 1.0],
                [6.2, -1.2],
                [7.2, -1.2],
                [7.2, -5.2],
                [5.2, -5.2],
                [5.2, -1.2],
                [6.2, -1.2],
                [6.2, 1.0],
                [6.2, 3.2],
                [7.2, 3.2],
                [7.2, 7.2],
                [5.2, 7.2],
                [5.2, 3.2],
                [6.2, 3.2],
                [6.2, 1.0],
                [11.2, 1.0],
                [11.2, 0.0],
                [15.2, 0.0],
                [15.2, 2.0],
                [11.2, 2.0],
                [11.2, 1.0],
                [0.5, 1.0],
            ]),
        "seq04" => Builder::new("seq04")
            .corridor(0, [0.0, 0.0], [10.0, 2.0])
            .room(1, [10.2, -2.0], [14.2, 4.0])
            .corridor(2, [11.2, 4.2], [13.2, 14.2])
            .door(1, 0, X, 0, 2.5, [10.1, 1.0])
            .door(2, 1, X, 0, 6.0, [12.2, 4.1])
            .finish(&[
                [0.5, 1.0],
                [11.2, 1.0],
                [11.2, -1.0],
                [13.2, -1.0],
                [13.2, 3.0],
                [12.2, 3.0],
                [12.2, 13.7],
                [12.2, 3.0],
                [11.2, 3.0],
                [11.2, 1.0],
                [0.5, 1.0],
            ]),
        "seq05" => Builder::new("seq05")
            .corridor(0, [0.0, 0.0], [10.0, 2.0])
            .corridor(1, [10.2, 0.0], [12.2, 10.0])
            .corridor(2, [2.2, 10.2], [12.2, 12.2])
            .corridor(3, [0.0, 2.2], [2.0, 12.2])
            .room(4, [-4.2, 4.0], [-0.2, 10.0])
            .door(1, 0, X, 1, 2.0, [10.1, 1.0])
            .door(2, 1, Y, 1, 10.4, [11.2, 10.1])
            .door(3, 2, X, 0, 10.4, [2.1, 11.2])
            .door(0, 3, Y, 1, 2.5, [1.0, 2.1])
            .door(4, 3, X, 1, 6.0, [-0.1, 5.0])
            .finish(&[
                [0.5, 1.0],
                [11.2, 1.0],
                [11.2, 11.2],
                [1.0, 11.2],
                [1.0, 5.0],
                [-1.2, 5.0],
                [-3.2, 5.0],
                [-3.2, 9.0],
                [-1.2, 9.0],
                [-1.2, 5.0],
                [1.0, 5.0],
                [1.0, 1.0],
                [9.5, 1.0],
            ]),
        "seq06" => Builder::new("seq06")
            .corridor(0, [0.0, 0.0], [10.0, 2.0])
            .room(1, [3.0, 2.2], [7.0, 8.2])
            .door(1, 0, Y, 0, 5.0, [4.0, 2.1])
            .finish(&[
                [0.5, 1.0],
                [4.0, 1.0],
                [4.0, 3.2],
                [6.0, 3.2],
                [6.0, 7.2],
                [4.0, 7.2],
                [4.0, 3.2],
                [4.0, 1.0],
                [9.5, 1.0],
                [0.5, 1.0],
            ]),
        other => return Err(SimError::UnknownTemplate(other.to_string())),
    };
    debug_assert!(scene.validate().is_ok(), "{name}: {:?}", scene.validate());
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::SpaceKind;

    #[test]
    fn templates_are_valid_and_match_their_topology() {
        for name in TEMPLATE_NAMES {
            let s = template_scene(name).unwrap();
            s.validate().unwrap();
            assert_eq!(s.name, name);
        }
        let s = template_scene("seq01").unwrap();
        let walls = s
            .markers
            .iter()
            .filter(|m| matches!(m.role, MarkerRole::Wall { .. }))
            .count();
        let doors = s
            .markers
            .iter()
            .filter(|m| m.role == MarkerRole::Door)
            .count();
        assert_eq!((s.spaces.len(), walls, doors), (2, 8, 1));
        let d = s.dictionary().unwrap();
        assert!(d.spaces().all(|(_, k)| k == SpaceKind::Room));

        let kinds = |n: &str| {
            let s = template_scene(n).unwrap();
            let rooms = s
                .spaces
                .iter()
                .filter(|s| s.kind == SpaceType::Room)
                .count();
            (rooms, s.spaces.len() - rooms)
        };
        assert_eq!(kinds("seq06"), (1, 1));
        assert_eq!(kinds("seq03"), (5, 1));
        assert_eq!(kinds("seq05"), (1, 4));
        assert_eq!(kinds("seq02"), (1, 2));
        assert_eq!(
            template_scene("seq99"),
            Err(SimError::UnknownTemplate("seq99".into()))
        );
    }

    #[test]
    fn every_template_sees_every_marker() {
        for name in TEMPLATE_NAMES {
            let s = template_scene(name).unwrap();
            let d = generate(&s, &NoiseModel::noiseless(0)).unwrap();
            for m in &s.markers {
                let n = d
                    .detections
                    .iter()
                    .filter(|x| x.marker_id == m.marker_id)
                    .count();
                assert!(n >= 10, "{name}: marker {} seen {n} times", m.marker_id);
            }
        }
    }

    #[test]
    fn scene_validation_rejects_bad_layouts() {
        let mut s = template_scene("seq01").unwrap();
        s.markers[0].pose.translation[0] += 0.01;
        assert!(matches!(s.validate(), Err(SimError::InvalidScene(_))));
        let mut s = template_scene("seq01").unwrap();
        s.spaces[0].max[0] = s.spaces[0].min[0];
        assert!(matches!(s.validate(), Err(SimError::InvalidScene(_))));
        let mut s = template_scene("seq01").unwrap();
        s.markers.remove(0);
        assert!(matches!(s.validate(), Err(SimError::InvalidScene(_))));
        let mut s = template_scene("seq01").unwrap();
        s.markers[1].marker_id = s.markers[0].marker_id;
        assert!(matches!(s.validate(), Err(SimError::InvalidScene(_))));
    }

    #[test]
    fn zero_noise_dataset_is_exact() {
        let s = template_scene("seq06").unwrap();
        let d = generate(&s, &NoiseModel::noiseless(3)).unwrap();
        let gt = d.ground_truth_poses();
        let mut chained = gt[0];
        for o in &d.odometry {
            chained = chained.compose(&(&o.delta).into());
            assert!(chained.boxminus(&gt[o.to]).norm() < 1e-9);
            let exact = gt[o.to - 1].inverse().compose(&gt[o.to]);
            assert_eq!(Pose::from(&o.delta), exact);
        }
        for det in &d.detections {
            let m = s.marker(det.marker_id).unwrap().pose();
            assert_eq!(
                Pose::from(&det.local_pose),
                gt[det.step].inverse().compose(&m)
            );
            for p in &det.nearby_points {
                let world = gt[det.step].transform_point(&Vec3::from(*p));
                let local = m.inverse_transform_point(&world);
                assert!(local.z.abs() < 1e-9 && local.xy().norm() <= NEARBY_RADIUS + 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let s = template_scene("seq01").unwrap();
        let n = NoiseModel {
            seed: 42,
            ..NoiseModel::default()
        };
        let a = generate(&s, &n).unwrap().to_json();
        let b = generate(&s, &n).unwrap().to_json();
        assert_eq!(a, b);
        let c = generate(&s, &NoiseModel { seed: 43, ..n })
            .unwrap()
            .to_json();
        assert_ne!(a, c);
    }

    #[test]
    fn detections_satisfy_visibility_predicates() {
        let s = template_scene("seq03").unwrap();
        let noise = NoiseModel {
            seed: 5,
            ..NoiseModel::default()
        };
        let d = generate(&s, &noise).unwrap();
        let gt = d.ground_truth_poses();
        // Brute force over every (step, marker) pair. Exact 45 degree ties
        // occur on this grid, so only clear-cut cases are checked.
        const EPS: f64 = 1e-9;
        let got: std::collections::BTreeSet<(usize, u32)> =
            d.detections.iter().map(|x| (x.step, x.marker_id)).collect();
        let mut checked = 0;
        for (k, cam) in gt.iter().enumerate() {
            for m in &s.markers {
                let mp = m.pose();
                let ray = mp.translation - cam.translation;
                let range = ray.norm() - noise.detection_range;
                let fov = cam.x_axis().angle(&ray) - noise.detection_half_fov;
                let facing = mp.z_axis().dot(&ray);
                let sp = s.space(m.space_id).unwrap();
                let p = cam.translation;
                let inside = (p.x - sp.min[0])
                    .min(sp.max[0] - p.x)
                    .min(p.y - sp.min[1])
                    .min(sp.max[1] - p.y);
                let margins = [-range, -fov, -facing, inside];
                let seen = got.contains(&(k, m.marker_id));
                if margins.iter().all(|m| *m > EPS) {
                    assert!(seen, "step {k} marker {} should be visible", m.marker_id);
                    checked += 1;
                } else if margins.iter().any(|m| *m < -EPS) {
                    assert!(!seen, "step {k} marker {} should be hidden", m.marker_id);
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn dictionary_does_not_depend_on_poses() {
        for name in TEMPLATE_NAMES {
            let s = template_scene(name).unwrap();
            let before = s.dictionary().unwrap();
            let mut stripped = s.clone();
            for m in &mut stripped.markers {
                m.pose = PoseRecord {
                    translation: [0.0; 3],
                    rotation: [0.0, 0.0, 0.0, 1.0],
                };
            }
            for sp in &mut stripped.spaces {
                sp.min = [0.0; 2];
                sp.max = [0.0; 2];
            }
            stripped.doors.iter_mut().for_each(|d| d.opening = [0.0; 2]);
            stripped.waypoints.clear();
            assert_eq!(stripped.dictionary().unwrap(), before);
            assert_eq!(stripped.dictionary().unwrap().to_json(), before.to_json());
        }
    }

    #[test]
    fn scene_and_dataset_round_trip() {
        let s = template_scene("seq05").unwrap();
        let text = s.to_json();
        assert_eq!(SceneSpec::from_json(&text).unwrap(), s);
        let d = generate(&s, &NoiseModel::default()).unwrap();
        let text = d.to_json();
        let back = SimDataset::from_json(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn event_stream_is_ordered() {
        let d = generate(&template_scene("seq06").unwrap(), &NoiseModel::default()).unwrap();
        let mut last = 0;
        let mut n = 0;
        for e in d.events() {
            let step = match e {
                Event::Odometry(o) => o.to,
                Event::Detection(x) => x.step,
            };
            assert!(step >= last);
            last = step;
            n += 1;
        }
        assert_eq!(n, d.odometry.len() + d.detections.len());
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::default().validate().is_ok());
        let bad = NoiseModel {
            odom_rot_sigma: -1.0,
            ..NoiseModel::default()
        };
        assert!(matches!(bad.validate(), Err(SimError::InvalidNoise(_))));
        let bad = NoiseModel {
            detection_half_fov: 2.0,
            ..NoiseModel::default()
        };
        assert!(matches!(bad.validate(), Err(SimError::InvalidNoise(_))));
    }
}
