//! Dataset replay, optimization and evaluation for one configuration.

use std::path::PathBuf;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{ate, AteReport, EvalError, MetricsRow, Stamped, TrajectoryPair};
use crate::geometry::{plane_to_spherical, GeometryError, Pose, Vec3};
use crate::semantics::{
    DictionaryError, LayerSet, MarkerObservation, SemanticDictionary, SemanticError,
    SemanticMapper, SpaceKind,
};
use crate::sgraph::residuals::{corridor_center, room_center};
use crate::sgraph::{
    optimize, Axis, CenterTolerances, Factor, FactorKind, GraphError, InformationConfig, Node,
    NodeId, NodeKind, OptimizeReport, OptimizerConfig, ResidualError, SituationalGraph,
};
use crate::simulator::{
    template_scene, Event, MarkerRole, NoiseModel, SceneSpec, SimDataset, SimError, TEMPLATE_NAMES,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("ground truth: {0}")]
    GroundTruth(String),
}

impl PipelineError {
    /// Problems with the inputs, as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Sim(_)
                | PipelineError::Dictionary(_)
                | PipelineError::GroundTruth(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Template name or path to a scene file.
    pub scene: String,
    pub seed: u64,
    pub noise: NoiseModel,
    pub information: InformationConfig,
    pub optimizer: OptimizerConfig,
    pub layers: LayerSet,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: "seq01".into(),
            seed: 0,
            noise: NoiseModel::default(),
            information: InformationConfig::default(),
            optimizer: OptimizerConfig::default(),
            layers: LayerSet::ALL,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.layers.is_monotone() {
            return Err(PipelineError::Config(
                "layers must nest: walls need markers, spaces need walls, doorways need spaces"
                    .into(),
            ));
        }
        self.noise.validate()?;
        let o = &self.optimizer;
        if o.max_iters == 0 || !(o.g_tol >= 0.0) || !(o.f_tol >= 0.0) || !(o.lambda_init > 0.0) {
            return Err(PipelineError::Config(
                "optimizer settings out of range".into(),
            ));
        }
        if o.huber.is_some_and(|k| !(k > 0.0)) {
            return Err(PipelineError::Config(
                "huber threshold must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The noise model with this run's seed applied.
    pub fn seeded_noise(&self) -> NoiseModel {
        NoiseModel {
            seed: self.seed,
            ..self.noise.clone()
        }
    }
}

/// Resolves a template name, or reads a scene file otherwise.
pub fn load_scene(source: &str) -> Result<SceneSpec, PipelineError> {
    if TEMPLATE_NAMES.contains(&source) {
        return Ok(template_scene(source)?);
    }
    let text = std::fs::read_to_string(source).map_err(|e| {
        if source.contains(['/', '.']) {
            PipelineError::Config(format!("{source}: {e}"))
        } else {
            PipelineError::Sim(SimError::UnknownTemplate(source.into()))
        }
    })?;
    SceneSpec::from_json(&text).map_err(|e| PipelineError::Config(format!("{source}: {e}")))
}

/// A graph built from a dataset replay.
#[derive(Debug, Clone)]
pub struct Built {
    pub graph: SituationalGraph,
    /// Keyframe node per dataset step.
    pub keyframes: Vec<NodeId>,
    pub mapper: SemanticMapper,
}

impl Built {
    pub fn trajectory(&self, timestamps: &[f64]) -> Vec<Stamped> {
        self.keyframes
            .iter()
            .zip(timestamps)
            .map(|(id, t)| {
                (
                    *t,
                    *self
                        .graph
                        .node(*id)
                        .and_then(|n| n.kind.pose())
                        .expect("keyframe"),
                )
            })
            .collect()
    }
}

/// Replays odometry and detections in order. The first keyframe starts at
/// the ground-truth pose and is fixed; later ones are dead-reckoned.
pub fn build_graph(
    d: &SimDataset,
    layers: LayerSet,
    info: &InformationConfig,
) -> Result<Built, PipelineError> {
    let dictionary = SemanticDictionary::from_entries(d.dictionary.clone())?;
    let mut mapper = SemanticMapper::new(dictionary, layers, info.clone());
    let mut g = SituationalGraph::new();
    let start: Pose = (&d.ground_truth[0].pose).into();
    let mut keyframes = vec![g.add_node(Node::fixed(NodeKind::Keyframe(start)))?];
    let mut current = start;
    for event in d.events() {
        match event {
            Event::Odometry(o) => {
                if o.to != keyframes.len() {
                    return Err(PipelineError::Config(format!(
                        "odometry step {} out of order",
                        o.to
                    )));
                }
                let delta: Pose = (&o.delta).into();
                current = current.compose(&delta);
                let id = g.add_node(Node::new(NodeKind::Keyframe(current)))?;
                g.add_factor(Factor::new(
                    FactorKind::Odometry { delta },
                    vec![*keyframes.last().expect("start keyframe"), id],
                    info.matrix(crate::sgraph::FactorTag::Odometry),
                ))?;
                keyframes.push(id);
            }
            Event::Detection(det) => {
                let Some(&keyframe) = keyframes.get(det.step) else {
                    return Err(PipelineError::Config(format!(
                        "detection at unknown step {}",
                        det.step
                    )));
                };
                let obs = MarkerObservation {
                    marker_id: det.marker_id,
                    local_pose: (&det.local_pose).into(),
                    keyframe,
                    size: det.size,
                    nearby_points: Some(det.nearby_points.iter().map(|p| Vec3::from(*p)).collect()),
                };
                mapper.observe(&mut g, &obs)?;
            }
        }
    }
    Ok(Built {
        graph: g,
        keyframes,
        mapper,
    })
}

/// Overwrites every node with the value implied by the scene's ground truth.
pub fn set_ground_truth(b: &mut Built, d: &SimDataset) -> Result<(), PipelineError> {
    let gt_err = |m: String| PipelineError::GroundTruth(m);
    let scene = &d.scene;
    for (id, pose) in b.keyframes.iter().zip(d.ground_truth_poses()) {
        b.graph.set_value(*id, NodeKind::Keyframe(pose))?;
    }
    let marker_pose = |m: u32| {
        scene
            .marker(m)
            .map(|s| s.pose())
            .ok_or_else(|| gt_err(format!("marker {m} not in scene")))
    };
    let ledger = b.mapper.ledger.clone();
    for (&m, &id) in &ledger.markers {
        let size = scene.marker(m).map_or(0.0, |s| s.size);
        b.graph.set_value(
            id,
            NodeKind::Marker {
                pose: marker_pose(m)?,
                id: m,
                size,
            },
        )?;
    }
    let geom = |e: GeometryError| gt_err(e.to_string());
    for (&(space, slot), &id) in &ledger.walls {
        let wall = scene
            .space(space)
            .ok_or_else(|| gt_err(format!("space {space} not in scene")))?
            .wall(slot.axis, slot.side);
        b.graph.set_value(
            id,
            NodeKind::Wall(plane_to_spherical(&wall.plane).map_err(geom)?),
        )?;
    }
    let tol = CenterTolerances::default();
    let res = |e: ResidualError| gt_err(e.to_string());
    let wall_plane = |space: u32, axis: Axis, side: u8| -> Result<_, PipelineError> {
        let s = scene
            .space(space)
            .ok_or_else(|| gt_err(format!("space {space} not in scene")))?;
        Ok(s.wall(axis, side).plane)
    };
    for (&space, &id) in &ledger.spaces {
        let value = match b.mapper.dictionary.space(space) {
            Some(SpaceKind::Room) => {
                let p = |a, s| wall_plane(space, a, s);
                NodeKind::Room(
                    room_center(
                        &p(Axis::X, 0)?,
                        &p(Axis::X, 1)?,
                        &p(Axis::Y, 0)?,
                        &p(Axis::Y, 1)?,
                        &tol,
                    )
                    .map_err(res)?,
                )
            }
            Some(SpaceKind::Corridor(axis)) => {
                // Corridor markers share their along-axis position, so any
                // attached marker gives the same center.
                let marker = scene
                    .markers
                    .iter()
                    .find(|m| m.space_id == space && matches!(m.role, MarkerRole::Wall { .. }))
                    .ok_or_else(|| gt_err(format!("corridor {space} has no markers")))?;
                let c = marker.pose().translation;
                let center = corridor_center(
                    &wall_plane(space, axis, 0)?,
                    &wall_plane(space, axis, 1)?,
                    &c,
                    &tol,
                )
                .map_err(res)?;
                NodeKind::Corridor { center, axis }
            }
            None => return Err(gt_err(format!("space {space} not in dictionary"))),
        };
        b.graph.set_value(id, value)?;
    }
    for (&m, &id) in &ledger.doorways {
        b.graph.set_value(id, NodeKind::Doorway(marker_pose(m)?))?;
    }
    Ok(())
}

/// Outcome for one layer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub layers: LayerSet,
    pub nodes: usize,
    pub factors: usize,
    pub optimization: Vec<OptimizeReport>,
    pub ate_aligned: AteReport,
    pub ate_unaligned: AteReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dataset: SimDataset,
    pub semantic: (Built, MethodResult),
    pub baseline: (Built, MethodResult),
}

impl RunOutput {
    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        [&self.baseline.1, &self.semantic.1]
            .into_iter()
            .map(|r| MetricsRow {
                method: r.method.clone(),
                sequence: self.dataset.scene.name.clone(),
                aligned: (&r.ate_aligned).into(),
                unaligned: (&r.ate_unaligned).into(),
            })
            .collect()
    }
}

/// Builds, optimizes and evaluates one graph. Spaces whose walls were too
/// distorted to form during replay get another chance after the first
/// optimization.
pub fn solve(
    d: &SimDataset,
    method: &str,
    layers: LayerSet,
    info: &InformationConfig,
    opt: &OptimizerConfig,
) -> Result<(Built, MethodResult), PipelineError> {
    let mut b = build_graph(d, layers, info)?;
    let mut reports = vec![optimize(&mut b.graph, opt)?];
    let pending: Vec<u32> = b
        .mapper
        .dictionary
        .spaces()
        .map(|(s, _)| s)
        .filter(|s| !b.mapper.ledger.is_formed(*s))
        .collect();
    let mut formed = false;
    for s in pending {
        formed |= b.mapper.try_form_space(&mut b.graph, s);
    }
    if formed {
        info!("{method}: spaces formed after the first pass, optimizing again");
        reports.push(optimize(&mut b.graph, opt)?);
    }
    let estimate = b.trajectory(&d.timestamps());
    let reference: Vec<Stamped> = d
        .timestamps()
        .into_iter()
        .zip(d.ground_truth_poses())
        .collect();
    let pair = TrajectoryPair::new(estimate, reference)?;
    let result = MethodResult {
        method: method.into(),
        layers,
        nodes: b.graph.nodes().len(),
        factors: b.graph.factors().len(),
        optimization: reports,
        ate_aligned: ate(&pair, true)?,
        ate_unaligned: ate(&pair, false)?,
    };
    Ok((b, result))
}

pub fn run_dataset(d: SimDataset, cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let semantic = solve(&d, "semantic", cfg.layers, &cfg.information, &cfg.optimizer)?;
    let baseline = solve(
        &d,
        "odometry",
        LayerSet::NONE,
        &cfg.information,
        &cfg.optimizer,
    )?;
    info!(
        "{}: aligned ATE RMSE {:.4} m semantic vs {:.4} m odometry",
        d.scene.name, semantic.1.ate_aligned.rmse, baseline.1.ate_aligned.rmse
    );
    Ok(RunOutput {
        dataset: d,
        semantic,
        baseline,
    })
}

/// Simulates the configured scene and runs both methods on it.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let scene = load_scene(&cfg.scene)?;
    let dataset = crate::simulator::generate(&scene, &cfg.seeded_noise())?;
    run_dataset(dataset, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgraph::{FactorTag, NodeTag};

    #[test]
    fn layer_toggles_must_nest() {
        let cfg = RunConfig {
            layers: LayerSet {
                markers: true,
                walls: false,
                spaces: true,
                doorways: false,
            },
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_noise_graph_has_zero_cost_at_ground_truth() {
        let d = crate::simulator::generate(
            &template_scene("seq06").unwrap(),
            &NoiseModel::noiseless(0),
        )
        .unwrap();
        let mut b = build_graph(&d, LayerSet::ALL, &InformationConfig::default()).unwrap();
        assert_eq!(b.graph.count_nodes(NodeTag::Room), 1);
        assert_eq!(b.graph.count_nodes(NodeTag::Corridor), 1);
        assert_eq!(b.graph.count_factors(FactorTag::DoorwayRoom), 1);
        set_ground_truth(&mut b, &d).unwrap();
        assert!(b.graph.total_cost().unwrap() < 1e-18);
    }

    #[test]
    fn baseline_is_pure_dead_reckoning() {
        let d =
            crate::simulator::generate(&template_scene("seq01").unwrap(), &NoiseModel::default())
                .unwrap();
        let b = build_graph(&d, LayerSet::NONE, &InformationConfig::default()).unwrap();
        assert_eq!(b.graph.nodes().len(), d.ground_truth.len());
        assert_eq!(b.graph.factors().len(), d.odometry.len());
    }

    #[test]
    fn unknown_scene_is_reported() {
        assert!(matches!(
            load_scene("seq42"),
            Err(PipelineError::Sim(SimError::UnknownTemplate(_)))
        ));
        assert!(matches!(
            load_scene("/nonexistent/scene.json"),
            Err(PipelineError::Config(_))
        ));
    }
}
