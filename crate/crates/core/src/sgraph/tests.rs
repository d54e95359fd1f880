use super::*;
use crate::geometry::{plane_to_spherical, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn info(tag: FactorTag) -> DMatrix<f64> {
    InformationConfig::default().matrix(tag)
}

fn kf(g: &mut SituationalGraph, p: Pose, fixed: bool) -> NodeId {
    let kind = NodeKind::Keyframe(p);
    g.add_node(if fixed {
        Node::fixed(kind)
    } else {
        Node::new(kind)
    })
    .unwrap()
}

fn odom(g: &mut SituationalGraph, a: NodeId, b: NodeId, delta: Pose) -> FactorId {
    g.add_factor(Factor::new(
        FactorKind::Odometry { delta },
        vec![a, b],
        info(FactorTag::Odometry),
    ))
    .unwrap()
}

fn wall_node(p: &Plane) -> NodeKind {
    NodeKind::Wall(plane_to_spherical(p).unwrap())
}

fn rand_tangent(rng: &mut ChaCha8Rng, scale: f64) -> Tangent6 {
    let v = Vec6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    Tangent6::from_vector(&(v * (scale / v.norm()) * rng.random_range(0.0..1.0)))
}

fn rand_vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.random_range(-scale..scale))
}

#[test]
fn add_node_and_factor_errors() {
    let mut g = SituationalGraph::new();
    let a = kf(&mut g, Pose::identity(), true);
    let b = kf(&mut g, Pose::from_translation(1.0, 0.0, 0.0), false);
    odom(&mut g, a, b, Pose::from_translation(1.0, 0.0, 0.0));

    let w = g
        .add_node(Node::new(wall_node(&Plane::new(Vec3::x(), -3.0))))
        .unwrap();
    let err = g
        .add_factor(Factor::new(
            FactorKind::WallMarker,
            vec![a, w],
            info(FactorTag::WallMarker),
        ))
        .unwrap_err();
    assert_eq!(
        err,
        GraphError::KindMismatch {
            factor: FactorTag::WallMarker,
            found: vec![NodeTag::Keyframe, NodeTag::Wall]
        }
    );

    let m = g
        .add_node(Node::new(NodeKind::Marker {
            pose: Pose::identity(),
            id: 3,
            size: 0.08,
        }))
        .unwrap();
    let mut bad = info(FactorTag::MarkerObs);
    bad[(0, 0)] = -1.0;
    let err = g
        .add_factor(Factor::new(
            FactorKind::MarkerObs {
                local: Pose::identity(),
            },
            vec![a, m],
            bad,
        ))
        .unwrap_err();
    assert!(matches!(err, GraphError::BadInformationMatrix(_)));
    let mut asym = info(FactorTag::MarkerObs);
    asym[(0, 1)] = 1.0;
    assert!(matches!(
        g.add_factor(Factor::new(
            FactorKind::MarkerObs {
                local: Pose::identity()
            },
            vec![a, m],
            asym
        )),
        Err(GraphError::BadInformationMatrix(_))
    ));
    assert!(matches!(
        g.add_factor(Factor::new(
            FactorKind::MarkerObs {
                local: Pose::identity()
            },
            vec![a, m],
            info(FactorTag::WallMarker)
        )),
        Err(GraphError::BadInformationMatrix(_))
    ));
    assert_eq!(
        g.add_factor(Factor::new(
            FactorKind::MarkerObs {
                local: Pose::identity()
            },
            vec![a, NodeId(99)],
            info(FactorTag::MarkerObs)
        )),
        Err(GraphError::UnknownNode(NodeId(99)))
    );
    assert_eq!(
        g.add_node(Node::new(NodeKind::Marker {
            pose: Pose::identity(),
            id: 3,
            size: 0.08
        })),
        Err(GraphError::DuplicateMarkerId(3))
    );
    assert!(matches!(
        g.add_node(Node::new(NodeKind::Marker {
            pose: Pose::identity(),
            id: 4,
            size: 0.0
        })),
        Err(GraphError::InvalidNode(_))
    ));
    assert_eq!(g.count_factors(FactorTag::Odometry), 1);
    assert_eq!(g.count_factors(FactorTag::MarkerObs), 0);
}

#[test]
fn doorway_factor_accepts_room_or_corridor() {
    let mut g = SituationalGraph::new();
    let d = g
        .add_node(Node::new(NodeKind::Doorway(Pose::identity())))
        .unwrap();
    let r = g
        .add_node(Node::new(NodeKind::Room(Vec3::zeros())))
        .unwrap();
    let c = g
        .add_node(Node::new(NodeKind::Corridor {
            center: Vec3::zeros(),
            axis: Axis::X,
        }))
        .unwrap();
    let k = kf(&mut g, Pose::identity(), true);
    for target in [r, c] {
        g.add_factor(Factor::new(
            FactorKind::DoorwayRoom {
                delta: Vec3::zeros(),
            },
            vec![d, target],
            info(FactorTag::DoorwayRoom),
        ))
        .unwrap();
    }
    assert!(matches!(
        g.add_factor(Factor::new(
            FactorKind::DoorwayRoom {
                delta: Vec3::zeros()
            },
            vec![d, k],
            info(FactorTag::DoorwayRoom)
        )),
        Err(GraphError::KindMismatch { .. })
    ));
}

#[test]
fn removal_keeps_layering_and_never_reuses_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = SituationalGraph::new();
    let mut seen_nodes = std::collections::BTreeSet::new();
    let mut seen_factors = std::collections::BTreeSet::new();
    for step in 0..400 {
        let ids: Vec<NodeId> = g.nodes().keys().copied().collect();
        match rng.random_range(0..5) {
            0 | 1 => {
                let kind = match rng.random_range(0..4) {
                    0 => NodeKind::Keyframe(Pose::identity()),
                    1 => NodeKind::Marker {
                        pose: Pose::identity(),
                        id: step,
                        size: 0.08,
                    },
                    2 => wall_node(&Plane::new(Vec3::x(), -1.0)),
                    _ => NodeKind::Room(Vec3::zeros()),
                };
                let id = g.add_node(Node::new(kind)).unwrap();
                assert!(seen_nodes.insert(id));
            }
            2 if !ids.is_empty() => {
                g.remove_node(ids[rng.random_range(0..ids.len())]).unwrap();
            }
            3 if ids.len() >= 2 => {
                let a = ids[rng.random_range(0..ids.len())];
                let b = ids[rng.random_range(0..ids.len())];
                let kind = match (g.node(a).unwrap().tag(), g.node(b).unwrap().tag()) {
                    (NodeTag::Keyframe, NodeTag::Keyframe) => FactorKind::Odometry {
                        delta: Pose::identity(),
                    },
                    (NodeTag::Keyframe, NodeTag::Marker) => FactorKind::MarkerObs {
                        local: Pose::identity(),
                    },
                    _ => FactorKind::WallMarker,
                };
                let tag = kind.tag();
                if let Ok(id) = g.add_factor(Factor::new(kind, vec![a, b], info(tag))) {
                    assert!(seen_factors.insert(id));
                }
            }
            _ => {
                let fids: Vec<FactorId> = g.factors().keys().copied().collect();
                if !fids.is_empty() {
                    g.remove_factor(fids[rng.random_range(0..fids.len())])
                        .unwrap();
                }
            }
        }
        g.validate().unwrap();
        for f in g.factors().values() {
            let layers: Vec<Layer> = f.nodes.iter().map(|n| g.layer_of(*n).unwrap()).collect();
            let allowed = match f.tag() {
                FactorTag::Odometry => vec![Layer::Keyframes, Layer::Keyframes],
                FactorTag::MarkerObs => vec![Layer::Keyframes, Layer::Markers],
                FactorTag::WallMarker => vec![Layer::Markers, Layer::Structural],
                _ => unreachable!(),
            };
            assert_eq!(layers, allowed);
        }
    }
    assert!(!seen_nodes.is_empty());
}

/// Random consistent configuration of the nodes one factor of `tag`
/// touches, each then perturbed by a tangent of norm at most `spread`.
fn random_factor_with(tag: FactorTag, rng: &mut ChaCha8Rng, spread: f64) -> (Factor, NodeStore) {
    let mut nodes = NodeStore::new();
    let put = |nodes: &mut NodeStore, k: NodeKind| {
        let id = NodeId(nodes.len() as u64);
        nodes.insert(id, Node::new(k));
        id
    };
    let perturb = |rng: &mut ChaCha8Rng, k: NodeKind| {
        let dim = k.tag().tangent_dim();
        let xi = rand_tangent(rng, spread).to_vector();
        k.retract(&xi.as_slice()[..dim])
    };
    let rand_pose = |rng: &mut ChaCha8Rng| Pose::exp(&rand_tangent(rng, 3.0));
    let vertical_wall = |rng: &mut ChaCha8Rng, az: f64| {
        let n = Vec3::new(az.cos(), az.sin(), 0.0);
        Plane::new(n, rng.random_range(-4.0..4.0))
    };
    let (kind, ids) = match tag {
        FactorTag::Odometry => {
            let a = rand_pose(rng);
            let delta = Pose::exp(&rand_tangent(rng, 1.0));
            let b = a.compose(&delta);
            let ia = put(&mut nodes, perturb(rng, NodeKind::Keyframe(a)));
            let ib = put(&mut nodes, perturb(rng, NodeKind::Keyframe(b)));
            (FactorKind::Odometry { delta }, vec![ia, ib])
        }
        FactorTag::MarkerObs => {
            let k = rand_pose(rng);
            let local = Pose::exp(&rand_tangent(rng, 1.0));
            let m = k.compose(&local);
            let ik = put(&mut nodes, perturb(rng, NodeKind::Keyframe(k)));
            let im = put(
                &mut nodes,
                perturb(
                    rng,
                    NodeKind::Marker {
                        pose: m,
                        id: 1,
                        size: 0.08,
                    },
                ),
            );
            (FactorKind::MarkerObs { local }, vec![ik, im])
        }
        FactorTag::WallMarker => {
            let az = rng.random_range(-3.1..3.1);
            let plane = vertical_wall(rng, az);
            let n = plane.normal;
            let along = Vec3::z().cross(&n);
            let origin = -plane.offset * n + along * rng.random_range(-2.0..2.0) + Vec3::z() * 1.2;
            let m = Pose::from_axes(along, Vec3::z(), n, origin);
            let im = put(
                &mut nodes,
                perturb(
                    rng,
                    NodeKind::Marker {
                        pose: m,
                        id: 1,
                        size: 0.08,
                    },
                ),
            );
            let iw = put(&mut nodes, perturb(rng, wall_node(&plane)));
            (FactorKind::WallMarker, vec![im, iw])
        }
        FactorTag::Corridor => {
            let az = rng.random_range(-3.1..3.1);
            let a = vertical_wall(rng, az);
            let width = rng.random_range(1.0..4.0);
            let b = if rng.random_bool(0.5) {
                Plane::new(a.normal, a.offset - width)
            } else {
                Plane::new(-a.normal, -(a.offset - width))
            };
            let c = rand_vec3(rng, 5.0);
            let center =
                residuals::corridor_center(&a, &b, &c, &CenterTolerances::default()).unwrap();
            let ic = put(
                &mut nodes,
                perturb(
                    rng,
                    NodeKind::Corridor {
                        center,
                        axis: Axis::X,
                    },
                ),
            );
            let ia = put(&mut nodes, perturb(rng, wall_node(&a)));
            let ib = put(&mut nodes, perturb(rng, wall_node(&b)));
            (FactorKind::Corridor { marker_center: c }, vec![ic, ia, ib])
        }
        FactorTag::Room => {
            let az = rng.random_range(-3.1..3.1);
            let ax = vertical_wall(rng, az);
            let bx = Plane::new(-ax.normal, -(ax.offset - 4.0));
            let ay = vertical_wall(rng, az + std::f64::consts::FRAC_PI_2);
            let by = Plane::new(-ay.normal, -(ay.offset - 6.0));
            let center =
                residuals::room_center(&ax, &bx, &ay, &by, &CenterTolerances::default()).unwrap();
            let ir = put(&mut nodes, perturb(rng, NodeKind::Room(center)));
            let mut ids = vec![ir];
            for w in [ax, bx, ay, by] {
                ids.push(put(&mut nodes, perturb(rng, wall_node(&w))));
            }
            (FactorKind::Room, ids)
        }
        FactorTag::DoorwayRoom => {
            let d = rand_pose(rng);
            let c = rand_vec3(rng, 5.0);
            let id = put(&mut nodes, perturb(rng, NodeKind::Doorway(d)));
            let ic = put(&mut nodes, perturb(rng, NodeKind::Room(c)));
            (
                FactorKind::DoorwayRoom {
                    delta: d.translation - c,
                },
                vec![id, ic],
            )
        }
    };
    (Factor::new(kind, ids, info(tag)), nodes)
}

fn random_factor(tag: FactorTag, rng: &mut ChaCha8Rng) -> (Factor, NodeStore) {
    random_factor_with(tag, rng, 0.1)
}

const ALL_TAGS: [FactorTag; 6] = [
    FactorTag::Odometry,
    FactorTag::MarkerObs,
    FactorTag::WallMarker,
    FactorTag::Corridor,
    FactorTag::Room,
    FactorTag::DoorwayRoom,
];

#[test]
fn analytic_jacobians_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for tag in ALL_TAGS {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let (f, nodes) = random_factor(tag, &mut rng);
            let a = analytic_jacobian(&f, &nodes).unwrap();
            let n = numeric_jacobian(&f, &nodes, 1e-6).unwrap();
            assert_eq!(a.len(), f.nodes.len());
            for (ja, jn) in a.iter().zip(&n) {
                assert_eq!(ja.shape(), jn.shape());
                let rel = (ja - jn).amax() / jn.amax().max(1.0);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "{tag:?}: worst relative error {worst:e}");
    }
}

#[test]
fn linear_blocks_by_hand() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (f, nodes) = random_factor(FactorTag::DoorwayRoom, &mut rng);
    let j = analytic_jacobian(&f, &nodes).unwrap();
    assert_eq!(j[0], -DMatrix::<f64>::identity(3, 3));
    assert_eq!(j[1], DMatrix::<f64>::identity(3, 3));
    let (f, nodes) = random_factor(FactorTag::Room, &mut rng);
    assert_eq!(
        analytic_jacobian(&f, &nodes).unwrap()[0],
        DMatrix::<f64>::identity(3, 3)
    );
    let (f, nodes) = random_factor(FactorTag::Corridor, &mut rng);
    assert_eq!(
        analytic_jacobian(&f, &nodes).unwrap()[0],
        DMatrix::<f64>::identity(3, 3)
    );
}

#[test]
fn odometry_blocks_at_zero_residual_are_adjoint_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Pose::exp(&rand_tangent(&mut rng, 2.0));
    let delta = Pose::exp(&rand_tangent(&mut rng, 1.0));
    let (ji, jj) = residuals::jacobian_odometry(&a, &a.compose(&delta), &delta);
    assert!((ji + delta.inverse().adjoint()).amax() < 1e-12);
    assert!((jj - crate::geometry::Mat6::identity()).amax() < 1e-12);
}

#[test]
fn residuals_vanish_at_consistent_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for tag in ALL_TAGS {
        for _ in 0..20 {
            let (f, nodes) = random_factor_with(tag, &mut rng, 0.0);
            let r = evaluate_residual(&f, &nodes).unwrap();
            assert_eq!(r.len(), tag.residual_dim());
            assert!(r.amax() < 1e-9, "{tag:?}: {r}");
        }
    }
}

#[test]
fn angular_components_are_wrapped() {
    let wall = plane_to_spherical(&Plane::new(-Vec3::x(), 3.0)).unwrap();
    // Marker facing away from the wall normal: raw azimuth is pi.
    let m = Pose::from_axes(Vec3::y(), Vec3::z(), Vec3::x(), Vec3::new(3.0, 0.0, 1.0));
    let mut nodes = NodeStore::new();
    nodes.insert(
        NodeId(0),
        Node::new(NodeKind::Marker {
            pose: m,
            id: 1,
            size: 0.08,
        }),
    );
    nodes.insert(NodeId(1), Node::new(NodeKind::Wall(wall)));
    let f = Factor::new(
        FactorKind::WallMarker,
        vec![NodeId(0), NodeId(1)],
        info(FactorTag::WallMarker),
    );
    let r = evaluate_residual(&f, &nodes).unwrap();
    assert!(r[0] > -std::f64::consts::PI && r[0] <= std::f64::consts::PI);
    assert!((r[0].abs() - std::f64::consts::PI).abs() < 1e-12);
}

fn chain(perturb_middle: Option<Tangent6>) -> (SituationalGraph, [NodeId; 3], [Pose; 3]) {
    let gt = [
        Pose::identity(),
        Pose::from_yaw(0.3, Vec3::new(1.0, 0.2, 0.0)),
        Pose::from_yaw(0.5, Vec3::new(2.0, 0.1, 0.1)),
    ];
    let mut g = SituationalGraph::new();
    let k0 = kf(&mut g, gt[0], true);
    let mid = match perturb_middle {
        Some(xi) => gt[1].boxplus(&xi),
        None => gt[1],
    };
    let k1 = kf(&mut g, mid, false);
    let k2 = kf(&mut g, gt[2], false);
    for (a, b, i, j) in [(k0, k1, 0, 1), (k1, k2, 1, 2), (k0, k2, 0, 2)] {
        odom(&mut g, a, b, gt[i].inverse().compose(&gt[j]));
    }
    (g, [k0, k1, k2], gt)
}

#[test]
fn optimizer_zero_residual_graph() {
    let (mut g, _, _) = chain(None);
    let rep = optimize(&mut g, &OptimizerConfig::default()).unwrap();
    assert!(rep.converged);
    assert!(rep.iterations <= 1);
    assert!(rep.final_cost < 1e-18);
}

/// Weighted linear least squares over the free translations of a chain with
/// identity rotations: minimize sum of |t_j - t_i - d_ij|^2.
fn translation_oracle(edges: &[(usize, usize, Vec3)], fixed: Vec3, free: usize) -> Vec<Vec3> {
    let n = 3 * free;
    let mut a = DMatrix::<f64>::zeros(3 * edges.len(), n);
    let mut b = DVector::<f64>::zeros(3 * edges.len());
    for (row, (i, j, d)) in edges.iter().enumerate() {
        let mut rhs = *d;
        for (node, sign) in [(*i, -1.0), (*j, 1.0)] {
            if node == 0 {
                rhs -= sign * fixed;
            } else {
                for k in 0..3 {
                    a[(3 * row + k, 3 * (node - 1) + k)] = sign;
                }
            }
        }
        b.rows_mut(3 * row, 3).copy_from(&rhs);
    }
    let x = (a.transpose() * &a)
        .cholesky()
        .unwrap()
        .solve(&(a.transpose() * b));
    (0..free)
        .map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
        .collect()
}

#[test]
fn optimizer_recovers_perturbed_chain() {
    let t = [
        Vec3::zeros(),
        Vec3::new(1.0, 0.5, 0.0),
        Vec3::new(2.5, 0.0, 0.2),
    ];
    let mut g = SituationalGraph::new();
    let k0 = kf(&mut g, Pose::from_translation(t[0].x, t[0].y, t[0].z), true);
    let perturbed = Pose::exp(&Tangent6::new(
        Vec3::new(0.05, -0.04, 0.1),
        t[1] + Vec3::new(0.3, -0.2, 0.15),
    ));
    let k1 = kf(&mut g, perturbed, false);
    let k2 = kf(
        &mut g,
        Pose::from_translation(t[2].x, t[2].y, t[2].z),
        false,
    );
    let ids = [k0, k1, k2];
    let edges = [
        (0, 1, t[1] - t[0]),
        (1, 2, t[2] - t[1]),
        (0, 2, t[2] - t[0]),
    ];
    for (i, j, d) in edges {
        odom(
            &mut g,
            ids[i],
            ids[j],
            Pose::from_translation(d.x, d.y, d.z),
        );
    }
    let oracle = translation_oracle(&edges, t[0], 2);
    let rep = optimize(&mut g, &OptimizerConfig::default()).unwrap();
    assert!(rep.converged, "{rep:?}");
    for (k, expected) in [k1, k2].iter().zip(&oracle) {
        let p = g.node(*k).unwrap().kind.pose().unwrap();
        assert!((p.translation - expected).norm() < 1e-9);
        assert!(crate::geometry::so3_log(&p.rotation).norm() < 1e-9);
    }
}

#[test]
fn optimizer_recovers_rotated_chain() {
    let xi = Tangent6::new(Vec3::new(0.1, -0.05, 0.2), Vec3::new(0.3, 0.2, -0.1));
    let (mut g, ids, gt) = chain(Some(xi));
    let rep = optimize(&mut g, &OptimizerConfig::default()).unwrap();
    assert!(rep.converged);
    for (id, truth) in ids.iter().zip(&gt) {
        let p = g.node(*id).unwrap().kind.pose().unwrap();
        assert!(p.boxminus(truth).norm() < 1e-9);
    }
}

#[test]
fn optimizer_requires_one_fixed_keyframe() {
    let (mut g, ids, _) = chain(None);
    g.set_fixed(ids[0], false).unwrap();
    assert_eq!(
        optimize(&mut g, &OptimizerConfig::default()),
        Err(GraphError::NoGaugeFixed(0))
    );
    g.set_fixed(ids[0], true).unwrap();
    g.set_fixed(ids[1], true).unwrap();
    assert_eq!(
        optimize(&mut g, &OptimizerConfig::default()),
        Err(GraphError::NoGaugeFixed(2))
    );
}

#[test]
fn optimizer_rejects_unconstrained_coordinates() {
    // A marker tied only to its wall can slide within the wall plane.
    let (mut g, _, _) = chain(None);
    let marker = g
        .add_node(Node::new(NodeKind::Marker {
            pose: Pose::from_axes(Vec3::y(), Vec3::z(), Vec3::x(), Vec3::new(2.0, 0.0, 1.0)),
            id: 7,
            size: 0.1,
        }))
        .unwrap();
    let wall = g
        .add_node(Node::fixed(NodeKind::Wall(SphericalPlane::new(
            0.0, 0.0, -2.0,
        ))))
        .unwrap();
    g.add_factor(Factor::new(
        FactorKind::WallMarker,
        vec![marker, wall],
        InformationConfig::default().matrix(FactorTag::WallMarker),
    ))
    .unwrap();
    assert!(matches!(
        optimize(&mut g, &OptimizerConfig::default()),
        Err(GraphError::LinearSolveFailed(_))
    ));
}

#[test]
fn optimizer_leaves_isolated_nodes_alone() {
    let (mut g, _, _) = chain(None);
    let room = g
        .add_node(Node::new(NodeKind::Room(Vec3::new(1.0, 2.0, 3.0))))
        .unwrap();
    let report = optimize(&mut g, &OptimizerConfig::default()).unwrap();
    assert!(report.converged);
    assert_eq!(
        g.node(room).unwrap().kind.center(),
        Some(&Vec3::new(1.0, 2.0, 3.0))
    );
}

/// Noisy planar loop of `n` keyframes with a few marker landmarks.
fn noisy_loop(seed: u64, info_scale: f64) -> SituationalGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = InformationConfig::default().scaled(info_scale);
    let n = 24;
    let gt: Vec<Pose> = (0..n)
        .map(|i| {
            let a = i as f64 / n as f64 * std::f64::consts::TAU;
            Pose::from_yaw(
                a + std::f64::consts::FRAC_PI_2,
                Vec3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.0),
            )
        })
        .collect();
    let mut g = SituationalGraph::new();
    let mut est = gt[0];
    let mut ids = vec![kf(&mut g, gt[0], true)];
    for i in 1..n {
        let noisy = gt[i - 1]
            .inverse()
            .compose(&gt[i])
            .boxplus(&rand_tangent(&mut rng, 0.03));
        est = est.compose(&noisy);
        let id = kf(&mut g, est, false);
        g.add_factor(Factor::new(
            FactorKind::Odometry { delta: noisy },
            vec![ids[i - 1], id],
            cfg.matrix(FactorTag::Odometry),
        ))
        .unwrap();
        ids.push(id);
    }
    let landmark = Pose::from_translation(0.0, 0.0, 1.0);
    let m = g
        .add_node(Node::new(NodeKind::Marker {
            pose: Pose::identity(),
            id: 0,
            size: 0.08,
        }))
        .unwrap();
    for i in (0..n).step_by(3) {
        let local = gt[i]
            .inverse()
            .compose(&landmark)
            .boxplus(&rand_tangent(&mut rng, 0.01));
        g.add_factor(Factor::new(
            FactorKind::MarkerObs { local },
            vec![ids[i], m],
            cfg.matrix(FactorTag::MarkerObs),
        ))
        .unwrap();
    }
    g
}

#[test]
fn optimizer_cost_trace_is_monotone() {
    for seed in 0..5 {
        let mut g = noisy_loop(seed, 1.0);
        let before = g.total_cost().unwrap();
        let rep = optimize(&mut g, &OptimizerConfig::default()).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert_eq!(rep.initial_cost, before);
        assert!(rep.final_cost <= rep.initial_cost);
        assert!(rep.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(
            (g.total_cost().unwrap() - rep.final_cost).abs() <= 1e-12 * rep.final_cost.max(1.0)
        );
    }
}

#[test]
fn optimizer_fixed_point_is_invariant_to_information_scale() {
    let mut a = noisy_loop(7, 1.0);
    let mut b = noisy_loop(7, 37.5);
    optimize(&mut a, &OptimizerConfig::default()).unwrap();
    optimize(&mut b, &OptimizerConfig::default()).unwrap();
    for (id, na) in a.nodes() {
        let nb = b.node(*id).unwrap();
        let d = na
            .kind
            .pose()
            .unwrap()
            .boxminus(nb.kind.pose().unwrap())
            .norm();
        assert!(d < 1e-8, "{id}: {d:e}");
    }
}

#[test]
fn numeric_jacobian_mode_reaches_the_same_solution() {
    let mut a = noisy_loop(9, 1.0);
    let mut b = a.clone();
    optimize(&mut a, &OptimizerConfig::default()).unwrap();
    let cfg = OptimizerConfig {
        jacobian: JacobianMode::Numeric,
        ..Default::default()
    };
    optimize(&mut b, &cfg).unwrap();
    for (id, na) in a.nodes() {
        let d = na
            .kind
            .pose()
            .unwrap()
            .boxminus(b.node(*id).unwrap().kind.pose().unwrap())
            .norm();
        assert!(d < 1e-7);
    }
}

#[test]
fn huber_kernel_downweights_outliers() {
    let mut g = noisy_loop(4, 1.0);
    let last = *g.factors().keys().next().unwrap();
    let f = g.factor(last).unwrap().clone();
    g.remove_factor(last).unwrap();
    let bad = match f.kind {
        FactorKind::Odometry { delta } => delta.compose(&Pose::from_translation(2.0, 0.0, 0.0)),
        _ => unreachable!(),
    };
    g.add_factor(Factor::new(
        FactorKind::Odometry { delta: bad },
        f.nodes.clone(),
        f.information.clone(),
    ))
    .unwrap();
    let cfg = OptimizerConfig {
        huber: Some(1.0),
        ..Default::default()
    };
    let rep = optimize(&mut g, &cfg).unwrap();
    assert!(rep.final_cost < rep.initial_cost);
    assert!(rep.cost_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn export_round_trip_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut g = noisy_loop(1, 1.0);
    let base = g.nodes().len() as u64;
    for tag in ALL_TAGS {
        let (f, nodes) = random_factor(tag, &mut rng);
        let mut map = BTreeMap::new();
        for (id, mut n) in nodes {
            if let NodeKind::Marker { id: m, .. } = &mut n.kind {
                *m = 100 + tag as u32;
            }
            map.insert(id, g.add_node(n).unwrap());
        }
        let ids = f.nodes.iter().map(|n| map[n]).collect();
        g.add_factor(Factor::new(f.kind, ids, f.information))
            .unwrap();
    }
    optimize(&mut g, &OptimizerConfig::default()).ok();
    g.remove_node(NodeId(base)).unwrap();
    let text = GraphDocument::from_graph(&g).to_json();
    let back = GraphDocument::from_json(&text).unwrap().to_graph().unwrap();
    assert_eq!(back, g);
    assert_eq!(GraphDocument::from_graph(&back).to_json(), text);
    assert!(text.contains("\"version\": 1"));
    let dot = to_dot(&g);
    assert!(dot.starts_with("graph sgraph {"));
}

#[test]
fn export_rejects_unknown_versions_and_bad_graphs() {
    let (g, _, _) = chain(None);
    let mut doc = GraphDocument::from_graph(&g);
    doc.version = 9;
    assert!(matches!(doc.to_graph(), Err(DocumentError::Version(9))));
    let mut doc = GraphDocument::from_graph(&g);
    doc.factors[0].nodes[1] = 77;
    assert!(matches!(
        doc.to_graph(),
        Err(DocumentError::Graph(GraphError::UnknownNode(NodeId(77))))
    ));
    assert!(GraphDocument::from_json("{").is_err());
}
