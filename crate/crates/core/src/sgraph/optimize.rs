//! Levenberg–Marquardt over the free node tangents with sparse Cholesky
//! solves of the damped normal equations.

use std::collections::{BTreeMap, BTreeSet};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    analytic_jacobian, evaluate_residual, numeric_jacobian, Factor, GraphError, NodeId, NodeStore,
    NodeTag, SituationalGraph,
};

const NUMERIC_STEP: f64 = 1e-6;
const LAMBDA_MAX: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Threshold on the max-norm of the gradient.
    pub g_tol: f64,
    /// Threshold on the relative cost decrease of an accepted step.
    pub f_tol: f64,
    pub lambda_init: f64,
    pub jacobian: JacobianMode,
    /// Huber threshold on the whitened residual norm; `None` disables it.
    pub huber: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            g_tol: 1e-8,
            f_tol: 1e-10,
            lambda_init: 1e-4,
            jacobian: JacobianMode::Analytic,
            huber: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    CostTolerance,
    MaxIterations,
    /// Damping grew past its ceiling without finding a decreasing step.
    NoProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// True when stopped by the gradient or the cost-decrease tolerance.
    pub converged: bool,
    pub termination: Termination,
    pub final_gradient_norm: f64,
    pub rejected_steps: usize,
    /// Cost at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
}

struct Layout {
    offsets: BTreeMap<NodeId, usize>,
    dim: usize,
}

impl Layout {
    /// Free nodes touched by at least one factor; isolated nodes cannot
    /// change the cost and stay where they are.
    fn new(nodes: &NodeStore, factors: &[(super::FactorId, &Factor)]) -> Self {
        let touched: BTreeSet<NodeId> = factors
            .iter()
            .flat_map(|(_, f)| f.nodes.iter().copied())
            .collect();
        let mut offsets = BTreeMap::new();
        let mut dim = 0;
        for (id, node) in nodes {
            if !node.fixed && touched.contains(id) {
                offsets.insert(*id, dim);
                dim += node.tag().tangent_dim();
            }
        }
        Self { offsets, dim }
    }
}

/// Lower-triangular block pattern of the normal equations, fixed for the
/// whole run so the symbolic factorization is computed once.
struct Pattern {
    symbolic: SymbolicSparseColMat<usize>,
    llt: SymbolicLlt<usize>,
    /// Keyed by (row offset, column offset) of a node pair; per block column,
    /// the value index of its first stored row.
    blocks: BTreeMap<(usize, usize), Vec<usize>>,
    /// Value index of each diagonal entry.
    diagonal: Vec<usize>,
}

impl Pattern {
    fn new(
        nodes: &NodeStore,
        layout: &Layout,
        factors: &[(super::FactorId, &Factor)],
    ) -> Result<Self, GraphError> {
        let dim_of = |id: &NodeId| nodes[id].tag().tangent_dim();
        let mut pairs = BTreeSet::new();
        for (_, f) in factors {
            let free: Vec<(usize, usize)> = f
                .nodes
                .iter()
                .filter_map(|n| layout.offsets.get(n).map(|o| (*o, dim_of(n))))
                .collect();
            for &a in &free {
                for &b in &free {
                    if a.0 >= b.0 {
                        pairs.insert((a, b));
                    }
                }
            }
        }
        // (column, first row, row count, block key, column within block)
        let mut segments = Vec::new();
        for &((oa, da), (ob, db)) in &pairs {
            for cc in 0..db {
                let first = if oa == ob { cc } else { 0 };
                segments.push((ob + cc, oa + first, da - first, (oa, ob), cc));
            }
        }
        segments.sort();
        let mut col_ptr = vec![0usize; layout.dim + 1];
        let mut row_idx = Vec::new();
        let mut blocks: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for &(col, first, len, key, cc) in &segments {
            let entry = blocks.entry(key).or_default();
            if entry.len() <= cc {
                entry.resize(cc + 1, usize::MAX);
            }
            entry[cc] = row_idx.len();
            row_idx.extend(first..first + len);
            col_ptr[col + 1] = row_idx.len();
        }
        for c in 0..layout.dim {
            col_ptr[c + 1] = col_ptr[c + 1].max(col_ptr[c]);
        }
        let diagonal = (0..layout.dim)
            .map(|c| {
                let start = col_ptr[c];
                debug_assert_eq!(row_idx.get(start), Some(&c));
                start
            })
            .collect();
        let symbolic =
            SymbolicSparseColMat::new_checked(layout.dim, layout.dim, col_ptr, None, row_idx);
        let llt = SymbolicLlt::try_new(symbolic.as_ref(), Side::Lower)
            .map_err(|e| GraphError::LinearSolveFailed(format!("symbolic factorization: {e:?}")))?;
        Ok(Self {
            symbolic,
            llt,
            blocks,
            diagonal,
        })
    }
}

struct Problem<'a> {
    factors: Vec<(super::FactorId, &'a Factor)>,
    cfg: &'a OptimizerConfig,
}

struct Linearization {
    cost: f64,
    gradient: Vec<f64>,
    /// Lower triangle of `JᵀΛJ`, laid out by [`Pattern`].
    values: Vec<f64>,
    diagonal: Vec<f64>,
}

impl Problem<'_> {
    fn robust_weight(&self, sq: f64) -> (f64, f64) {
        match self.cfg.huber {
            Some(k) if sq > k * k => {
                let s = sq.sqrt();
                (2.0 * k * s - k * k, k / s)
            }
            _ => (sq, 1.0),
        }
    }

    fn cost(&self, nodes: &NodeStore) -> Result<f64, GraphError> {
        let mut total = 0.0;
        for (id, f) in &self.factors {
            let r = evaluate_residual(f, nodes).map_err(|source| GraphError::Residual {
                factor: *id,
                source,
            })?;
            let sq = (r.transpose() * &f.information * &r)[(0, 0)];
            total += self.robust_weight(sq).0;
        }
        Ok(total)
    }

    fn linearize(
        &self,
        nodes: &NodeStore,
        layout: &Layout,
        pattern: &Pattern,
    ) -> Result<Linearization, GraphError> {
        let mut cost = 0.0;
        let mut gradient = vec![0.0; layout.dim];
        let mut values = vec![0.0; pattern.symbolic.row_idx().len()];
        for (id, f) in &self.factors {
            let wrap = |source| GraphError::Residual {
                factor: *id,
                source,
            };
            let r = evaluate_residual(f, nodes).map_err(wrap)?;
            let blocks = match self.cfg.jacobian {
                JacobianMode::Analytic => analytic_jacobian(f, nodes),
                JacobianMode::Numeric => numeric_jacobian(f, nodes, NUMERIC_STEP),
            }
            .map_err(wrap)?;
            let sq = (r.transpose() * &f.information * &r)[(0, 0)];
            let (rho, w) = self.robust_weight(sq);
            cost += rho;
            let info = &f.information * w;
            let lambda_r: DVector<f64> = &info * &r;
            let free: Vec<(usize, &DMatrix<f64>)> = f
                .nodes
                .iter()
                .zip(&blocks)
                .filter_map(|(n, j)| layout.offsets.get(n).map(|o| (*o, j)))
                .collect();
            for &(oa, ja) in &free {
                let ga = ja.transpose() * &lambda_r;
                for (k, v) in ga.iter().enumerate() {
                    gradient[oa + k] += v;
                }
                let ja_info = ja.transpose() * &info;
                for &(ob, jb) in &free {
                    if ob > oa {
                        continue;
                    }
                    let h = &ja_info * jb;
                    let starts = &pattern.blocks[&(oa, ob)];
                    for (c, &start) in starts.iter().enumerate() {
                        let first = if oa == ob { c } else { 0 };
                        for rr in first..h.nrows() {
                            values[start + rr - first] += h[(rr, c)];
                        }
                    }
                }
            }
        }
        let diagonal = pattern.diagonal.iter().map(|&i| values[i]).collect();
        Ok(Linearization {
            cost,
            gradient,
            values,
            diagonal,
        })
    }
}

fn solve_damped(lin: &Linearization, pattern: &Pattern, lambda: f64) -> Option<Vec<f64>> {
    let mut values = lin.values.clone();
    for (&i, d) in pattern.diagonal.iter().zip(&lin.diagonal) {
        values[i] += lambda * d;
    }
    let h = SparseColMatRef::new(pattern.symbolic.as_ref(), &values);
    let llt = Llt::try_new_with_symbolic(pattern.llt.clone(), h, Side::Lower).ok()?;
    let dim = lin.gradient.len();
    let rhs = Mat::<f64>::from_fn(dim, 1, |i, _| -lin.gradient[i]);
    let x = llt.solve(&rhs);
    let step: Vec<f64> = (0..dim).map(|i| x[(i, 0)]).collect();
    step.iter().all(|v| v.is_finite()).then_some(step)
}

fn apply_step(nodes: &NodeStore, layout: &Layout, step: &[f64]) -> NodeStore {
    let mut out = nodes.clone();
    for (id, &offset) in &layout.offsets {
        let node = out.get_mut(id).expect("layout built from nodes");
        let dim = node.tag().tangent_dim();
        node.kind = node.kind.retract(&step[offset..offset + dim]);
    }
    out
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes the total factor cost over all non-fixed nodes, in place.
/// Nodes without factors are left untouched.
///
/// Requires exactly one fixed keyframe. The accepted-step cost trace is
/// strictly decreasing; the graph is left at the last accepted state.
pub fn optimize(
    g: &mut SituationalGraph,
    cfg: &OptimizerConfig,
) -> Result<OptimizeReport, GraphError> {
    let fixed_keyframes = g
        .nodes()
        .values()
        .filter(|n| n.tag() == NodeTag::Keyframe && n.fixed)
        .count();
    if fixed_keyframes != 1 {
        return Err(GraphError::NoGaugeFixed(fixed_keyframes));
    }
    let problem = Problem {
        factors: g.factors().iter().map(|(id, f)| (*id, f)).collect(),
        cfg,
    };
    let layout = Layout::new(g.nodes(), &problem.factors);
    let pattern = Pattern::new(g.nodes(), &layout, &problem.factors)?;
    let mut nodes = g.nodes().clone();
    let mut lin = problem.linearize(&nodes, &layout, &pattern)?;
    let initial_cost = lin.cost;
    let mut trace = vec![initial_cost];
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut rejected = 0;

    if let Some(i) = lin.diagonal.iter().position(|d| !(*d > 0.0)) {
        return Err(GraphError::LinearSolveFailed(format!(
            "tangent coordinate {i} is unconstrained by every factor"
        )));
    }

    let termination = 'outer: loop {
        if max_abs(&lin.gradient) < cfg.g_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= cfg.max_iters {
            break Termination::MaxIterations;
        }
        iterations += 1;
        loop {
            if lambda > LAMBDA_MAX {
                break 'outer Termination::NoProgress;
            }
            let Some(step) = solve_damped(&lin, &pattern, lambda) else {
                lambda *= 10.0;
                rejected += 1;
                continue;
            };
            let trial = apply_step(&nodes, &layout, &step);
            match problem.cost(&trial) {
                Ok(c) if c < lin.cost => {
                    let decrease = lin.cost - c;
                    let previous = lin.cost;
                    nodes = trial;
                    lambda *= 0.5;
                    trace.push(c);
                    lin = problem.linearize(&nodes, &layout, &pattern)?;
                    if decrease <= cfg.f_tol * previous {
                        break 'outer Termination::CostTolerance;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    rejected += 1;
                }
            }
        }
    };

    if termination == Termination::NoProgress && iterations == 1 && trace.len() == 1 {
        // A first solve that never succeeds means the damped system itself is
        // singular rather than that we are sitting at a minimum.
        if solve_damped(&lin, &pattern, cfg.lambda_init).is_none() {
            return Err(GraphError::LinearSolveFailed(
                "damped normal equations are not positive definite".into(),
            ));
        }
    }

    g.replace_values(nodes);
    Ok(OptimizeReport {
        iterations,
        initial_cost,
        final_cost: lin.cost,
        converged: matches!(
            termination,
            Termination::GradientTolerance | Termination::CostTolerance
        ),
        termination,
        final_gradient_norm: max_abs(&lin.gradient),
        rejected_steps: rejected,
        cost_trace: trace,
    })
}
