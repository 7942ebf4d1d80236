//! Keyframe pose graph and its nonlinear least-squares optimizer.
//!
//! The objective is `Σ r(e)ᵀ·Ω(e)·r(e)` over graph edges plus a caller-chosen
//! set of loop edges, with `r(e) = log(Z⁻¹ · T_from⁻¹ · T_to)`. It is
//! minimized with Levenberg–Marquardt on the right-multiplicative update
//! `T ← T·exp(δ)` using analytic Jacobians; the fixed node absorbs the gauge.

pub mod g2o;
mod skyline;

use nalgebra::{Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{se3_right_jacobian_inverse, Pose, Twist};
use skyline::SkylineMatrix;

pub type NodeId = usize;
pub type Information = Matrix6<f64>;

/// Information scale applied to loop edges whose source provides none.
pub const DEFAULT_LOOP_INFORMATION_SCALE: f64 = 100.0;

pub fn default_loop_information() -> Information {
    Information::identity() * DEFAULT_LOOP_INFORMATION_SCALE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Odometry,
    Covisibility,
    Loop,
}

/// A relative-pose measurement from `from` to `to`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    pub measurement: Pose,
    pub information: Information,
    pub kind: EdgeKind,
}

impl Edge {
    pub fn new(
        from: NodeId,
        to: NodeId,
        measurement: Pose,
        information: Information,
        kind: EdgeKind,
    ) -> Self {
        Self {
            from,
            to,
            measurement,
            information,
            kind,
        }
    }

    pub fn loop_closure(from: NodeId, to: NodeId, measurement: Pose) -> Self {
        Self::new(from, to, measurement, default_loop_information(), EdgeKind::Loop)
    }

    fn validate(&self, node_count: usize) -> Result<()> {
        if self.from >= node_count || self.to >= node_count {
            return Err(Error::InvalidGraph(format!(
                "edge {}→{} references a node outside 0..{node_count}",
                self.from, self.to
            )));
        }
        if self.from == self.to {
            return Err(Error::InvalidGraph(format!(
                "edge {}→{} is a self-loop",
                self.from, self.to
            )));
        }
        if !self.measurement.is_finite() {
            return Err(Error::InvalidGraph(format!(
                "edge {}→{} has a non-finite measurement",
                self.from, self.to
            )));
        }
        check_information(&self.information).map_err(|m| {
            Error::InvalidGraph(format!("edge {}→{}: {m}", self.from, self.to))
        })
    }

    /// `log(Z⁻¹ · T_from⁻¹ · T_to)`.
    pub fn residual(&self, poses: &[Pose]) -> Result<Vector6<f64>> {
        let relative = poses[self.from].between(&poses[self.to]);
        Ok(self
            .measurement
            .inverse()
            .compose(&relative)
            .log()?
            .to_vector())
    }

    fn weighted_cost(&self, poses: &[Pose]) -> Result<f64> {
        let r = self.residual(poses)?;
        Ok((r.transpose() * self.information * r)[(0, 0)])
    }
}

fn check_information(info: &Information) -> std::result::Result<(), String> {
    if info.iter().any(|v| !v.is_finite()) {
        return Err("information matrix is not finite".into());
    }
    let asym = (info - info.transpose()).amax();
    if asym > 1e-9 * info.amax().max(1.0) {
        return Err(format!("information matrix is not symmetric (|Ω−Ωᵀ| = {asym:e})"));
    }
    if info.cholesky().is_none() {
        return Err("information matrix is not positive definite".into());
    }
    Ok(())
}

/// Ordered poses, indexed by node id. Timestamps are carried for export.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<Pose>,
}

impl Trajectory {
    /// Timestamps default to the node index.
    pub fn new(poses: Vec<Pose>) -> Self {
        let stamps = (0..poses.len()).map(|i| i as f64).collect();
        Self { stamps, poses }
    }

    pub fn with_stamps(stamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::InvalidInput(format!(
                "{} timestamps for {} poses",
                stamps.len(),
                poses.len()
            )));
        }
        Ok(Self { stamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn get(&self, id: NodeId) -> Option<&Pose> {
        self.poses.get(id)
    }

    pub fn pose(&self, id: NodeId) -> Result<&Pose> {
        self.poses.get(id).ok_or(Error::MissingPose(id))
    }

    /// Left-multiplies every pose by `g`.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| g.compose(p)).collect(),
        }
    }

    /// Same poses, timestamps copied from `other` when the lengths agree.
    pub fn restamped(mut self, other: &Trajectory) -> Self {
        if other.len() == self.len() {
            self.stamps = other.stamps.clone();
        }
        self
    }
}

/// Keyframe nodes, relative-pose edges and the gauge-fixing node.
#[derive(Clone, Debug)]
pub struct PoseGraph {
    nodes: Trajectory,
    edges: Vec<Edge>,
    fixed: NodeId,
}

impl PoseGraph {
    pub fn new(nodes: Trajectory, edges: Vec<Edge>, fixed: NodeId) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        if fixed >= nodes.len() {
            return Err(Error::InvalidGraph(format!(
                "fixed node {fixed} does not exist"
            )));
        }
        if let Some(i) = nodes.poses().iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidGraph(format!("node {i} has a non-finite pose")));
        }
        for e in &edges {
            e.validate(nodes.len())?;
        }
        Ok(Self {
            nodes,
            edges,
            fixed,
        })
    }

    /// Odometry edges between consecutive poses with identity information;
    /// node 0 fixed.
    pub fn from_odometry(poses: &Trajectory) -> Result<Self> {
        Self::from_odometry_with_information(poses, &Information::identity())
    }

    pub fn from_odometry_with_information(
        poses: &Trajectory,
        information: &Information,
    ) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "odometry graph needs at least 2 poses, got {}",
                poses.len()
            )));
        }
        let edges = poses
            .poses()
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Edge::new(i, i + 1, w[0].between(&w[1]), *information, EdgeKind::Odometry)
            })
            .collect();
        Self::new(poses.clone(), edges, 0)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn initial(&self) -> &Trajectory {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn fixed_node(&self) -> NodeId {
        self.fixed
    }

    /// Same graph with every initial pose left-multiplied by `g`.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            nodes: self.nodes.transformed(g),
            edges: self.edges.clone(),
            fixed: self.fixed,
        }
    }

    /// Objective value at `poses` with the extra `loops`.
    pub fn cost(&self, poses: &[Pose], loops: &[Edge]) -> Result<f64> {
        let mut total = 0.0;
        for e in self.edges.iter().chain(loops) {
            total += e.weighted_cost(poses)?;
        }
        Ok(total)
    }

    fn validate_loops(&self, loops: &[Edge]) -> Result<()> {
        for e in loops {
            if e.kind != EdgeKind::Loop {
                return Err(Error::InvalidGraph(format!(
                    "edge {}→{} passed as a loop has kind {:?}",
                    e.from, e.to, e.kind
                )));
            }
            e.validate(self.node_count())?;
        }
        Ok(())
    }

    /// Nodes not reachable from the fixed node through `edges ∪ loops`.
    fn unreachable_nodes(&self, loops: &[Edge]) -> Vec<NodeId> {
        let n = self.node_count();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for e in self.edges.iter().chain(loops) {
            let (a, b) = (find(&mut parent, e.from), find(&mut parent, e.to));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        let root = find(&mut parent, self.fixed);
        (0..n).filter(|&i| find(&mut parent, i) != root).collect()
    }
}

/// A cost plateau only counts as converged once the step is this small;
/// near a non-zero-residual minimum Gauss–Newton converges linearly and the
/// cost alone stops several nanometres short.
const STEP_TOLERANCE: f64 = 1e-10;
/// Steps below this cannot change the poses meaningfully.
const STEP_RESOLUTION: f64 = 1e-13;

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimized {
    pub trajectory: Trajectory,
    pub converged: bool,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Minimizes the graph objective with `loops` added to the graph's edges.
///
/// When the iteration budget runs out the best iterate is returned with
/// `converged = false`.
pub fn optimize(graph: &PoseGraph, loops: &[Edge], config: &OptimizerConfig) -> Result<Optimized> {
    graph.validate_loops(loops)?;
    let unreachable = graph.unreachable_nodes(loops);
    if !unreachable.is_empty() {
        return Err(Error::Disconnected { nodes: unreachable });
    }

    let mut poses = graph.nodes.poses().to_vec();
    let initial_cost = graph.cost(&poses, loops)?;
    let mut result = Optimized {
        trajectory: graph.nodes.clone(),
        converged: true,
        iterations: 0,
        initial_cost,
        final_cost: initial_cost,
        cost_history: vec![initial_cost],
    };
    let n = graph.node_count();
    if n == 1 || initial_cost == 0.0 {
        return Ok(result);
    }

    let layout = Layout::new(graph, loops);
    let mut cost = initial_cost;
    let mut mu = 1e-8;
    let mut nu = 2.0;
    let mut converged = false;
    let mut system = layout.linearize(graph, loops, &poses)?;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        if system.gradient_max() <= 1e-15 * (1.0 + cost) {
            converged = true;
            break;
        }
        iterations += 1;
        let delta = match system.solve_damped(mu) {
            Ok(d) => d,
            Err(_) => {
                mu *= nu;
                nu *= 2.0;
                if mu > 1e20 {
                    converged = true;
                    break;
                }
                continue;
            }
        };
        let step = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if step < STEP_RESOLUTION {
            converged = true;
            break;
        }
        let predicted = system.predicted_reduction(&delta, mu);
        let candidate = layout.apply(&poses, &delta);
        let new_cost = match graph.cost(&candidate, loops) {
            Ok(c) if c.is_finite() => c,
            _ => f64::INFINITY,
        };
        let actual = cost - new_cost;
        if actual > 0.0 && predicted > 0.0 {
            let rho = actual / predicted;
            poses = candidate;
            let previous = cost;
            cost = new_cost;
            result.cost_history.push(cost);
            mu *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
            nu = 2.0;
            let flat = actual <= config.relative_tolerance * previous && step < STEP_TOLERANCE;
            if flat || cost <= 1e-30 {
                converged = true;
                break;
            }
            system = layout.linearize(graph, loops, &poses)?;
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > 1e20 {
                // no descent left at machine precision
                converged = true;
                break;
            }
        }
    }

    result.trajectory = Trajectory::with_stamps(graph.nodes.stamps().to_vec(), poses)?;
    result.converged = converged;
    result.iterations = iterations;
    result.final_cost = cost;
    Ok(result)
}

/// Maps free nodes to solver blocks and records the skyline profile.
struct Layout {
    slot: Vec<Option<usize>>,
    free: Vec<NodeId>,
    first_column: Vec<usize>,
}

impl Layout {
    fn new(graph: &PoseGraph, loops: &[Edge]) -> Self {
        let n = graph.node_count();
        let mut slot = vec![None; n];
        let mut free = Vec::with_capacity(n - 1);
        for i in (0..n).filter(|&i| i != graph.fixed) {
            slot[i] = Some(free.len());
            free.push(i);
        }
        let mut first_block: Vec<usize> = (0..free.len()).collect();
        for e in graph.edges.iter().chain(loops) {
            if let (Some(a), Some(b)) = (slot[e.from], slot[e.to]) {
                let (lo, hi) = (a.min(b), a.max(b));
                first_block[hi] = first_block[hi].min(lo);
            }
        }
        let first_column = (0..free.len() * 6)
            .map(|row| first_block[row / 6] * 6)
            .collect();
        Self {
            slot,
            free,
            first_column,
        }
    }

    fn linearize(&self, graph: &PoseGraph, loops: &[Edge], poses: &[Pose]) -> Result<NormalEquations> {
        let dim = self.free.len() * 6;
        let mut hessian = SkylineMatrix::zeros(self.first_column.clone());
        let mut rhs = vec![0.0; dim];
        for e in graph.edges.iter().chain(loops) {
            let (ta, tb) = (&poses[e.from], &poses[e.to]);
            let relative = ta.between(tb);
            let r = e.measurement.inverse().compose(&relative).log()?;
            let jinv = se3_right_jacobian_inverse(&r);
            let jb = jinv;
            let ja = -(jinv * relative.inverse().adjoint());
            let r = r.to_vector();
            let omega = &e.information;
            let blocks = [(self.slot[e.from], ja), (self.slot[e.to], jb)];
            for (si, ji) in &blocks {
                let Some(si) = *si else { continue };
                let g = ji.transpose() * omega * r;
                for k in 0..6 {
                    rhs[si * 6 + k] += g[k];
                }
                for (sj, jj) in &blocks {
                    let Some(sj) = *sj else { continue };
                    if sj > si {
                        continue;
                    }
                    let h = ji.transpose() * omega * jj;
                    for a in 0..6 {
                        for b in 0..6 {
                            let (row, col) = (si * 6 + a, sj * 6 + b);
                            if col <= row {
                                hessian.add(row, col, h[(a, b)]);
                            }
                        }
                    }
                }
            }
        }
        Ok(NormalEquations { hessian, rhs })
    }

    fn apply(&self, poses: &[Pose], delta: &[f64]) -> Vec<Pose> {
        let mut out = poses.to_vec();
        for (s, &node) in self.free.iter().enumerate() {
            let d = Vector6::from_column_slice(&delta[s * 6..s * 6 + 6]);
            out[node] = poses[node].compose(&Pose::exp(&Twist::from_vector(&d)));
        }
        out
    }
}

/// `H·δ = −b` with `H = Σ JᵀΩJ`, `b = Σ JᵀΩr`.
struct NormalEquations {
    hessian: SkylineMatrix,
    rhs: Vec<f64>,
}

impl NormalEquations {
    fn gradient_max(&self) -> f64 {
        self.rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn solve_damped(&self, mu: f64) -> Result<Vec<f64>> {
        let mut damped = self.hessian.clone();
        for i in 0..damped.dim() {
            let d = self.hessian.diagonal(i).max(1e-12);
            damped.add_diagonal(i, mu * d);
        }
        let neg: Vec<f64> = self.rhs.iter().map(|v| -v).collect();
        Ok(damped.factorize()?.solve(&neg))
    }

    /// Decrease of the quadratic model `c + 2bᵀδ + δᵀHδ` for the damped step.
    fn predicted_reduction(&self, delta: &[f64], mu: f64) -> f64 {
        let mut b_dot = 0.0;
        let mut damping = 0.0;
        for (i, (&d, &b)) in delta.iter().zip(&self.rhs).enumerate() {
            b_dot += b * d;
            damping += self.hessian.diagonal(i).max(1e-12) * d * d;
        }
        -b_dot + mu * damping
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn yaw(angle: f64, x: f64, y: f64) -> Pose {
        Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle),
            Vector3::new(x, y, 0.0),
        )
    }

    fn square_poses() -> Vec<Pose> {
        vec![
            yaw(0.0, 0.0, 0.0),
            yaw(FRAC_PI_2, 1.0, 0.0),
            yaw(2.0 * FRAC_PI_2, 1.0, 1.0),
            yaw(3.0 * FRAC_PI_2, 0.0, 1.0),
        ]
    }

    fn random_twist(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Twist {
        let mut v = Vector6::zeros();
        for k in 0..6 {
            let s = if k < 3 { rot } else { trans };
            v[k] = rng.random_range(-s..s);
        }
        Twist::from_vector(&v)
    }

    /// Square with perturbed odometry and an exact closing loop 3→0.
    fn perturbed_square() -> (PoseGraph, Vec<Edge>) {
        let gt = square_poses();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut noisy = vec![gt[0]];
        for w in gt.windows(2) {
            let step = w[0]
                .between(&w[1])
                .compose(&Pose::exp(&random_twist(&mut rng, 0.05, 0.08)));
            noisy.push(noisy.last().unwrap().compose(&step));
        }
        let graph = PoseGraph::from_odometry(&Trajectory::new(noisy)).unwrap();
        let closing = Edge::new(3, 0, gt[3].between(&gt[0]), Information::identity(), EdgeKind::Loop);
        (graph, vec![closing])
    }

    /// Cyclic coordinate descent on the raw objective, each coordinate
    /// minimized by a 1-D Newton iteration on finite differences.
    fn coordinate_descent(graph: &PoseGraph, loops: &[Edge]) -> f64 {
        let mut poses = graph.initial().poses().to_vec();
        let f = |p: &[Pose]| graph.cost(p, loops).unwrap();
        let perturbed = |p: &[Pose], node: usize, k: usize, t: f64| {
            let mut v = Vector6::zeros();
            v[k] = t;
            let mut q = p.to_vec();
            q[node] = p[node].compose(&Pose::exp(&Twist::from_vector(&v)));
            q
        };
        let mut cost = f(&poses);
        for _sweep in 0..20000 {
            let before = cost;
            for node in 1..graph.node_count() {
                for k in 0..6 {
                    for _ in 0..3 {
                        let h = 1e-4;
                        let fp = f(&perturbed(&poses, node, k, h));
                        let fm = f(&perturbed(&poses, node, k, -h));
                        let d1 = (fp - fm) / (2.0 * h);
                        let d2 = (fp - 2.0 * cost + fm) / (h * h);
                        if d2 <= 0.0 {
                            break;
                        }
                        let mut t = -d1 / d2;
                        loop {
                            let q = perturbed(&poses, node, k, t);
                            let c = f(&q);
                            if c <= cost {
                                poses = q;
                                cost = c;
                                break;
                            }
                            t *= 0.5;
                            if t.abs() < 1e-16 {
                                break;
                            }
                        }
                    }
                }
            }
            if before - cost < 1e-12 * before.max(1e-300) {
                break;
            }
        }
        cost
    }

    #[test]
    fn consistent_chain_is_a_fixed_point() {
        let poses = vec![yaw(0.0, 0.0, 0.0), yaw(0.3, 1.0, 0.2), yaw(0.9, 1.5, 1.0)];
        let graph = PoseGraph::from_odometry(&Trajectory::new(poses.clone())).unwrap();
        let out = optimize(&graph, &[], &OptimizerConfig::default()).unwrap();
        assert!(out.final_cost < 1e-18);
        assert!(out.converged);
        assert_eq!(out.trajectory.poses(), &poses[..]);
    }

    #[test]
    fn redundant_loop_changes_nothing() {
        let poses = square_poses();
        let graph = PoseGraph::from_odometry(&Trajectory::new(poses.clone())).unwrap();
        let closing = Edge::loop_closure(3, 0, poses[3].between(&poses[0]));
        let out = optimize(&graph, &[closing], &OptimizerConfig::default()).unwrap();
        assert!(out.final_cost < 1e-18);
        for (a, b) in out.trajectory.poses().iter().zip(&poses) {
            let (dt, dr) = a.distance_to(b);
            assert!(dt < 1e-12 && dr < 1e-12);
        }
    }

    #[test]
    fn square_matches_coordinate_descent_oracle() {
        let (graph, loops) = perturbed_square();
        let out = optimize(&graph, &loops, &OptimizerConfig::default()).unwrap();
        let oracle = coordinate_descent(&graph, &loops);
        assert!(out.converged);
        assert!(out.final_cost < out.initial_cost);
        assert!(out.initial_cost > 1e-3);
        assert!(
            (out.final_cost - oracle).abs() < 1e-8,
            "lm {} vs oracle {}",
            out.final_cost,
            oracle
        );
    }

    #[test]
    fn cost_history_is_non_increasing() {
        let (graph, loops) = perturbed_square();
        let out = optimize(&graph, &loops, &OptimizerConfig::default()).unwrap();
        assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*out.cost_history.last().unwrap(), out.final_cost);
    }

    #[test]
    fn fixed_node_is_held() {
        let (graph, loops) = perturbed_square();
        let out = optimize(&graph, &loops, &OptimizerConfig::default()).unwrap();
        assert_eq!(out.trajectory.poses()[0], graph.initial().poses()[0]);
    }

    #[test]
    fn gauge_invariance() {
        let (graph, loops) = perturbed_square();
        let g = Pose::exp(&Twist::new(Vector3::new(0.4, -1.1, 0.7), Vector3::new(3.0, -2.0, 1.0)));
        let a = optimize(&graph, &loops, &OptimizerConfig::default()).unwrap();
        let b = optimize(&graph.transformed(&g), &loops, &OptimizerConfig::default()).unwrap();
        for (pa, pb) in a.trajectory.poses().iter().zip(b.trajectory.poses()) {
            let (dt, dr) = g.compose(pa).distance_to(pb);
            assert!(dt < 1e-6 && dr < 1e-6);
        }
    }

    #[test]
    fn reoptimizing_optimum_is_idempotent() {
        let (graph, loops) = perturbed_square();
        let first = optimize(&graph, &loops, &OptimizerConfig::default()).unwrap();
        let again = PoseGraph::new(first.trajectory.clone(), graph.edges().to_vec(), 0).unwrap();
        let second = optimize(&again, &loops, &OptimizerConfig::default()).unwrap();
        for (a, b) in first.trajectory.poses().iter().zip(second.trajectory.poses()) {
            let (dt, dr) = a.distance_to(b);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
    }

    #[test]
    fn longer_chain_with_loops_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt: Vec<Pose> = (0..60)
            .map(|i| {
                let a = i as f64 * 0.2;
                yaw(a + FRAC_PI_2, 3.0 * a.cos(), 3.0 * a.sin())
            })
            .collect();
        let mut noisy = vec![gt[0]];
        for w in gt.windows(2) {
            let step = w[0].between(&w[1]).compose(&Pose::exp(&random_twist(&mut rng, 0.01, 0.02)));
            noisy.push(noisy.last().unwrap().compose(&step));
        }
        let graph = PoseGraph::from_odometry(&Trajectory::new(noisy)).unwrap();
        let loops: Vec<Edge> = [(2usize, 33usize), (10, 42), (20, 52)]
            .iter()
            .map(|&(a, b)| Edge::loop_closure(a, b, gt[a].between(&gt[b])))
            .collect();
        let out = optimize(&graph, &loops, &OptimizerConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.final_cost < 0.05 * out.initial_cost);
    }

    #[test]
    fn disconnected_graph_is_reported() {
        let poses = Trajectory::new(vec![Pose::identity(); 4]);
        let edges = vec![Edge::new(0, 1, Pose::identity(), Information::identity(), EdgeKind::Odometry),
            Edge::new(2, 3, Pose::identity(), Information::identity(), EdgeKind::Odometry)];
        let graph = PoseGraph::new(poses, edges, 0).unwrap();
        match optimize(&graph, &[], &OptimizerConfig::default()) {
            Err(Error::Disconnected { nodes }) => assert_eq!(nodes, vec![2, 3]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_edges() {
        let poses = Trajectory::new(vec![Pose::identity(); 2]);
        let self_loop = Edge::new(1, 1, Pose::identity(), Information::identity(), EdgeKind::Odometry);
        assert!(PoseGraph::new(poses.clone(), vec![self_loop], 0).is_err());
        let mut info = Information::identity();
        info[(0, 1)] = 0.5;
        let asym = Edge::new(0, 1, Pose::identity(), info, EdgeKind::Odometry);
        assert!(PoseGraph::new(poses.clone(), vec![asym], 0).is_err());
        let indefinite = Edge::new(0, 1, Pose::identity(), -Information::identity(), EdgeKind::Odometry);
        assert!(PoseGraph::new(poses.clone(), vec![indefinite], 0).is_err());
        let graph = PoseGraph::from_odometry(&poses).unwrap();
        let not_loop = Edge::new(0, 1, Pose::identity(), Information::identity(), EdgeKind::Odometry);
        assert!(optimize(&graph, &[not_loop], &OptimizerConfig::default()).is_err());
    }

    #[test]
    fn odometry_graph_construction() {
        let two = Trajectory::new(vec![Pose::identity(); 2]);
        let g = PoseGraph::from_odometry(&two).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(g.edges()[0].measurement, Pose::identity());
        assert_eq!(g.fixed_node(), 0);

        let poses = square_poses();
        let g = PoseGraph::from_odometry(&Trajectory::new(poses.clone())).unwrap();
        assert_eq!(g.edges().len(), 3);
        for (i, e) in g.edges().iter().enumerate() {
            assert_eq!(e.kind, EdgeKind::Odometry);
            assert_eq!(e.measurement, poses[i].between(&poses[i + 1]));
        }
        assert!(PoseGraph::from_odometry(&Trajectory::new(vec![Pose::identity()])).is_err());
    }

    #[test]
    fn odometry_round_trip_through_optimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<Pose> = (0..25)
            .map(|_| Pose::exp(&random_twist(&mut rng, 1.5, 4.0)))
            .collect();
        let traj = Trajectory::new(poses);
        let graph = PoseGraph::from_odometry(&traj).unwrap();
        let out = optimize(&graph, &[], &OptimizerConfig::default()).unwrap();
        for (a, b) in out.trajectory.poses().iter().zip(traj.poses()) {
            let (dt, dr) = a.distance_to(b);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
    }
}
