//! Evaluation: loop precision/recall, ranking PR curves, trajectory RMSE and
//! surface mean distance.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::posegraph::{NodeId, Trajectory};
use crate::sift::{LoopCandidate, LoopKind};
use crate::surfelmap::SurfelMap;
use crate::synth::Scene;

/// A candidate is true when its measurement is within this translation (m)
/// of the ground-truth relative pose ...
pub const TRUE_LOOP_TRANSLATION: f64 = 0.1;
/// ... and within this rotation (degrees).
pub const TRUE_LOOP_ROTATION_DEG: f64 = 5.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoopLabels {
    labels: HashMap<usize, bool>,
}

impl LoopLabels {
    pub fn new(labels: HashMap<usize, bool>) -> Self {
        Self { labels }
    }

    /// Labels candidates against ground truth. Fragment loops are compared
    /// between the fragments' reference frames, given by `reference`.
    pub fn derive(
        candidates: &[LoopCandidate],
        gt: &Trajectory,
        reference: impl Fn(usize) -> Option<NodeId>,
    ) -> Result<Self> {
        let mut labels = HashMap::with_capacity(candidates.len());
        for c in candidates {
            let (a, b) = match c.kind {
                LoopKind::Frame => (c.from, c.to),
                LoopKind::Fragment => (
                    reference(c.from).ok_or(Error::UnknownFragment(c.from))?,
                    reference(c.to).ok_or(Error::UnknownFragment(c.to))?,
                ),
            };
            let truth = gt.pose(a)?.between(gt.pose(b)?);
            labels.insert(c.id, is_true_loop(&c.measurement, &truth));
        }
        Ok(Self { labels })
    }

    pub fn get(&self, id: usize) -> Result<bool> {
        self.labels.get(&id).copied().ok_or(Error::UnlabeledLoop(id))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn true_count(&self) -> usize {
        self.labels.values().filter(|l| **l).count()
    }
}

pub fn is_true_loop(measurement: &Pose, truth: &Pose) -> bool {
    let (dt, dr) = measurement.distance_to(truth);
    dt < TRUE_LOOP_TRANSLATION && dr < TRUE_LOOP_ROTATION_DEG.to_radians()
}

/// (precision %, recall %) of `accepted` over the labeled universe. An empty
/// accepted set has precision 100; with no true loops at all recall is 100.
pub fn precision_recall(accepted: &[usize], labels: &LoopLabels) -> Result<(f64, f64)> {
    let unique: HashSet<usize> = accepted.iter().copied().collect();
    let mut tp = 0usize;
    for &id in &unique {
        if labels.get(id)? {
            tp += 1;
        }
    }
    let precision = if unique.is_empty() { 100.0 } else { 100.0 * tp as f64 / unique.len() as f64 };
    let total = labels.true_count();
    let recall = if total == 0 { 100.0 } else { 100.0 * tp as f64 / total as f64 };
    Ok((precision, recall))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// The loop whose inclusion produced this point.
    pub loop_id: usize,
    pub accepted: bool,
}

/// One point per ranking prefix; recall is relative to the true loops in
/// the ranking.
pub fn pr_curve(ranking: &[usize], labels: &LoopLabels, accepted: &[usize]) -> Result<Vec<PrPoint>> {
    let mut total = 0;
    for &id in ranking {
        total += labels.get(id)? as usize;
    }
    let accepted: HashSet<usize> = accepted.iter().copied().collect();
    let mut tp = 0;
    ranking
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            tp += labels.get(id)? as usize;
            Ok(PrPoint {
                recall: if total == 0 { 100.0 } else { 100.0 * tp as f64 / total as f64 },
                precision: 100.0 * tp as f64 / (i + 1) as f64,
                loop_id: id,
                accepted: accepted.contains(&id),
            })
        })
        .collect()
}

pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("recall,precision,loop_id,accepted\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.recall, p.precision, p.loop_id, p.accepted as u8);
    }
    out
}

/// Least-squares rigid transform `g` minimizing Σ|g·src − dst|².
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose> {
    if src.len() != dst.len() || src.is_empty() {
        return Err(Error::InvalidInput("alignment needs equally many, nonzero points".into()));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let cov: Matrix3<f64> = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - md) * (s - ms).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Numeric("alignment SVD failed".into())),
    };
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    Ok(Pose::from_rotation_matrix(&r, md - r * ms))
}

/// Translational RMSE over matching poses, after optional rigid alignment
/// of `estimate` onto `gt`.
pub fn trajectory_rmse(estimate: &Trajectory, gt: &Trajectory, align: bool) -> Result<f64> {
    if estimate.len() != gt.len() || estimate.is_empty() {
        return Err(Error::InvalidInput(format!(
            "trajectory sizes differ or are empty ({} vs {})",
            estimate.len(),
            gt.len()
        )));
    }
    let est: Vec<Vector3<f64>> = estimate.poses().iter().map(|p| p.translation).collect();
    let reference: Vec<Vector3<f64>> = gt.poses().iter().map(|p| p.translation).collect();
    let g = if align { align_rigid(&est, &reference)? } else { Pose::identity() };
    let sum: f64 = est
        .iter()
        .zip(&reference)
        .map(|(e, r)| (g.transform_point(e) - r).norm_squared())
        .sum();
    Ok((sum / est.len() as f64).sqrt())
}

/// Static 3-d tree for nearest-neighbor queries.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// `nodes[i]` is the index into `points`; the implicit tree is the
    /// median split of `nodes[lo..hi]` at `(lo + hi) / 2`.
    nodes: Vec<usize>,
}

impl KdTree {
    pub fn build(points: Vec<Vector3<f64>>) -> Self {
        let mut nodes: Vec<usize> = (0..points.len()).collect();
        Self::split(&points, &mut nodes, 0);
        Self { points, nodes }
    }

    fn split(points: &[Vector3<f64>], nodes: &mut [usize], depth: usize) {
        if nodes.len() <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = nodes.len() / 2;
        nodes.select_nth_unstable_by(mid, |a, b| points[*a][axis].total_cmp(&points[*b][axis]));
        let (left, right) = nodes.split_at_mut(mid);
        Self::split(points, left, depth + 1);
        Self::split(points, &mut right[1..], depth + 1);
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_squared(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.nodes.len(), 0, &mut best);
        best
    }

    fn search(&self, q: &Vector3<f64>, lo: usize, hi: usize, depth: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[self.nodes[mid]];
        *best = best.min((p - q).norm_squared());
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

pub enum SurfaceReference<'a> {
    Scene(&'a Scene),
    Points(&'a KdTree),
}

/// Mean distance from model surfel positions to the reference surface.
pub fn surface_mean_distance(model: &SurfelMap, reference: &SurfaceReference<'_>) -> Result<f64> {
    if model.is_empty() {
        return Err(Error::InvalidInput("surface mean distance of an empty model".into()));
    }
    let distance = |p: &Vector3<f64>| match reference {
        SurfaceReference::Scene(s) => s.distance(p),
        SurfaceReference::Points(t) => t.nearest_squared(p).sqrt(),
    };
    if let SurfaceReference::Points(t) = reference {
        if t.is_empty() {
            return Err(Error::InvalidInput("empty reference point set".into()));
        }
    }
    let sum: f64 = model.surfels.iter().map(|s| distance(&s.position)).sum();
    Ok(sum / model.len() as f64)
}

/// One column of the metrics table; absent values print as `-`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub trajectory_rmse: Option<f64>,
    pub smd: Option<f64>,
    pub consistency_score: f64,
    pub loops_before: usize,
    pub loops_after: usize,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.digits$}"))
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let rows = [
            ("Traj. RMSE (m)", fmt_opt(self.trajectory_rmse, 4)),
            ("SMD (m)", fmt_opt(self.smd, 4)),
            ("Consistency score", format!("{:.4}", self.consistency_score)),
            ("Precision (%)", fmt_opt(self.precision, 1)),
            ("Recall (%)", fmt_opt(self.recall, 1)),
            ("Loops", format!("before {} / after {}", self.loops_before, self.loops_after)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<18} {v:>24}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        format!(
            "trajectory_rmse,smd,consistency_score,precision,recall,loops_before,loops_after\n{},{},{},{},{},{},{}\n",
            opt(self.trajectory_rmse),
            opt(self.smd),
            self.consistency_score,
            opt(self.precision),
            opt(self.recall),
            self.loops_before,
            self.loops_after
        )
    }
}
