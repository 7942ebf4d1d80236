//! Loop sifting and majorization.
//!
//! Phase 1 scores every candidate on its own: optimize the pose graph with
//! just that loop, re-place the fragments along the result and score the
//! assembled model against the depth frames. Candidates are ranked best
//! (lowest score) first. Phase 2 walks the ranking once, tentatively adding
//! each loop to the accepted set and keeping it only when the map score
//! strictly improves on the incumbent. There is no acceptance threshold to
//! tune; [`IMPROVEMENT_EPSILON`] only guards against floating-point ties.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::consistency::{ConsistencyScore, MapScorer};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::posegraph::{optimize, Edge, EdgeKind, Information, NodeId, OptimizerConfig, PoseGraph, Trajectory};
use crate::surfelmap::{assemble_model, DepthFrame, Fragment, SurfelMap};

/// Relative margin a tentative score must beat the incumbent by.
pub const IMPROVEMENT_EPSILON: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LoopKind {
    /// Endpoints are frame (node) ids.
    Frame,
    /// Endpoints are fragment ids; the measurement relates the two
    /// fragments' reference frames.
    Fragment,
}

impl LoopKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LoopKind::Frame => "frame",
            LoopKind::Fragment => "fragment",
        }
    }
}

impl std::str::FromStr for LoopKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frame" => Ok(LoopKind::Frame),
            "fragment" => Ok(LoopKind::Fragment),
            other => Err(format!("unknown loop kind '{other}'")),
        }
    }
}

/// A candidate loop closure: `measurement` is the pose of `to` in the frame
/// of `from`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopCandidate {
    pub id: usize,
    pub kind: LoopKind,
    pub from: usize,
    pub to: usize,
    pub measurement: Pose,
    pub information: Information,
}

impl LoopCandidate {
    pub fn frame(id: usize, from: NodeId, to: NodeId, measurement: Pose) -> Self {
        Self {
            id,
            kind: LoopKind::Frame,
            from,
            to,
            measurement,
            information: crate::posegraph::default_loop_information(),
        }
    }

    pub fn fragment(id: usize, from: usize, to: usize, measurement: Pose) -> Self {
        Self {
            kind: LoopKind::Fragment,
            ..Self::frame(id, from, to, measurement)
        }
    }

    fn edge(&self, from: NodeId, to: NodeId, measurement: Pose) -> Edge {
        Edge::new(from, to, measurement, self.information, EdgeKind::Loop)
    }
}

/// Converts a fragment match into frame loops: the reference frame of each
/// fragment is tied to every frame of the other one. All edges point from
/// the `from` side to the `to` side, so with identity intra-fragment motion
/// every emitted measurement equals the fragment measurement.
pub fn expand_fragment_loop(candidate: &LoopCandidate, fragments: &[Fragment]) -> Result<Vec<LoopCandidate>> {
    if candidate.kind != LoopKind::Fragment {
        return Err(Error::InvalidInput(format!("loop {} is not a fragment loop", candidate.id)));
    }
    let find = |id: usize| fragments.iter().find(|f| f.id == id).ok_or(Error::UnknownFragment(id));
    let (a, b) = (find(candidate.from)?, find(candidate.to)?);
    if a.id == b.id {
        return Err(Error::InvalidInput(format!("loop {} joins fragment {} to itself", candidate.id, a.id)));
    }
    let m = candidate.measurement;
    let mut out = Vec::with_capacity(a.frame_poses.len() + b.frame_poses.len());
    for (j, local) in b.frames().zip(&b.frame_poses) {
        out.push(LoopCandidate {
            kind: LoopKind::Frame,
            from: a.reference,
            to: j,
            measurement: m.compose(local),
            ..candidate.clone()
        });
    }
    for (i, local) in a.frames().zip(&a.frame_poses) {
        out.push(LoopCandidate {
            kind: LoopKind::Frame,
            from: i,
            to: b.reference,
            measurement: local.inverse().compose(&m),
            ..candidate.clone()
        });
    }
    Ok(out)
}

/// One candidate after expansion: accepted or rejected as a unit.
#[derive(Clone, Debug)]
pub struct LoopGroup {
    pub id: usize,
    pub edges: Vec<Edge>,
}

/// Validates candidates and expands fragment loops into frame-loop groups.
/// Frame loops must span more than `k` frames.
pub fn build_groups(
    candidates: &[LoopCandidate],
    fragments: &[Fragment],
    node_count: usize,
    k: usize,
) -> Result<Vec<LoopGroup>> {
    let mut seen = std::collections::HashSet::new();
    candidates
        .iter()
        .map(|c| {
            if !seen.insert(c.id) {
                return Err(Error::InvalidInput(format!("duplicate loop id {}", c.id)));
            }
            let frame_loops = match c.kind {
                LoopKind::Frame => {
                    if c.from >= node_count || c.to >= node_count {
                        return Err(Error::InvalidInput(format!(
                            "loop {} references frame outside 0..{node_count}",
                            c.id
                        )));
                    }
                    if c.from.abs_diff(c.to) <= k {
                        return Err(Error::InvalidInput(format!(
                            "loop {} joins frames {} and {}, not more than k = {k} apart",
                            c.id, c.from, c.to
                        )));
                    }
                    vec![c.clone()]
                }
                LoopKind::Fragment => expand_fragment_loop(c, fragments)?,
            };
            Ok(LoopGroup {
                id: c.id,
                edges: frame_loops
                    .iter()
                    .map(|l| l.edge(l.from, l.to, l.measurement))
                    .collect(),
            })
        })
        .collect()
}

/// Everything a map evaluation needs; shared read-only across workers.
pub struct SiftContext<'a> {
    pub graph: &'a PoseGraph,
    pub frames: &'a [DepthFrame],
    pub fragments: &'a [Fragment],
    pub scorer: &'a dyn MapScorer,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub trajectory: Trajectory,
    pub score: ConsistencyScore,
    pub converged: bool,
}

impl SiftContext<'_> {
    /// optimize → assemble → score for one loop set.
    pub fn evaluate(&self, loops: &[Edge]) -> Result<Evaluation> {
        let optimized = optimize(self.graph, loops, &self.optimizer)?;
        let model = assemble_model(self.fragments, &optimized.trajectory)?;
        let score = self.scorer.score(&model, self.frames, &optimized.trajectory)?;
        Ok(Evaluation {
            trajectory: optimized.trajectory,
            score,
            converged: optimized.converged,
        })
    }

    pub fn model(&self, trajectory: &Trajectory) -> Result<SurfelMap> {
        assemble_model(self.fragments, trajectory)
    }

    fn evaluate_groups<'g>(&self, groups: impl IntoIterator<Item = &'g LoopGroup>) -> Result<Evaluation> {
        let edges: Vec<Edge> = groups.into_iter().flat_map(|g| g.edges.iter().cloned()).collect();
        self.evaluate(&edges)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedLoop {
    pub id: usize,
    /// Map score with only this loop added; infinite when evaluation failed.
    pub score: f64,
    /// Why the loop was demoted to the end of the ranking.
    pub failure: Option<String>,
}

/// Phase 1: evaluates each group alone on the initial graph and sorts by
/// score (ascending), ties by id. Failed or non-converged evaluations go
/// last instead of aborting the batch.
pub fn rank_loops(ctx: &SiftContext<'_>, groups: &[LoopGroup]) -> Vec<RankedLoop> {
    let mut ranked: Vec<RankedLoop> = groups
        .par_iter()
        .map(|g| match ctx.evaluate_groups([g]) {
            Ok(e) if e.converged => RankedLoop {
                id: g.id,
                score: e.score.value,
                failure: None,
            },
            Ok(e) => RankedLoop {
                id: g.id,
                score: e.score.value,
                failure: Some("optimizer did not converge".into()),
            },
            Err(err) => RankedLoop {
                id: g.id,
                score: f64::INFINITY,
                failure: Some(err.to_string()),
            },
        })
        .collect();
    ranked.sort_by(|a, b| {
        (a.failure.is_some(), a.score, a.id)
            .partial_cmp(&(b.failure.is_some(), b.score, b.id))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    ranked
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub loop_id: usize,
    /// Zero-based position in the ranking.
    pub rank: usize,
    pub single_loop_score: f64,
    /// Incumbent score when this loop was tried.
    pub score_before: f64,
    /// Score with the tentative set, absent when evaluation failed.
    pub tentative_score: Option<f64>,
    pub accepted: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SiftResult {
    /// Accepted loop ids in acceptance order.
    pub accepted: Vec<usize>,
    pub ranking: Vec<RankedLoop>,
    pub baseline_score: f64,
    pub final_score: f64,
    pub trace: Vec<TraceEntry>,
    pub baseline: Evaluation,
    /// Evaluation with every accepted loop.
    pub result: Evaluation,
}

fn improves(candidate: f64, incumbent: f64) -> bool {
    candidate < incumbent - IMPROVEMENT_EPSILON * incumbent.abs()
}

/// Phase 2: tries ranked loops in order against the incumbent best score.
pub fn greedy_accept(
    ctx: &SiftContext<'_>,
    ranked: &[RankedLoop],
    groups: &[LoopGroup],
    baseline: Evaluation,
) -> Result<SiftResult> {
    let by_id: std::collections::HashMap<usize, &LoopGroup> = groups.iter().map(|g| (g.id, g)).collect();
    let mut accepted: Vec<&LoopGroup> = Vec::new();
    let mut incumbent = baseline.clone();
    let mut trace = Vec::with_capacity(ranked.len());
    for (rank, r) in ranked.iter().enumerate() {
        let group = *by_id
            .get(&r.id)
            .ok_or_else(|| Error::InvalidInput(format!("ranked loop {} has no candidate", r.id)))?;
        let mut entry = TraceEntry {
            loop_id: r.id,
            rank,
            single_loop_score: r.score,
            score_before: incumbent.score.value,
            tentative_score: None,
            accepted: false,
            reason: None,
        };
        match ctx.evaluate_groups(accepted.iter().copied().chain([group])) {
            Ok(e) => {
                entry.tentative_score = Some(e.score.value);
                if !e.converged {
                    entry.reason = Some("optimizer did not converge".into());
                } else if improves(e.score.value, incumbent.score.value) {
                    entry.accepted = true;
                    accepted.push(group);
                    incumbent = e;
                } else {
                    entry.reason = Some("no improvement".into());
                }
            }
            Err(err) => entry.reason = Some(err.to_string()),
        }
        trace.push(entry);
    }
    Ok(SiftResult {
        accepted: accepted.iter().map(|g| g.id).collect(),
        ranking: ranked.to_vec(),
        baseline_score: baseline.score.value,
        final_score: incumbent.score.value,
        trace,
        baseline,
        result: incumbent,
    })
}

/// Both phases: baseline score without loops, ranking, greedy acceptance.
pub fn sift(ctx: &SiftContext<'_>, candidates: &[LoopCandidate], k: usize) -> Result<SiftResult> {
    let groups = build_groups(candidates, ctx.fragments, ctx.graph.node_count(), k)?;
    let baseline = ctx.evaluate(&[])?;
    let ranked = rank_loops(ctx, &groups);
    greedy_accept(ctx, &ranked, &groups, baseline)
}

impl SiftResult {
    /// `loop_id,rank,single_loop_score,tentative_score,accepted`, one row per
    /// candidate in ranking order.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("loop_id,rank,single_loop_score,tentative_score,accepted\n");
        for t in &self.trace {
            let tentative = t.tentative_score.map_or_else(|| "nan".to_string(), |v| v.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                t.loop_id, t.rank, t.single_loop_score, tentative, t.accepted
            );
        }
        out
    }

    pub fn ranking_csv(&self) -> String {
        let mut out = String::from("rank,loop_id,score,status\n");
        for (i, r) in self.ranking.iter().enumerate() {
            let status = r.failure.as_deref().unwrap_or("ok").replace(',', ";");
            let _ = writeln!(out, "{},{},{},{}", i, r.id, r.score, status);
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "candidates      {}", self.ranking.len());
        let _ = writeln!(out, "accepted        {}", self.accepted.len());
        let _ = writeln!(out, "baseline score  {:.6}", self.baseline_score);
        let _ = writeln!(out, "final score     {:.6}", self.final_score);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>5} {:>8} {:>14} {:>14} {:>14}  decision", "rank", "loop", "single", "before", "tentative");
        for t in &self.trace {
            let tentative = t.tentative_score.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            let decision = if t.accepted {
                "accept".to_string()
            } else {
                format!("reject ({})", t.reason.as_deref().unwrap_or("-"))
            };
            let _ = writeln!(
                out,
                "{:>5} {:>8} {:>14.6} {:>14.6} {:>14}  {}",
                t.rank, t.loop_id, t.single_loop_score, t.score_before, tentative, decision
            );
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write("trace.csv", self.trace_csv())?;
        write("ranking.csv", self.ranking_csv())?;
        write("report.txt", self.report())?;
        let accepted: String = self.accepted.iter().map(|id| format!("{id}\n")).collect();
        write("accepted.txt", accepted)
    }
}
