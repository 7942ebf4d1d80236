//! Textual g2o pose-graph files (`VERTEX_SE3:QUAT`, `EDGE_SE3:QUAT`, `FIX`).
//!
//! g2o orders the 6×6 information matrix translation-first; internally the
//! tangent space is rotation-first, so blocks are permuted on the way in and
//! out. Edges between consecutive ids are read as odometry, all others as
//! covisibility.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::{Edge, EdgeKind, Information, PoseGraph, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Our index for g2o's information row/column `i`.
fn permute(i: usize) -> usize {
    (i + 3) % 6
}

pub fn parse(text: &str, source: &str) -> Result<PoseGraph> {
    let mut vertices = BTreeMap::new();
    let mut edges = Vec::new();
    let mut fixed = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let tag = fields.next().unwrap_or_default();
        let rest: Vec<&str> = fields.collect();
        let num = |i: usize| -> Result<f64> {
            rest.get(i)
                .ok_or_else(|| Error::parse(source, line_no, format!("{tag}: missing field {}", i + 1)))?
                .parse::<f64>()
                .map_err(|e| Error::parse(source, line_no, format!("{tag}: field {}: {e}", i + 1)))
        };
        let id = |i: usize| -> Result<usize> {
            rest.get(i)
                .ok_or_else(|| Error::parse(source, line_no, format!("{tag}: missing id")))?
                .parse::<usize>()
                .map_err(|e| Error::parse(source, line_no, format!("{tag}: id: {e}")))
        };
        let pose_at = |offset: usize| -> Result<Pose> {
            let t = Vector3::new(num(offset)?, num(offset + 1)?, num(offset + 2)?);
            let (qx, qy, qz, qw) = (num(offset + 3)?, num(offset + 4)?, num(offset + 5)?, num(offset + 6)?);
            let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::parse(source, line_no, "degenerate quaternion"));
            }
            Ok(Pose::from_parts(t, qw, qx, qy, qz))
        };
        match tag {
            "VERTEX_SE3:QUAT" => {
                if rest.len() != 8 {
                    return Err(Error::parse(source, line_no, format!("{tag}: expected 8 fields, got {}", rest.len())));
                }
                let v = id(0)?;
                if vertices.insert(v, pose_at(1)?).is_some() {
                    return Err(Error::parse(source, line_no, format!("duplicate vertex {v}")));
                }
            }
            "EDGE_SE3:QUAT" => {
                if rest.len() != 30 {
                    return Err(Error::parse(source, line_no, format!("{tag}: expected 30 fields, got {}", rest.len())));
                }
                let (from, to) = (id(0)?, id(1)?);
                let measurement = pose_at(2)?;
                let mut info = Information::zeros();
                let mut k = 9;
                for i in 0..6 {
                    for j in i..6 {
                        let v = num(k)?;
                        k += 1;
                        let (a, b) = (permute(i), permute(j));
                        info[(a, b)] = v;
                        info[(b, a)] = v;
                    }
                }
                let kind = if from.abs_diff(to) == 1 {
                    EdgeKind::Odometry
                } else {
                    EdgeKind::Covisibility
                };
                edges.push((line_no, Edge::new(from, to, measurement, info, kind)));
            }
            "FIX" => {
                fixed = Some(id(0)?);
            }
            _ => {
                return Err(Error::parse(source, line_no, format!("unsupported record {tag}")));
            }
        }
    }
    if vertices.is_empty() {
        return Err(Error::parse(source, 0, "no VERTEX_SE3:QUAT records"));
    }
    for (expected, (&got, _)) in vertices.iter().enumerate() {
        if expected != got {
            return Err(Error::parse(
                source,
                0,
                format!("vertex ids must be contiguous from 0; vertex {expected} missing"),
            ));
        }
    }
    let n = vertices.len();
    for (line_no, e) in &edges {
        if e.from >= n || e.to >= n {
            return Err(Error::parse(
                source,
                *line_no,
                format!("edge {}→{} references an unknown vertex", e.from, e.to),
            ));
        }
    }
    let nodes = Trajectory::new(vertices.into_values().collect());
    PoseGraph::new(nodes, edges.into_iter().map(|(_, e)| e).collect(), fixed.unwrap_or(0))
}

pub fn load(path: &Path) -> Result<PoseGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

fn push_pose(out: &mut String, p: &Pose) {
    let q = p.rotation.quaternion();
    let t = &p.translation;
    let _ = write!(out, " {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w);
}

/// Serializes `graph` plus `extra` edges (typically accepted loops).
pub fn to_string(graph: &PoseGraph, extra: &[Edge]) -> String {
    let mut out = String::new();
    for (i, p) in graph.initial().poses().iter().enumerate() {
        out.push_str(&format!("VERTEX_SE3:QUAT {i}"));
        push_pose(&mut out, p);
        out.push('\n');
    }
    for e in graph.edges().iter().chain(extra) {
        out.push_str(&format!("EDGE_SE3:QUAT {} {}", e.from, e.to));
        push_pose(&mut out, &e.measurement);
        for i in 0..6 {
            for j in i..6 {
                let _ = write!(out, " {}", e.information[(permute(i), permute(j))]);
            }
        }
        out.push('\n');
    }
    out.push_str(&format!("FIX {}\n", graph.fixed_node()));
    out
}

pub fn save(path: &Path, graph: &PoseGraph, extra: &[Edge]) -> Result<()> {
    std::fs::write(path, to_string(graph, extra)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use nalgebra::Matrix6;

    fn sample_graph() -> PoseGraph {
        let poses: Vec<Pose> = (0..5)
            .map(|i| {
                let f = i as f64;
                Pose::exp(&Twist::new(
                    Vector3::new(0.1 * f, -0.05 * f, 0.3),
                    Vector3::new(f, 0.5 * f, -0.2),
                ))
            })
            .collect();
        let mut graph = PoseGraph::from_odometry(&Trajectory::new(poses.clone())).unwrap();
        let mut info = Matrix6::identity() * 3.0;
        info[(0, 4)] = 0.25;
        info[(4, 0)] = 0.25;
        info[(1, 5)] = -0.125;
        info[(5, 1)] = -0.125;
        let mut edges = graph.edges().to_vec();
        edges.push(Edge::new(0, 3, poses[0].between(&poses[3]), info, EdgeKind::Covisibility));
        graph = PoseGraph::new(graph.initial().clone(), edges, 2).unwrap();
        graph
    }

    #[test]
    fn round_trip_is_exact() {
        let graph = sample_graph();
        let text = to_string(&graph, &[]);
        let back = parse(&text, "mem").unwrap();
        assert_eq!(back.fixed_node(), 2);
        assert_eq!(back.node_count(), graph.node_count());
        for (a, b) in back.initial().poses().iter().zip(graph.initial().poses()) {
            let (dt, dr) = a.distance_to(b);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
        assert_eq!(back.edges().len(), graph.edges().len());
        for (a, b) in back.edges().iter().zip(graph.edges()) {
            assert_eq!((a.from, a.to, a.kind), (b.from, b.to, b.kind));
            assert_eq!(a.information, b.information);
            let (dt, dr) = a.measurement.distance_to(&b.measurement);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
    }

    #[test]
    fn information_uses_translation_first_layout() {
        let text = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 1 0 0 0 0 0 1\n\
                    EDGE_SE3:QUAT 0 1 1 0 0 0 0 0 1 1 0 0 0 0 0 2 0 0 0 0 3 0 0 0 4 0 0 5 0 6\n";
        let g = parse(text, "mem").unwrap();
        let info = &g.edges()[0].information;
        // g2o diagonal (1..6) over (tx ty tz rx ry rz)
        assert_eq!(info[(3, 3)], 1.0);
        assert_eq!(info[(5, 5)], 3.0);
        assert_eq!(info[(0, 0)], 4.0);
        assert_eq!(info[(2, 2)], 6.0);
    }

    #[test]
    fn malformed_lines_are_located() {
        let text = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 0 0 x 0 0 0 1\n";
        match parse(text, "g.g2o") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "g.g2o");
            }
            other => panic!("unexpected {other:?}"),
        }
        let gap = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 2 0 0 0 0 0 0 1\n";
        assert!(parse(gap, "g").is_err());
        let short_edge = "VERTEX_SE3:QUAT 0 0 0 0 0 0 0 1\nVERTEX_SE3:QUAT 1 0 0 0 0 0 0 1\nEDGE_SE3:QUAT 0 1 0 0 0 0 0 0 1\n";
        assert!(matches!(parse(short_edge, "g"), Err(Error::Parse { line: 3, .. })));
    }
}
