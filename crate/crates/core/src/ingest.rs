//! Readers and writers for dataset artifacts: TUM trajectories, fragment
//! match logs, raw 16-bit depth, intrinsics, loop candidate CSVs and the
//! `key=value` manifest that ties a dataset together.
//!
//! Node ids are assigned by file order. Every parse error names the file and
//! the line (or entry) it came from.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::posegraph::{g2o, PoseGraph, Trajectory};
use crate::sift::{LoopCandidate, LoopKind};
use crate::surfelmap::{DepthFrame, Intrinsics};
use crate::synth::Scene;

/// Quaternions further than this from unit norm are reported before being
/// renormalized.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;
/// Maximum deviation of `RᵀR` from identity accepted in a match log.
pub const ROTATION_TOLERANCE: f64 = 1e-3;

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn numbers(line: &str, source: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(source, lineno, format!("'{t}' is not a number")))
        })
        .collect()
}

fn is_blank_or_comment(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

// ---------------------------------------------------------------- TUM

/// `timestamp tx ty tz qx qy qz qw` per line, `#` comments allowed.
pub fn parse_tum(text: &str, source: &str) -> Result<Trajectory> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if is_blank_or_comment(line) {
            continue;
        }
        let v = numbers(line, source, i + 1)?;
        if v.len() != 8 {
            return Err(Error::parse(source, i + 1, format!("expected 8 fields, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(source, i + 1, "non-finite value"));
        }
        let norm = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if norm == 0.0 {
            return Err(Error::parse(source, i + 1, "zero quaternion"));
        }
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            log::warn!("{source}:{}: quaternion norm {norm}, renormalizing", i + 1);
        }
        stamps.push(v[0]);
        poses.push(Pose::from_parts(Vector3::new(v[1], v[2], v[3]), v[7], v[4], v[5], v[6]));
    }
    if poses.is_empty() {
        return Err(Error::parse(source, 0, "trajectory has no poses"));
    }
    Trajectory::with_stamps(stamps, poses)
}

pub fn load_tum(path: &Path) -> Result<Trajectory> {
    parse_tum(&read(path)?, &path.display().to_string())
}

pub fn tum_to_string(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for (s, p) in trajectory.stamps().iter().zip(trajectory.poses()) {
        let (t, q) = (&p.translation, p.rotation.quaternion());
        let _ = writeln!(out, "{s} {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w);
    }
    out
}

pub fn save_tum(path: &Path, trajectory: &Trajectory) -> Result<()> {
    write(path, tum_to_string(trajectory))
}

// ---------------------------------------------------------- match log

/// Entries of `id_i id_j total` followed by the four rows of the matrix that
/// maps points of fragment `id_j`'s reference frame into `id_i`'s. Candidate
/// ids are entry indices.
pub fn parse_match_log(text: &str, source: &str) -> Result<Vec<LoopCandidate>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !is_blank_or_comment(l))
        .collect();
    let mut out = Vec::new();
    for (entry, chunk) in lines.chunks(5).enumerate() {
        let (hline, header) = chunk[0];
        if chunk.len() < 5 {
            return Err(Error::parse(
                source,
                hline + 1,
                format!("entry {entry}: truncated matrix block ({} of 4 rows)", chunk.len() - 1),
            ));
        }
        let h: Vec<&str> = header.split_whitespace().collect();
        let ids: Vec<usize> = h.iter().filter_map(|t| t.parse().ok()).collect();
        if h.len() != 3 || ids.len() != 3 {
            return Err(Error::parse(source, hline + 1, format!("entry {entry}: expected header 'id_i id_j total'")));
        }
        let mut m = Matrix4::zeros();
        for (r, &(lineno, row)) in chunk[1..].iter().enumerate() {
            let v = numbers(row, source, lineno + 1)?;
            if v.len() != 4 {
                return Err(Error::parse(source, lineno + 1, format!("entry {entry}: matrix row needs 4 values")));
            }
            for c in 0..4 {
                m[(r, c)] = v[c];
            }
        }
        let pose = rigid_from_matrix(&m).map_err(|msg| Error::parse(source, hline + 1, format!("entry {entry}: {msg}")))?;
        out.push(LoopCandidate::fragment(entry, ids[0], ids[1], pose));
    }
    Ok(out)
}

fn rigid_from_matrix(m: &Matrix4<f64>) -> std::result::Result<Pose, String> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err("non-finite matrix".into());
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    if dev > ROTATION_TOLERANCE || r.determinant() < 0.0 {
        return Err(format!("rotation block is not orthonormal (deviation {dev:.2e})"));
    }
    let bottom = m.fixed_view::<1, 4>(3, 0);
    if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > ROTATION_TOLERANCE {
        return Err("last row is not 0 0 0 1".into());
    }
    Ok(Pose::from_rotation_matrix(&r, Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)])))
}

/// Writes fragment loops in the match-log layout; `total` is the fragment count.
pub fn match_log_to_string(loops: &[LoopCandidate], total: usize) -> String {
    let mut out = String::new();
    for l in loops {
        let _ = writeln!(out, "{} {} {}", l.from, l.to, total);
        let m = l.measurement.to_matrix();
        for r in 0..4 {
            let _ = writeln!(out, "{} {} {} {}", m[(r, 0)], m[(r, 1)], m[(r, 2)], m[(r, 3)]);
        }
    }
    out
}

pub fn load_match_log(path: &Path) -> Result<Vec<LoopCandidate>> {
    parse_match_log(&read(path)?, &path.display().to_string())
}

pub fn save_match_log(path: &Path, loops: &[LoopCandidate], total: usize) -> Result<()> {
    write(path, match_log_to_string(loops, total))
}

// -------------------------------------------------------------- depth

/// Little-endian `u16` per pixel, row-major, `depth_scale` units per meter.
pub fn decode_depth(bytes: &[u8], intrinsics: &Intrinsics, depth_scale: f64, index: usize) -> Result<DepthFrame> {
    let n = intrinsics.width * intrinsics.height;
    if bytes.len() != 2 * n {
        return Err(Error::DimensionMismatch {
            frame: index,
            message: format!("{} bytes, expected {} for {}x{}", bytes.len(), 2 * n, intrinsics.width, intrinsics.height),
        });
    }
    let depth = bytes
        .chunks_exact(2)
        .map(|c| (u16::from_le_bytes([c[0], c[1]]) as f64 / depth_scale) as f32)
        .collect();
    Ok(DepthFrame::new(index, *intrinsics, depth))
}

/// Inverse of [`decode_depth`]; depths are rounded to the nearest unit and
/// saturate at `u16::MAX`.
pub fn encode_depth(frame: &DepthFrame, depth_scale: f64) -> Vec<u8> {
    frame
        .depth
        .iter()
        .flat_map(|&z| {
            let units = (z as f64 * depth_scale).round().clamp(0.0, u16::MAX as f64) as u16;
            units.to_le_bytes()
        })
        .collect()
}

pub fn load_raw_depth(path: &Path, intrinsics: &Intrinsics, depth_scale: f64, index: usize) -> Result<DepthFrame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth(&bytes, intrinsics, depth_scale, index).map_err(|e| match e {
        Error::DimensionMismatch { frame, message } => Error::DimensionMismatch {
            frame,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn save_raw_depth(path: &Path, frame: &DepthFrame, depth_scale: f64) -> Result<()> {
    write(path, encode_depth(frame, depth_scale))
}

/// Loads every `*.raw` file in `dir`, sorted by name; frame `i` is the
/// `i`-th file.
pub fn load_depth_sequence(dir: &Path, intrinsics: &Intrinsics, depth_scale: f64) -> Result<Vec<DepthFrame>> {
    if !(depth_scale.is_finite() && depth_scale > 0.0) {
        return Err(Error::InvalidInput(format!("depth scale must be positive, got {depth_scale}")));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "raw"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no .raw depth files in {}", dir.display())));
    }
    files
        .par_iter()
        .enumerate()
        .map(|(i, p)| load_raw_depth(p, intrinsics, depth_scale, i))
        .collect()
}

// --------------------------------------------------------- intrinsics

/// One line: `width height fx fy cx cy`.
pub fn parse_intrinsics(text: &str, source: &str) -> Result<Intrinsics> {
    let (lineno, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !is_blank_or_comment(l))
        .ok_or_else(|| Error::parse(source, 0, "empty intrinsics file"))?;
    let v = numbers(line, source, lineno + 1)?;
    if v.len() != 6 || v[0].fract() != 0.0 || v[1].fract() != 0.0 || v[0] < 1.0 || v[1] < 1.0 {
        return Err(Error::parse(source, lineno + 1, "expected 'width height fx fy cx cy'"));
    }
    let intrinsics = Intrinsics {
        width: v[0] as usize,
        height: v[1] as usize,
        fx: v[2],
        fy: v[3],
        cx: v[4],
        cy: v[5],
    };
    intrinsics
        .validate()
        .map_err(|e| Error::parse(source, lineno + 1, e.to_string()))?;
    Ok(intrinsics)
}

pub fn intrinsics_to_string(k: &Intrinsics) -> String {
    format!("{} {} {} {} {} {}\n", k.width, k.height, k.fx, k.fy, k.cx, k.cy)
}

// --------------------------------------------------------- candidates

pub const CANDIDATE_HEADER: &str = "id,kind,from,to,tx,ty,tz,qx,qy,qz,qw,label";

/// Candidates with optional `true`/`false` labels. Information is the
/// default loop information.
pub fn parse_candidates(text: &str, source: &str) -> Result<Vec<(LoopCandidate, Option<bool>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if is_blank_or_comment(line) || line.trim() == CANDIDATE_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 11 && f.len() != 12 {
            return Err(Error::parse(source, lineno, format!("expected 11 or 12 fields, got {}", f.len())));
        }
        let int = |k: usize| {
            f[k].parse::<usize>()
                .map_err(|_| Error::parse(source, lineno, format!("field {}: '{}' is not an id", k + 1, f[k])))
        };
        let num = |k: usize| {
            f[k].parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(source, lineno, format!("field {}: '{}' is not a number", k + 1, f[k])))
        };
        let kind: LoopKind = f[1].parse().map_err(|m: String| Error::parse(source, lineno, m))?;
        let t = Vector3::new(num(4)?, num(5)?, num(6)?);
        let (qx, qy, qz, qw) = (num(7)?, num(8)?, num(9)?, num(10)?);
        if (qx * qx + qy * qy + qz * qz + qw * qw).sqrt() < 1e-12 {
            return Err(Error::parse(source, lineno, "zero quaternion"));
        }
        let label = match f.get(11).copied() {
            None | Some("") => None,
            Some("true") | Some("1") => Some(true),
            Some("false") | Some("0") => Some(false),
            Some(other) => return Err(Error::parse(source, lineno, format!("bad label '{other}'"))),
        };
        let pose = Pose::from_parts(t, qw, qx, qy, qz);
        let (id, from, to) = (int(0)?, int(2)?, int(3)?);
        let c = match kind {
            LoopKind::Frame => LoopCandidate::frame(id, from, to, pose),
            LoopKind::Fragment => LoopCandidate::fragment(id, from, to, pose),
        };
        out.push((c, label));
    }
    Ok(out)
}

pub fn candidates_to_string(candidates: &[(LoopCandidate, Option<bool>)]) -> String {
    let mut out = format!("{CANDIDATE_HEADER}\n");
    for (c, label) in candidates {
        let (t, q) = (&c.measurement.translation, c.measurement.rotation.quaternion());
        let label = label.map_or("", |l| if l { "true" } else { "false" });
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.id,
            c.kind.as_str(),
            c.from,
            c.to,
            t.x,
            t.y,
            t.z,
            q.i,
            q.j,
            q.k,
            q.w,
            label
        );
    }
    out
}

pub fn load_candidates(path: &Path) -> Result<Vec<(LoopCandidate, Option<bool>)>> {
    parse_candidates(&read(path)?, &path.display().to_string())
}

// ----------------------------------------------------------- manifest

/// Parsed manifest: paths are resolved relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub depth_dir: PathBuf,
    pub depth_scale: f64,
    pub intrinsics: PathBuf,
    pub trajectory: Option<PathBuf>,
    pub pose_graph: Option<PathBuf>,
    pub match_log: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub scene: Option<PathBuf>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_KEYS: [&str; 9] = [
    "depth_dir",
    "depth_scale",
    "intrinsics",
    "trajectory",
    "pose_graph",
    "match_log",
    "candidates",
    "ground_truth",
    "scene",
];

pub fn parse_manifest(text: &str, root: &Path, source: &str) -> Result<Manifest> {
    let mut kv: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if is_blank_or_comment(line) {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(source, i + 1, "expected key=value"))?;
        let k = k.trim();
        if !MANIFEST_KEYS.contains(&k) {
            return Err(Error::parse(source, i + 1, format!("unknown key '{k}'")));
        }
        if kv.insert(k, (i + 1, v.trim())).is_some() {
            return Err(Error::parse(source, i + 1, format!("duplicate key '{k}'")));
        }
    }
    let path = |k: &str| kv.get(k).map(|(_, v)| root.join(v));
    let required = |k: &str| path(k).ok_or_else(|| Error::parse(source, 0, format!("missing required key '{k}'")));
    let (scale_line, scale) = *kv
        .get("depth_scale")
        .ok_or_else(|| Error::parse(source, 0, "missing required key 'depth_scale'"))?;
    let depth_scale = scale
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s > 0.0)
        .ok_or_else(|| Error::parse(source, scale_line, format!("depth_scale must be a positive number, got '{scale}'")))?;
    let m = Manifest {
        root: root.to_path_buf(),
        depth_dir: required("depth_dir")?,
        depth_scale,
        intrinsics: required("intrinsics")?,
        trajectory: path("trajectory"),
        pose_graph: path("pose_graph"),
        match_log: path("match_log"),
        candidates: path("candidates"),
        ground_truth: path("ground_truth"),
        scene: path("scene"),
    };
    if m.trajectory.is_none() && m.pose_graph.is_none() {
        return Err(Error::parse(source, 0, "manifest needs 'trajectory' or 'pose_graph'"));
    }
    Ok(m)
}

/// Accepts either a manifest file or a directory containing `manifest.txt`.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&read(&file)?, &root, &file.display().to_string())
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let rel = |p: &Path| p.strip_prefix(&self.root).unwrap_or(p).display().to_string();
        let mut out = String::new();
        let _ = writeln!(out, "depth_dir={}", rel(&self.depth_dir));
        let _ = writeln!(out, "depth_scale={}", self.depth_scale);
        let _ = writeln!(out, "intrinsics={}", rel(&self.intrinsics));
        for (k, v) in [
            ("trajectory", &self.trajectory),
            ("pose_graph", &self.pose_graph),
            ("match_log", &self.match_log),
            ("candidates", &self.candidates),
            ("ground_truth", &self.ground_truth),
            ("scene", &self.scene),
        ] {
            if let Some(p) = v {
                let _ = writeln!(out, "{k}={}", rel(p));
            }
        }
        out
    }
}

/// Everything the pipeline needs, loaded and cross-checked.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<DepthFrame>,
    pub graph: PoseGraph,
    pub candidates: Vec<LoopCandidate>,
    /// Labels from the candidates file, where present.
    pub labels: HashMap<usize, bool>,
    pub ground_truth: Option<Trajectory>,
    pub scene: Option<Scene>,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    let intrinsics = parse_intrinsics(&read(&manifest.intrinsics)?, &manifest.intrinsics.display().to_string())?;
    let frames = load_depth_sequence(&manifest.depth_dir, &intrinsics, manifest.depth_scale)?;
    let graph = match (&manifest.pose_graph, &manifest.trajectory) {
        (Some(g), _) => g2o::load(g)?,
        (None, Some(t)) => PoseGraph::from_odometry(&load_tum(t)?)?,
        (None, None) => unreachable!("checked by parse_manifest"),
    };
    if graph.node_count() != frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} poses but {} depth frames",
            graph.node_count(),
            frames.len()
        )));
    }
    let mut candidates = Vec::new();
    let mut labels = HashMap::new();
    if let Some(p) = &manifest.candidates {
        for (c, label) in load_candidates(p)? {
            if let Some(l) = label {
                labels.insert(c.id, l);
            }
            candidates.push(c);
        }
    }
    if let Some(p) = &manifest.match_log {
        // match-log ids continue after the CSV ids
        let offset = candidates.iter().map(|c| c.id + 1).max().unwrap_or(0);
        candidates.extend(load_match_log(p)?.into_iter().map(|mut c| {
            c.id += offset;
            c
        }));
    }
    let ground_truth = manifest.ground_truth.as_deref().map(load_tum).transpose()?;
    if let Some(gt) = &ground_truth {
        if gt.len() != frames.len() {
            return Err(Error::InvalidInput(format!(
                "ground truth has {} poses, expected {}",
                gt.len(),
                frames.len()
            )));
        }
    }
    let scene = match &manifest.scene {
        Some(p) => Some(Scene::parse(&read(p)?, &p.display().to_string())?),
        None => None,
    };
    Ok(Dataset {
        manifest,
        frames,
        graph,
        candidates,
        labels,
        ground_truth,
        scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use proptest::prelude::*;

    #[test]
    fn single_identity_line() {
        let t = parse_tum("0 0 0 0 0 0 0 1\n", "t").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.poses()[0], Pose::identity());
    }

    #[test]
    fn comment_only_trajectory_is_an_error() {
        assert!(parse_tum("# nothing\n\n", "t").is_err());
    }

    #[test]
    fn malformed_tum_line_reports_line_number() {
        let err = parse_tum("0 0 0 0 0 0 0 1\n1 0 0 x 0 0 0 1\n", "traj.txt").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("traj.txt") && msg.contains(":2"), "{msg}");
    }

    #[test]
    fn non_unit_quaternion_is_renormalized() {
        let t = parse_tum("0 1 2 3 0 0 0 2\n", "t").unwrap();
        assert!((t.poses()[0].rotation.quaternion().norm() - 1.0).abs() < 1e-15);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-10.0..10.0f64)).prop_map(|(w, v)| {
            Pose::exp(&Twist::new(Vector3::from(w), Vector3::from(v)))
        })
    }

    proptest! {
        #[test]
        fn tum_round_trip(poses in prop::collection::vec(arb_pose(), 1..8)) {
            let t = Trajectory::new(poses);
            let back = parse_tum(&tum_to_string(&t), "t").unwrap();
            prop_assert_eq!(back.stamps(), t.stamps());
            for (a, b) in back.poses().iter().zip(t.poses()) {
                let (dt, dr) = a.distance_to(b);
                prop_assert!(dt < 1e-9 && dr < 1e-9);
            }
        }

        #[test]
        fn match_log_round_trip(poses in prop::collection::vec(arb_pose(), 1..6)) {
            let loops: Vec<_> = poses.iter().enumerate()
                .map(|(i, p)| LoopCandidate::fragment(i, i, i + 3, *p))
                .collect();
            let back = parse_match_log(&match_log_to_string(&loops, 9), "log").unwrap();
            prop_assert_eq!(back.len(), loops.len());
            for (a, b) in back.iter().zip(&loops) {
                prop_assert_eq!((a.from, a.to), (b.from, b.to));
                let d = (a.measurement.to_matrix() - b.measurement.to_matrix()).abs().max();
                prop_assert!(d < 1e-12, "{}", d);
            }
        }
    }

    #[test]
    fn identity_match_log_entry() {
        let log = "0 1 2\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        let c = parse_match_log(log, "m").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].kind, LoopKind::Fragment);
        assert_eq!((c[0].from, c[0].to), (0, 1));
        assert_eq!(c[0].measurement, Pose::identity());
    }

    #[test]
    fn truncated_match_log_names_entry() {
        let log = "0 1 3\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n1 2 3\n1 0 0 0\n0 1 0 0\n";
        let msg = parse_match_log(log, "m").unwrap_err().to_string();
        assert!(msg.contains("entry 1") && msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn non_rigid_match_log_entry_is_rejected() {
        let log = "0 1 2\n1.1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        let msg = parse_match_log(log, "m").unwrap_err().to_string();
        assert!(msg.contains("entry 0") && msg.contains("orthonormal"), "{msg}");
    }

    fn intrinsics() -> Intrinsics {
        Intrinsics { width: 4, height: 3, fx: 5.0, fy: 5.0, cx: 1.5, cy: 1.0 }
    }

    #[test]
    fn depth_decoding() {
        let zeros = vec![0u8; 24];
        assert_eq!(decode_depth(&zeros, &intrinsics(), 1000.0, 0).unwrap().valid_pixels(), 0);
        let uniform: Vec<u8> = (0..12).flat_map(|_| 5000u16.to_le_bytes()).collect();
        let f = decode_depth(&uniform, &intrinsics(), 5000.0, 0).unwrap();
        assert!(f.depth.iter().all(|&z| z == 1.0));
        assert!(matches!(
            decode_depth(&zeros[..20], &intrinsics(), 1000.0, 3),
            Err(Error::DimensionMismatch { frame: 3, .. })
        ));
    }

    #[test]
    fn raw_depth_round_trip_is_bit_identical() {
        let bytes: Vec<u8> = (0u16..12).flat_map(|v| (v * 977).to_le_bytes()).collect();
        let f = decode_depth(&bytes, &intrinsics(), 1000.0, 0).unwrap();
        assert_eq!(encode_depth(&f, 1000.0), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("0.raw");
        save_raw_depth(&p, &f, 1000.0).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(load_raw_depth(&p, &intrinsics(), 1000.0, 0).unwrap(), f);
    }

    #[test]
    fn intrinsics_round_trip() {
        let k = intrinsics();
        assert_eq!(parse_intrinsics(&intrinsics_to_string(&k), "k").unwrap(), k);
        assert!(parse_intrinsics("4 3 5 5\n", "k").is_err());
    }

    #[test]
    fn candidates_round_trip_with_labels() {
        let c = vec![
            (LoopCandidate::frame(3, 0, 90, Pose::from_translation(0.1, 0.0, 0.0)), Some(true)),
            (LoopCandidate::fragment(4, 1, 5, Pose::identity()), None),
        ];
        let back = parse_candidates(&candidates_to_string(&c), "c").unwrap();
        assert_eq!(back, c);
        assert!(parse_candidates("1,frame,0,5,0,0,0,0,0,0,1,maybe\n", "c").is_err());
        assert!(parse_candidates("1,edge,0,5,0,0,0,0,0,0,1\n", "c").is_err());
    }

    #[test]
    fn manifest_requires_depth_scale() {
        let root = Path::new("/data");
        let err = parse_manifest("depth_dir=d\nintrinsics=k.txt\ntrajectory=t.txt\n", root, "m").unwrap_err();
        assert!(err.to_string().contains("depth_scale"));
        let m = parse_manifest("depth_dir=d\ndepth_scale=5000\nintrinsics=k.txt\ntrajectory=t.txt\n", root, "m").unwrap();
        assert_eq!(m.depth_scale, 5000.0);
        assert_eq!(m.depth_dir, root.join("d"));
        assert_eq!(parse_manifest(&m.to_text(), root, "m").unwrap(), m);
        assert!(parse_manifest("depth_dir=d\ndepth_scale=5000\nintrinsics=k\ntrajectory=t\nfoo=1\n", root, "m").is_err());
    }
}
