//! Synthetic desk-scale scenarios: an analytic room, a two-lap camera path,
//! drifting odometry, ray-cast depth and labeled loop candidates.
//!
//! All randomness comes from ChaCha streams keyed by `(seed, tag)`, so each
//! noise consumer is independent of the others.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Twist};
use crate::ingest;
use crate::posegraph::{PoseGraph, Trajectory};
use crate::sift::LoopCandidate;
use crate::surfelmap::{DepthFrame, Intrinsics};

/// Depth units per meter in exported scenarios (millimeters).
pub const EXPORT_DEPTH_SCALE: f64 = 1000.0;

const HIT_EPSILON: f64 = 1e-9;
/// False loops claim a relative motion of at most this angle (degrees) ...
const FALSE_LOOP_MAX_ANGLE: f64 = 15.0;
/// ... and this translation (meters).
const FALSE_LOOP_MAX_LENGTH: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Points with `normal · x = offset`; `normal` is unit length.
    Plane { normal: Vector3<f64>, offset: f64 },
    /// Axis-aligned box surface.
    Box { min: Vector3<f64>, max: Vector3<f64> },
}

impl Primitive {
    pub fn plane(normal: Vector3<f64>, offset: f64) -> Self {
        let n = normal.norm();
        Primitive::Plane {
            normal: normal / n,
            offset: offset / n,
        }
    }

    pub fn aabb(min: [f64; 3], max: [f64; 3]) -> Self {
        Primitive::Box {
            min: Vector3::from(min),
            max: Vector3::from(max),
        }
    }

    /// Smallest ray parameter `t > 0` with a surface hit. For a box that
    /// contains the origin this is the exit face.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                (t > HIT_EPSILON).then_some(t)
            }
            Primitive::Box { min, max } => {
                let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[a] - origin[a]) / dir[a];
                    let t2 = (max[a] - origin[a]) / dir[a];
                    near = near.max(t1.min(t2));
                    far = far.min(t1.max(t2));
                }
                if far < near || far <= HIT_EPSILON {
                    None
                } else if near > HIT_EPSILON {
                    Some(near)
                } else {
                    Some(far)
                }
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Plane { normal, offset } => (normal.dot(p) - offset).abs(),
            Primitive::Box { min, max } => {
                let outside = Vector3::from_fn(|a, _| (min[a] - p[a]).max(p[a] - max[a]).max(0.0));
                if outside.norm_squared() > 0.0 {
                    outside.norm()
                } else {
                    (0..3)
                        .map(|a| (p[a] - min[a]).min(max[a] - p[a]))
                        .fold(f64::INFINITY, f64::min)
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
}

impl Scene {
    /// A 6×6×3 m room (z up) with four boxes standing along the walls.
    pub fn default_room() -> Self {
        Scene {
            primitives: vec![
                Primitive::aabb([-3.0, -3.0, 0.0], [3.0, 3.0, 3.0]),
                Primitive::aabb([1.8, -0.6, 0.0], [2.6, 0.4, 1.2]),
                Primitive::aabb([-0.5, 2.0, 0.0], [0.7, 2.8, 0.9]),
                Primitive::aabb([-2.7, -1.2, 0.0], [-1.9, -0.2, 1.6]),
                Primitive::aabb([0.3, -2.8, 0.0], [1.3, -2.1, 2.0]),
            ],
        }
    }

    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.primitives
            .iter()
            .filter_map(|p| p.intersect(origin, dir))
            .min_by(f64::total_cmp)
    }

    /// Distance to the nearest surface; infinite for an empty scene.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Lines `box minx miny minz maxx maxy maxz` or `plane nx ny nz offset`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.primitives {
            let _ = match p {
                Primitive::Plane { normal: n, offset } => writeln!(out, "plane {} {} {} {}", n.x, n.y, n.z, offset),
                Primitive::Box { min, max } => writeln!(
                    out,
                    "box {} {} {} {} {} {}",
                    min.x, min.y, min.z, max.x, max.y, max.z
                ),
            };
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut primitives = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap_or_default();
            let v: Vec<f64> = it
                .map(|t| t.parse::<f64>().map_err(|_| Error::parse(source, i + 1, format!("'{t}' is not a number"))))
                .collect::<Result<_>>()?;
            let p = match (tag, v.len()) {
                ("plane", 4) if Vector3::new(v[0], v[1], v[2]).norm() > 0.0 => {
                    Primitive::plane(Vector3::new(v[0], v[1], v[2]), v[3])
                }
                ("box", 6) if v[0] <= v[3] && v[1] <= v[4] && v[2] <= v[5] => {
                    Primitive::aabb([v[0], v[1], v[2]], [v[3], v[4], v[5]])
                }
                _ => return Err(Error::parse(source, i + 1, "expected 'plane nx ny nz d' or 'box x0 y0 z0 x1 y1 z1'")),
            };
            primitives.push(p);
        }
        Ok(Scene { primitives })
    }
}

/// Ray-cast depth image: planar `z` of the nearest hit per pixel center,
/// 0 where the ray hits nothing. `pose` maps camera to world; the camera
/// looks along +z with x right and y down.
pub fn render_synthetic_depth(scene: &Scene, pose: &Pose, intrinsics: &Intrinsics, index: usize) -> DepthFrame {
    let r = pose.rotation_matrix();
    let origin = pose.translation;
    let mut depth = Vec::with_capacity(intrinsics.width * intrinsics.height);
    for v in 0..intrinsics.height {
        for u in 0..intrinsics.width {
            // ray scaled so its camera-frame z component is 1: t is the depth
            let ray = intrinsics.back_project(u as f64, v as f64, 1.0);
            let z = scene.intersect(&origin, &(r * ray)).unwrap_or(0.0);
            depth.push(z as f32);
        }
    }
    DepthFrame::new(index, *intrinsics, depth)
}

/// Deterministic generator for the stream named `tag` under `seed`.
pub fn rng_stream(seed: u64, tag: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream id stable across platforms and releases
    let stream = tag
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub frames: usize,
    pub laps: usize,
    pub intrinsics: Intrinsics,
    /// Per-step odometry noise, per axis (radians).
    pub odometry_rotation_sigma: f64,
    /// Per-step odometry noise, per axis (meters).
    pub odometry_translation_sigma: f64,
    pub true_loops: usize,
    pub false_loops: usize,
    /// Bound on the translation error of true loop measurements.
    pub loop_translation_noise: f64,
    /// Bound on the rotation error of true loop measurements (radians).
    pub loop_rotation_noise: f64,
    /// Gaussian depth noise σ in meters; 0 disables it.
    pub depth_noise: f64,
    /// Loops join frames more than this many frames apart.
    pub min_loop_gap: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            frames: 200,
            laps: 2,
            intrinsics: Intrinsics {
                width: 320,
                height: 240,
                fx: 250.0,
                fy: 250.0,
                cx: 159.5,
                cy: 119.5,
            },
            odometry_rotation_sigma: 0.0015,
            odometry_translation_sigma: 0.002,
            true_loops: 10,
            false_loops: 5,
            loop_translation_noise: 0.02,
            loop_rotation_noise: 1f64.to_radians(),
            depth_noise: 0.0,
            min_loop_gap: crate::surfelmap::DEFAULT_FRAGMENT_SIZE,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let frames_per_lap = self.frames / self.laps.max(1);
        let checks = [
            (self.frames > 0, "frame count must be positive"),
            (self.laps > 0, "lap count must be positive"),
            (
                [
                    self.odometry_rotation_sigma,
                    self.odometry_translation_sigma,
                    self.loop_translation_noise,
                    self.loop_rotation_noise,
                    self.depth_noise,
                ]
                .iter()
                .all(|s| s.is_finite() && *s >= 0.0),
                "noise levels must be finite and non-negative",
            ),
            (
                self.true_loops == 0 || (self.laps >= 2 && frames_per_lap > self.min_loop_gap + 2),
                "true loops need two laps longer than the minimum loop gap",
            ),
            (
                self.false_loops == 0 || self.frames > self.min_loop_gap + 1,
                "false loops need more frames than the minimum loop gap",
            ),
            (
                self.true_loops <= self.frames.saturating_sub(frames_per_lap + 2),
                "more true loops than revisited frames",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidInput(format!("scenario config: {msg}"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCandidate {
    pub candidate: LoopCandidate,
    pub label: bool,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub scene: Scene,
    pub ground_truth: Trajectory,
    pub noisy: Trajectory,
    pub frames: Vec<DepthFrame>,
    pub candidates: Vec<LabeledCandidate>,
}

/// Camera-to-world pose looking along `forward` with world z up.
pub fn look_along(position: Vector3<f64>, forward: Vector3<f64>) -> Pose {
    let f = forward.normalize();
    let right = f.cross(&Vector3::z()).normalize();
    let down = f.cross(&right);
    let r = Matrix3::from_columns(&[right, down, f]);
    Pose::from_rotation_matrix(&r, position)
}

/// The ground-truth path: `laps` slightly different circles around the room
/// center, heading swinging between outward and tangential.
pub fn camera_path(frames: usize, laps: usize) -> Vec<Pose> {
    (0..frames)
        .map(|i| {
            let phi = TAU * laps as f64 * i as f64 / frames as f64;
            let radius = 1.0 + 0.04 * phi / TAU;
            let height = 1.4 + 0.1 * (2.0 * phi).sin() + 0.02 * phi / TAU;
            let heading = phi + 0.5 * phi.sin();
            let pitch = -0.2 + 0.08 * (3.0 * phi).sin();
            let forward = Vector3::new(pitch.cos() * heading.cos(), pitch.cos() * heading.sin(), pitch.sin());
            look_along(Vector3::new(radius * phi.cos(), radius * phi.sin(), height), forward)
        })
        .collect()
}

/// Composes ground-truth steps with per-step twist noise.
pub fn drift(gt: &[Pose], rotation_sigma: f64, translation_sigma: f64, rng: &mut impl Rng) -> Vec<Pose> {
    let nr = Normal::new(0.0, rotation_sigma).expect("finite sigma");
    let nt = Normal::new(0.0, translation_sigma).expect("finite sigma");
    let mut out = Vec::with_capacity(gt.len());
    for (i, g) in gt.iter().enumerate() {
        if i == 0 {
            out.push(*g);
            continue;
        }
        let w = Vector3::from_fn(|_, _| nr.sample(rng));
        let v = Vector3::from_fn(|_, _| nt.sample(rng));
        let step = gt[i - 1].between(g).compose(&Pose::exp(&Twist::new(w, v)));
        let next = out[i - 1].compose(&step);
        out.push(next);
    }
    out
}

/// A rigid perturbation with rotation angle and translation length as given.
fn perturbation(angle: f64, length: f64, rng: &mut impl Rng) -> Pose {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let dir: [f64; 3] = UnitSphere.sample(rng);
    Pose::new(
        UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle),
        Vector3::from(dir) * length,
    )
}

pub fn generate(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    config.validate()?;
    let scene = Scene::default_room();
    let gt = camera_path(config.frames, config.laps);
    let noisy = if config.odometry_rotation_sigma == 0.0 && config.odometry_translation_sigma == 0.0 {
        gt.clone()
    } else {
        drift(
            &gt,
            config.odometry_rotation_sigma,
            config.odometry_translation_sigma,
            &mut rng_stream(seed, "odometry"),
        )
    };

    let frames: Vec<DepthFrame> = gt
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut f = render_synthetic_depth(&scene, pose, &config.intrinsics, i);
            if config.depth_noise > 0.0 {
                let mut rng = rng_stream(seed, &format!("depth-{i}"));
                let n = Normal::new(0.0, config.depth_noise).expect("finite sigma");
                for z in f.depth.iter_mut().filter(|z| **z > 0.0) {
                    *z = (*z as f64 + n.sample(&mut rng)).max(0.0) as f32;
                }
            }
            f
        })
        .collect();

    let mut rng = rng_stream(seed, "loops");
    let per_lap = config.frames / config.laps;
    let mut pairs: Vec<(usize, usize, bool)> = Vec::new();
    if config.true_loops > 0 {
        let mut starts: Vec<usize> = (0..config.frames - per_lap - 2).collect();
        starts.shuffle(&mut rng);
        for &i in starts.iter().take(config.true_loops) {
            let j = (i + per_lap + rng.random_range(0..=4)).saturating_sub(2).min(config.frames - 1);
            pairs.push((i, j.max(i + config.min_loop_gap + 1), true));
        }
    }
    // false loops join places the camera does not revisit: endpoints are at
    // least a quarter lap apart in path phase
    let mut attempts = 0;
    while pairs.iter().filter(|p| !p.2).count() < config.false_loops {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidInput("scenario config: no room for false loops".into()));
        }
        let i = rng.random_range(0..config.frames);
        let j = rng.random_range(0..config.frames);
        let phase = i.abs_diff(j) % per_lap;
        if i.abs_diff(j) > config.min_loop_gap && phase.min(per_lap - phase) >= per_lap / 4 {
            pairs.push((i.min(j), i.max(j), false));
        }
    }
    pairs.shuffle(&mut rng);

    let (nt, nr) = (config.loop_translation_noise, config.loop_rotation_noise);
    let mut candidates = Vec::with_capacity(pairs.len());
    for (id, (a, b, label)) in pairs.into_iter().enumerate() {
        let truth = gt[a].between(&gt[b]);
        let measurement = if label {
            // half-normal magnitudes (σ = half the bound) truncated at the bound
            let mut magnitude = |bound: f64| bound * (Normal::new(0.0, 0.5).expect("finite").sample(&mut rng) as f64).abs().min(1.0);
            let (angle, length) = (magnitude(nr), magnitude(nt));
            truth.compose(&perturbation(angle, length, &mut rng))
        } else {
            // perceptual aliasing: two different places reported as a small
            // motion, resampled until it clearly contradicts the truth
            let (min_t, min_r) = (5.0 * nt.max(0.02), 5.0 * nr.max(1f64.to_radians()));
            (0..10_000)
                .map(|_| {
                    perturbation(
                        rng.random_range(0.0..=FALSE_LOOP_MAX_ANGLE.to_radians()),
                        rng.random_range(0.0..=FALSE_LOOP_MAX_LENGTH),
                        &mut rng,
                    )
                })
                .find(|m| {
                    let (dt, dr) = m.distance_to(&truth);
                    dt > min_t && dr > min_r
                })
                .ok_or_else(|| Error::InvalidInput(format!("cannot build a false loop between frames {a} and {b}")))?
        };
        candidates.push(LabeledCandidate {
            candidate: LoopCandidate::frame(id, a, b, measurement),
            label,
        });
    }

    Ok(Scenario {
        config: config.clone(),
        seed,
        scene,
        ground_truth: Trajectory::new(gt),
        noisy: Trajectory::new(noisy),
        frames,
        candidates,
    })
}

impl Scenario {
    /// Odometry graph over the noisy trajectory.
    pub fn graph(&self) -> Result<PoseGraph> {
        PoseGraph::from_odometry(&self.noisy)
    }

    pub fn loop_candidates(&self) -> Vec<LoopCandidate> {
        self.candidates.iter().map(|c| c.candidate.clone()).collect()
    }

    pub fn labels(&self) -> HashMap<usize, bool> {
        self.candidates.iter().map(|c| (c.candidate.id, c.label)).collect()
    }

    /// Writes `manifest.txt`, `intrinsics.txt`, `depth/NNNNNN.raw` (mm),
    /// `groundtruth.txt`, `odometry.txt`, `candidates.csv` and `scene.txt`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let depth_dir = dir.join("depth");
        std::fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;
        self.frames
            .par_iter()
            .map(|f| ingest::save_raw_depth(&depth_dir.join(format!("{:06}.raw", f.index)), f, EXPORT_DEPTH_SCALE))
            .collect::<Result<Vec<()>>>()?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("intrinsics.txt", ingest::intrinsics_to_string(&self.config.intrinsics))?;
        put("groundtruth.txt", ingest::tum_to_string(&self.ground_truth))?;
        put("odometry.txt", ingest::tum_to_string(&self.noisy))?;
        let labeled: Vec<_> = self.candidates.iter().map(|c| (c.candidate.clone(), Some(c.label))).collect();
        put("candidates.csv", ingest::candidates_to_string(&labeled))?;
        put("scene.txt", self.scene.to_text())?;
        let manifest = ingest::Manifest {
            root: dir.to_path_buf(),
            depth_dir,
            depth_scale: EXPORT_DEPTH_SCALE,
            intrinsics: dir.join("intrinsics.txt"),
            trajectory: Some(dir.join("odometry.txt")),
            pose_graph: None,
            match_log: None,
            candidates: Some(dir.join("candidates.csv")),
            ground_truth: Some(dir.join("groundtruth.txt")),
            scene: Some(dir.join("scene.txt")),
        };
        put(ingest::MANIFEST_FILE, manifest.to_text())
    }
}
