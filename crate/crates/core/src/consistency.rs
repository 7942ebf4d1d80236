//! Ground-truth-free map scoring: how badly a fused model disagrees with the
//! depth frames it was built from. Lower is better; zero means every covered
//! pixel agrees with its observation.
//!
//! For each frame the model is splatted into a z-buffer from the frame's
//! pose. Every valid observed pixel with rendered depth `z_r > 0` costs
//! `min(((z_o − z_r)/σ(z_o))², λ)` with `σ(z) = 0.0012 + 0.0019·(z − 0.4)²`
//! and `λ = 16`; uncovered pixels cost nothing. A frame's value is the mean
//! over its valid observed pixels, and the map score sums the frames.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::posegraph::Trajectory;
use crate::surfelmap::{DepthFrame, Intrinsics, SurfelMap};

pub const TRUNCATION: f64 = 16.0;

/// Axial depth noise of a structured-light sensor, meters.
pub fn depth_sigma(z: f64) -> f64 {
    0.0012 + 0.0019 * (z - 0.4) * (z - 0.4)
}

pub fn pixel_penalty(observed: f64, rendered: f64, truncation: f64) -> f64 {
    let e = (observed - rendered) / depth_sigma(observed);
    (e * e).min(truncation)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub value: f64,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyScore {
    pub value: f64,
    pub per_frame: Vec<FrameScore>,
    pub pixels_evaluated: usize,
}

impl ConsistencyScore {
    fn from_frames(per_frame: Vec<FrameScore>) -> Self {
        let value = per_frame.iter().map(|f| f.value).sum();
        let pixels_evaluated = per_frame.iter().map(|f| f.pixels).sum();
        Self {
            value,
            per_frame,
            pixels_evaluated,
        }
    }

    /// `frame_index,score,pixels_evaluated` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,score,pixels_evaluated\n");
        for f in &self.per_frame {
            let _ = writeln!(out, "{},{},{}", f.frame, f.value, f.pixels);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Expected depth per pixel, 0 where no surfel covers the pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedDepth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl RenderedDepth {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn covered(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

/// Surfels grouped into spatial cells with bounding spheres, so whole cells
/// outside a camera's view can be skipped. Culling is conservative: every
/// pixel a surfel could cover lies inside its cell's sphere.
#[derive(Clone, Debug)]
pub struct SplatIndex {
    order: Vec<usize>,
    cells: Vec<Cell>,
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    center: Vector3<f64>,
    radius: f64,
    start: usize,
    end: usize,
}

/// Edge length of the cells of a [`SplatIndex`], meters.
pub const CELL_SIZE: f64 = 0.5;

impl SplatIndex {
    pub fn build(map: &SurfelMap) -> Self {
        let key = |p: &Vector3<f64>| {
            let c = p / CELL_SIZE;
            (c.x.floor() as i64, c.y.floor() as i64, c.z.floor() as i64)
        };
        let mut keyed: Vec<_> = map.surfels.iter().enumerate().map(|(i, s)| (key(&s.position), i)).collect();
        keyed.sort_unstable();
        let order: Vec<usize> = keyed.iter().map(|(_, i)| *i).collect();
        let mut cells = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let k = keyed[start].0;
            let mut end = start;
            let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
            let mut max_radius: f64 = 0.0;
            while end < order.len() && keyed[end].0 == k {
                let s = &map.surfels[order[end]];
                lo = lo.inf(&s.position);
                hi = hi.sup(&s.position);
                max_radius = max_radius.max(s.radius);
                end += 1;
            }
            cells.push(Cell {
                center: (lo + hi) / 2.0,
                // slack covers rounding in the camera transform
                radius: (hi - lo).norm() / 2.0 + max_radius + 1e-6,
                start,
                end,
            });
            start = end;
        }
        Self { order, cells }
    }
}

/// Z-buffer splatting. Each surfel is a disk; a pixel takes the depth where
/// its ray meets the disk plane when that point lies within the radius.
/// Back-facing surfels are skipped and the nearest hit wins; exact ties go
/// to the lower surfel index.
pub fn render_depth(map: &SurfelMap, pose: &Pose, intrinsics: &Intrinsics) -> RenderedDepth {
    render_depth_indexed(map, &SplatIndex::build(map), pose, intrinsics)
}

/// [`render_depth`] with a prebuilt index of `map`.
pub fn render_depth_indexed(map: &SurfelMap, index: &SplatIndex, pose: &Pose, intrinsics: &Intrinsics) -> RenderedDepth {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut depth = vec![(f64::INFINITY, usize::MAX); w * h];
    let to_cam = pose.inverse();
    let rot = to_cam.rotation_matrix();
    let center = pose.translation;
    let (fx, fy, cx, cy) = (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy);

    // inward normals of the view frustum's side planes (through pixel edges)
    let (u_lo, u_hi) = (-0.5 - cx, w as f64 - 0.5 - cx);
    let (v_lo, v_hi) = (-0.5 - cy, h as f64 - 0.5 - cy);
    let planes = [
        Vector3::new(fx, 0.0, -u_lo),
        Vector3::new(-fx, 0.0, u_hi),
        Vector3::new(0.0, fy, -v_lo),
        Vector3::new(0.0, -fy, v_hi),
        Vector3::z(),
    ]
    .map(|n| n.normalize());

    for cell in &index.cells {
        let c = rot * cell.center + to_cam.translation;
        if planes.iter().any(|n| n.dot(&c) < -cell.radius) {
            continue;
        }
        for &i in &index.order[cell.start..cell.end] {
            let s = &map.surfels[i];
            if s.normal.dot(&(center - s.position)) < 0.0 {
                continue;
            }
            let p = rot * s.position + to_cam.translation;
            let r = s.radius;
            if p.z <= r || p.z <= 1e-6 {
                continue;
            }
            let u0 = fx * p.x / p.z + cx;
            let v0 = fy * p.y / p.z + cy;
            // a point within r of p projects within r·(1 + |x/z|)/(z − r)
            // of p's projection (normalized coordinates)
            let spread = r / (p.z - r);
            let rho_u = fx * spread * (1.0 + (p.x / p.z).abs());
            let rho_v = fy * spread * (1.0 + (p.y / p.z).abs());
            let (umin, umax) = ((u0 - rho_u).ceil(), (u0 + rho_u).floor());
            let (vmin, vmax) = ((v0 - rho_v).ceil(), (v0 + rho_v).floor());
            if umax < 0.0 || vmax < 0.0 || umin > (w - 1) as f64 || vmin > (h - 1) as f64 {
                continue;
            }
            let n = rot * s.normal;
            let plane = n.dot(&p);
            let r2 = r * r;
            let (ua, ub) = (umin.max(0.0) as usize, umax.min((w - 1) as f64) as usize);
            let (va, vb) = (vmin.max(0.0) as usize, vmax.min((h - 1) as f64) as usize);
            for v in va..=vb {
                let ry = (v as f64 - cy) / fy;
                for u in ua..=ub {
                    let rx = (u as f64 - cx) / fx;
                    let denom = n.x * rx + n.y * ry + n.z;
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let t = plane / denom;
                    if t <= 0.0 {
                        continue;
                    }
                    let (dx, dy, dz) = (rx * t - p.x, ry * t - p.y, t - p.z);
                    if dx * dx + dy * dy + dz * dz > r2 {
                        continue;
                    }
                    let cell = &mut depth[v * w + u];
                    if (t, i) < *cell {
                        *cell = (t, i);
                    }
                }
            }
        }
    }
    RenderedDepth {
        width: w,
        height: h,
        depth: depth.into_iter().map(|(d, _)| if d.is_finite() { d } else { 0.0 }).collect(),
    }
}

/// Map-quality score over a frame sequence.
pub trait MapScorer: Sync {
    fn score(&self, map: &SurfelMap, frames: &[DepthFrame], trajectory: &Trajectory) -> Result<ConsistencyScore>;
}

/// The truncated depth-residual score described in the module docs.
#[derive(Clone, Copy, Debug)]
pub struct DepthConsistency {
    /// Evaluate every `stride`-th pixel in both directions.
    pub stride: usize,
    pub truncation: f64,
}

impl Default for DepthConsistency {
    fn default() -> Self {
        Self {
            stride: crate::surfelmap::DEFAULT_STRIDE,
            truncation: TRUNCATION,
        }
    }
}

impl DepthConsistency {
    pub fn with_stride(stride: usize) -> Self {
        Self {
            stride: stride.max(1),
            ..Self::default()
        }
    }

    pub fn score_frame(&self, map: &SurfelMap, frame: &DepthFrame, pose: &Pose) -> FrameScore {
        self.score_frame_indexed(map, &SplatIndex::build(map), frame, pose)
    }

    fn score_frame_indexed(&self, map: &SurfelMap, index: &SplatIndex, frame: &DepthFrame, pose: &Pose) -> FrameScore {
        let s = self.stride.max(1);
        let sampled = frame.intrinsics.subsampled(s);
        let rendered = render_depth_indexed(map, index, pose, &sampled);
        let w = frame.width();
        let mut sum = 0.0;
        let mut pixels = 0;
        for j in 0..sampled.height {
            for i in 0..sampled.width {
                let observed = frame.depth[j * s * w + i * s] as f64;
                if observed <= 0.0 {
                    continue;
                }
                pixels += 1;
                let zr = rendered.at(i, j);
                if zr > 0.0 {
                    sum += pixel_penalty(observed, zr, self.truncation);
                }
            }
        }
        FrameScore {
            frame: frame.index,
            value: if pixels > 0 { sum / pixels as f64 } else { 0.0 },
            pixels,
        }
    }
}

impl MapScorer for DepthConsistency {
    fn score(&self, map: &SurfelMap, frames: &[DepthFrame], trajectory: &Trajectory) -> Result<ConsistencyScore> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("cannot score a map against zero frames".into()));
        }
        for f in frames {
            f.validate()?;
            trajectory.pose(f.index)?;
        }
        let index = SplatIndex::build(map);
        let per_frame = frames
            .par_iter()
            .map(|f| self.score_frame_indexed(map, &index, f, &trajectory.poses()[f.index]))
            .collect();
        Ok(ConsistencyScore::from_frames(per_frame))
    }
}

/// Scores with the default [`DepthConsistency`].
pub fn score_map(map: &SurfelMap, frames: &[DepthFrame], trajectory: &Trajectory) -> Result<ConsistencyScore> {
    DepthConsistency::default().score(map, frames, trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfelmap::Surfel;
    use nalgebra::Vector3;

    fn surfel(x: f64, y: f64, z: f64, radius: f64) -> Surfel {
        Surfel {
            position: Vector3::new(x, y, z),
            normal: Vector3::new(0.0, 0.0, -1.0),
            color: [0; 3],
            weight: 1.0,
            radius,
            t0: 0,
            t: 0,
        }
    }

    fn intr(w: usize, h: usize, f: f64, cx: f64, cy: f64) -> Intrinsics {
        Intrinsics { width: w, height: h, fx: f, fy: f, cx, cy }
    }

    #[test]
    fn single_surfel_on_axis() {
        let map = SurfelMap { surfels: vec![surfel(0.0, 0.0, 2.0, 0.05)] };
        let r = render_depth(&map, &Pose::identity(), &intr(9, 9, 50.0, 4.0, 4.0));
        assert_eq!(r.at(4, 4), 2.0);
        assert_eq!(r.at(0, 0), 0.0);
    }

    #[test]
    fn empty_map_renders_nothing() {
        let r = render_depth(&SurfelMap::new(), &Pose::identity(), &intr(5, 4, 10.0, 2.0, 1.5));
        assert!(r.depth.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn nearest_surfel_wins() {
        let map = SurfelMap {
            surfels: vec![surfel(0.0, 0.0, 3.0, 0.05), surfel(0.0, 0.0, 1.0, 0.05)],
        };
        let r = render_depth(&map, &Pose::identity(), &intr(9, 9, 50.0, 4.0, 4.0));
        assert_eq!(r.at(4, 4), 1.0);
    }

    #[test]
    fn back_facing_surfels_are_skipped() {
        let mut s = surfel(0.0, 0.0, 2.0, 0.05);
        s.normal = Vector3::new(0.0, 0.0, 1.0);
        let map = SurfelMap { surfels: vec![s] };
        let r = render_depth(&map, &Pose::identity(), &intr(9, 9, 50.0, 4.0, 4.0));
        assert_eq!(r.covered(), 0);
    }

    #[test]
    fn slanted_disk_reports_ray_plane_depth() {
        let mut s = surfel(0.0, 0.0, 2.0, 0.2);
        s.normal = Vector3::new(-1.0, 0.0, -1.0).normalize();
        let map = SurfelMap { surfels: vec![s] };
        let i = intr(21, 21, 100.0, 10.0, 10.0);
        let r = render_depth(&map, &Pose::identity(), &i);
        // plane x + z = 2: along ray (rx, ry, 1)·t, t = 2 / (1 + rx)
        let rx = (13.0 - 10.0) / 100.0;
        assert!((r.at(13, 10) - 2.0 / (1.0 + rx)).abs() < 1e-12);
    }

    /// Four pixels, hand-placed surfels, penalties computed by hand.
    #[test]
    fn two_by_two_frame_matches_hand_computation() {
        let i = intr(2, 2, 100.0, 0.5, 0.5);
        // pixel (u,v) ray direction: ((u−0.5)/100, (v−0.5)/100, 1)
        let depth = vec![1.0f32, 2.0, 0.0, 1.5];
        let frame = DepthFrame::new(0, i, depth);
        // one tiny surfel per pixel, centered on that pixel's ray
        let place = |u: f64, v: f64, z: f64| surfel((u - 0.5) / 100.0 * z, (v - 0.5) / 100.0 * z, z, 1e-4);
        let map = SurfelMap {
            surfels: vec![
                place(0.0, 0.0, 1.003),  // pixel (0,0): observed 1.0
                place(1.0, 0.0, 2.5),    // pixel (1,0): observed 2.0, far off
                place(0.0, 1.0, 1.0),    // pixel (0,1): observation invalid
                // pixel (1,1): no surfel
            ],
        };
        let traj = Trajectory::new(vec![Pose::identity()]);
        let score = DepthConsistency::with_stride(1).score(&map, &[frame], &traj).unwrap();
        let s1 = 0.0012 + 0.0019 * 0.6 * 0.6; // σ(1.0) = 0.001884
        let p00 = (0.003f64 / s1).powi(2); // 2.5355…, below truncation
        let p10 = 16.0; // 0.5 m error saturates
        let expected = (p00 + p10) / 3.0; // three valid observed pixels
        assert_eq!(score.pixels_evaluated, 3);
        assert!((score.value - expected).abs() < 1e-6, "{} vs {expected}", score.value);
        assert!((score.value - score.per_frame.iter().map(|f| f.value).sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn empty_frame_list_is_an_error() {
        let traj = Trajectory::new(vec![Pose::identity()]);
        assert!(score_map(&SurfelMap::new(), &[], &traj).is_err());
    }

    #[test]
    fn csv_export() {
        let s = ConsistencyScore::from_frames(vec![
            FrameScore { frame: 0, value: 0.5, pixels: 10 },
            FrameScore { frame: 1, value: 0.25, pixels: 12 },
        ]);
        assert_eq!(s.value, 0.75);
        assert_eq!(s.to_csv(), "frame_index,score,pixels_evaluated\n0,0.5,10\n1,0.25,12\n");
    }

    /// Unculled reference splatter: every surfel, in index order.
    fn brute_force_render(map: &SurfelMap, pose: &Pose, k: &Intrinsics) -> Vec<f64> {
        let to_cam = pose.inverse();
        let mut depth = vec![f64::INFINITY; k.width * k.height];
        for s in &map.surfels {
            if s.normal.dot(&(pose.translation - s.position)) < 0.0 {
                continue;
            }
            let p = to_cam.transform_point(&s.position);
            if p.z <= s.radius || p.z <= 1e-6 {
                continue;
            }
            let n = to_cam.rotate_vector(&s.normal);
            for v in 0..k.height {
                for u in 0..k.width {
                    let ray = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
                    let denom = n.dot(&ray);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let t = n.dot(&p) / denom;
                    if t > 0.0 && (ray * t - p).norm_squared() <= s.radius * s.radius {
                        let d = &mut depth[v * k.width + u];
                        *d = d.min(t);
                    }
                }
            }
        }
        depth.into_iter().map(|d| if d.is_finite() { d } else { 0.0 }).collect()
    }

    #[test]
    fn culled_render_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let surfels = (0..600)
            .map(|_| {
                let position = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let normal = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                Surfel { position, normal, color: [0; 3], weight: 1.0, radius: rng.random_range(0.01..0.3), t0: 0, t: 0 }
            })
            .collect();
        let map = SurfelMap { surfels };
        let index = SplatIndex::build(&map);
        let k = intr(24, 18, 15.0, 11.5, 8.5);
        for _ in 0..10 {
            let w = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pose = Pose::exp(&crate::geometry::Twist::new(w * 0.5, t));
            let fast = render_depth_indexed(&map, &index, &pose, &k);
            let slow = brute_force_render(&map, &pose, &k);
            for (a, b) in fast.depth.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}
