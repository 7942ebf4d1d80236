//! Dense surfel maps fused from depth frames, organized as fragments of `k`
//! consecutive frames that move rigidly when the trajectory changes.

pub mod ply;

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::posegraph::{NodeId, Trajectory};

pub const DEFAULT_FRAGMENT_SIZE: usize = 50;
pub const DEFAULT_STRIDE: usize = 2;
const MIN_RADIUS: f64 = 0.001;
const MAX_RADIUS: f64 = 0.1;
const DEFAULT_COLOR: [u8; 3] = [200, 200, 200];

/// Pinhole intrinsics; integer pixel coordinates are pixel centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics sampling every `stride`-th pixel of `self`.
    pub fn subsampled(&self, stride: usize) -> Intrinsics {
        let s = stride.max(1);
        let sf = s as f64;
        Intrinsics {
            width: self.width.div_ceil(s),
            height: self.height.div_ceil(s),
            fx: self.fx / sf,
            fy: self.fy / sf,
            cx: self.cx / sf,
            cy: self.cy / sf,
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Pixel coordinates of a camera-frame point in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// One depth image in meters, row-major; 0 marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub index: usize,
    pub intrinsics: Intrinsics,
    pub depth: Vec<f32>,
    pub color: Option<Vec<[u8; 3]>>,
}

impl DepthFrame {
    pub fn new(index: usize, intrinsics: Intrinsics, depth: Vec<f32>) -> Self {
        Self {
            index,
            intrinsics,
            depth,
            color: None,
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let expected = self.width() * self.height();
        if self.depth.len() != expected {
            return Err(Error::DimensionMismatch {
                frame: self.index,
                message: format!(
                    "{} depth values for a {}×{} image",
                    self.depth.len(),
                    self.width(),
                    self.height()
                ),
            });
        }
        if let Some(c) = &self.color {
            if c.len() != expected {
                return Err(Error::DimensionMismatch {
                    frame: self.index,
                    message: format!("{} color values for {expected} pixels", c.len()),
                });
            }
        }
        if let Some(i) = self.depth.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidInput(format!(
                "frame {}: depth at pixel {i} is {}",
                self.index, self.depth[i]
            )));
        }
        Ok(())
    }

    /// Depth in meters at `(u, v)`, `None` when invalid or outside.
    pub fn depth_at(&self, u: isize, v: isize) -> Option<f64> {
        if u < 0 || v < 0 || u as usize >= self.width() || v as usize >= self.height() {
            return None;
        }
        let d = self.depth[v as usize * self.width() + u as usize];
        (d > 0.0).then_some(d as f64)
    }

    pub fn valid_pixels(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }
}

/// A surface element: oriented disk with fusion bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [u8; 3],
    pub weight: f64,
    pub radius: f64,
    /// Frame index at creation.
    pub t0: usize,
    /// Frame index of the last update.
    pub t: usize,
}

impl Surfel {
    pub fn transformed(&self, pose: &Pose) -> Surfel {
        Surfel {
            position: pose.transform_point(&self.position),
            normal: pose.rotate_vector(&self.normal),
            ..*self
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfelMap {
    pub surfels: Vec<Surfel>,
}

impl SurfelMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.surfels.iter().map(|s| s.weight).sum()
    }

    pub fn transformed(&self, pose: &Pose) -> SurfelMap {
        SurfelMap {
            surfels: self.surfels.iter().map(|s| s.transformed(pose)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionConfig {
    /// Fuse every `stride`-th pixel in both directions.
    pub stride: usize,
    /// Association accepts `|z_obs − z_surfel| < max(abs, rel·z_obs)`.
    pub depth_tolerance_abs: f64,
    pub depth_tolerance_rel: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            depth_tolerance_abs: 0.02,
            depth_tolerance_rel: 0.02,
        }
    }
}

impl FusionConfig {
    fn depth_tolerance(&self, z: f64) -> f64 {
        self.depth_tolerance_abs.max(self.depth_tolerance_rel * z)
    }

    pub fn surfel_radius(&self, z: f64, intrinsics: &Intrinsics) -> f64 {
        (z / intrinsics.focal() * self.stride.max(1) as f64 * std::f64::consts::SQRT_2)
            .clamp(MIN_RADIUS, MAX_RADIUS)
    }
}

/// Camera-frame normal from depth differences, oriented toward the camera.
/// Central differences where both neighbors are on the same surface, a
/// one-sided difference across a depth edge.
fn pixel_normal(frame: &DepthFrame, u: usize, v: usize, center: &Vector3<f64>) -> Option<Vector3<f64>> {
    let intr = &frame.intrinsics;
    let (ui, vi) = (u as isize, v as isize);
    let z = center.z;
    let edge = 0.05 * z;
    let point = |du: isize, dv: isize| -> Option<Vector3<f64>> {
        let d = frame.depth_at(ui + du, vi + dv)?;
        ((d - z).abs() < edge)
            .then(|| intr.back_project((ui + du) as f64, (vi + dv) as f64, d))
    };
    let axis = |du: isize, dv: isize| -> Option<Vector3<f64>> {
        match (point(du, dv), point(-du, -dv)) {
            (Some(a), Some(b)) => Some(a - b),
            (Some(a), None) => Some(a - center),
            (None, Some(b)) => Some(center - b),
            (None, None) => None,
        }
    };
    let dx = axis(1, 0)?;
    let dy = axis(0, 1)?;
    let n = dx.cross(&dy);
    let norm = n.norm();
    if !(norm > 1e-12) {
        return None;
    }
    let n = n / norm;
    Some(if n.dot(center) > 0.0 { -n } else { n })
}

/// Fuses one frame observed from `pose` (camera to map) into `map`.
///
/// Existing surfels projecting within one pixel of an observation and within
/// the depth tolerance are averaged with it; every other valid sampled pixel
/// creates a new surfel.
pub fn fuse_frame(map: &mut SurfelMap, frame: &DepthFrame, pose: &Pose, config: &FusionConfig) -> Result<()> {
    frame.validate()?;
    let intr = &frame.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let stride = config.stride.max(1);
    let world_to_cam = pose.inverse();

    // front-most existing surfel per pixel, with its camera depth
    let mut index: Vec<Option<(usize, f64)>> = vec![None; w * h];
    for (i, s) in map.surfels.iter().enumerate() {
        let pc = world_to_cam.transform_point(&s.position);
        if pc.z <= 1e-6 {
            continue;
        }
        let (u, v) = intr.project(&pc);
        let (ur, vr) = (u.round(), v.round());
        if ur < 0.0 || vr < 0.0 || ur >= w as f64 || vr >= h as f64 {
            continue;
        }
        let slot = &mut index[vr as usize * w + ur as usize];
        if slot.is_none_or(|(_, z)| pc.z < z) {
            *slot = Some((i, pc.z));
        }
    }

    let mut updated = vec![false; map.surfels.len()];
    let mut created = Vec::new();
    for v in (0..h).step_by(stride) {
        for u in (0..w).step_by(stride) {
            let z = frame.depth[v * w + u] as f64;
            if z <= 0.0 {
                continue;
            }
            let pc = intr.back_project(u as f64, v as f64, z);
            let Some(nc) = pixel_normal(frame, u, v, &pc) else {
                continue;
            };
            let color = frame
                .color
                .as_ref()
                .map_or(DEFAULT_COLOR, |c| c[v * w + u]);
            let tolerance = config.depth_tolerance(z);

            let mut best: Option<(usize, usize, f64)> = None;
            for dv in -1isize..=1 {
                for du in -1isize..=1 {
                    let (uu, vv) = (u as isize + du, v as isize + dv);
                    if uu < 0 || vv < 0 || uu >= w as isize || vv >= h as isize {
                        continue;
                    }
                    let Some((j, zj)) = index[vv as usize * w + uu as usize] else {
                        continue;
                    };
                    let dz = (zj - z).abs();
                    if updated[j] || dz >= tolerance {
                        continue;
                    }
                    let ring = du.unsigned_abs() + dv.unsigned_abs();
                    if best.is_none_or(|(_, r, d)| (ring, dz) < (r, d)) {
                        best = Some((j, ring, dz));
                    }
                }
            }

            let position = pose.transform_point(&pc);
            let normal = pose.rotate_vector(&nc);
            let radius = config.surfel_radius(z, intr);
            match best {
                Some((j, _, _)) => {
                    updated[j] = true;
                    let s = &mut map.surfels[j];
                    let w0 = s.weight;
                    let w1 = w0 + 1.0;
                    s.position = (s.position * w0 + position) / w1;
                    let n = s.normal * w0 + normal;
                    if n.norm() > 1e-12 {
                        s.normal = n.normalize();
                    }
                    for (c, o) in s.color.iter_mut().zip(color) {
                        *c = ((*c as f64 * w0 + o as f64) / w1).round() as u8;
                    }
                    s.radius = s.radius.min(radius);
                    s.weight = w1;
                    s.t = frame.index;
                }
                None => created.push(Surfel {
                    position,
                    normal,
                    color,
                    weight: 1.0,
                    radius,
                    t0: frame.index,
                    t: frame.index,
                }),
            }
        }
    }
    map.surfels.extend(created);
    Ok(())
}

/// Fuses `frames` in order into one world-frame map.
pub fn fuse_sequence(frames: &[DepthFrame], trajectory: &Trajectory, config: &FusionConfig) -> Result<SurfelMap> {
    let mut map = SurfelMap::new();
    for f in frames {
        fuse_frame(&mut map, f, trajectory.pose(f.index)?, config)?;
    }
    Ok(map)
}

/// The fused sub-map of consecutive frames `first..=last`, stored in the
/// coordinates of its reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub id: usize,
    pub first: NodeId,
    pub last: NodeId,
    pub reference: NodeId,
    /// Reference-frame pose at fusion time.
    pub anchor: Pose,
    /// Fusion-time pose of each frame `first..=last`, relative to the anchor.
    pub frame_poses: Vec<Pose>,
    pub surfels: Vec<Surfel>,
}

impl Fragment {
    pub fn frames(&self) -> std::ops::RangeInclusive<NodeId> {
        self.first..=self.last
    }

    pub fn contains(&self, frame: NodeId) -> bool {
        self.frames().contains(&frame)
    }

    /// Fusion-time pose of `frame` relative to the reference frame.
    pub fn local_pose(&self, frame: NodeId) -> Option<&Pose> {
        frame
            .checked_sub(self.first)
            .and_then(|i| self.frame_poses.get(i))
    }

    /// Surfels placed by the given reference-frame pose.
    pub fn placed(&self, reference_pose: &Pose) -> impl Iterator<Item = Surfel> + '_ {
        let pose = *reference_pose;
        self.surfels.iter().map(move |s| s.transformed(&pose))
    }
}

/// Middle frame of `first..=last`.
pub fn reference_frame(first: NodeId, last: NodeId) -> NodeId {
    first + (last - first) / 2
}

/// Frame ranges of the `⌈n/k⌉` fragments tiling `n` frames.
pub fn fragment_ranges(n: usize, k: usize) -> Result<Vec<(NodeId, NodeId)>> {
    if k < 1 {
        return Err(Error::InvalidInput("fragment size k must be at least 1".into()));
    }
    Ok((0..n.div_ceil(k))
        .map(|f| (f * k, ((f + 1) * k).min(n) - 1))
        .collect())
}

/// Splits the sequence into fragments of `k` frames and fuses each one in the
/// coordinates of its middle frame, using `poses` for placement.
pub fn build_fragments(
    frames: &[DepthFrame],
    poses: &Trajectory,
    k: usize,
    config: &FusionConfig,
) -> Result<Vec<Fragment>> {
    let ranges = fragment_ranges(frames.len(), k)?;
    if let Some((i, f)) = frames.iter().enumerate().find(|(i, f)| f.index != *i) {
        return Err(Error::InvalidInput(format!(
            "frame at position {i} has index {}; frames must be indexed 0..n in order",
            f.index
        )));
    }
    if poses.len() < frames.len() {
        return Err(Error::MissingPose(poses.len()));
    }
    ranges
        .par_iter()
        .enumerate()
        .map(|(id, &(first, last))| {
            let reference = reference_frame(first, last);
            let anchor = *poses.pose(reference)?;
            let to_local = anchor.inverse();
            let frame_poses: Vec<Pose> = (first..=last)
                .map(|i| to_local.compose(&poses.poses()[i]))
                .collect();
            let mut map = SurfelMap::new();
            for (frame, local) in frames[first..=last].iter().zip(&frame_poses) {
                fuse_frame(&mut map, frame, local, config)?;
            }
            Ok(Fragment {
                id,
                first,
                last,
                reference,
                anchor,
                frame_poses,
                surfels: map.surfels,
            })
        })
        .collect()
}

/// Places every fragment at its reference frame's pose in `trajectory` and
/// returns the union. Fragments are not re-fused with each other.
pub fn assemble_model(fragments: &[Fragment], trajectory: &Trajectory) -> Result<SurfelMap> {
    let total = fragments.iter().map(|f| f.surfels.len()).sum();
    let mut surfels = Vec::with_capacity(total);
    for f in fragments {
        let pose = trajectory.pose(f.reference)?;
        surfels.extend(f.placed(pose));
    }
    Ok(SurfelMap { surfels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;

    fn intrinsics(w: usize, h: usize, f: f64) -> Intrinsics {
        Intrinsics {
            width: w,
            height: h,
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    /// Depth of the world plane `z = depth` seen from `pose`.
    fn plane_frame(index: usize, intr: Intrinsics, pose: &Pose, depth: f64) -> DepthFrame {
        let r = pose.rotation_matrix();
        let c = pose.translation;
        let mut d = vec![0f32; intr.width * intr.height];
        for v in 0..intr.height {
            for u in 0..intr.width {
                let ray_c = intr.back_project(u as f64, v as f64, 1.0);
                let ray_w = r * ray_c;
                if ray_w.z.abs() < 1e-12 {
                    continue;
                }
                let t = (depth - c.z) / ray_w.z;
                if t > 0.0 {
                    d[v * intr.width + u] = t as f32;
                }
            }
        }
        DepthFrame::new(index, intr, d)
    }

    #[test]
    fn plane_frame_fuses_onto_plane() {
        let intr = intrinsics(32, 24, 30.0);
        let frame = plane_frame(0, intr, &Pose::identity(), 2.0);
        let mut map = SurfelMap::new();
        fuse_frame(&mut map, &frame, &Pose::identity(), &FusionConfig::default()).unwrap();
        assert_eq!(map.len(), 16 * 12);
        for s in &map.surfels {
            assert!((s.normal - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-3);
            assert!((s.position.z - 2.0).abs() < 1e-6);
            assert_eq!((s.weight, s.t0, s.t), (1.0, 0, 0));
            assert!((s.normal.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_frame_twice_doubles_weights() {
        let intr = intrinsics(40, 30, 35.0);
        let pose = Pose::exp(&Twist::new(Vector3::new(0.1, 0.2, 0.0), Vector3::new(0.1, 0.0, 0.3)));
        let frame = plane_frame(3, intr, &pose, 2.5);
        let config = FusionConfig::default();
        let mut map = SurfelMap::new();
        fuse_frame(&mut map, &frame, &pose, &config).unwrap();
        let once = map.clone();
        fuse_frame(&mut map, &frame, &pose, &config).unwrap();
        assert_eq!(map.len(), once.len());
        for (a, b) in map.surfels.iter().zip(&once.surfels) {
            assert_eq!(a.weight, 2.0);
            assert!((a.position - b.position).norm() < 1e-9);
        }
    }

    #[test]
    fn laterally_offset_frames_stay_on_plane() {
        let intr = intrinsics(40, 30, 35.0);
        let config = FusionConfig::default();
        let a = Pose::identity();
        let b = Pose::from_translation(0.1, 0.0, 0.0);
        let mut map = SurfelMap::new();
        fuse_frame(&mut map, &plane_frame(0, intr, &a, 2.0), &a, &config).unwrap();
        let before = map.total_weight();
        fuse_frame(&mut map, &plane_frame(1, intr, &b, 2.0), &b, &config).unwrap();
        assert!(map.total_weight() >= before);
        assert!(map.surfels.iter().any(|s| s.weight > 1.0));
        for s in &map.surfels {
            // plane z = 2 has residual |p.z − 2|
            assert!((s.position.z - 2.0).abs() < config.depth_tolerance(2.0));
            assert!(s.t >= s.t0);
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let intr = intrinsics(4, 4, 5.0);
        let frame = DepthFrame::new(0, intr, vec![1.0; 15]);
        let mut map = SurfelMap::new();
        let err = fuse_frame(&mut map, &frame, &Pose::identity(), &FusionConfig::default());
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn fragment_tiling() {
        let ranges = fragment_ranges(10, 3).unwrap();
        assert_eq!(ranges, vec![(0, 2), (3, 5), (6, 8), (9, 9)]);
        let refs: Vec<_> = ranges.iter().map(|&(a, b)| reference_frame(a, b)).collect();
        assert_eq!(refs, vec![1, 4, 7, 9]);
        assert_eq!(fragment_ranges(10, 50).unwrap(), vec![(0, 9)]);
        assert!(fragment_ranges(10, 0).is_err());
    }

    fn sequence(n: usize) -> (Vec<DepthFrame>, Trajectory) {
        let intr = intrinsics(24, 18, 22.0);
        let poses: Vec<Pose> = (0..n)
            .map(|i| Pose::exp(&Twist::new(
                Vector3::new(0.0, 0.02 * i as f64, 0.0),
                Vector3::new(0.05 * i as f64, 0.0, 0.0),
            )))
            .collect();
        let frames = poses
            .iter()
            .enumerate()
            .map(|(i, p)| plane_frame(i, intr, p, 3.0))
            .collect();
        (frames, Trajectory::new(poses))
    }

    #[test]
    fn single_frame_fragments_are_back_projections() {
        let (frames, traj) = sequence(3);
        let config = FusionConfig::default();
        let fragments = build_fragments(&frames, &traj, 1, &config).unwrap();
        assert_eq!(fragments.len(), 3);
        for (frag, frame) in fragments.iter().zip(&frames) {
            let mut local = SurfelMap::new();
            fuse_frame(&mut local, frame, &Pose::identity(), &config).unwrap();
            assert_eq!(frag.surfels.len(), local.len());
            for (a, b) in frag.surfels.iter().zip(&local.surfels) {
                assert!((a.position - b.position).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn assemble_at_fusion_poses_is_identity_reassembly() {
        let (frames, traj) = sequence(7);
        let fragments = build_fragments(&frames, &traj, 3, &FusionConfig::default()).unwrap();
        let model = assemble_model(&fragments, &traj).unwrap();
        let expected: Vec<Surfel> = fragments.iter().flat_map(|f| f.placed(&f.anchor)).collect();
        assert_eq!(model.len(), expected.len());
        for (a, b) in model.surfels.iter().zip(&expected) {
            assert!((a.position - b.position).norm() < 1e-9);
        }
    }

    #[test]
    fn corrected_fragment_moves_alone() {
        let (frames, traj) = sequence(6);
        let fragments = build_fragments(&frames, &traj, 3, &FusionConfig::default()).unwrap();
        let base = assemble_model(&fragments, &traj).unwrap();
        let mut poses = traj.poses().to_vec();
        let shift = Vector3::new(0.0, 0.2, 0.0);
        for p in &mut poses[3..] {
            p.translation += shift;
        }
        let moved = assemble_model(&fragments, &Trajectory::new(poses)).unwrap();
        let split = fragments[0].surfels.len();
        for (i, (a, b)) in moved.surfels.iter().zip(&base.surfels).enumerate() {
            let d = a.position - b.position;
            if i < split {
                assert!(d.norm() < 1e-12);
            } else {
                assert!((d - shift).norm() < 1e-12);
                assert!((d.norm() - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_reference_pose_is_reported() {
        let (frames, traj) = sequence(6);
        let fragments = build_fragments(&frames, &traj, 3, &FusionConfig::default()).unwrap();
        let short = Trajectory::new(traj.poses()[..3].to_vec());
        assert!(matches!(assemble_model(&fragments, &short), Err(Error::MissingPose(4))));
    }
}
