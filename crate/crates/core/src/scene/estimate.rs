use nalgebra::Vector3;

use super::{principal_x, principal_y, CameraPose, DepthMap, FrameTag, Grid, Intrinsics, Pointmap, SceneGraph};
use crate::{Error, Result};

/// Optimizable parameters of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameState {
    /// Natural log of depth, row-major.
    pub log_depth: Vec<f64>,
    pub valid: Vec<bool>,
    /// Natural log of the single focal length `fx = fy`.
    pub log_focal: f64,
    /// Camera-to-world pose.
    pub pose: CameraPose,
}

/// Per-edge similarity bringing a pair-local pointmap into world coordinates:
/// `x_world = exp(log_scale) · (R x + t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeState {
    pub log_scale: f64,
    pub transform: CameraPose,
}

impl EdgeState {
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }
}

/// The full optimization state: depth, focal and pose per frame plus scale
/// and rigid transform per graph edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEstimate {
    width: usize,
    height: usize,
    cx: f64,
    cy: f64,
    graph: SceneGraph,
    pub frames: Vec<FrameState>,
    pub edges: Vec<EdgeState>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameGradient {
    pub depth: Vec<f64>,
    pub focal: f64,
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeGradient {
    pub scale: f64,
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

/// Gradient laid out like [`SceneEstimate`]. Rotation entries are tangent
/// derivatives for a right perturbation `R exp([ω]ₓ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGradient {
    pub frames: Vec<FrameGradient>,
    pub edges: Vec<EdgeGradient>,
}

/// Which parameter groups an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBlocks {
    pub depth: bool,
    pub focal: bool,
    pub pose: bool,
    pub edges: bool,
}

impl ParamBlocks {
    pub const ALL: Self = Self { depth: true, focal: true, pose: true, edges: true };
    pub const DEPTH_ONLY: Self = Self { depth: true, focal: false, pose: false, edges: false };
}

impl SceneEstimate {
    /// State with identity poses, unit depth and the given focal everywhere.
    pub fn new(width: usize, height: usize, graph: SceneGraph, focal: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("empty resolution".into()));
        }
        if !(focal.is_finite() && focal > 0.0) {
            return Err(Error::InvalidInput(format!("focal {focal} must be positive")));
        }
        let frame = FrameState {
            log_depth: vec![0.0; width * height],
            valid: vec![true; width * height],
            log_focal: focal.ln(),
            pose: CameraPose::identity(),
        };
        let frames = vec![frame; graph.num_frames()];
        let edges = vec![EdgeState { log_scale: 0.0, transform: CameraPose::identity() }; graph.edges().len()];
        Ok(Self { width, height, cx: principal_x(width), cy: principal_y(height), graph, frames, edges })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    pub fn focal(&self, t: usize) -> f64 {
        self.frames[t].log_focal.exp()
    }

    pub fn intrinsics(&self, t: usize) -> Intrinsics {
        let f = self.focal(t);
        Intrinsics::new(f, f, self.cx, self.cy)
    }

    pub fn pose(&self, t: usize) -> &CameraPose {
        &self.frames[t].pose
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    /// Sets frame `t`'s depth; non-positive or non-finite entries become invalid.
    pub fn set_depth(&mut self, t: usize, depth: &[f64]) -> Result<()> {
        if depth.len() != self.num_pixels() {
            return Err(Error::ShapeMismatch(format!("depth for frame {t} has {} entries", depth.len())));
        }
        let frame = &mut self.frames[t];
        for (k, &d) in depth.iter().enumerate() {
            let ok = d.is_finite() && d > 0.0;
            frame.valid[k] = ok;
            frame.log_depth[k] = if ok { d.ln() } else { 0.0 };
        }
        Ok(())
    }

    pub fn depth_map(&self, t: usize) -> DepthMap {
        let frame = &self.frames[t];
        let values = frame
            .log_depth
            .iter()
            .zip(&frame.valid)
            .map(|(&ld, &v)| if v { ld.exp() } else { 0.0 })
            .collect();
        let values = Grid::from_vec(self.width, self.height, values).expect("state grid");
        let valid = Grid::from_vec(self.width, self.height, frame.valid.clone()).expect("state grid");
        DepthMap::new(values, valid).expect("state depth is positive by construction")
    }

    /// World-coordinate pointmap of frame `t`.
    pub fn world_pointmap(&self, t: usize) -> Pointmap {
        let frame = &self.frames[t];
        let k = self.intrinsics(t);
        let mut points = Vec::with_capacity(self.num_pixels());
        for j in 0..self.height {
            for i in 0..self.width {
                let idx = j * self.width + i;
                if frame.valid[idx] {
                    let y = k.backproject(i as f64, j as f64, frame.log_depth[idx].exp());
                    points.push(frame.pose.transform_point(&y));
                } else {
                    points.push(Vector3::zeros());
                }
            }
        }
        let points = Grid::from_vec(self.width, self.height, points).expect("state grid");
        let valid = Grid::from_vec(self.width, self.height, frame.valid.clone()).expect("state grid");
        Pointmap::new(points, valid, FrameTag::World).expect("finite state")
    }

    pub fn world_pointmaps(&self) -> Vec<Pointmap> {
        (0..self.num_frames()).map(|t| self.world_pointmap(t)).collect()
    }

    pub fn zero_gradient(&self) -> SceneGradient {
        SceneGradient {
            frames: (0..self.num_frames())
                .map(|_| FrameGradient { depth: vec![0.0; self.num_pixels()], ..Default::default() })
                .collect(),
            edges: vec![EdgeGradient::default(); self.edges.len()],
        }
    }

    /// Number of scalar parameters in the flat layout used by [`Self::retract`].
    pub fn num_params(&self) -> usize {
        self.num_frames() * (self.num_pixels() + 7) + self.edges.len() * 7
    }

    /// Offset of frame `t`'s block `[log_depth.., log_focal, rot(3), trans(3)]`
    /// in the flat layout.
    pub fn frame_offset(&self, t: usize) -> usize {
        t * (self.num_pixels() + 7)
    }

    /// Offset of edge `e`'s block `[log_scale, rot(3), trans(3)]`.
    pub fn edge_offset(&self, e: usize) -> usize {
        self.num_frames() * (self.num_pixels() + 7) + 7 * e
    }

    /// Applies a flat tangent-space step (`x ← x ⊕ delta`) to the enabled
    /// blocks, then re-imposes the scale gauge and unit quaternions.
    pub fn retract(&mut self, delta: &[f64], blocks: ParamBlocks) {
        self.apply_tangent(delta, blocks);
        if blocks.edges {
            self.enforce_gauge();
        }
    }

    /// Tangent-space step without the gauge projection.
    pub fn apply_tangent(&mut self, delta: &[f64], blocks: ParamBlocks) {
        assert_eq!(delta.len(), self.num_params(), "step length mismatch");
        let np = self.num_pixels();
        let mut off = 0;
        for frame in &mut self.frames {
            if blocks.depth {
                for (k, ld) in frame.log_depth.iter_mut().enumerate() {
                    if frame.valid[k] {
                        *ld += delta[off + k];
                    }
                }
            }
            off += np;
            if blocks.focal {
                frame.log_focal += delta[off];
            }
            if blocks.pose {
                let w = Vector3::new(delta[off + 1], delta[off + 2], delta[off + 3]);
                frame.pose.perturb_rotation(&w);
                frame.pose.translation += Vector3::new(delta[off + 4], delta[off + 5], delta[off + 6]);
            }
            off += 7;
        }
        if blocks.edges {
            for edge in &mut self.edges {
                edge.log_scale += delta[off];
                let w = Vector3::new(delta[off + 1], delta[off + 2], delta[off + 3]);
                edge.transform.perturb_rotation(&w);
                edge.transform.translation += Vector3::new(delta[off + 4], delta[off + 5], delta[off + 6]);
                edge.transform.renormalize();
                off += 7;
            }
        }
        if blocks.pose {
            for frame in &mut self.frames {
                frame.pose.renormalize();
            }
        }
    }

    /// Shifts edge log-scales so they sum to zero.
    pub fn enforce_gauge(&mut self) {
        if self.edges.is_empty() {
            return;
        }
        let mean = self.edges.iter().map(|e| e.log_scale).sum::<f64>() / self.edges.len() as f64;
        for e in &mut self.edges {
            e.log_scale -= mean;
        }
        for e in &mut self.edges {
            e.transform.renormalize();
        }
    }

    /// Uniformly rescales the world: depths, camera centres and edge scales.
    /// Edge translations are in pair-local units and stay unchanged.
    pub fn rescale_world(&mut self, factor: f64) {
        let lf = factor.ln();
        for frame in &mut self.frames {
            for ld in &mut frame.log_depth {
                *ld += lf;
            }
            frame.pose.translation *= factor;
        }
        for e in &mut self.edges {
            e.log_scale += lf;
        }
    }

    pub fn gauge_residual(&self) -> f64 {
        self.edges.iter().map(|e| e.log_scale).sum()
    }
}

impl SceneGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for f in &self.frames {
            out.extend_from_slice(&f.depth);
            out.push(f.focal);
            out.extend_from_slice(f.rotation.as_slice());
            out.extend_from_slice(f.translation.as_slice());
        }
        for e in &self.edges {
            out.push(e.scale);
            out.extend_from_slice(e.rotation.as_slice());
            out.extend_from_slice(e.translation.as_slice());
        }
        out
    }

    /// `self += w · other`.
    pub fn add_scaled(&mut self, other: &SceneGradient, w: f64) {
        for (a, b) in self.frames.iter_mut().zip(&other.frames) {
            for (x, y) in a.depth.iter_mut().zip(&b.depth) {
                *x += w * y;
            }
            a.focal += w * b.focal;
            a.rotation += w * b.rotation;
            a.translation += w * b.translation;
        }
        for (a, b) in self.edges.iter_mut().zip(&other.edges) {
            a.scale += w * b.scale;
            a.rotation += w * b.rotation;
            a.translation += w * b.translation;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_state() -> SceneEstimate {
        let g = SceneGraph::build(3, 2, 1).unwrap();
        SceneEstimate::new(4, 3, g, 10.0).unwrap()
    }

    #[test]
    fn retract_keeps_gauge_and_unit_quaternions() {
        let mut s = small_state();
        let n = s.num_params();
        let delta: Vec<f64> = (0..n).map(|k| ((k * 7919) % 13) as f64 * 0.01 - 0.06).collect();
        for _ in 0..20 {
            s.retract(&delta, ParamBlocks::ALL);
            assert!(s.gauge_residual().abs() < 1e-10);
            for f in &s.frames {
                assert!((f.pose.rotation.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn depth_only_step_leaves_poses_bitwise() {
        let mut s = small_state();
        let before = s.clone();
        let delta = vec![0.1; s.num_params()];
        s.retract(&delta, ParamBlocks::DEPTH_ONLY);
        for (a, b) in s.frames.iter().zip(&before.frames) {
            assert_eq!(a.pose, b.pose);
            assert_eq!(a.log_focal.to_bits(), b.log_focal.to_bits());
        }
        assert_eq!(s.edges, before.edges);
        assert!((s.frames[0].log_depth[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn flatten_matches_param_count() {
        let s = small_state();
        assert_eq!(s.zero_gradient().flatten().len(), s.num_params());
    }

    #[test]
    fn world_pointmap_uses_pixel_centres() {
        let mut s = small_state();
        s.set_depth(0, &[2.0; 12]).unwrap();
        let pm = s.world_pointmap(0);
        let (cx, cy) = s.principal_point();
        let p = pm.points().get(3, 2);
        assert!((p.x - (3.0 - cx) * 2.0 / 10.0).abs() < 1e-12);
        assert!((p.y - (2.0 - cy) * 2.0 / 10.0).abs() < 1e-12);
        assert!((p.z - 2.0).abs() < 1e-12);
    }
}
