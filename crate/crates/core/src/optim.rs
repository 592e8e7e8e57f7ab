//! State initialization, Adam and the two-stage optimization schedule.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info, warn};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::epipolar::{motion_masks, MaskConfig};
use crate::geometry::umeyama_align;
use crate::io::{GraphEntry, Reconstruction, SceneData};
use crate::objectives::{total_loss, LossReport, LossWeights, ObjectiveData};
use crate::scene::{
    CameraPose, EdgeState, FlowSet, MotionMask, PairPrediction, ParamBlocks, SceneEstimate, SceneGraph, TrackSet,
};
use crate::trajectory::{lift_all_tracks, select_window_tracks, smoothed_pointmaps, window_spans, KnnCache, SmoothingConfig};
use crate::{Error, Result};

const MIN_INIT_DEPTH: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub weights: LossWeights,
    pub iters: usize,
    pub lr: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { weights: LossWeights::STAGE1, iters: 300, lr: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub w_pts: f64,
    pub iters: usize,
    pub lr: f64,
    /// Iterations between k-NN control index refreshes.
    pub knn_refresh_period: usize,
    /// Iterations between recomputations of the smoothed targets; 0 keeps
    /// the targets from the first iteration.
    #[serde(default = "default_target_refresh")]
    pub target_refresh_period: usize,
}

fn default_target_refresh() -> usize {
    0
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { w_pts: 1.0, iters: 300, lr: 0.01, knn_refresh_period: 10, target_refresh_period: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep focal lengths at their initial values during stage 1.
    pub freeze_focal: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_focal: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.into()));
        self.stage1.weights.validate()?;
        if !(self.stage1.lr > 0.0 && self.stage1.lr.is_finite() && self.stage2.lr > 0.0 && self.stage2.lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(self.stage2.w_pts >= 0.0 && self.stage2.w_pts.is_finite()) {
            return bad("w_pts must be finite and >= 0");
        }
        if self.stage2.knn_refresh_period == 0 {
            return bad("knn_refresh_period must be >= 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Full reconstruction configuration. The LMedS seed in `masks` is the only
/// source of randomness.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub optimizer: OptimizerConfig,
    pub masks: MaskConfig,
    pub smoothing: SmoothingConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.masks.validate()?;
        self.smoothing.validate()
    }
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Bias-corrected update `−lr · m̂ / (√v̂ + eps)` for gradient `g`.
    pub fn step(&mut self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.m.len(), "gradient length mismatch");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut delta = vec![0.0; g.len()];
        for k in 0..g.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            delta[k] = -self.lr * mh / (vh.sqrt() + self.eps);
        }
        delta
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub total: f64,
    pub ga: f64,
    pub cma: f64,
    pub cts: f64,
    pub pts: f64,
}

impl TraceRow {
    fn from_report(iteration: usize, r: &LossReport) -> Self {
        Self { iteration, total: r.total, ga: r.terms.ga, cma: r.terms.cma, cts: r.terms.cts, pts: r.terms.pts }
    }
}

/// Whitespace-separated columns `iteration total ga cma cts pts`.
pub fn format_trace(rows: &[TraceRow]) -> String {
    let mut s = String::from("# iteration total ga cma cts pts\n");
    for r in rows {
        let _ = writeln!(s, "{} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}", r.iteration, r.total, r.ga, r.cma, r.cts, r.pts);
    }
    s
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, format_trace(rows))?;
    Ok(())
}

fn check_finite(iteration: usize, r: &LossReport) -> Result<()> {
    let terms = [("ga", r.terms.ga), ("cma", r.terms.cma), ("cts", r.terms.cts), ("pts", r.terms.pts)];
    if let Some(&(term, _)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { iteration, term });
    }
    if !r.total.is_finite() {
        return Err(Error::NonFiniteLoss { iteration, term: "total" });
    }
    if !r.gradient.is_finite() {
        return Err(Error::NonFiniteLoss { iteration, term: "gradient" });
    }
    Ok(())
}

/// Zeroes gradient entries of disabled blocks and of invalid depth pixels.
fn mask_gradient(state: &SceneEstimate, g: &mut [f64], blocks: ParamBlocks) {
    let np = state.num_pixels();
    for t in 0..state.num_frames() {
        let off = state.frame_offset(t);
        for k in 0..np {
            if !blocks.depth || !state.frames[t].valid[k] {
                g[off + k] = 0.0;
            }
        }
        if !blocks.focal {
            g[off + np] = 0.0;
        }
        if !blocks.pose {
            g[off + np + 1..off + np + 7].fill(0.0);
        }
    }
    if !blocks.edges && !state.edges.is_empty() {
        let off = state.edge_offset(0);
        g[off..].fill(0.0);
    }
}

/// Stage 1: GA + CMA + CTS over every parameter block. Returns the loss at
/// each iteration before its step.
pub fn run_stage1(state: &mut SceneEstimate, data: &ObjectiveData, cfg: &OptimizerConfig) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let s1 = &cfg.stage1;
    let blocks = ParamBlocks { focal: !cfg.freeze_focal, ..ParamBlocks::ALL };
    let mut adam = Adam::new(state.num_params(), s1.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut trace = Vec::with_capacity(s1.iters);
    for it in 0..s1.iters {
        let report = total_loss(state, data, &s1.weights)?;
        check_finite(it, &report)?;
        trace.push(TraceRow::from_report(it, &report));
        let mut g = report.gradient.flatten();
        mask_gradient(state, &mut g, blocks);
        let delta = adam.step(&g);
        state.retract(&delta, blocks);
        if it % 50 == 0 {
            debug!("stage 1 iteration {it}: total {:.6e}", report.total);
        }
    }
    Ok(trace)
}

/// Whether at least one temporal window has a track visible throughout.
pub fn any_window_tracks(tracks: &TrackSet, num_frames: usize, smoothing: &SmoothingConfig) -> bool {
    window_spans(num_frames, smoothing.window, smoothing.pad)
        .iter()
        .any(|s| !select_window_tracks(tracks, s.extended.clone()).is_empty())
}

/// Stage 2: PTS on log-depth only, with smoothed targets recomputed every
/// `target_refresh_period` iterations (once by default). Iteration numbers in the trace start at `first_iteration`.
pub fn run_stage2(
    state: &mut SceneEstimate,
    tracks: &TrackSet,
    smoothing: &SmoothingConfig,
    cfg: &OptimizerConfig,
    first_iteration: usize,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let s2 = &cfg.stage2;
    if s2.iters == 0 || s2.w_pts == 0.0 {
        return Ok(Vec::new());
    }
    if !any_window_tracks(tracks, state.num_frames(), smoothing) {
        warn!("no track is visible throughout any window; skipping stage 2");
        return Ok(Vec::new());
    }
    let weights = LossWeights { ga: 0.0, cma: 0.0, cts: 0.0, pts: s2.w_pts };
    let no_flows = FlowSet::new();
    let mut adam = Adam::new(state.num_params(), s2.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut cache = KnnCache::new();
    let mut trace = Vec::with_capacity(s2.iters);
    let mut targets = Vec::new();
    for it in 0..s2.iters {
        if it % s2.knn_refresh_period == 0 {
            cache.clear();
        }
        let refresh = match s2.target_refresh_period {
            0 => it == 0,
            p => it % p == 0,
        };
        if refresh {
            targets = smoothed_pointmaps(&state.world_pointmaps(), tracks, smoothing, Some(&mut cache))?;
        }
        let data = ObjectiveData { pairs: &[], flows: &no_flows, masks: &[], targets: Some(&targets) };
        let report = total_loss(state, &data, &weights)?;
        let global = first_iteration + it;
        check_finite(global, &report)?;
        trace.push(TraceRow::from_report(global, &report));
        let mut g = report.gradient.flatten();
        mask_gradient(state, &mut g, ParamBlocks::DEPTH_ONLY);
        let delta = adam.step(&g);
        state.retract(&delta, ParamBlocks::DEPTH_ONLY);
    }
    Ok(trace)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Per-pixel focal estimate `z·sqrt(((i−cx)²+(j−cy)²)/(x²+y²))`, median over
/// valid pixels.
pub fn estimate_focal(points: &[Vector3<f64>], valid: &[bool], width: usize, cx: f64, cy: f64) -> Option<f64> {
    let est = points
        .iter()
        .zip(valid)
        .enumerate()
        .filter_map(|(k, (p, &v))| {
            let (i, j) = ((k % width) as f64, (k / width) as f64);
            let r2 = p.x * p.x + p.y * p.y;
            let d2 = (i - cx).powi(2) + (j - cy).powi(2);
            (v && p.z > 0.0 && r2 > 1e-24 && d2 > 0.0).then(|| p.z * (d2 / r2).sqrt())
        })
        .filter(|f| f.is_finite() && *f > 0.0)
        .collect();
    median(est)
}

/// Camera pose from 3D points and the unit-depth rays observing them
/// (orthogonal iteration). Returns `(R, t)` with `ray ∝ R·p + t`.
pub fn pose_from_rays(points: &[Vector3<f64>], rays: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let n = points.len();
    if n < 4 || rays.len() != n {
        return Err(Error::InsufficientData { needed: 4, got: n.min(rays.len()) });
    }
    let proj: Vec<Matrix3<f64>> = rays.iter().map(|v| v * v.transpose() / v.norm_squared()).collect();
    let f_mean = proj.iter().fold(Matrix3::zeros(), |a, v| a + v) / n as f64;
    let a = (Matrix3::identity() - f_mean)
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("rays do not constrain translation".into()))?
        / n as f64;
    let trans = |r: &Matrix3<f64>| -> Vector3<f64> {
        let s = points.iter().zip(&proj).fold(Vector3::zeros(), |acc, (p, v)| acc + (v - Matrix3::identity()) * (r * p));
        a * s
    };
    let cost = |r: &Matrix3<f64>, t: &Vector3<f64>| -> f64 {
        points.iter().zip(&proj).map(|(p, v)| ((Matrix3::identity() - v) * (r * p + t)).norm_squared()).sum()
    };
    let mut r = Matrix3::identity();
    let mut t = trans(&r);
    let mut e = cost(&r, &t);
    for _ in 0..2000 {
        let q: Vec<Vector3<f64>> = points.iter().zip(&proj).map(|(p, v)| v * (r * p + t)).collect();
        r = umeyama_align(points, &q, None, false)?.rotation;
        t = trans(&r);
        let e_new = cost(&r, &t);
        let done = (e - e_new).abs() <= 1e-15 * e.max(1e-300) || e_new < 1e-28;
        e = e_new;
        if done {
            break;
        }
    }
    Ok((r, t))
}

struct FrameGeometry {
    /// Points in the frame's own camera coordinates, in its pair's scale.
    points: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

fn own_geometry(p: &PairPrediction) -> FrameGeometry {
    FrameGeometry { points: p.pointmap_n.points().data().to_vec(), valid: p.pointmap_n.valid().data().to_vec() }
}

fn shared_points(a: &FrameGeometry, b: &[Vector3<f64>], b_valid: &[bool], conf: &[f64]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<f64>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut w = Vec::new();
    for k in 0..a.points.len() {
        if a.valid[k] && b_valid[k] {
            src.push(a.points[k]);
            dst.push(b[k]);
            w.push(conf[k]);
        }
    }
    (src, dst, w)
}

/// Initial estimate from the pairwise predictions.
///
/// Each frame's depth and focal come from the first pair in which it is the
/// reference. Poses are chained along consecutive edges by similarity fits
/// between the two predictions of the shared frame; a frame that is never a
/// reference is placed by orthogonal-iteration pose recovery from its
/// non-reference pointmap. Edge scales and transforms are then fitted per
/// edge and the world is rescaled to satisfy the scale gauge.
pub fn init_state(pairs: &[PairPrediction], graph: &SceneGraph, width: usize, height: usize) -> Result<SceneEstimate> {
    if pairs.len() != graph.edges().len() {
        return Err(Error::ShapeMismatch(format!("{} pairs for {} edges", pairs.len(), graph.edges().len())));
    }
    let nf = graph.num_frames();
    let mut state = SceneEstimate::new(width, height, graph.clone(), 1.0)?;
    let (cx, cy) = state.principal_point();
    let own: Vec<Option<usize>> = (0..nf).map(|t| pairs.iter().position(|p| p.edge.0 == t)).collect();

    // world = pose_t(scale_t · own-camera point)
    let mut scales = vec![1.0; nf];
    let mut poses = vec![CameraPose::identity(); nf];
    let mut geometry: Vec<Option<FrameGeometry>> = own.iter().map(|o| o.map(|e| own_geometry(&pairs[e]))).collect();
    if geometry[0].is_none() {
        return Err(Error::MissingEntry("frame 0 has no reference-role pair".into()));
    }

    for t in 0..nf - 1 {
        let e = graph
            .edge_index((t, t + 1))
            .ok_or_else(|| Error::MissingEntry(format!("consecutive edge ({t}, {})", t + 1)))?;
        let pair = &pairs[e];
        let own_t = geometry[t].as_ref().expect("chained frames have geometry");
        // the pair's frame-t pointmap is in its own reference frame; map it onto frame t's own coordinates
        let link = if own[t] == Some(e) {
            None
        } else {
            let (src, dst, w) = shared_points(
                &own_geometry(pair),
                &own_t.points,
                &own_t.valid,
                pair.conf_n.values().data(),
            );
            Some(umeyama_align(&src, &dst, Some(&w), true)?)
        };
        let to_own_t = |x: &Vector3<f64>| link.as_ref().map_or(*x, |s| s.apply(x));
        let next_in_t: Vec<Vector3<f64>> = pair.pointmap_m.points().data().iter().map(to_own_t).collect();
        let next_valid = pair.pointmap_m.valid().data();

        let (r_rel, t_rel, kappa) = match &geometry[t + 1] {
            Some(g) => {
                let (src, dst, w) = shared_points(g, &next_in_t, next_valid, pair.conf_m.values().data());
                let s = umeyama_align(&src, &dst, Some(&w), true)?;
                (s.rotation, s.translation, s.scale)
            }
            None => {
                // place the camera from pixel rays, then express its points in its own frame
                let k_prev = scales[t]; // keep the previous frame's units
                let focal_prev = estimate_focal(&own_t.points, &own_t.valid, width, cx, cy)
                    .ok_or_else(|| Error::Degenerate(format!("frame {t} gives no focal estimate")))?;
                let mut pts = Vec::new();
                let mut rays = Vec::new();
                for (k, p) in next_in_t.iter().enumerate() {
                    if next_valid[k] {
                        let (i, j) = ((k % width) as f64, (k / width) as f64);
                        pts.push(*p);
                        rays.push(Vector3::new((i - cx) / focal_prev, (j - cy) / focal_prev, 1.0));
                    }
                }
                let (r, tr) = pose_from_rays(&pts, &rays)?;
                let points: Vec<Vector3<f64>> = next_in_t.iter().map(|p| r * p + tr).collect();
                let valid = next_valid.iter().zip(&points).map(|(&v, p)| v && p.z > 0.0).collect();
                geometry[t + 1] = Some(FrameGeometry { points, valid });
                debug!("frame {} placed by pose recovery (scale {k_prev})", t + 1);
                // own(t+1) → own(t): x_t = Rᵀ(x − tr)
                let rt = r.transpose();
                (rt, -(rt * tr), 1.0)
            }
        };
        scales[t + 1] = scales[t] * kappa;
        let rw = poses[t].rotation_matrix();
        let r_next = rw * r_rel;
        let c_next = poses[t].translation + scales[t] * (rw * t_rel);
        poses[t + 1] = CameraPose::from_rotation_matrix(&r_next, c_next);
    }

    for t in 0..nf {
        let g = geometry[t].as_ref().expect("every frame placed");
        let focal = estimate_focal(&g.points, &g.valid, width, cx, cy)
            .ok_or_else(|| Error::Degenerate(format!("frame {t} gives no focal estimate")))?;
        let depth: Vec<f64> = g
            .points
            .iter()
            .zip(&g.valid)
            .map(|(p, &v)| if v { scales[t] * p.z.max(MIN_INIT_DEPTH) } else { f64::NAN })
            .collect();
        state.set_depth(t, &depth)?;
        state.frames[t].log_focal = focal.ln();
        state.frames[t].pose = poses[t];
    }

    let world = state.world_pointmaps();
    for (e, pair) in pairs.iter().enumerate() {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut w = Vec::new();
        for t in [pair.edge.0, pair.edge.1] {
            let (pm, conf) = pair.slot(t).expect("edge frame");
            for k in 0..state.num_pixels() {
                if pm.valid().data()[k] && world[t].valid().data()[k] {
                    src.push(pm.points().data()[k]);
                    dst.push(world[t].points().data()[k]);
                    w.push(conf.values().data()[k]);
                }
            }
        }
        state.edges[e] = match umeyama_align(&src, &dst, Some(&w), true) {
            Ok(s) if s.scale > 0.0 => EdgeState {
                log_scale: s.scale.ln(),
                transform: CameraPose::from_rotation_matrix(&s.rotation, s.translation / s.scale),
            },
            _ => {
                warn!("edge {:?}: similarity fit failed; using identity", pair.edge);
                EdgeState { log_scale: 0.0, transform: CameraPose::identity() }
            }
        };
    }
    let mean_log = state.edges.iter().map(|e| e.log_scale).sum::<f64>() / state.edges.len().max(1) as f64;
    state.rescale_world((-mean_log).exp());
    state.enforce_gauge();
    Ok(state)
}

/// Outputs of [`reconstruct`] beyond the reconstruction itself.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub trace: Vec<TraceRow>,
    pub initial: SceneEstimate,
    pub state: SceneEstimate,
}

/// Builds a reconstruction container from an estimate.
pub fn to_reconstruction(state: &SceneEstimate, masks: Vec<MotionMask>, tracks: &TrackSet) -> Reconstruction {
    let pointmaps = state.world_pointmaps();
    let tracks3d = (tracks.num_tracks() > 0).then(|| lift_all_tracks(tracks, &pointmaps));
    let graph = state.graph();
    Reconstruction {
        width: state.width(),
        height: state.height(),
        graph: GraphEntry { window: graph.window(), stride: graph.stride() },
        depth: (0..state.num_frames()).map(|t| state.depth_map(t)).collect(),
        poses: state.poses(),
        intrinsics: (0..state.num_frames()).map(|t| state.intrinsics(t)).collect(),
        masks,
        tracks: tracks.clone(),
        tracks3d,
    }
}

/// Motion masks, initialization, both stages and track lifting.
pub fn reconstruct(scene: &SceneData, cfg: &PipelineConfig) -> Result<(Reconstruction, RunSummary)> {
    cfg.validate()?;
    scene.validate()?;
    let masks = motion_masks(&scene.graph, &scene.flows, &scene.tracks, &cfg.masks)?;
    info!(
        "motion masks: {} dynamic pixels over {} frames",
        masks.iter().map(MotionMask::count).sum::<usize>(),
        masks.len()
    );
    let initial = init_state(&scene.pairs, &scene.graph, scene.width, scene.height)?;
    let mut state = initial.clone();
    let data = ObjectiveData { pairs: &scene.pairs, flows: &scene.flows, masks: &masks, targets: None };
    let mut trace = run_stage1(&mut state, &data, &cfg.optimizer)?;
    info!("stage 1 done: final total {:.6e}", trace.last().map_or(f64::NAN, |r| r.total));
    trace.extend(run_stage2(&mut state, &scene.tracks, &cfg.smoothing, &cfg.optimizer, cfg.optimizer.stage1.iters)?);
    let rec = to_reconstruction(&state, masks, &scene.tracks);
    Ok((rec, RunSummary { trace, initial, state }))
}
