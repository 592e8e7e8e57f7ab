//! Track lifting, adaptive-weight temporal smoothing and linear blend
//! displacement (LBD) of dense pointmaps.

use std::ops::Range;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::bilinear_sample;
use crate::scene::{FrameTag, Grid, Pointmap, TrackSet};
use crate::{Error, Result};

/// 3D trajectories over a run of frames, stored track-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory3D {
    num_tracks: usize,
    num_frames: usize,
    points: Vec<Vector3<f64>>,
    visibility: Vec<bool>,
}

impl Trajectory3D {
    pub fn new(num_tracks: usize, num_frames: usize, points: Vec<Vector3<f64>>, visibility: Vec<bool>) -> Result<Self> {
        let n = num_tracks * num_frames;
        if points.len() != n || visibility.len() != n {
            return Err(Error::ShapeMismatch(format!("trajectory arrays inconsistent with {num_tracks}x{num_frames}")));
        }
        if let Some(index) = points.iter().zip(&visibility).position(|(p, &v)| v && !p.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite { what: "trajectory point".into(), index });
        }
        Ok(Self { num_tracks, num_frames, points, visibility })
    }

    pub fn num_tracks(&self) -> usize {
        self.num_tracks
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn point(&self, n: usize, t: usize) -> Vector3<f64> {
        self.points[n * self.num_frames + t]
    }

    pub fn visible(&self, n: usize, t: usize) -> bool {
        self.visibility[n * self.num_frames + t]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    /// Mean norm of `T[t+1] − 2T[t] + T[t−1]` over fully visible triples.
    pub fn mean_second_difference(&self) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for n in 0..self.num_tracks {
            for t in 1..self.num_frames.saturating_sub(1) {
                if self.visible(n, t - 1) && self.visible(n, t) && self.visible(n, t + 1) {
                    sum += (self.point(n, t + 1) - 2.0 * self.point(n, t) + self.point(n, t - 1)).norm();
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub kernel_size: usize,
    /// Decay λ of the adaptive weights `exp(−λ·Δ)`.
    pub decay: f64,
    pub window: usize,
    pub pad: usize,
    pub lbd_k: usize,
    pub lbd_eps: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { kernel_size: 5, decay: 1.0, window: 20, pad: 5, lbd_k: 4, lbd_eps: 1e-8 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.window < self.kernel_size {
            return Err(Error::InvalidInput(format!("window {} shorter than kernel {}", self.window, self.kernel_size)));
        }
        if self.lbd_k == 0 {
            return Err(Error::InvalidInput("lbd_k must be >= 1".into()));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite() && self.lbd_eps > 0.0) {
            return Err(Error::InvalidInput("decay must be >= 0 and lbd_eps > 0".into()));
        }
        Ok(())
    }
}

/// Tracks visible at every frame of `frames`.
pub fn select_window_tracks(tracks: &TrackSet, frames: Range<usize>) -> Vec<usize> {
    (0..tracks.num_tracks()).filter(|&n| frames.clone().all(|t| tracks.visible(n, t))).collect()
}

/// Samples world pointmaps (indexed by absolute frame) at the 2D positions of
/// the given tracks. A sample that cannot be taken becomes invisible.
pub fn lift_tracks(tracks: &TrackSet, indices: &[usize], frames: Range<usize>, pointmaps: &[Pointmap]) -> Trajectory3D {
    let nf = frames.len();
    let mut points = Vec::with_capacity(indices.len() * nf);
    let mut visibility = Vec::with_capacity(indices.len() * nf);
    for &n in indices {
        for t in frames.clone() {
            let sample = if tracks.visible(n, t) {
                let p = tracks.position(n, t);
                bilinear_sample(pointmaps[t].points(), Some(pointmaps[t].valid()), p.x, p.y)
            } else {
                None
            };
            visibility.push(sample.is_some());
            points.push(sample.unwrap_or_else(Vector3::zeros));
        }
    }
    Trajectory3D { num_tracks: indices.len(), num_frames: nf, points, visibility }
}

/// Adaptive-weight temporal smoothing of each trajectory:
/// `W_t = exp(−λ‖T_t − T_{t−1}‖)` with `W_0 = W_1`, then
/// `T̃ = conv(T ⊙ W, K) / conv(W, K)` for a uniform kernel `K`, using
/// replicate padding of signal and weights. Invisible samples carry zero
/// weight and are passed through unchanged.
pub fn smooth_trajectories(traj: &Trajectory3D, cfg: &SmoothingConfig) -> Trajectory3D {
    let nf = traj.num_frames;
    let r = (cfg.kernel_size / 2) as isize;
    let mut out = traj.clone();
    if nf == 0 {
        return out;
    }
    let mut weights = vec![0.0; nf];
    for n in 0..traj.num_tracks {
        let base = n * nf;
        let pts = &traj.points[base..base + nf];
        let vis = &traj.visibility[base..base + nf];
        for t in 1..nf {
            weights[t] = if vis[t] && vis[t - 1] { (-cfg.decay * (pts[t] - pts[t - 1]).norm()).exp() } else { 0.0 };
        }
        weights[0] = match (vis[0], nf > 1 && vis[1]) {
            (false, _) => 0.0,
            (true, true) => weights[1],
            (true, false) => 1.0,
        };
        for t in 0..nf {
            if !vis[t] {
                continue;
            }
            let mut num = Vector3::zeros();
            let mut den = 0.0;
            for d in -r..=r {
                let s = (t as isize + d).clamp(0, nf as isize - 1) as usize;
                if vis[s] {
                    num += (pts[s] - pts[t]) * weights[s];
                    den += weights[s];
                }
            }
            // offsets from the centre sample keep constant trajectories bit-exact
            if den > 0.0 {
                out.points[base + t] = pts[t] + num / den;
            }
        }
    }
    out
}

/// Indices of the `k` controls nearest to `q` (fewer if there are fewer
/// controls), nearest first; ties resolved by lower index.
pub fn knn_indices(q: &Vector3<f64>, controls: &[Vector3<f64>], k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (idx, c) in controls.iter().enumerate() {
        let d = (q - c).norm_squared();
        if best.len() < k || d < best[best.len() - 1].0 {
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, idx));
            best.truncate(k);
        }
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Blends control displacements onto a query using the given neighbour set.
fn blend(q: &Vector3<f64>, controls: &[Vector3<f64>], disp: &[Vector3<f64>], neighbors: &[usize], eps: f64) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    let mut wsum = 0.0;
    for &c in neighbors {
        let d2 = (q - controls[c]).norm_squared();
        if d2 < eps {
            return q + disp[c];
        }
        let w = 1.0 / (d2 + eps);
        acc += w * disp[c];
        wsum += w;
    }
    q + acc / wsum
}

/// Moves each query by the inverse-squared-distance blend of the
/// displacements of its `lbd_k` nearest controls.
pub fn lbd_transform(
    queries: &[Vector3<f64>],
    controls: &[Vector3<f64>],
    displacements: &[Vector3<f64>],
    cfg: &SmoothingConfig,
) -> Result<Vec<Vector3<f64>>> {
    if controls.is_empty() {
        return Err(Error::EmptyInput("LBD needs at least one control point".into()));
    }
    if controls.len() != displacements.len() {
        return Err(Error::ShapeMismatch("one displacement per control point required".into()));
    }
    Ok(queries
        .iter()
        .map(|q| blend(q, controls, displacements, &knn_indices(q, controls, cfg.lbd_k), cfg.lbd_eps))
        .collect())
}

/// Retained and extended frame ranges of one smoothing window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSpan {
    pub retained: Range<usize>,
    pub extended: Range<usize>,
}

/// Non-overlapping windows of `window` frames, each extended by `pad` on
/// both sides and clamped to the video.
pub fn window_spans(num_frames: usize, window: usize, pad: usize) -> Vec<WindowSpan> {
    let window = window.max(1);
    (0..num_frames)
        .step_by(window)
        .map(|s| {
            let e = (s + window).min(num_frames);
            WindowSpan { retained: s..e, extended: s.saturating_sub(pad)..(e + pad).min(num_frames) }
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
struct FrameNeighbors {
    controls: Vec<usize>,
    /// `lbd_k` entries per pixel, indices into `controls`.
    neighbors: Vec<usize>,
    k: usize,
}

/// Cached k-NN control indices per frame, reused between refreshes.
#[derive(Clone, Debug, Default)]
pub struct KnnCache {
    frames: Vec<Option<FrameNeighbors>>,
}

impl KnnCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.frames.iter().all(Option::is_none)
    }
}

struct WindowResult {
    frames: Vec<(usize, Pointmap, Option<FrameNeighbors>)>,
}

fn process_window(
    span: &WindowSpan,
    pointmaps: &[Pointmap],
    tracks: &TrackSet,
    cfg: &SmoothingConfig,
    cached: &[Option<FrameNeighbors>],
) -> WindowResult {
    let indices = select_window_tracks(tracks, span.extended.clone());
    let mut frames = Vec::with_capacity(span.retained.len());
    if indices.is_empty() {
        log::warn!("no tracks visible through frames {:?}; smoothing target is the identity", span.extended);
        for t in span.retained.clone() {
            frames.push((t, pointmaps[t].clone(), None));
        }
        return WindowResult { frames };
    }
    let lifted = lift_tracks(tracks, &indices, span.extended.clone(), pointmaps);
    let smoothed = smooth_trajectories(&lifted, cfg);
    for t in span.retained.clone() {
        let local = t - span.extended.start;
        let mut controls_id = Vec::new();
        let mut controls = Vec::new();
        let mut disp = Vec::new();
        for n in 0..indices.len() {
            if lifted.visible(n, local) {
                controls_id.push(n);
                controls.push(lifted.point(n, local));
                disp.push(smoothed.point(n, local) - lifted.point(n, local));
            }
        }
        let pm = &pointmaps[t];
        if controls.is_empty() {
            frames.push((t, pm.clone(), None));
            continue;
        }
        let k = cfg.lbd_k.min(controls.len());
        let reuse = cached
            .get(t)
            .and_then(Option::as_ref)
            .filter(|c| c.controls == controls_id && c.k == k && c.neighbors.len() == pm.points().len() * k);
        let nb = match reuse {
            Some(c) => c.clone(),
            None => {
                let mut neighbors = vec![0usize; pm.points().len() * k];
                for (px, (q, &ok)) in pm.points().data().iter().zip(pm.valid().data()).enumerate() {
                    if ok {
                        neighbors[px * k..(px + 1) * k].copy_from_slice(&knn_indices(q, &controls, k));
                    }
                }
                FrameNeighbors { controls: controls_id, neighbors, k }
            }
        };
        let moved: Vec<Vector3<f64>> = pm
            .points()
            .data()
            .iter()
            .zip(pm.valid().data())
            .enumerate()
            .map(|(px, (q, &ok))| if ok { blend(q, &controls, &disp, &nb.neighbors[px * k..(px + 1) * k], cfg.lbd_eps) } else { *q })
            .collect();
        let grid = Grid::from_vec(pm.width(), pm.height(), moved).expect("same shape");
        let target = Pointmap::new(grid, pm.valid().clone(), FrameTag::World).expect("finite displacement");
        frames.push((t, target, Some(nb)));
    }
    WindowResult { frames }
}

/// Smoothed target pointmaps for every frame. When `cache` is given, stored
/// neighbour indices are reused; pass an emptied cache to refresh them.
pub fn smoothed_pointmaps(
    pointmaps: &[Pointmap],
    tracks: &TrackSet,
    cfg: &SmoothingConfig,
    cache: Option<&mut KnnCache>,
) -> Result<Vec<Pointmap>> {
    cfg.validate()?;
    let nf = pointmaps.len();
    if tracks.num_frames() != nf {
        return Err(Error::ShapeMismatch(format!("tracks cover {} frames, {} pointmaps given", tracks.num_frames(), nf)));
    }
    if let Some(pm) = pointmaps.iter().find(|p| p.tag() != FrameTag::World) {
        return Err(Error::InvalidInput(format!("smoothing expects world pointmaps, got {:?}", pm.tag())));
    }
    let empty = Vec::new();
    let cached = cache.as_ref().map_or(&empty, |c| &c.frames);
    let spans = window_spans(nf, cfg.window, cfg.pad);
    let results: Vec<WindowResult> =
        spans.par_iter().map(|s| process_window(s, pointmaps, tracks, cfg, cached)).collect();
    let mut out: Vec<Option<Pointmap>> = vec![None; nf];
    let mut new_cache = vec![None; nf];
    for r in results {
        for (t, pm, nb) in r.frames {
            out[t] = Some(pm);
            new_cache[t] = nb;
        }
    }
    if let Some(c) = cache {
        c.frames = new_cache;
    }
    Ok(out.into_iter().map(|p| p.expect("every frame retained once")).collect())
}

/// Lifts every track over the whole video.
pub fn lift_all_tracks(tracks: &TrackSet, pointmaps: &[Pointmap]) -> Trajectory3D {
    let all: Vec<usize> = (0..tracks.num_tracks()).collect();
    lift_tracks(tracks, &all, 0..pointmaps.len(), pointmaps)
}
