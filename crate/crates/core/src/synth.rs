//! Deterministic analytic scenes with exact ground truth.
//!
//! The world is a ground plane (`y = ground_y`, image rows point down), an
//! infinite back wall at `z = wall_z` and a set of spheres that translate
//! along linear or sinusoidal paths. Depth, flow, occlusion and track
//! visibility are computed by ray casting, so every input is exact up to the
//! configured noise.

use std::f64::consts::TAU;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{save_scene, GroundTruth, SceneData};
use crate::scene::{
    CameraPose, ConfidenceMap, DepthMap, FlowField, FlowSet, FrameTag, Grid, Intrinsics, MotionMask, PairPrediction,
    Pointmap, SceneGraph, TrackSet,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CameraPathKind {
    /// Look-at arc around a target point; magnitude is the total sweep, radians.
    Orbit,
    /// Lateral translation along +x; magnitude is the total distance.
    Pan,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub kind: CameraPathKind,
    pub magnitude: f64,
    /// Orbit centre (also the look-at point).
    #[serde(default = "default_orbit_target")]
    pub target: [f64; 3],
    #[serde(default = "default_orbit_radius")]
    pub radius: f64,
}

fn default_orbit_target() -> [f64; 3] {
    [0.0, 0.2, 4.0]
}

fn default_orbit_radius() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SphereMotion {
    /// `c(t) = c₀ + v·max(0, t − start_frame)`.
    Linear { velocity: [f64; 3], #[serde(default)] start_frame: usize },
    /// `c(t) = c₀ + a·sin(2πt/period + phase)`.
    Sinusoidal { amplitude: [f64; 3], period: f64, #[serde(default)] phase: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub motion: SphereMotion,
}

impl SphereSpec {
    /// A sphere that never moves.
    pub fn fixed(center: [f64; 3], radius: f64) -> Self {
        Self { center, radius, motion: SphereMotion::Linear { velocity: [0.0; 3], start_frame: 0 } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Pointmap noise standard deviation as a fraction of depth.
    pub pointmap_sigma: f64,
    /// Lattice spacing of spatially correlated pointmap noise, pixels;
    /// 0 draws independent noise per pixel.
    pub pointmap_noise_cell: usize,
    pub flow_sigma: f64,
    pub track_jitter: f64,
    /// Fraction of input track entries replaced by uniform random positions.
    pub outlier_fraction: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { pointmap_sigma: 0.0, pointmap_noise_cell: 32, flow_sigma: 0.0, track_jitter: 0.0, outlier_fraction: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub focal: f64,
    pub camera: CameraPath,
    pub ground_y: f64,
    pub wall_z: f64,
    pub spheres: Vec<SphereSpec>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_mobility_threshold")]
    pub mobility_threshold: f64,
    pub graph_window: usize,
    pub graph_stride: usize,
    #[serde(default = "default_grid")]
    pub track_grid: usize,
    /// Frames at which track queries are sampled.
    pub query_frames: Vec<usize>,
    pub seed: u64,
}

fn default_mobility_threshold() -> f64 {
    0.01
}

fn default_grid() -> usize {
    20
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Small,
    Medium,
}

impl SynthConfig {
    /// 8 frames at 128x96: one sphere rising about 4 px per frame in front of
    /// three static ones, seen from an orbiting camera.
    pub fn small() -> Self {
        Self {
            width: 128,
            height: 96,
            frames: 8,
            focal: 120.0,
            camera: CameraPath { kind: CameraPathKind::Orbit, magnitude: 0.2, target: default_orbit_target(), radius: 4.0 },
            ground_y: 1.0,
            wall_z: 10.0,
            spheres: vec![
                SphereSpec {
                    center: [0.1, 0.3, 3.6],
                    radius: 0.6,
                    motion: SphereMotion::Linear { velocity: [0.0, -0.12, 0.0], start_frame: 0 },
                },
                SphereSpec::fixed([-1.5, 0.2, 5.5], 0.8),
                SphereSpec::fixed([1.6, 0.1, 6.0], 0.9),
                SphereSpec::fixed([0.2, -1.2, 7.5], 1.2),
            ],
            noise: NoiseConfig::default(),
            mobility_threshold: 0.01,
            graph_window: 4,
            graph_stride: 2,
            track_grid: 20,
            query_frames: vec![0, 2, 4, 6],
            seed: 0,
        }
    }

    /// 30 frames at 128x96 with three spheres (linear, sinusoidal, static).
    pub fn medium() -> Self {
        Self {
            width: 128,
            height: 96,
            frames: 30,
            focal: 110.0,
            camera: CameraPath { kind: CameraPathKind::Orbit, magnitude: 0.6, target: [0.0, 0.2, 4.5], radius: 4.5 },
            ground_y: 1.0,
            wall_z: 10.0,
            spheres: vec![
                SphereSpec {
                    center: [-1.0, 0.3, 4.0],
                    radius: 0.5,
                    motion: SphereMotion::Linear { velocity: [0.04, -0.03, 0.0], start_frame: 0 },
                },
                SphereSpec {
                    center: [1.0, 0.2, 5.0],
                    radius: 0.6,
                    motion: SphereMotion::Sinusoidal { amplitude: [0.0, 0.3, 0.2], period: 15.0, phase: 0.0 },
                },
                SphereSpec {
                    center: [0.2, 0.5, 6.0],
                    radius: 0.45,
                    motion: SphereMotion::Linear { velocity: [0.0, 0.0, 0.0], start_frame: 0 },
                },
            ],
            noise: NoiseConfig::default(),
            mobility_threshold: 0.01,
            graph_window: 4,
            graph_stride: 2,
            track_grid: 20,
            query_frames: vec![0, 10, 20],
            seed: 0,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Small => Self::small(),
            Preset::Medium => Self::medium(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("resolution {}x{} below 16x16", self.width, self.height));
        }
        if self.frames < 2 {
            return bad(format!("{} frames; need at least 2", self.frames));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return bad(format!("focal {} must be positive", self.focal));
        }
        if self.graph_window < 1 || self.graph_stride < 1 {
            return bad("graph window and stride must be >= 1".into());
        }
        if self.track_grid < 1 {
            return bad("track grid must be >= 1".into());
        }
        if let Some(q) = self.query_frames.iter().find(|&&q| q >= self.frames) {
            return bad(format!("query frame {q} outside the video"));
        }
        let n = &self.noise;
        for (name, v) in [
            ("pointmap_sigma", n.pointmap_sigma),
            ("flow_sigma", n.flow_sigma),
            ("track_jitter", n.track_jitter),
            ("mobility_threshold", self.mobility_threshold),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&n.outlier_fraction) {
            return bad(format!("outlier_fraction {} outside [0, 1]", n.outlier_fraction));
        }
        for (k, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                return bad(format!("sphere {k} radius must be positive"));
            }
            if let SphereMotion::Sinusoidal { period, .. } = s.motion {
                if !(period > 0.0) {
                    return bad(format!("sphere {k} period must be positive"));
                }
            }
        }
        Ok(())
    }
}

/// Surface hit by a camera ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Wall,
    Sphere(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Camera-frame depth (z) of the hit.
    pub depth: f64,
    pub surface: Surface,
    pub world: Vector3<f64>,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Analytic scene at full precision.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub config: SynthConfig,
    poses: Vec<CameraPose>,
}

impl SynthScene {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let poses = (0..config.frames).map(|t| camera_pose(&config, t)).collect();
        let scene = Self { config, poses };
        for t in 0..scene.num_frames() {
            for k in 0..scene.config.spheres.len() {
                let c = scene.pose(t).inverse_transform_point(&scene.sphere_center(k, t));
                if c.z <= scene.config.spheres[k].radius {
                    return Err(Error::InvalidInput(format!("sphere {k} reaches behind camera {t}")));
                }
            }
        }
        Ok(scene)
    }

    pub fn num_frames(&self) -> usize {
        self.config.frames
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.config.focal, self.config.width, self.config.height)
    }

    pub fn pose(&self, t: usize) -> &CameraPose {
        &self.poses[t]
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn sphere_center(&self, k: usize, t: usize) -> Vector3<f64> {
        let s = &self.config.spheres[k];
        let c0 = v3(s.center);
        match s.motion {
            SphereMotion::Linear { velocity, start_frame } => c0 + v3(velocity) * t.saturating_sub(start_frame) as f64,
            SphereMotion::Sinusoidal { amplitude, period, phase } => {
                c0 + v3(amplitude) * (TAU * t as f64 / period + phase).sin()
            }
        }
    }

    /// World displacement of sphere `k` between frames `t − 1` and `t`,
    /// evaluated from the motion law.
    pub fn sphere_step(&self, k: usize, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        match self.config.spheres[k].motion {
            SphereMotion::Linear { velocity, start_frame } => {
                if t > start_frame {
                    v3(velocity).norm()
                } else {
                    0.0
                }
            }
            SphereMotion::Sinusoidal { amplitude, period, phase } => {
                let a = (TAU * t as f64 / period + phase).sin() - (TAU * (t - 1) as f64 / period + phase).sin();
                v3(amplitude).norm() * a.abs()
            }
        }
    }

    /// Mobility rule: dynamic iff the larger of the backward and forward
    /// displacement exceeds the threshold.
    pub fn sphere_dynamic(&self, k: usize, t: usize) -> bool {
        let back = self.sphere_step(k, t);
        let fwd = if t + 1 < self.num_frames() { self.sphere_step(k, t + 1) } else { 0.0 };
        back.max(fwd) > self.config.mobility_threshold
    }

    pub fn surface_dynamic(&self, s: Surface, t: usize) -> bool {
        match s {
            Surface::Sphere(k) => self.sphere_dynamic(k, t),
            _ => false,
        }
    }

    /// Nearest surface along the ray through sub-pixel `p` of frame `t`.
    pub fn ray_cast(&self, t: usize, p: Vector2<f64>) -> Option<Hit> {
        let k = self.intrinsics();
        let pose = self.pose(t);
        let r = pose.rotation_matrix();
        // ray parameter equals camera depth because the camera-frame direction has z = 1
        let dir_cam = Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0);
        let d = r * dir_cam;
        let o = pose.translation;
        let mut best: Option<(f64, Surface)> = None;
        let mut consider = |s: f64, surf: Surface| {
            if s > 1e-9 && best.is_none_or(|(b, _)| s < b) {
                best = Some((s, surf));
            }
        };
        if d.y.abs() > 1e-15 {
            consider((self.config.ground_y - o.y) / d.y, Surface::Ground);
        }
        if d.z.abs() > 1e-15 {
            consider((self.config.wall_z - o.z) / d.z, Surface::Wall);
        }
        for (idx, sph) in self.config.spheres.iter().enumerate() {
            let c = self.sphere_center(idx, t);
            let oc = o - c;
            let a = d.norm_squared();
            let b = d.dot(&oc);
            let cc = oc.norm_squared() - sph.radius * sph.radius;
            let disc = b * b - a * cc;
            if disc >= 0.0 {
                let s = (-b - disc.sqrt()) / a;
                consider(s, Surface::Sphere(idx));
            }
        }
        best.map(|(s, surface)| Hit { depth: s, surface, world: o + d * s })
    }

    fn hits(&self, t: usize) -> Vec<Option<Hit>> {
        let (w, h) = (self.width(), self.height());
        (0..w * h).map(|px| self.ray_cast(t, Vector2::new((px % w) as f64, (px / w) as f64))).collect()
    }

    /// Position at frame `to` of the surface point `hit` observed at `from`.
    pub fn move_point(&self, hit: &Hit, from: usize, to: usize) -> Vector3<f64> {
        match hit.surface {
            Surface::Sphere(k) => hit.world - self.sphere_center(k, from) + self.sphere_center(k, to),
            _ => hit.world,
        }
    }

    pub fn depth(&self, t: usize) -> Grid<f64> {
        let hits = self.hits(t);
        Grid::from_vec(self.width(), self.height(), hits.iter().map(|h| h.map_or(0.0, |h| h.depth)).collect())
            .expect("frame grid")
    }

    /// Dynamic-object silhouette of frame `t`.
    pub fn motion_mask(&self, t: usize) -> MotionMask {
        let hits = self.hits(t);
        let dynamic = hits.iter().map(|h| h.is_some_and(|h| self.surface_dynamic(h.surface, t))).collect();
        MotionMask::new(t, Grid::from_vec(self.width(), self.height(), dynamic).expect("frame grid"))
    }

    /// Projection of a world point into frame `t` with its camera depth.
    fn project(&self, t: usize, x: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
        let c = self.pose(t).inverse_transform_point(x);
        if c.z <= 1e-9 {
            return None;
        }
        let k = self.intrinsics();
        Some((Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy), c.z))
    }

    /// Exact flow `from → to`: each pixel's surface point is carried along
    /// its object's motion and projected into `to`.
    pub fn flow(&self, from: usize, to: usize) -> FlowField {
        let (w, h) = (self.width(), self.height());
        let hits = self.hits(from);
        let mut valid = Grid::filled(w, h, false);
        let disp = Grid::from_fn(w, h, |i, j| {
            let Some(hit) = hits[j * w + i] else { return Vector2::zeros() };
            match self.project(to, &self.move_point(&hit, from, to)) {
                Some((p, _)) => {
                    *valid.get_mut(i, j) = true;
                    p - Vector2::new(i as f64, j as f64)
                }
                None => Vector2::zeros(),
            }
        });
        FlowField::new(from, to, disp, valid).expect("finite flow")
    }

    /// Whether the world point `x` is the first surface seen through its
    /// projection in frame `t`.
    fn visible(&self, t: usize, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        let (p, z) = self.project(t, x)?;
        let (w, h) = (self.width() as f64, self.height() as f64);
        let tol = 1e-9;
        if !(p.x >= -tol && p.y >= -tol && p.x <= w - 1.0 + tol && p.y <= h - 1.0 + tol) {
            return None;
        }
        let p = Vector2::new(p.x.clamp(0.0, w - 1.0), p.y.clamp(0.0, h - 1.0));
        let hit = self.ray_cast(t, p)?;
        ((hit.depth - z).abs() <= 1e-6 * z.max(1.0)).then_some(p)
    }
}

fn camera_pose(cfg: &SynthConfig, t: usize) -> CameraPose {
    let u = if cfg.frames > 1 { t as f64 / (cfg.frames - 1) as f64 - 0.5 } else { 0.0 };
    let down = Vector3::new(0.0, 1.0, 0.0);
    match cfg.camera.kind {
        CameraPathKind::Orbit => {
            let target = v3(cfg.camera.target);
            let theta = cfg.camera.magnitude * u;
            let eye = target + cfg.camera.radius * Vector3::new(theta.sin(), -target.y / cfg.camera.radius, -theta.cos());
            CameraPose::look_at(eye, target, down)
        }
        CameraPathKind::Pan => {
            let eye = Vector3::new(cfg.camera.magnitude * u, 0.0, 0.0);
            CameraPose::look_at(eye, eye + Vector3::z(), down)
        }
        CameraPathKind::Static => CameraPose::look_at(Vector3::zeros(), Vector3::z(), down),
    }
}

/// Independent generator per `(kind, index)`.
fn substream(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 48) ^ index);
    rng
}

const STREAM_PAIR: u64 = 1;
const STREAM_FLOW: u64 = 2;
const STREAM_QUERY: u64 = 3;
const STREAM_TRACK: u64 = 4;

/// Per-cell query pixels: the maximum of `grad` (lowest row-major index on
/// ties) plus one uniformly random pixel. Partial cells at the right and
/// bottom borders are included.
pub fn sample_query_points(grad: &Grid<f64>, grid: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let (w, h) = (grad.width(), grad.height());
    let grid = grid.max(1);
    let mut out = Vec::new();
    for cy in (0..h).step_by(grid) {
        for cx in (0..w).step_by(grid) {
            let (x1, y1) = ((cx + grid).min(w), (cy + grid).min(h));
            let mut best = (cx, cy);
            let mut best_v = f64::NEG_INFINITY;
            for j in cy..y1 {
                for i in cx..x1 {
                    let v = *grad.get(i, j);
                    if v > best_v {
                        best_v = v;
                        best = (i, j);
                    }
                }
            }
            out.push(best);
            out.push((rng.random_range(cx..x1), rng.random_range(cy..y1)));
        }
    }
    out
}

/// Central-difference gradient magnitude with one-sided borders.
pub fn gradient_magnitude(img: &Grid<f64>) -> Grid<f64> {
    let (w, h) = (img.width(), img.height());
    Grid::from_fn(w, h, |i, j| {
        let (il, ir) = (i.saturating_sub(1), (i + 1).min(w - 1));
        let (ju, jd) = (j.saturating_sub(1), (j + 1).min(h - 1));
        let gx = (img.get(ir, j) - img.get(il, j)) / (ir - il).max(1) as f64;
        let gy = (img.get(i, jd) - img.get(i, ju)) / (jd - ju).max(1) as f64;
        (gx * gx + gy * gy).sqrt()
    })
}

fn gaussian3(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Unit-variance 3-vector noise field, optionally correlated through a
/// bilinearly interpolated lattice with the given spacing.
fn noise_field(w: usize, h: usize, cell: usize, rng: &mut impl Rng) -> Grid<Vector3<f64>> {
    if cell == 0 {
        return Grid::from_fn(w, h, |_, _| gaussian3(rng));
    }
    let nx = (w - 1).div_ceil(cell) + 1;
    let ny = (h - 1).div_ceil(cell) + 1;
    let lattice = Grid::from_fn(nx, ny, |_, _| gaussian3(rng));
    Grid::from_fn(w, h, |i, j| {
        let (u, v) = (i as f64 / cell as f64, j as f64 / cell as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        let mut acc = Vector3::zeros();
        let mut norm = 0.0;
        for (a, b, wt) in taps {
            acc += lattice.get(a, b) * wt;
            norm += wt * wt;
        }
        acc / norm.sqrt()
    })
}

/// Pixels closer than this (Chebyshev distance) to a change of surface are
/// not used as track queries.
const QUERY_BOUNDARY_MARGIN: usize = 2;

/// Pixels whose neighbourhood of the given radius lies on a single surface.
fn surface_interior(hits: &[Option<Hit>], w: usize, h: usize, radius: usize) -> Grid<bool> {
    let label = |i: usize, j: usize| hits[j * w + i].map(|x| x.surface);
    Grid::from_fn(w, h, |i, j| {
        let own = label(i, j);
        if own.is_none() {
            return false;
        }
        let (i0, i1) = (i.saturating_sub(radius), (i + radius).min(w - 1));
        let (j0, j1) = (j.saturating_sub(radius), (j + radius).min(h - 1));
        (j0..=j1).all(|b| (i0..=i1).all(|a| label(a, b) == own))
    })
}

struct TrackBuild {
    exact: TrackSet,
    input: TrackSet,
}

fn build_tracks(scene: &SynthScene, all_hits: &[Vec<Option<Hit>>]) -> Result<TrackBuild> {
    let cfg = &scene.config;
    let (w, h, nf) = (scene.width(), scene.height(), scene.num_frames());
    let mut anchors: Vec<(Hit, usize)> = Vec::new();
    for &q in &cfg.query_frames {
        let depth = scene.depth(q);
        let interior = surface_interior(&all_hits[q], w, h, QUERY_BOUNDARY_MARGIN);
        let mut grad = gradient_magnitude(&depth);
        for (g, &ok) in grad.data_mut().iter_mut().zip(interior.data()) {
            if !ok {
                *g = 0.0;
            }
        }
        let mut rng = substream(cfg.seed, STREAM_QUERY, q as u64);
        for (i, j) in sample_query_points(&grad, cfg.track_grid, &mut rng) {
            if !*interior.get(i, j) {
                continue;
            }
            if let Some(hit) = all_hits[q][j * w + i] {
                anchors.push((hit, q));
            }
        }
    }
    let n = anchors.len();
    let rows: Vec<Vec<(Vector2<f64>, bool, bool)>> = anchors
        .par_iter()
        .map(|(hit, q)| {
            (0..nf)
                .map(|t| {
                    let x = scene.move_point(hit, *q, t);
                    let dynamic = scene.surface_dynamic(hit.surface, t);
                    match scene.visible(t, &x) {
                        Some(p) => (p, true, dynamic),
                        None => (scene.project(t, &x).map_or(Vector2::zeros(), |(p, _)| p), false, dynamic),
                    }
                })
                .collect()
        })
        .collect();
    let mut positions = Vec::with_capacity(n * nf);
    let mut visibility = Vec::with_capacity(n * nf);
    let mut mobility = Vec::with_capacity(n * nf);
    for row in &rows {
        for &(p, v, d) in row {
            positions.push(p);
            visibility.push(v);
            mobility.push(d);
        }
    }
    let confidence: Vec<f64> = visibility.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let query: Vec<usize> = anchors.iter().map(|&(_, q)| q).collect();
    let exact = TrackSet::new(n, nf, positions.clone(), visibility.clone(), confidence.clone(), mobility.clone(), query.clone())?;

    let mut rng = substream(cfg.seed, STREAM_TRACK, 0);
    let noise = &cfg.noise;
    let noisy: Vec<Vector2<f64>> = positions
        .iter()
        .zip(&visibility)
        .map(|(p, &v)| {
            let mut p = *p;
            if v && noise.track_jitter > 0.0 {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                p += Vector2::new(dx, dy) * noise.track_jitter;
            }
            if noise.outlier_fraction > 0.0 && rng.random_bool(noise.outlier_fraction) {
                p = Vector2::new(rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64));
            }
            p
        })
        .collect();
    let input = TrackSet::new(n, nf, noisy, visibility, confidence, mobility, query)?;
    Ok(TrackBuild { exact, input })
}

fn pair_prediction(scene: &SynthScene, hits: &[Vec<Option<Hit>>], (n, m): (usize, usize), e: usize) -> Result<PairPrediction> {
    let cfg = &scene.config;
    let (w, h) = (scene.width(), scene.height());
    let ref_pose = scene.pose(n);
    let mut rng = substream(cfg.seed, STREAM_PAIR, e as u64);
    let sigma = cfg.noise.pointmap_sigma;
    let make = |t: usize, rng: &mut ChaCha8Rng| -> Result<Pointmap> {
        let field = (sigma > 0.0).then(|| noise_field(w, h, cfg.noise.pointmap_noise_cell, rng));
        let mut valid = Grid::filled(w, h, false);
        let pts = Grid::from_fn(w, h, |i, j| match hits[t][j * w + i] {
            Some(hit) => {
                *valid.get_mut(i, j) = true;
                let x = ref_pose.inverse_transform_point(&hit.world);
                match &field {
                    Some(f) => x + f.get(i, j) * (sigma * x.z.abs()),
                    None => x,
                }
            }
            None => Vector3::zeros(),
        });
        Pointmap::new(pts, valid, FrameTag::PairLocal { reference: n })
    };
    let pn = make(n, &mut rng)?;
    let pm = make(m, &mut rng)?;
    let conf = 1.0 / (1.0 + sigma);
    PairPrediction::new((n, m), pn, pm, ConfidenceMap::uniform(w, h, conf), ConfidenceMap::uniform(w, h, conf))
}

fn noisy_flow(scene: &SynthScene, from: usize, to: usize, idx: usize) -> Result<FlowField> {
    let exact = scene.flow(from, to);
    let sigma = scene.config.noise.flow_sigma;
    if sigma == 0.0 {
        return Ok(exact);
    }
    let mut rng = substream(scene.config.seed, STREAM_FLOW, idx as u64);
    let disp = exact.displacement().map(|d| {
        let dx: f64 = StandardNormal.sample(&mut rng);
        let dy: f64 = StandardNormal.sample(&mut rng);
        d + Vector2::new(dx, dy) * sigma
    });
    FlowField::new(from, to, disp, exact.valid().clone())
}

/// Builds the in-memory scene and its inputs.
pub fn generate(cfg: &SynthConfig) -> Result<(SynthScene, SceneData)> {
    let scene = SynthScene::new(cfg.clone())?;
    let (w, h, nf) = (scene.width(), scene.height(), scene.num_frames());
    let graph = SceneGraph::build(nf, cfg.graph_window, cfg.graph_stride)?;
    let hits: Vec<Vec<Option<Hit>>> = (0..nf).into_par_iter().map(|t| scene.hits(t)).collect();
    if let Some(t) = hits.iter().position(|hs| hs.iter().all(Option::is_none)) {
        return Err(Error::EmptyInput(format!("frame {t} sees no geometry")));
    }

    let pairs = graph
        .edges()
        .par_iter()
        .enumerate()
        .map(|(e, &edge)| pair_prediction(&scene, &hits, edge, e))
        .collect::<Result<Vec<_>>>()?;
    let directed = graph.directed_pairs();
    let flow_list = directed
        .par_iter()
        .enumerate()
        .map(|(k, &(a, b))| noisy_flow(&scene, a, b, k))
        .collect::<Result<Vec<_>>>()?;
    let flows: FlowSet = directed.into_iter().zip(flow_list).collect();
    let tracks = build_tracks(&scene, &hits)?;

    let depth = (0..nf)
        .map(|t| {
            let values = Grid::from_vec(w, h, hits[t].iter().map(|x| x.map_or(0.0, |x| x.depth)).collect())?;
            DepthMap::from_values(values)
        })
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = GroundTruth {
        depth,
        poses: scene.poses().to_vec(),
        intrinsics: vec![scene.intrinsics(); nf],
        masks: (0..nf).map(|t| scene.motion_mask(t)).collect(),
        tracks: Some(tracks.exact),
    };
    let data = SceneData { width: w, height: h, graph, pairs, flows, tracks: tracks.input, ground_truth: Some(ground_truth) };
    Ok((scene, data))
}

/// Generates a scene and writes it in the container layout. Returns the
/// in-memory inputs.
pub fn generate_scene(cfg: &SynthConfig, dir: &std::path::Path) -> Result<SceneData> {
    let (_, data) = generate(cfg)?;
    save_scene(dir, &data)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ego_flow, unproject};

    fn static_cfg() -> SynthConfig {
        SynthConfig {
            camera: CameraPath { kind: CameraPathKind::Static, magnitude: 0.0, target: default_orbit_target(), radius: 4.0 },
            spheres: vec![],
            ..SynthConfig::small()
        }
    }

    #[test]
    fn static_config_has_zero_flow_and_no_mobility() {
        let (_, data) = generate(&static_cfg()).unwrap();
        for f in data.flows.values() {
            assert!(f.displacement().data().iter().all(|d| d.norm() < 1e-9));
        }
        assert!(data.tracks.mobility().iter().all(|&m| !m));
    }

    #[test]
    fn slow_sphere_is_static_and_threshold_is_strict() {
        let mut cfg = SynthConfig::small();
        cfg.spheres[0].motion = SphereMotion::Linear { velocity: [0.005, 0.0, 0.0], start_frame: 0 };
        let scene = SynthScene::new(cfg.clone()).unwrap();
        assert!((0..8).all(|t| !scene.sphere_dynamic(0, t)));
        cfg.spheres[0].motion = SphereMotion::Linear { velocity: [0.0, 0.01, 0.0], start_frame: 0 };
        let scene = SynthScene::new(cfg.clone()).unwrap();
        assert!((0..8).all(|t| !scene.sphere_dynamic(0, t)));
        cfg.spheres[0].motion = SphereMotion::Linear { velocity: [0.0, 0.0101, 0.0], start_frame: 0 };
        let scene = SynthScene::new(cfg).unwrap();
        assert!((0..8).all(|t| scene.sphere_dynamic(0, t)));
    }

    #[test]
    fn on_axis_sphere_depth_is_distance_minus_radius() {
        let mut cfg = static_cfg();
        cfg.width = 65;
        cfg.height = 49;
        cfg.spheres = vec![SphereSpec {
            center: [0.0, 0.0, 3.0],
            radius: 0.7,
            motion: SphereMotion::Linear { velocity: [0.0; 3], start_frame: 0 },
        }];
        let scene = SynthScene::new(cfg).unwrap();
        let hit = scene.ray_cast(0, Vector2::new(32.0, 24.0)).unwrap();
        assert_eq!(hit.surface, Surface::Sphere(0));
        assert!((hit.depth - 2.3).abs() < 1e-12);
    }

    #[test]
    fn query_sampling_counts_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flat = Grid::filled(40, 40, 0.0);
        let q = sample_query_points(&flat, 20, &mut rng);
        assert_eq!(q.len(), 8);
        assert_eq!(q[0], (0, 0));
        assert_eq!(q[2], (20, 0));
        let mut spike = Grid::filled(40, 40, 0.0);
        *spike.get_mut(27, 33) = 5.0;
        let q = sample_query_points(&spike, 20, &mut rng);
        assert_eq!(q[6], (27, 33));
        assert_eq!(sample_query_points(&Grid::filled(64, 48, 0.0), 20, &mut rng).len(), 24);
    }

    #[test]
    fn noiseless_inputs_are_self_consistent() {
        let (scene, data) = generate(&SynthConfig::small()).unwrap();
        let gt = data.ground_truth.as_ref().unwrap();
        let k = scene.intrinsics();
        for (t, tp) in data.graph.directed_pairs() {
            let ego = ego_flow(&gt.depth[t], &k, scene.pose(t), scene.pose(tp), &k, t, tp).unwrap();
            let flow = &data.flows[&(t, tp)];
            for j in 0..scene.height() {
                for i in 0..scene.width() {
                    if gt.masks[t].is_dynamic(i, j) || !*flow.valid().get(i, j) {
                        continue;
                    }
                    let d = ego.displacement().get(i, j) - flow.displacement().get(i, j);
                    assert!(d.norm() < 1e-8, "pixel ({i},{j}) of {t}->{tp}: {d}");
                }
            }
        }
        // pair pointmaps map onto the world pointmaps through the reference pose
        for p in &data.pairs {
            let (n, m) = p.edge;
            for (t, pm) in [(n, &p.pointmap_n), (m, &p.pointmap_m)] {
                let world = unproject(&gt.depth[t], &k, scene.pose(t));
                for (a, b) in pm.points().data().iter().zip(world.points().data()) {
                    assert!((scene.pose(n).transform_point(a) - b).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = SynthConfig::small();
        cfg.noise = NoiseConfig { pointmap_sigma: 0.01, pointmap_noise_cell: 16, flow_sigma: 0.5, track_jitter: 0.3, outlier_fraction: 0.05 };
        cfg.seed = 11;
        let (_, a) = generate(&cfg).unwrap();
        let (_, b) = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn correlated_noise_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sum = 0.0;
        let mut n = 0;
        for _ in 0..20 {
            let f = noise_field(64, 48, 16, &mut rng);
            for v in f.data() {
                sum += v.norm_squared();
                n += 3;
            }
        }
        let var = sum / n as f64;
        assert!((var - 1.0).abs() < 0.15, "variance {var}");
    }

    #[test]
    fn sphere_behind_camera_is_rejected() {
        let mut cfg = SynthConfig::small();
        cfg.spheres[0].center = [0.0, 0.0, -2.0];
        assert!(SynthScene::new(cfg).is_err());
    }
}
