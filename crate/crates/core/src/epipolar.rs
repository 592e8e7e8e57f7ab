//! Robust two-view geometry and correspondence-guided motion masks.
//!
//! A fundamental matrix is fitted by Least Median of Squares to flow
//! correspondences of tracks labelled static. Flow vectors that violate the
//! resulting epipolar geometry (large Sampson error) mark moving pixels. The
//! final mask of a frame is the union over every graph neighbour.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::bilinear_sample;
use crate::scene::{FlowField, FlowSet, Grid, MotionMask, SceneGraph, TrackSet};
use crate::{Error, Result};

/// Minimal sample size of the linear solver.
pub const MIN_CORRESPONDENCES: usize = 8;

/// Denominator floor below which the Sampson error is reported as infinite.
const SAMPSON_DENOM_FLOOR: f64 = 1e-18;

/// Absolute floor on the inlier distance threshold, pixels. Keeps noiseless
/// fits from rejecting points whose residual is pure round-off.
const MIN_INLIER_DISTANCE: f64 = 1e-6;

/// Sampson approximation of the squared geometric epipolar error, pixels².
///
/// `x` lives in the first image, `xp` in the second, and `F` satisfies
/// `xpᵀ F x = 0`. Returns `+∞` when both points sit on the epipoles.
pub fn sampson_error(f: &Matrix3<f64>, x: &Vector2<f64>, xp: &Vector2<f64>) -> f64 {
    let xh = Vector3::new(x.x, x.y, 1.0);
    let xph = Vector3::new(xp.x, xp.y, 1.0);
    let fx = f * xh;
    let ftxp = f.transpose() * xph;
    let num = xph.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftxp.x * ftxp.x + ftxp.y * ftxp.y;
    if den < SAMPSON_DENOM_FLOOR {
        return f64::INFINITY;
    }
    num * num / den
}

/// Rank-2 fundamental matrix with unit Frobenius norm. The sign is fixed so
/// the entry of largest magnitude is positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v"));
        let mut s = svd.singular_values;
        let smallest = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).expect("3 values");
        s[smallest] = 0.0;
        let mut r2 = u * Matrix3::from_diagonal(&s) * v_t;
        let norm = r2.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate("fundamental matrix has zero norm".into()));
        }
        r2 /= norm;
        let (mut best, mut mag) = (0, 0.0);
        for k in 0..9 {
            if r2[k].abs() > mag {
                mag = r2[k].abs();
                best = k;
            }
        }
        if r2[best] < 0.0 {
            r2 = -r2;
        }
        Ok(Self(r2))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn sampson(&self, x: &Vector2<f64>, xp: &Vector2<f64>) -> f64 {
        sampson_error(&self.0, x, xp)
    }
}

/// Result of the LMedS fit.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustFit {
    pub f: FundamentalMatrix,
    pub inliers: Vec<bool>,
    /// Robust standard deviation of the epipolar distance, pixels.
    pub robust_scale: f64,
    /// Median Sampson error of the best minimal sample, pixels².
    pub median_residual: f64,
}

impl RobustFit {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Hartley similarity: zero mean, mean distance √2.
fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn apply_h(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

#[inline]
fn design_row(x: &Vector2<f64>, xp: &Vector2<f64>) -> [f64; 9] {
    [xp.x * x.x, xp.x * x.y, xp.x, xp.y * x.x, xp.y * x.y, xp.y, x.x, x.y, 1.0]
}

fn reshape(f: &[f64]) -> Matrix3<f64> {
    Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8])
}

/// Null vector of an 8-row normalized system, or `None` when the null space
/// is more than one-dimensional.
fn solve_minimal(x: &[Vector2<f64>], xp: &[Vector2<f64>], idx: &[usize]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for (r, &k) in idx.iter().enumerate() {
        let row = design_row(&x[k], &xp[k]);
        for c in 0..9 {
            a[(r, c)] = row[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&p, &q| sv[q].total_cmp(&sv[p]));
    // sv[order[8]] is ~0 by construction (zero padding row); order[7] must not be
    if !(sv[order[0]] > 0.0) || sv[order[7]] <= 1e-10 * sv[order[0]] {
        return None;
    }
    let f: Vec<f64> = (0..9).map(|c| v_t[(order[8], c)]).collect();
    Some(reshape(&f))
}

/// Least-squares normalized 8-point solve over all given points.
fn solve_least_squares(x: &[Vector2<f64>], xp: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = x.len();
    let rows = n.max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for k in 0..n {
        let row = design_row(&x[k], &xp[k]);
        for c in 0..9 {
            a[(k, c)] = row[c];
        }
    }
    // AᵀA keeps the eigen-problem 9x9 regardless of the number of inliers.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    if eig.eigenvalues[order[1]] <= 1e-20 * eig.eigenvalues[order[8]].abs() {
        return None;
    }
    let f: Vec<f64> = (0..9).map(|r| eig.eigenvectors[(r, order[0])]).collect();
    Some(reshape(&f))
}

/// Normalized 8-point estimate over all correspondences (least squares when
/// more than eight).
pub fn eight_point(correspondences: &[(Vector2<f64>, Vector2<f64>)]) -> Result<FundamentalMatrix> {
    let n = correspondences.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientData { needed: MIN_CORRESPONDENCES, got: n });
    }
    let (x, xp): (Vec<_>, Vec<_>) = correspondences.iter().copied().unzip();
    let t1 = normalizing_transform(&x);
    let t2 = normalizing_transform(&xp);
    let xn: Vec<_> = x.iter().map(|p| apply_h(&t1, p)).collect();
    let xpn: Vec<_> = xp.iter().map(|p| apply_h(&t2, p)).collect();
    let fnorm = solve_least_squares(&xn, &xpn).ok_or_else(|| Error::Degenerate("rank-deficient 8-point system".into()))?;
    let fnorm = FundamentalMatrix::new(fnorm)?;
    FundamentalMatrix::new(t2.transpose() * fnorm.matrix() * t1)
}

/// Number of random minimal samples: 99% confidence of drawing one
/// outlier-free sample at the 50% breakdown point, capped by `max_samples`
/// and by the number of distinct subsets.
pub fn lmeds_sample_count(max_samples: usize, n: usize) -> usize {
    let needed = ((1.0f64 - 0.99).ln() / (1.0f64 - 0.5f64.powi(8)).ln()).ceil() as usize;
    let mut subsets: u128 = 1;
    for k in 0..MIN_CORRESPONDENCES as u128 {
        subsets = subsets * (n as u128 - k) / (k + 1);
        if subsets > needed as u128 {
            break;
        }
    }
    needed.min(max_samples).min(subsets.min(usize::MAX as u128) as usize).max(1)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[values.len() / 2]
}

/// Least Median of Squares fundamental matrix with a final least-squares
/// refit on the inliers. Deterministic for a given seed.
pub fn estimate_fundamental_lmeds(
    correspondences: &[(Vector2<f64>, Vector2<f64>)],
    max_samples: usize,
    seed: u64,
) -> Result<RobustFit> {
    let n = correspondences.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientData { needed: MIN_CORRESPONDENCES, got: n });
    }
    let (x, xp): (Vec<_>, Vec<_>) = correspondences.iter().copied().unzip();
    let t1 = normalizing_transform(&x);
    let t2 = normalizing_transform(&xp);
    let xn: Vec<_> = x.iter().map(|p| apply_h(&t1, p)).collect();
    let xpn: Vec<_> = xp.iter().map(|p| apply_h(&t2, p)).collect();

    let samples = lmeds_sample_count(max_samples, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, FundamentalMatrix)> = None;
    let mut errors = vec![0.0; n];
    for _ in 0..samples {
        let idx = sample(&mut rng, n, MIN_CORRESPONDENCES).into_vec();
        let Some(fnorm) = solve_minimal(&xn, &xpn, &idx) else { continue };
        let Ok(fnorm) = FundamentalMatrix::new(fnorm) else { continue };
        let Ok(f) = FundamentalMatrix::new(t2.transpose() * fnorm.matrix() * t1) else { continue };
        for (e, (a, b)) in errors.iter_mut().zip(correspondences) {
            *e = f.sampson(a, b);
        }
        let med = median(&mut errors);
        if !med.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(m, _)| med < *m) {
            best = Some((med, f));
        }
    }
    let (median_residual, f_best) =
        best.ok_or_else(|| Error::Degenerate("every sampled 8-point system was rank-deficient".into()))?;

    let dof = n.saturating_sub(MIN_CORRESPONDENCES).max(1) as f64;
    let robust_scale = 1.4826 * (1.0 + 5.0 / dof) * median_residual.sqrt();
    let threshold = (2.5 * robust_scale).max(MIN_INLIER_DISTANCE);
    let inliers: Vec<bool> =
        correspondences.iter().map(|(a, b)| f_best.sampson(a, b).sqrt() < threshold).collect();

    let inlier_count = inliers.iter().filter(|&&b| b).count();
    if inlier_count < MIN_CORRESPONDENCES {
        return Err(Error::InsufficientData { needed: MIN_CORRESPONDENCES, got: inlier_count });
    }
    let selected: Vec<_> = correspondences.iter().zip(&inliers).filter(|(_, &keep)| keep).map(|(c, _)| *c).collect();
    let f = eight_point(&selected).unwrap_or(f_best);
    Ok(RobustFit { f, inliers, robust_scale, median_residual })
}

/// Motion-mask thresholds and sampling.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Absolute epipolar-distance floor, pixels.
    pub abs_threshold: f64,
    /// Multiple of the robust scale.
    pub kappa: f64,
    pub median_filter: bool,
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { abs_threshold: 1.0, kappa: 3.0, median_filter: true, max_samples: 1177, seed: 0 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_threshold >= 0.0 && self.kappa >= 0.0 && self.abs_threshold.is_finite() && self.kappa.is_finite()) {
            return Err(Error::InvalidInput("mask thresholds must be finite and non-negative".into()));
        }
        if self.max_samples == 0 {
            return Err(Error::InvalidInput("mask max_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Error map and thresholded mask for one directed pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMask {
    /// Sampson error per pixel; NaN where flow is invalid.
    pub error: Grid<f64>,
    pub raw: Grid<bool>,
    /// `None` when the fallback all-static mask was emitted.
    pub fit: Option<RobustFit>,
}

fn pair_seed(base: u64, from: usize, to: usize) -> u64 {
    // splitmix64 over the pair id
    let mut z = base ^ ((from as u64) << 32 | to as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn track_correspondences(flow: &FlowField, tracks: &TrackSet, static_only: bool) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let t = flow.from;
    let mut out = Vec::new();
    for n in 0..tracks.num_tracks() {
        if !tracks.visible(n, t) || (static_only && tracks.dynamic(n, t)) {
            continue;
        }
        let p = tracks.position(n, t);
        if let Some(d) = bilinear_sample(flow.displacement(), Some(flow.valid()), p.x, p.y) {
            out.push((p, p + d));
        }
    }
    out
}

/// Epipolar error map and raw motion mask of frame `flow.from` against
/// `flow.to`.
pub fn motion_mask_for_pair(flow: &FlowField, tracks: &TrackSet, cfg: &MaskConfig) -> Result<PairMask> {
    let (w, h) = (flow.width(), flow.height());
    if !flow.valid().data().iter().any(|&v| v) {
        return Err(Error::EmptyInput(format!("{} has no valid pixels", flow.key())));
    }
    if flow.from >= tracks.num_frames() {
        return Err(Error::InvalidInput(format!("tracks do not cover frame {}", flow.from)));
    }
    let all_static = || PairMask { error: Grid::filled(w, h, 0.0), raw: Grid::filled(w, h, false), fit: None };

    let mut corr = track_correspondences(flow, tracks, true);
    if corr.len() < MIN_CORRESPONDENCES {
        log::warn!("{}: only {} static tracks, using all visible tracks", flow.key(), corr.len());
        corr = track_correspondences(flow, tracks, false);
    }
    if corr.len() < MIN_CORRESPONDENCES {
        log::warn!("{}: only {} usable tracks, emitting an all-static mask", flow.key(), corr.len());
        return Ok(all_static());
    }
    let fit = match estimate_fundamental_lmeds(&corr, cfg.max_samples, pair_seed(cfg.seed, flow.from, flow.to)) {
        Ok(fit) => fit,
        Err(e) => {
            log::warn!("{}: fundamental matrix fit failed ({e}), emitting an all-static mask", flow.key());
            return Ok(all_static());
        }
    };
    if fit.median_residual < 1e-6 {
        log::debug!("{}: median epipolar residual {:.3e} (exact flow or near-pure rotation)", flow.key(), fit.median_residual);
    }

    let threshold = cfg.abs_threshold.max(cfg.kappa * fit.robust_scale);
    let mut error = Grid::filled(w, h, f64::NAN);
    let mut raw = Grid::filled(w, h, false);
    for j in 0..h {
        for i in 0..w {
            if !*flow.valid().get(i, j) {
                continue;
            }
            let p = Vector2::new(i as f64, j as f64);
            let e = fit.f.sampson(&p, &(p + flow.displacement().get(i, j)));
            *error.get_mut(i, j) = e;
            *raw.get_mut(i, j) = e.sqrt() > threshold;
        }
    }
    Ok(PairMask { error, raw, fit: Some(fit) })
}

/// 3x3 majority filter with replicated borders.
pub fn median_filter_3x3(mask: &Grid<bool>) -> Grid<bool> {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    Grid::from_fn(mask.width(), mask.height(), |i, j| {
        let mut count = 0;
        for dj in -1..=1isize {
            for di in -1..=1isize {
                let ii = (i as isize + di).clamp(0, w - 1) as usize;
                let jj = (j as isize + dj).clamp(0, h - 1) as usize;
                count += *mask.get(ii, jj) as usize;
            }
        }
        count >= 5
    })
}

/// Union of the pair masks of frame `t` against every graph neighbour.
pub fn motion_mask_for_frame(
    t: usize,
    graph: &SceneGraph,
    flows: &FlowSet,
    tracks: &TrackSet,
    cfg: &MaskConfig,
) -> Result<MotionMask> {
    let mut union: Option<Grid<bool>> = None;
    for (_, other) in graph.neighbors(t) {
        let flow = flows.get(&(t, other)).ok_or_else(|| Error::MissingEntry(format!("flow_{t}_{other}")))?;
        let pair = motion_mask_for_pair(flow, tracks, cfg)?;
        union = Some(match union {
            None => pair.raw,
            Some(mut acc) => {
                if !acc.same_shape(&pair.raw) {
                    return Err(Error::ShapeMismatch(format!("flow_{t}_{other} resolution differs")));
                }
                for (a, b) in acc.data_mut().iter_mut().zip(pair.raw.data()) {
                    *a |= *b;
                }
                acc
            }
        });
    }
    let union = union.ok_or_else(|| Error::InvalidInput(format!("frame {t} has no graph neighbours")))?;
    let dynamic = if cfg.median_filter { median_filter_3x3(&union) } else { union };
    Ok(MotionMask::new(t, dynamic))
}

/// Masks for every frame; frames are processed in parallel.
pub fn motion_masks(graph: &SceneGraph, flows: &FlowSet, tracks: &TrackSet, cfg: &MaskConfig) -> Result<Vec<MotionMask>> {
    cfg.validate()?;
    (0..graph.num_frames()).into_par_iter().map(|t| motion_mask_for_frame(t, graph, flows, tracks, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::skew;
    use nalgebra::Rotation3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn project(k: &Matrix3<f64>, p: &Vector3<f64>) -> Vector2<f64> {
        let q = k * p;
        Vector2::new(q.x / q.z, q.y / q.z)
    }

    /// Points seen by camera 1 at the origin and camera 2 at `x2 = R x1 + t`.
    fn two_view(
        rng: &mut impl Rng,
        n: usize,
        r: &Matrix3<f64>,
        t: &Vector3<f64>,
        k: &Matrix3<f64>,
    ) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        (0..n)
            .map(|_| {
                let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..8.0));
                (project(k, &p), project(k, &(r * p + t)))
            })
            .collect()
    }

    fn closed_form_f(k: &Matrix3<f64>, r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix3<f64> {
        let kinv = k.try_inverse().unwrap();
        kinv.transpose() * skew(t) * r * kinv
    }

    #[test]
    fn sampson_zero_on_exact_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = Matrix3::new(300.0, 0.0, 160.0, 0.0, 300.0, 120.0, 0.0, 0.0, 1.0);
        let r = Rotation3::from_scaled_axis(Vector3::new(0.05, -0.1, 0.02)).into_inner();
        let t = Vector3::new(0.5, 0.1, 0.05);
        let f = closed_form_f(&k, &r, &t);
        for (a, b) in two_view(&mut rng, 50, &r, &t, &k) {
            assert!(sampson_error(&f, &a, &b) < 1e-12);
        }
    }

    #[test]
    fn sampson_translation_example_scalar_oracle() {
        let f = skew(&Vector3::new(1.0, 0.0, 0.0));
        let (x, y, xp, yp) = (0.0, 0.0, 0.0, 1.0);
        // explicit scalar evaluation of the formula for F = [[0,0,0],[0,0,-1],[0,1,0]]
        let fx = [0.0, -1.0, y];
        let ftxp = [0.0, 1.0, -yp];
        let num: f64 = xp * fx[0] + yp * fx[1] + 1.0 * fx[2];
        let expected = num * num / (fx[0] * fx[0] + fx[1] * fx[1] + ftxp[0] * ftxp[0] + ftxp[1] * ftxp[1]);
        let _ = x;
        assert_eq!(expected, 0.5);
        let got = sampson_error(&f, &Vector2::new(0.0, 0.0), &Vector2::new(0.0, 1.0));
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn sampson_swap_symmetry_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let f = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let x = Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let xp = Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let a = sampson_error(&f, &x, &xp);
            let b = sampson_error(&f.transpose(), &xp, &x);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            let lambda = rng.random_range(-10.0..10.0);
            let c = sampson_error(&(f * lambda), &x, &xp);
            assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn sampson_at_epipoles_is_infinite() {
        let f = skew(&Vector3::new(1.0, 0.0, 0.0));
        // the epipole of [t]x for t = x-axis is at infinity; use a finite-epipole matrix
        let _ = f;
        let f = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(sampson_error(&f, &Vector2::new(0.0, 0.0), &Vector2::new(0.0, 0.0)).is_infinite());
    }

    #[test]
    fn lmeds_recovers_pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = Matrix3::identity();
        let t = Vector3::new(1.0, 0.0, 0.0);
        let corr = two_view(&mut rng, 60, &Matrix3::identity(), &t, &k);
        let fit = estimate_fundamental_lmeds(&corr, 1177, 3).unwrap();
        let expected = FundamentalMatrix::new(skew(&t)).unwrap();
        assert!((fit.f.matrix() - expected.matrix()).abs().max() < 1e-8);
        let worst = corr
            .iter()
            .zip(&fit.inliers)
            .filter(|(_, &i)| i)
            .map(|((a, b), _)| fit.f.sampson(a, b))
            .fold(0.0, f64::max);
        assert!(worst < 1e-8);
        assert_eq!(fit.num_inliers(), 60);
    }

    fn outlier_scene(seed: u64, outlier_frac: f64, sigma: f64) -> (Vec<(Vector2<f64>, Vector2<f64>)>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0);
        let r = Rotation3::from_scaled_axis(Vector3::new(0.02, 0.08, -0.01)).into_inner();
        let t = Vector3::new(0.6, 0.1, 0.1);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut corr = two_view(&mut rng, 100, &r, &t, &k);
        let n_out = (100.0 * outlier_frac).round() as usize;
        let mut truth = vec![true; 100];
        for (idx, c) in corr.iter_mut().enumerate() {
            if idx < n_out {
                c.1 = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                truth[idx] = false;
            } else {
                c.0 += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                c.1 += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        (corr, truth)
    }

    fn f1(pred: &[bool], truth: &[bool]) -> f64 {
        let tp = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(&p, &t)| p && !t).count() as f64;
        let fneg = pred.iter().zip(truth).filter(|(&p, &t)| !p && t).count() as f64;
        2.0 * tp / (2.0 * tp + fp + fneg)
    }

    #[test]
    fn lmeds_classifies_outliers() {
        let (corr, truth) = outlier_scene(1, 0.3, 0.5);
        let fit = estimate_fundamental_lmeds(&corr, 1177, 9).unwrap();
        assert!(f1(&fit.inliers, &truth) > 0.95, "F1 {}", f1(&fit.inliers, &truth));
    }

    #[test]
    fn lmeds_breakdown_tolerance() {
        let sigma = 0.5;
        for frac in [0.1, 0.3, 0.45] {
            let (corr, truth) = outlier_scene(17, frac, sigma);
            let fit = estimate_fundamental_lmeds(&corr, 1177, 5).unwrap();
            let mut inlier_res: Vec<f64> =
                corr.iter().zip(&truth).filter(|(_, &t)| t).map(|((a, b), _)| fit.f.sampson(a, b)).collect();
            let med = median(&mut inlier_res);
            assert!(med < 3.0 * sigma * sigma, "outlier fraction {frac}: median inlier residual {med}");
        }
    }

    #[test]
    fn lmeds_insufficient_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corr = two_view(&mut rng, 7, &Matrix3::identity(), &Vector3::x(), &Matrix3::identity());
        assert!(matches!(
            estimate_fundamental_lmeds(&corr, 100, 0),
            Err(Error::InsufficientData { needed: 8, got: 7 })
        ));
    }

    #[test]
    fn lmeds_is_deterministic() {
        let (corr, _) = outlier_scene(3, 0.3, 0.5);
        let a = estimate_fundamental_lmeds(&corr, 500, 42).unwrap();
        let b = estimate_fundamental_lmeds(&corr, 500, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_count_default() {
        assert_eq!(lmeds_sample_count(usize::MAX, 1000), 1177);
        assert_eq!(lmeds_sample_count(100, 1000), 100);
        assert_eq!(lmeds_sample_count(5000, 8), 1);
        assert_eq!(lmeds_sample_count(5000, 9), 9);
    }

    #[test]
    fn median_filter_removes_isolated_pixels() {
        let mut g = Grid::filled(5, 5, false);
        *g.get_mut(2, 2) = true;
        assert!(!median_filter_3x3(&g).data().iter().any(|&b| b));
        let full = Grid::from_fn(6, 6, |i, j| (1..5).contains(&i) && (1..5).contains(&j));
        let out = median_filter_3x3(&full);
        assert!(*out.get(2, 2) && *out.get(1, 2));
    }
}
