//! Pose, depth, segmentation, mobility and point-tracking metrics.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{umeyama_align, Similarity};
use crate::io::{Reconstruction, SceneData};
use crate::scene::{CameraPose, DepthMap, MotionMask, TrackSet};
use crate::{Error, Result};

/// Pixel thresholds of the position-accuracy and Jaccard metrics.
pub const TAP_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Side length of the square evaluation resolution for tracking metrics.
pub const TAP_EVAL_SIZE: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub ate: f64,
    pub rpe_trans: f64,
    pub rpe_rot_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    pub delta_125: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DepthAlignment {
    /// Least-squares scale and shift.
    ScaleShift,
    /// Median ratio.
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub scale_shift: DepthMetrics,
    pub scale: DepthMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapMetrics {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pose: Option<PoseMetrics>,
    pub depth: Option<DepthReport>,
    pub mask_iou: Option<f64>,
    pub d_acc: Option<f64>,
    pub tap: Option<TapMetrics>,
}

fn centers(poses: &[CameraPose]) -> Vec<Vector3<f64>> {
    poses.iter().map(|p| p.translation).collect()
}

fn principal_direction(pts: &[Vector3<f64>], mu: &Vector3<f64>) -> Vector3<f64> {
    let cov = pts.iter().fold(Matrix3::zeros(), |a, p| a + (p - mu) * (p - mu).transpose());
    let eig = cov.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    eig.eigenvectors.column(k).into_owned()
}

fn rms_spread(pts: &[Vector3<f64>], mu: &Vector3<f64>) -> f64 {
    (pts.iter().map(|p| (p - mu).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt()
}

/// Alignment for trajectories whose centres do not span a plane: centroids,
/// principal directions and RMS spread.
fn degenerate_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Similarity {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let (ss, sd) = (rms_spread(src, &mu_s), rms_spread(dst, &mu_d));
    if ss <= 1e-300 || sd <= 1e-300 {
        return Similarity { scale: 1.0, rotation: Matrix3::identity(), translation: mu_d - mu_s };
    }
    let a = principal_direction(src, &mu_s);
    let mut b = principal_direction(dst, &mu_d);
    let corr: f64 = src.iter().zip(dst).map(|(s, d)| a.dot(&(s - mu_s)) * b.dot(&(d - mu_d))).sum();
    if corr < 0.0 {
        b = -b;
    }
    let rotation = Rotation3::rotation_between(&a, &b).unwrap_or_else(|| {
        let perp = if a.x.abs() < 0.9 { a.cross(&Vector3::x()) } else { a.cross(&Vector3::y()) };
        Rotation3::from_axis_angle(&Unit::new_normalize(perp), std::f64::consts::PI)
    });
    let scale = sd / ss;
    let rotation = *rotation.matrix();
    Similarity { scale, rotation, translation: mu_d - scale * rotation * mu_s }
}

/// Sim(3) alignment of estimated camera centres onto ground truth.
pub fn align_trajectory(est: &[CameraPose], gt: &[CameraPose]) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} estimated vs {} reference poses", est.len(), gt.len())));
    }
    if est.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: est.len() });
    }
    let (src, dst) = (centers(est), centers(gt));
    match umeyama_align(&src, &dst, None, true) {
        Ok(s) => Ok(s),
        Err(Error::Degenerate(_)) => {
            warn!("trajectory alignment is degenerate; using centroid, principal direction and spread");
            Ok(degenerate_alignment(&src, &dst))
        }
        Err(e) => Err(e),
    }
}

/// Absolute trajectory error: RMSE of camera centres after Sim(3) alignment.
pub fn ate(est: &[CameraPose], gt: &[CameraPose]) -> Result<f64> {
    let s = align_trajectory(est, gt)?;
    let sq: f64 = est.iter().zip(gt).map(|(e, g)| (s.apply(&e.translation) - g.translation).norm_squared()).sum();
    Ok((sq / est.len() as f64).sqrt())
}

/// Relative pose error over steps of `delta` frames, with estimated
/// translations scaled by `scale`. Returns `(trans, rot_deg)`.
pub fn rpe_scaled(est: &[CameraPose], gt: &[CameraPose], delta: usize, scale: f64) -> Result<(f64, f64)> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} estimated vs {} reference poses", est.len(), gt.len())));
    }
    if delta == 0 || est.len() < delta + 1 {
        return Err(Error::InsufficientData { needed: delta.max(1) + 1, got: est.len() });
    }
    let scaled: Vec<CameraPose> = est.iter().map(|p| CameraPose::new(p.rotation, p.translation * scale)).collect();
    let (mut st, mut sr) = (0.0, 0.0);
    let n = est.len() - delta;
    for i in 0..n {
        let q = gt[i].inverse().compose(&gt[i + delta]);
        let p = scaled[i].inverse().compose(&scaled[i + delta]);
        let e = q.inverse().compose(&p);
        st += e.translation.norm_squared();
        sr += e.rotation.angle().to_degrees().powi(2);
    }
    Ok(((st / n as f64).sqrt(), (sr / n as f64).sqrt()))
}

/// Relative pose error using the scale of the ATE alignment.
pub fn rpe(est: &[CameraPose], gt: &[CameraPose], delta: usize) -> Result<(f64, f64)> {
    let s = align_trajectory(est, gt)?;
    rpe_scaled(est, gt, delta, s.scale)
}

pub fn pose_metrics(est: &[CameraPose], gt: &[CameraPose]) -> Result<PoseMetrics> {
    let s = align_trajectory(est, gt)?;
    let sq: f64 = est.iter().zip(gt).map(|(e, g)| (s.apply(&e.translation) - g.translation).norm_squared()).sum();
    let (rpe_trans, rpe_rot_deg) = rpe_scaled(est, gt, 1, s.scale)?;
    Ok(PoseMetrics { ate: (sq / est.len() as f64).sqrt(), rpe_trans, rpe_rot_deg })
}

fn paired_depths(est: &[DepthMap], gt: &[DepthMap]) -> Result<Vec<Vec<(f64, f64)>>> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} estimated vs {} reference depth maps", est.len(), gt.len())));
    }
    est.iter()
        .zip(gt)
        .enumerate()
        .map(|(t, (e, g))| {
            if e.width() != g.width() || e.height() != g.height() {
                return Err(Error::ShapeMismatch(format!("depth map {t} resolution differs")));
            }
            Ok((0..g.values().len())
                .filter(|&k| g.valid().data()[k] && e.valid().data()[k])
                .map(|k| (e.values().data()[k], g.values().data()[k]))
                .collect())
        })
        .collect()
}

/// Global depth alignment `(s, b)` with `d̂ = s·d + b`.
pub fn depth_alignment(est: &[DepthMap], gt: &[DepthMap], mode: DepthAlignment) -> Result<(f64, f64)> {
    let pairs: Vec<(f64, f64)> = paired_depths(est, gt)?.into_iter().flatten().collect();
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no pixel is valid in both depth sequences".into()));
    }
    match mode {
        DepthAlignment::Scale => {
            let mut r: Vec<f64> = pairs.iter().map(|(e, g)| g / e).collect();
            r.sort_by(f64::total_cmp);
            Ok((r[r.len() / 2], 0.0))
        }
        DepthAlignment::ScaleShift => {
            let n = pairs.len() as f64;
            let (se, sg) = pairs.iter().fold((0.0, 0.0), |(a, b), (e, g)| (a + e, b + g));
            let (me, mg) = (se / n, sg / n);
            let (mut cov, mut var) = (0.0, 0.0);
            for (e, g) in &pairs {
                cov += (e - me) * (g - mg);
                var += (e - me) * (e - me);
            }
            if var <= 0.0 {
                return Ok((1.0, mg - me));
            }
            let s = cov / var;
            Ok((s, mg - s * me))
        }
    }
}

/// AbsRel, RMSE and δ<1.25 after one global alignment, computed per frame
/// and averaged over frames with valid pixels.
pub fn depth_metrics(est: &[DepthMap], gt: &[DepthMap], mode: DepthAlignment) -> Result<DepthMetrics> {
    let (s, b) = depth_alignment(est, gt, mode)?;
    let frames = paired_depths(est, gt)?;
    let per: Vec<DepthMetrics> = frames
        .par_iter()
        .filter(|f| !f.is_empty())
        .map(|f| {
            let n = f.len() as f64;
            let (mut abs_rel, mut sq, mut inl) = (0.0, 0.0, 0usize);
            for &(e, g) in f {
                let d = s * e + b;
                abs_rel += (d - g).abs() / g;
                sq += (d - g).powi(2);
                if d > 0.0 && (d / g).max(g / d) < 1.25 {
                    inl += 1;
                }
            }
            DepthMetrics { abs_rel: abs_rel / n, rmse: (sq / n).sqrt(), delta_125: inl as f64 / n }
        })
        .collect();
    let n = per.len() as f64;
    Ok(DepthMetrics {
        abs_rel: per.iter().map(|m| m.abs_rel).sum::<f64>() / n,
        rmse: per.iter().map(|m| m.rmse).sum::<f64>() / n,
        delta_125: per.iter().map(|m| m.delta_125).sum::<f64>() / n,
    })
}

/// Intersection over union; two empty masks score 1.
pub fn mask_iou(pred: &MotionMask, gt: &MotionMask) -> Result<f64> {
    if !pred.dynamic().same_shape(gt.dynamic()) {
        return Err(Error::ShapeMismatch("mask resolutions differ".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.dynamic().data().iter().zip(gt.dynamic().data()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean IoU over frames.
pub fn mean_mask_iou(pred: &[MotionMask], gt: &[MotionMask]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} predicted vs {} reference masks", pred.len(), gt.len())));
    }
    let ious = pred.iter().zip(gt).map(|(p, g)| mask_iou(p, g)).collect::<Result<Vec<_>>>()?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Mobility accuracy `(TP + TN) / (TP + TN + FP + FN)` over entries where
/// `visible` holds.
pub fn d_acc(pred: &[bool], gt: &[bool], visible: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || gt.len() != visible.len() {
        return Err(Error::ShapeMismatch("mobility label arrays differ in length".into()));
    }
    let (mut hit, mut n) = (0usize, 0usize);
    for k in 0..gt.len() {
        if visible[k] {
            n += 1;
            hit += (pred[k] == gt[k]) as usize;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no visible track entries".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Mobility predicted by sampling the motion masks at the track positions
/// (nearest pixel, clamped to the image).
pub fn mobility_from_masks(tracks: &TrackSet, masks: &[MotionMask]) -> Result<Vec<bool>> {
    if masks.len() != tracks.num_frames() {
        return Err(Error::ShapeMismatch(format!("{} masks for {} track frames", masks.len(), tracks.num_frames())));
    }
    let mut out = Vec::with_capacity(tracks.num_tracks() * tracks.num_frames());
    for n in 0..tracks.num_tracks() {
        for (t, m) in masks.iter().enumerate() {
            let p = tracks.position(n, t);
            let (w, h) = (m.dynamic().width(), m.dynamic().height());
            let i = p.x.round().clamp(0.0, (w - 1) as f64) as usize;
            let j = p.y.round().clamp(0.0, (h - 1) as f64) as usize;
            out.push(m.is_dynamic(i, j));
        }
    }
    Ok(out)
}

/// Occlusion accuracy, position accuracy and average Jaccard. With
/// `resolution = Some((w, h))` positions are first rescaled to the 256x256
/// evaluation grid; `None` uses them as given.
pub fn tap_metrics(pred: &TrackSet, gt: &TrackSet, resolution: Option<(usize, usize)>) -> Result<TapMetrics> {
    if pred.num_tracks() != gt.num_tracks() || pred.num_frames() != gt.num_frames() {
        return Err(Error::ShapeMismatch(format!(
            "predicted tracks {}x{} vs reference {}x{}",
            pred.num_tracks(),
            pred.num_frames(),
            gt.num_tracks(),
            gt.num_frames()
        )));
    }
    let entries = gt.num_tracks() * gt.num_frames();
    if entries == 0 {
        return Err(Error::EmptyInput("no track entries".into()));
    }
    let scale = resolution.map_or(Vector2::new(1.0, 1.0), |(w, h)| {
        Vector2::new(TAP_EVAL_SIZE / w as f64, TAP_EVAL_SIZE / h as f64)
    });
    let (pv, gv) = (pred.visibility(), gt.visibility());
    let dist: Vec<f64> = pred
        .positions()
        .iter()
        .zip(gt.positions())
        .map(|(a, b)| (a - b).component_mul(&scale).norm())
        .collect();
    let oa = pv.iter().zip(gv).filter(|(a, b)| a == b).count() as f64 / entries as f64;
    let gt_vis = gv.iter().filter(|&&v| v).count();
    let (mut delta_sum, mut aj_sum) = (0.0, 0.0);
    for thr in TAP_THRESHOLDS {
        let (mut within_vis, mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for k in 0..entries {
            let close = dist[k] < thr;
            if gv[k] && close {
                within_vis += 1;
            }
            match (pv[k], gv[k] && close) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, _) => {}
            }
            if gv[k] && !(pv[k] && close) {
                fn_ += 1;
            }
        }
        delta_sum += if gt_vis == 0 { 1.0 } else { within_vis as f64 / gt_vis as f64 };
        let denom = tp + fp + fn_;
        aj_sum += if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
    }
    let k = TAP_THRESHOLDS.len() as f64;
    Ok(TapMetrics { aj: aj_sum / k, delta_avg: delta_sum / k, oa })
}

/// Every metric the ground truth supports.
pub fn evaluate(pred: &Reconstruction, gt_scene: &SceneData) -> Result<MetricsReport> {
    let gt = gt_scene
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::MissingEntry("ground_truth".into()))?;
    if pred.num_frames() != gt.poses.len() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction has {} frames, ground truth {}",
            pred.num_frames(),
            gt.poses.len()
        )));
    }
    let mut report = MetricsReport::default();
    if gt.poses.len() >= 3 {
        report.pose = Some(pose_metrics(&pred.poses, &gt.poses)?);
    }
    report.depth = Some(DepthReport {
        scale_shift: depth_metrics(&pred.depth, &gt.depth, DepthAlignment::ScaleShift)?,
        scale: depth_metrics(&pred.depth, &gt.depth, DepthAlignment::Scale)?,
    });
    report.mask_iou = Some(mean_mask_iou(&pred.masks, &gt.masks)?);
    if let Some(gt_tracks) = &gt.tracks {
        if gt_tracks.num_tracks() > 0 && gt_tracks.num_tracks() == pred.tracks.num_tracks() {
            let mob = mobility_from_masks(&pred.tracks, &pred.masks)?;
            report.d_acc = d_acc(&mob, gt_tracks.mobility(), gt_tracks.visibility()).ok();
            report.tap = Some(tap_metrics(&pred.tracks, gt_tracks, Some((pred.width, pred.height)))?);
        }
    }
    Ok(report)
}

impl MetricsReport {
    /// Flat `key=value` lines; rates are reported in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| v * 100.0;
        if let Some(p) = &self.pose {
            let _ = writeln!(s, "ate={:.6}", p.ate);
            let _ = writeln!(s, "rpe_trans={:.6}", p.rpe_trans);
            let _ = writeln!(s, "rpe_rot_deg={:.6}", p.rpe_rot_deg);
        }
        if let Some(d) = &self.depth {
            for (name, m) in [("scale_shift", &d.scale_shift), ("scale", &d.scale)] {
                let _ = writeln!(s, "depth_{name}_abs_rel={:.6}", m.abs_rel);
                let _ = writeln!(s, "depth_{name}_rmse={:.6}", m.rmse);
                let _ = writeln!(s, "depth_{name}_delta_125={:.4}", pct(m.delta_125));
            }
        }
        if let Some(v) = self.mask_iou {
            let _ = writeln!(s, "mask_iou={:.4}", pct(v));
        }
        if let Some(v) = self.d_acc {
            let _ = writeln!(s, "d_acc={:.4}", pct(v));
        }
        if let Some(t) = &self.tap {
            let _ = writeln!(s, "tap_aj={:.4}", pct(t.aj));
            let _ = writeln!(s, "tap_delta_avg={:.4}", pct(t.delta_avg));
            let _ = writeln!(s, "tap_oa={:.4}", pct(t.oa));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Grid;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orbit(n: usize) -> Vec<CameraPose> {
        (0..n)
            .map(|k| {
                let a = k as f64 * 0.3;
                let eye = Vector3::new(3.0 * a.sin(), 0.2 * (k as f64).cos(), -3.0 * a.cos());
                CameraPose::look_at(eye, Vector3::zeros(), Vector3::y())
            })
            .collect()
    }

    fn apply_sim(p: &CameraPose, s: f64, r: &UnitQuaternion<f64>, t: &Vector3<f64>) -> CameraPose {
        CameraPose::new(r * p.rotation, s * (r * p.translation) + t)
    }

    #[test]
    fn ate_is_zero_for_identical_and_similar_trajectories() {
        let gt = orbit(10);
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = UnitQuaternion::from_scaled_axis(Vector3::new(rng.random(), rng.random(), rng.random()) * 2.0);
            let s = rng.random_range(0.1..10.0);
            let t = Vector3::new(rng.random(), rng.random(), rng.random()) * 5.0;
            let est: Vec<CameraPose> = gt.iter().map(|p| apply_sim(p, s, &r, &t)).collect();
            assert!(ate(&est, &gt).unwrap() < 1e-10);
        }
    }

    #[test]
    fn ate_matches_direct_rmse_for_symmetric_offsets() {
        // offsets along the normal of a planar trajectory, alternating sign
        let gt: Vec<CameraPose> = (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                CameraPose::new(UnitQuaternion::identity(), Vector3::new(a.cos(), a.sin(), 0.0) * 2.0)
            })
            .collect();
        let r = 0.01;
        let est: Vec<CameraPose> = gt
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                CameraPose::new(p.rotation, p.translation + Vector3::z() * (sign * r))
            })
            .collect();
        // optimal alignment: R = I, t = 0, s = 4/(4 + r²), leaving error 2r/√(4 + r²)
        let v = ate(&est, &gt).unwrap();
        let expect = 2.0 * r / (4.0 + r * r).sqrt();
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn collinear_trajectory_uses_the_fallback() {
        let gt: Vec<CameraPose> =
            (0..5).map(|k| CameraPose::new(UnitQuaternion::identity(), Vector3::x() * k as f64)).collect();
        let est: Vec<CameraPose> =
            (0..5).map(|k| CameraPose::new(UnitQuaternion::identity(), Vector3::y() * (2.0 * k as f64) + Vector3::z())).collect();
        assert!(ate(&est, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn rpe_examples() {
        let gt = orbit(6);
        let (t0, r0) = rpe(&gt, &gt, 1).unwrap();
        assert!(t0 < 1e-12 && r0 < 1e-12);
        let doubled: Vec<CameraPose> = gt.iter().map(|p| CameraPose::new(p.rotation, p.translation * 2.0)).collect();
        assert!(rpe(&doubled, &gt, 1).unwrap().0 < 1e-12);
        // extra 1 degree per step about the camera z axis
        let gt: Vec<CameraPose> =
            (0..6).map(|k| CameraPose::new(UnitQuaternion::identity(), Vector3::new(k as f64, (k * k) as f64 * 0.1, 0.0))).collect();
        let est: Vec<CameraPose> = gt
            .iter()
            .enumerate()
            .map(|(k, p)| {
                CameraPose::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), (k as f64).to_radians()), p.translation)
            })
            .collect();
        let (_, rot) = rpe_scaled(&est, &gt, 1, 1.0).unwrap();
        assert!((rot - 1.0).abs() < 1e-9, "{rot}");
    }

    fn depth(values: Vec<f64>) -> DepthMap {
        DepthMap::from_values(Grid::from_vec(3, 2, values).unwrap()).unwrap()
    }

    #[test]
    fn depth_metric_examples() {
        let gt = vec![depth(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), depth(vec![2.0, 2.5, 3.0, 1.5, 5.0, 7.0])];
        for mode in [DepthAlignment::Scale, DepthAlignment::ScaleShift] {
            let m = depth_metrics(&gt, &gt, mode).unwrap();
            assert!(m.abs_rel < 1e-12 && m.rmse < 1e-12);
            assert_eq!(m.delta_125, 1.0);
            let twice: Vec<DepthMap> = gt.iter().map(|d| depth(d.values().data().iter().map(|v| 2.0 * v).collect())).collect();
            let m = depth_metrics(&twice, &gt, mode).unwrap();
            assert!(m.abs_rel < 1e-12 && m.rmse < 1e-12);
        }
        let shifted: Vec<DepthMap> = gt.iter().map(|d| depth(d.values().data().iter().map(|v| v + 0.5).collect())).collect();
        let m = depth_metrics(&shifted, &gt, DepthAlignment::ScaleShift).unwrap();
        assert!(m.abs_rel < 1e-12);
        let m = depth_metrics(&shifted, &gt, DepthAlignment::Scale).unwrap();
        // direct oracle: median of gt / (gt + 0.5) over all 12 pixels, then per-frame means
        let mut ratios: Vec<f64> = gt.iter().flat_map(|d| d.values().data().iter().map(|g| g / (g + 0.5))).collect();
        ratios.sort_by(f64::total_cmp);
        let s = ratios[6];
        let mut expect = 0.0;
        for d in &gt {
            expect += d.values().data().iter().map(|g| (s * (g + 0.5) - g).abs() / g).sum::<f64>() / 6.0;
        }
        expect /= 2.0;
        assert!(m.abs_rel > 0.0);
        assert!((m.abs_rel - expect).abs() < 1e-12);
    }

    fn mask(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> MotionMask {
        MotionMask::new(0, Grid::from_fn(w, h, f))
    }

    #[test]
    fn iou_examples() {
        let a = mask(10, 10, |i, j| i < 4 && j < 5);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b = mask(10, 10, |i, j| i >= 6 && j < 5);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.0);
        // half-overlapping equal rectangles
        let c = mask(10, 10, |i, j| (2..6).contains(&i) && j < 5);
        assert!((mask_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let e = mask(10, 10, |_, _| false);
        assert_eq!(mask_iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn d_acc_examples() {
        let gt = [true, false, true, false];
        let vis = [true; 4];
        assert_eq!(d_acc(&gt, &gt, &vis).unwrap(), 1.0);
        let inv: Vec<bool> = gt.iter().map(|b| !b).collect();
        assert_eq!(d_acc(&inv, &gt, &vis).unwrap(), 0.0);
        assert_eq!(d_acc(&[true, false, true, true], &gt, &vis).unwrap(), 0.75);
        assert!(d_acc(&gt, &gt, &[false; 4]).is_err());
        // invisible entries are ignored
        assert_eq!(d_acc(&[false, false, true, false], &gt, &[false, true, true, true]).unwrap(), 1.0);
    }

    fn tracks(pos: Vec<Vector2<f64>>, vis: Vec<bool>) -> TrackSet {
        let n = pos.len() / 2;
        let conf = vec![1.0; pos.len()];
        let mob = vec![false; pos.len()];
        TrackSet::new(n, 2, pos, vis, conf, mob, vec![0; n]).unwrap()
    }

    #[test]
    fn tap_examples() {
        let pos: Vec<Vector2<f64>> = (0..8).map(|k| Vector2::new(10.0 + k as f64, 20.0)).collect();
        let gt = tracks(pos.clone(), vec![true; 8]);
        let m = tap_metrics(&gt, &gt, None).unwrap();
        assert_eq!((m.aj, m.delta_avg, m.oa), (1.0, 1.0, 1.0));
        let off = tracks(pos.iter().map(|p| p + Vector2::new(3.0, 0.0)).collect(), vec![true; 8]);
        let m = tap_metrics(&off, &gt, None).unwrap();
        assert!((m.delta_avg - 0.6).abs() < 1e-15);
        assert_eq!(m.oa, 1.0);
        let hidden = tracks(pos, vec![false; 8]);
        assert_eq!(tap_metrics(&hidden, &gt, None).unwrap().oa, 0.0);
    }

    proptest! {
        #[test]
        fn rates_are_bounded_and_iou_symmetric(bits_a in proptest::collection::vec(any::<bool>(), 48), bits_b in proptest::collection::vec(any::<bool>(), 48)) {
            let a = MotionMask::new(0, Grid::from_vec(8, 6, bits_a.clone()).unwrap());
            let b = MotionMask::new(0, Grid::from_vec(8, 6, bits_b.clone()).unwrap());
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if let Ok(acc) = d_acc(&bits_a, &bits_b, &[true; 48]) {
                prop_assert!((0.0..=1.0).contains(&acc));
            }
        }

        #[test]
        fn depth_metrics_are_scale_invariant(scale in 0.01f64..100.0, shift in -0.5f64..0.5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt: Vec<DepthMap> = (0..2).map(|_| depth((0..6).map(|_| rng.random_range(1.0..5.0)).collect())).collect();
            let est: Vec<DepthMap> = gt.iter().map(|d| depth(d.values().data().iter().map(|v| v * rng.random_range(0.9..1.1)).collect())).collect();
            let scaled: Vec<DepthMap> = est.iter().map(|d| depth(d.values().data().iter().map(|v| v * scale).collect())).collect();
            let moved: Vec<DepthMap> = scaled.iter().map(|d| depth(d.values().data().iter().map(|v| v + shift + 1.0).collect())).collect();
            let base = depth_metrics(&est, &gt, DepthAlignment::Scale).unwrap();
            let s = depth_metrics(&scaled, &gt, DepthAlignment::Scale).unwrap();
            prop_assert!((base.abs_rel - s.abs_rel).abs() < 1e-9);
            let base = depth_metrics(&est, &gt, DepthAlignment::ScaleShift).unwrap();
            let m = depth_metrics(&moved, &gt, DepthAlignment::ScaleShift).unwrap();
            prop_assert!((base.abs_rel - m.abs_rel).abs() < 1e-9);
            prop_assert!((base.rmse - m.rmse).abs() < 1e-9);
        }
    }
}
