//! Loss terms over a [`SceneEstimate`] with analytic gradients.
//!
//! - global alignment (GA): confidence-weighted distance between each frame's
//!   world pointmap and the scaled, rigidly transformed pair predictions;
//! - camera movement alignment (CMA): L1 gap between ego-motion flow and
//!   input flow on static pixels;
//! - camera trajectory smoothness (CTS): rotation and translation changes
//!   between consecutive world-to-camera poses;
//! - point trajectory smoothness (PTS): L1 distance to smoothed targets.
//!
//! Per-pixel terms are means over their valid pixels. Work units are
//! evaluated in parallel and reduced in a fixed order, so results do not
//! depend on the number of worker threads.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::MIN_FRONT_DEPTH;
use crate::scene::{
    EdgeGradient, FlowSet, FrameGradient, MotionMask, PairPrediction, Pointmap, SceneEstimate, SceneGradient,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ga: f64,
    pub cma: f64,
    pub cts: f64,
    pub pts: f64,
}

impl LossWeights {
    pub const STAGE1: Self = Self { ga: 1.0, cma: 0.01, cts: 0.01, pts: 0.0 };
    pub const STAGE2: Self = Self { ga: 0.0, cma: 0.0, cts: 0.0, pts: 1.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("ga", self.ga), ("cma", self.cma), ("cts", self.cts), ("pts", self.pts)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidInput(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ga: f64,
    pub cma: f64,
    pub cts: f64,
    pub pts: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted term values; skipped terms read 0.
    pub terms: LossTerms,
    pub gradient: SceneGradient,
}

/// Inputs of the objective other than the state.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveData<'a> {
    pub pairs: &'a [PairPrediction],
    pub flows: &'a FlowSet,
    pub masks: &'a [MotionMask],
    /// Smoothed world pointmaps, required when the PTS weight is non-zero.
    pub targets: Option<&'a [Pointmap]>,
}

/// Sparse gradient contribution of one work unit.
#[derive(Default)]
struct Partial {
    value: f64,
    frames: Vec<(usize, FrameGradient)>,
    edges: Vec<(usize, EdgeGradient)>,
}

fn reduce(state: &SceneEstimate, parts: Vec<Partial>) -> (f64, SceneGradient) {
    let mut grad = state.zero_gradient();
    let mut value = 0.0;
    for p in parts {
        value += p.value;
        for (t, g) in p.frames {
            let dst = &mut grad.frames[t];
            for (a, b) in dst.depth.iter_mut().zip(&g.depth) {
                *a += b;
            }
            dst.focal += g.focal;
            dst.rotation += g.rotation;
            dst.translation += g.translation;
        }
        for (e, g) in p.edges {
            let dst = &mut grad.edges[e];
            dst.scale += g.scale;
            dst.rotation += g.rotation;
            dst.translation += g.translation;
        }
    }
    (value, grad)
}

/// Accumulates `∂L/∂X` at one pixel of a frame into that frame's gradient.
struct FrameBackprop {
    rot_t: Matrix3<f64>,
    grad: FrameGradient,
}

impl FrameBackprop {
    fn new(state: &SceneEstimate, t: usize) -> Self {
        Self {
            rot_t: state.pose(t).rotation_matrix().transpose(),
            grad: FrameGradient { depth: vec![0.0; state.num_pixels()], ..Default::default() },
        }
    }

    /// `y` is the camera-frame point of pixel `px`, `g` the world-point gradient.
    #[inline]
    fn add(&mut self, px: usize, y: &Vector3<f64>, g: &Vector3<f64>) {
        let h = self.rot_t * g;
        self.grad.depth[px] += h.dot(y);
        self.grad.focal -= h.x * y.x + h.y * y.y;
        self.grad.rotation += y.cross(&h);
        self.grad.translation += g;
    }

    fn scaled(mut self, s: f64) -> FrameGradient {
        for d in &mut self.grad.depth {
            *d *= s;
        }
        self.grad.focal *= s;
        self.grad.rotation *= s;
        self.grad.translation *= s;
        self.grad
    }
}

/// Camera-frame point of pixel `(i, j)` of frame `t`, or `None` if invalid.
#[inline]
fn camera_point(state: &SceneEstimate, t: usize, i: usize, j: usize, f: f64) -> Option<Vector3<f64>> {
    let frame = &state.frames[t];
    let px = j * state.width() + i;
    if !frame.valid[px] {
        return None;
    }
    let d = frame.log_depth[px].exp();
    let (cx, cy) = state.principal_point();
    Some(Vector3::new(d * (i as f64 - cx) / f, d * (j as f64 - cy) / f, d))
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_pairs(state: &SceneEstimate, pairs: &[PairPrediction]) -> Result<()> {
    let edges = state.graph().edges();
    if pairs.len() != edges.len() {
        return Err(Error::ShapeMismatch(format!("{} pair predictions for {} graph edges", pairs.len(), edges.len())));
    }
    for (p, &e) in pairs.iter().zip(edges) {
        if p.edge != e {
            return Err(Error::InvalidInput(format!("pair {:?} does not match graph edge {:?}", p.edge, e)));
        }
        if p.pointmap_n.width() != state.width() || p.pointmap_n.height() != state.height() {
            return Err(Error::ShapeMismatch(format!("pair {:?} resolution differs from the state", p.edge)));
        }
    }
    Ok(())
}

fn ga_unit(state: &SceneEstimate, pair: &PairPrediction, e: usize, t: usize) -> Partial {
    let (pm, conf) = pair.slot(t).expect("frame belongs to edge");
    let edge = &state.edges[e];
    let sigma = edge.scale();
    let re = edge.transform.rotation_matrix();
    let re_t = re.transpose();
    let te = edge.transform.translation;
    let pose = state.pose(t);
    let r = pose.rotation_matrix();
    let c = pose.translation;
    let f = state.focal(t);

    let mut back = FrameBackprop::new(state, t);
    let mut eg = EdgeGradient::default();
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..state.height() {
        for i in 0..state.width() {
            if !*pm.valid().get(i, j) {
                continue;
            }
            let Some(y) = camera_point(state, t, i, j, f) else { continue };
            count += 1;
            let x = pm.points().get(i, j);
            let w = *conf.values().get(i, j);
            let xw = r * y + c;
            let target = sigma * (re * x + te);
            let res = xw - target;
            let n = res.norm();
            sum += w * n;
            if n == 0.0 || w == 0.0 {
                continue;
            }
            let g = res * (w / n);
            back.add(j * state.width() + i, &y, &g);
            eg.scale -= g.dot(&target);
            eg.translation -= sigma * g;
            eg.rotation -= sigma * x.cross(&(re_t * g));
        }
    }
    if count == 0 {
        return Partial::default();
    }
    let inv = 1.0 / count as f64;
    eg.scale *= inv;
    eg.rotation *= inv;
    eg.translation *= inv;
    Partial { value: sum * inv, frames: vec![(t, back.scaled(inv))], edges: vec![(e, eg)] }
}

/// Global alignment: `Σ_e Σ_{t∈e} mean_px C·‖X^t − σ_e(R_e x + t_e)‖`.
pub fn loss_ga(state: &SceneEstimate, pairs: &[PairPrediction]) -> Result<(f64, SceneGradient)> {
    check_pairs(state, pairs)?;
    let units: Vec<(usize, usize)> =
        state.graph().edges().iter().enumerate().flat_map(|(e, &(n, m))| [(e, n), (e, m)]).collect();
    let parts = units.par_iter().map(|&(e, t)| ga_unit(state, &pairs[e], e, t)).collect();
    Ok(reduce(state, parts))
}

fn cma_unit(state: &SceneEstimate, flows: &FlowSet, mask: &MotionMask, t: usize, tp: usize) -> Result<Partial> {
    let flow = flows.get(&(t, tp)).ok_or_else(|| Error::MissingEntry(format!("flow_{t}_{tp}")))?;
    if flow.width() != state.width() || flow.height() != state.height() {
        return Err(Error::ShapeMismatch(format!("{} resolution differs from the state", flow.key())));
    }
    let pose = state.pose(t);
    let r = pose.rotation_matrix();
    let c = pose.translation;
    let f = state.focal(t);
    let pose_p = state.pose(tp);
    let rp = pose_p.rotation_matrix();
    let rp_t = rp.transpose();
    let cp = pose_p.translation;
    let fp = state.focal(tp);
    let (cx, cy) = state.principal_point();

    let mut back = FrameBackprop::new(state, t);
    let mut gp = FrameGradient::default();
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..state.height() {
        for i in 0..state.width() {
            if mask.is_dynamic(i, j) || !*flow.valid().get(i, j) {
                continue;
            }
            let Some(y) = camera_point(state, t, i, j, f) else { continue };
            let xw = r * y + c;
            let z = rp_t * (xw - cp);
            if z.z <= MIN_FRONT_DEPTH {
                continue;
            }
            count += 1;
            let (u, v) = (z.x / z.z, z.y / z.z);
            let proj = Vector2::new(fp * u + cx, fp * v + cy);
            let rho = proj - Vector2::new(i as f64, j as f64) - flow.displacement().get(i, j);
            sum += rho.x.abs() + rho.y.abs();
            let s = Vector2::new(sgn(rho.x), sgn(rho.y));
            let k = fp / z.z;
            let gz = Vector3::new(k * s.x, k * s.y, -k * (s.x * u + s.y * v));
            let gx = rp * gz;
            back.add(j * state.width() + i, &y, &gx);
            gp.translation -= gx;
            gp.rotation += gz.cross(&z);
            gp.focal += s.x * (proj.x - cx) + s.y * (proj.y - cy);
        }
    }
    if count == 0 {
        return Ok(Partial::default());
    }
    let inv = 1.0 / count as f64;
    gp.focal *= inv;
    gp.rotation *= inv;
    gp.translation *= inv;
    Ok(Partial { value: sum * inv, frames: vec![(t, back.scaled(inv)), (tp, gp)], edges: Vec::new() })
}

/// Camera movement alignment over both orderings of every edge. Pixels that
/// are dynamic in frame `t`, lack valid flow or depth, or land behind the
/// target camera are excluded; an empty set contributes 0.
pub fn loss_cma(state: &SceneEstimate, flows: &FlowSet, masks: &[MotionMask]) -> Result<(f64, SceneGradient)> {
    if masks.len() != state.num_frames() {
        return Err(Error::ShapeMismatch(format!("{} motion masks for {} frames", masks.len(), state.num_frames())));
    }
    let units = state.graph().directed_pairs();
    let parts = units
        .par_iter()
        .map(|&(t, tp)| cma_unit(state, flows, &masks[t], t, tp))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(state, parts))
}

/// Camera trajectory smoothness over consecutive frames:
/// `‖R_tᵀ'R_{t+1}' − I‖_F + ‖T_{t+1} − T_t‖` on world-to-camera `(R', T)`.
pub fn loss_cts(state: &SceneEstimate) -> (f64, SceneGradient) {
    let mut parts = Vec::with_capacity(state.num_frames().saturating_sub(1));
    for t in 0..state.num_frames().saturating_sub(1) {
        let (pa, pb) = (state.pose(t), state.pose(t + 1));
        let (ra, rb) = (pa.rotation_matrix(), pb.rotation_matrix());
        let mut ga = FrameGradient::default();
        let mut gb = FrameGradient::default();

        // relative rotation R_bᵀR_a as a quaternion (w, v): the Frobenius
        // distance is 2√2‖v‖ and vee(M − Mᵀ) = 4wv
        let rel = (pb.rotation.inverse() * pa.rotation).into_inner();
        let v = rel.imag();
        let frob = 2.0 * std::f64::consts::SQRT_2 * v.norm();
        if frob > 0.0 {
            let g = v * (4.0 * rel.w / frob);
            ga.rotation += g;
            gb.rotation -= g;
        }

        let wa = ra.transpose() * pa.translation;
        let wb = rb.transpose() * pb.translation;
        let u = wa - wb;
        let un = u.norm();
        if un > 0.0 {
            let gu = u / un;
            ga.translation += ra * gu;
            gb.translation -= rb * gu;
            ga.rotation -= wa.cross(&gu);
            gb.rotation += wb.cross(&gu);
        }
        parts.push(Partial { value: frob + un, frames: vec![(t, ga), (t + 1, gb)], edges: Vec::new() });
    }
    reduce(state, parts)
}

/// Rotation part of the smoothness term for two camera-to-world rotations.
pub fn cts_rotation_term(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    (ra * rb.transpose() - Matrix3::identity()).norm()
}

fn pts_unit(state: &SceneEstimate, target: &Pointmap, t: usize) -> Partial {
    let pose = state.pose(t);
    let r = pose.rotation_matrix();
    let c = pose.translation;
    let f = state.focal(t);
    let mut back = FrameBackprop::new(state, t);
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..state.height() {
        for i in 0..state.width() {
            if !*target.valid().get(i, j) {
                continue;
            }
            let Some(y) = camera_point(state, t, i, j, f) else { continue };
            count += 1;
            let d = r * y + c - target.points().get(i, j);
            sum += d.x.abs() + d.y.abs() + d.z.abs();
            back.add(j * state.width() + i, &y, &d.map(sgn));
        }
    }
    if count == 0 {
        return Partial::default();
    }
    let inv = 1.0 / count as f64;
    Partial { value: sum * inv, frames: vec![(t, back.scaled(inv))], edges: Vec::new() }
}

/// Point trajectory smoothness: `Σ_t mean_px ‖X^t − X̃^t‖₁`.
pub fn loss_pts(state: &SceneEstimate, targets: &[Pointmap]) -> Result<(f64, SceneGradient)> {
    if targets.len() != state.num_frames() {
        return Err(Error::ShapeMismatch(format!("{} targets for {} frames", targets.len(), state.num_frames())));
    }
    if let Some(t) = targets.iter().position(|p| p.width() != state.width() || p.height() != state.height()) {
        return Err(Error::ShapeMismatch(format!("target {t} resolution differs from the state")));
    }
    let parts = (0..state.num_frames()).into_par_iter().map(|t| pts_unit(state, &targets[t], t)).collect();
    Ok(reduce(state, parts))
}

/// Weighted sum of the active terms and its gradient.
pub fn total_loss(state: &SceneEstimate, data: &ObjectiveData, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let mut terms = LossTerms::default();
    let mut gradient = state.zero_gradient();
    let mut total = 0.0;
    if weights.ga != 0.0 {
        let (v, g) = loss_ga(state, data.pairs)?;
        terms.ga = v;
        total += weights.ga * v;
        gradient.add_scaled(&g, weights.ga);
    }
    if weights.cma != 0.0 {
        let (v, g) = loss_cma(state, data.flows, data.masks)?;
        terms.cma = v;
        total += weights.cma * v;
        gradient.add_scaled(&g, weights.cma);
    }
    if weights.cts != 0.0 {
        let (v, g) = loss_cts(state);
        terms.cts = v;
        total += weights.cts * v;
        gradient.add_scaled(&g, weights.cts);
    }
    if weights.pts != 0.0 {
        let targets = data.targets.ok_or_else(|| Error::MissingEntry("smoothed targets for the PTS term".into()))?;
        let (v, g) = loss_pts(state, targets)?;
        terms.pts = v;
        total += weights.pts * v;
        gradient.add_scaled(&g, weights.pts);
    }
    Ok(LossReport { total, terms, gradient })
}

/// Maximum relative error `|a − n| / max(|a|, |n|, floor)` between an analytic
/// gradient and central finite differences of `loss` with step `h`.
pub fn gradient_check(
    state: &SceneEstimate,
    analytic: &SceneGradient,
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&SceneEstimate) -> f64,
) -> f64 {
    let a = analytic.flatten();
    let mut worst: f64 = 0.0;
    let mut delta = vec![0.0; state.num_params()];
    for k in 0..a.len() {
        delta[k] = h;
        let mut plus = state.clone();
        plus.apply_tangent(&delta, crate::scene::ParamBlocks::ALL);
        delta[k] = -h;
        let mut minus = state.clone();
        minus.apply_tangent(&delta, crate::scene::ParamBlocks::ALL);
        delta[k] = 0.0;
        let n = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let rel = (a[k] - n).abs() / a[k].abs().max(n.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{CameraPose, ConfidenceMap, FrameTag, Grid, SceneGraph};
    use crate::testing::objective_fixture as fixture;
    use nalgebra::{Rotation3, UnitQuaternion};

    const H: f64 = 1e-4;
    const FLOOR: f64 = 1e-6;

    #[test]
    fn ga_gradient_matches_finite_differences() {
        let fx = fixture(1);
        let (_, g) = loss_ga(&fx.state, &fx.pairs).unwrap();
        let err = gradient_check(&fx.state, &g, H, FLOOR, |s| loss_ga(s, &fx.pairs).unwrap().0);
        assert!(err < 1e-4, "GA max relative error {err:e}");
    }

    #[test]
    fn cma_gradient_matches_finite_differences() {
        let fx = fixture(2);
        let (_, g) = loss_cma(&fx.state, &fx.flows, &fx.masks).unwrap();
        let err = gradient_check(&fx.state, &g, H, FLOOR, |s| loss_cma(s, &fx.flows, &fx.masks).unwrap().0);
        assert!(err < 1e-4, "CMA max relative error {err:e}");
    }

    #[test]
    fn cts_gradient_matches_finite_differences() {
        let fx = fixture(3);
        let (_, g) = loss_cts(&fx.state);
        let err = gradient_check(&fx.state, &g, H, FLOOR, |s| loss_cts(s).0);
        assert!(err < 1e-4, "CTS max relative error {err:e}");
    }

    #[test]
    fn pts_gradient_matches_finite_differences() {
        let fx = fixture(4);
        let (_, g) = loss_pts(&fx.state, &fx.targets).unwrap();
        let err = gradient_check(&fx.state, &g, H, FLOOR, |s| loss_pts(s, &fx.targets).unwrap().0);
        assert!(err < 1e-4, "PTS max relative error {err:e}");
    }

    #[test]
    fn cts_rotation_closed_form() {
        for deg in [10.0f64, 45.0, 90.0] {
            let d = deg.to_radians();
            for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
                let rb = Rotation3::from_axis_angle(&axis, d).into_inner();
                let got = cts_rotation_term(&Matrix3::identity(), &rb);
                let expected = 2.0 * 2f64.sqrt() * (d / 2.0).sin();
                assert!((got - expected).abs() < 1e-9);
            }
        }
        let graph = SceneGraph::build(2, 1, 1).unwrap();
        let mut s = SceneEstimate::new(4, 4, graph, 5.0).unwrap();
        s.frames[1].pose.rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let (v, _) = loss_cts(&s);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_poses_have_zero_cts() {
        let graph = SceneGraph::build(4, 1, 1).unwrap();
        let mut s = SceneEstimate::new(4, 4, graph, 5.0).unwrap();
        let p = CameraPose::new(UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.2, 0.1)), Vector3::new(1.0, 2.0, 3.0));
        for f in &mut s.frames {
            f.pose = p;
        }
        assert!(loss_cts(&s).0 < 1e-15);
    }

    #[test]
    fn pts_constant_offset_is_one() {
        let fx = fixture(5);
        let targets: Vec<_> = (0..3)
            .map(|t| {
                let cur = fx.state.world_pointmap(t);
                Pointmap::new(cur.points().map(|p| p + Vector3::new(0.0, 0.0, 1.0)), cur.valid().clone(), FrameTag::World).unwrap()
            })
            .collect();
        let (v, _) = loss_pts(&fx.state, &targets).unwrap();
        assert!((v - 3.0).abs() < 1e-12, "three frames at 1.0 each, got {v}");
        let own = fx.state.world_pointmaps();
        assert!(loss_pts(&fx.state, &own).unwrap().0 < 1e-12);
    }

    #[test]
    fn all_dynamic_mask_zeroes_cma() {
        let fx = fixture(6);
        let masks: Vec<_> = (0..3).map(|t| MotionMask::new(t, Grid::filled(8, 6, true))).collect();
        let (v, g) = loss_cma(&fx.state, &fx.flows, &masks).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn total_is_weighted_sum_and_zero_weights_skip() {
        let fx = fixture(7);
        let data = ObjectiveData { pairs: &fx.pairs, flows: &fx.flows, masks: &fx.masks, targets: Some(&fx.targets) };
        let w = LossWeights { ga: 1.0, cma: 0.01, cts: 0.01, pts: 0.5 };
        let r = total_loss(&fx.state, &data, &w).unwrap();
        let expected = w.ga * r.terms.ga + w.cma * r.terms.cma + w.cts * r.terms.cts + w.pts * r.terms.pts;
        assert!((r.total - expected).abs() < 1e-12);
        let ga_only = total_loss(&fx.state, &data, &LossWeights { ga: 1.0, cma: 0.0, cts: 0.0, pts: 0.0 }).unwrap();
        let (v, g) = loss_ga(&fx.state, &fx.pairs).unwrap();
        assert_eq!(ga_only.total, v);
        assert_eq!(ga_only.gradient, g);
        let no_targets = ObjectiveData { targets: None, ..data };
        assert!(total_loss(&fx.state, &no_targets, &LossWeights::STAGE1).is_ok());
        assert!(total_loss(&fx.state, &no_targets, &LossWeights::STAGE2).is_err());
    }

    #[test]
    fn ga_vanishes_on_consistent_pairs_and_grows_with_scale() {
        let mut fx = fixture(8);
        for e in &mut fx.state.edges {
            e.log_scale = 0.0;
            e.transform = CameraPose::identity();
        }
        // pair-local = world coordinates when P_e is the identity
        fx.pairs = fx
            .state
            .graph()
            .edges()
            .iter()
            .map(|&(n, m)| {
                let re = |t: usize| {
                    let pm = fx.state.world_pointmap(t);
                    Pointmap::dense(pm.points().clone(), FrameTag::PairLocal { reference: n }).unwrap()
                };
                PairPrediction::new((n, m), re(n), re(m), ConfidenceMap::uniform(8, 6, 1.0), ConfidenceMap::uniform(8, 6, 1.0)).unwrap()
            })
            .collect();
        let (v0, _) = loss_ga(&fx.state, &fx.pairs).unwrap();
        assert!(v0 < 1e-12);
        let mut prev = v0;
        for k in 1..=4 {
            let mut s = fx.state.clone();
            for e in &mut s.edges {
                e.log_scale = (k as f64 * 0.25) * 2f64.ln();
            }
            let (v, _) = loss_ga(&s, &fx.pairs).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn reduction_is_independent_of_worker_count() {
        let fx = fixture(9);
        let data = ObjectiveData { pairs: &fx.pairs, flows: &fx.flows, masks: &fx.masks, targets: Some(&fx.targets) };
        let w = LossWeights { ga: 1.0, cma: 0.01, cts: 0.01, pts: 1.0 };
        let run = |n: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| total_loss(&fx.state, &data, &w).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.gradient, b.gradient);
    }
}
