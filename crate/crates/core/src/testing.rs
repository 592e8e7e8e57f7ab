//! Randomized fixtures shared by unit tests, the acceptance suite and the
//! examples.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::ego_flow;
use crate::scene::{
    CameraPose, ConfidenceMap, FlowField, FlowSet, FrameTag, Grid, MotionMask, PairPrediction, Pointmap, SceneEstimate,
    SceneGraph, TrackSet,
};

pub struct ObjectiveFixture {
    pub state: SceneEstimate,
    pub pairs: Vec<PairPrediction>,
    pub flows: FlowSet,
    pub masks: Vec<MotionMask>,
    pub targets: Vec<Pointmap>,
}

fn offset(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let m = rng.random_range(lo..hi);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Random 8x6, three-frame scene whose residuals stay away from the
/// non-differentiable points of the L1/L2 terms.
pub fn objective_fixture(seed: u64) -> ObjectiveFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8, 6);
    let graph = SceneGraph::build(3, 2, 1).unwrap();
    let mut state = SceneEstimate::new(w, h, graph, 7.0).unwrap();
    for t in 0..3 {
        let d: Vec<f64> = (0..w * h).map(|_| rng.random_range(2.0..4.0)).collect();
        state.set_depth(t, &d).unwrap();
        state.frames[t].log_focal = rng.random_range(6.0f64..9.0).ln();
        let axis = Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        state.frames[t].pose = CameraPose::new(
            UnitQuaternion::from_scaled_axis(axis),
            Vector3::new(0.3 * t as f64, 0.05 * t as f64, 0.0) + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
        );
    }
    for e in &mut state.edges {
        e.log_scale = rng.random_range(-0.2..0.2);
        e.transform = CameraPose::new(
            UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2))),
            Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
        );
    }
    state.enforce_gauge();
    let pm = |rng: &mut ChaCha8Rng, n: usize| {
        let pts = Grid::from_fn(w, h, |_, _| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Vector3::new(0.0, 0.0, 3.0));
        Pointmap::dense(pts, FrameTag::PairLocal { reference: n }).unwrap()
    };
    let conf = |rng: &mut ChaCha8Rng| ConfidenceMap::new(Grid::from_fn(w, h, |_, _| rng.random_range(0.5..1.5))).unwrap();
    let pairs = state
        .graph()
        .edges()
        .iter()
        .map(|&(n, m)| {
            let (a, b) = (pm(&mut rng, n), pm(&mut rng, n));
            let (ca, cb) = (conf(&mut rng), conf(&mut rng));
            PairPrediction::new((n, m), a, b, ca, cb).unwrap()
        })
        .collect();
    let mut flows = FlowSet::new();
    for (t, tp) in state.graph().directed_pairs() {
        let ego = ego_flow(&state.depth_map(t), &state.intrinsics(t), state.pose(t), state.pose(tp), &state.intrinsics(tp), t, tp).unwrap();
        let disp = ego.displacement().map(|d| d + Vector2::new(offset(&mut rng, 0.5, 2.0), offset(&mut rng, 0.5, 2.0)));
        flows.insert((t, tp), FlowField::new(t, tp, disp, ego.valid().clone()).unwrap());
    }
    let masks = (0..3).map(|t| MotionMask::new(t, Grid::from_fn(w, h, |_, _| rng.random_bool(0.2)))).collect();
    let targets = (0..3)
        .map(|t| {
            let cur = state.world_pointmap(t);
            let pts = cur.points().map(|p| p + Vector3::from_fn(|_, _| offset(&mut rng, 0.05, 0.3)));
            Pointmap::new(pts, cur.valid().clone(), FrameTag::World).unwrap()
        })
        .collect();
    ObjectiveFixture { state, pairs, flows, masks, targets }
}


/// A short clip of world pointmaps over a slanted, slowly drifting surface
/// with alternating ±`flicker` depth scaling, plus `num_tracks` tracks at
/// fixed random sub-pixel positions that stay visible in every frame.
pub fn flicker_clip(seed: u64, frames: usize, width: usize, height: usize, num_tracks: usize, flicker: f64) -> (Vec<Pointmap>, TrackSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pointmaps = (0..frames)
        .map(|t| {
            let s = if t % 2 == 0 { 1.0 + flicker } else { 1.0 - flicker };
            let drift = Vector3::new(0.01 * t as f64, 0.0, 0.0);
            let pts = Grid::from_fn(width, height, |i, j| {
                let z = 3.0 + 0.05 * i as f64 + 0.02 * j as f64;
                Vector3::new((i as f64 - width as f64 / 2.0) * 0.1, (j as f64 - height as f64 / 2.0) * 0.1, z) * s + drift
            });
            Pointmap::dense(pts, FrameTag::World).expect("finite clip")
        })
        .collect();
    let positions: Vec<Vector2<f64>> = (0..num_tracks)
        .flat_map(|_| {
            let p = Vector2::new(rng.random_range(0.0..(width - 1) as f64), rng.random_range(0.0..(height - 1) as f64));
            std::iter::repeat_n(p, frames)
        })
        .collect();
    let n = num_tracks * frames;
    let tracks = TrackSet::new(num_tracks, frames, positions, vec![true; n], vec![1.0; n], vec![false; n], vec![0; num_tracks])
        .expect("consistent track arrays");
    (pointmaps, tracks)
}
