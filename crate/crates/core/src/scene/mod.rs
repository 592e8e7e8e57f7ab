//! Domain types shared by every stage of the pipeline.

mod estimate;
mod graph;
mod pose;

pub use estimate::{EdgeGradient, EdgeState, FrameGradient, FrameState, ParamBlocks, SceneEstimate, SceneGradient};
pub use graph::SceneGraph;
pub use pose::{skew, CameraPose};

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::{Error, Result};

/// Row-major `height x width` grid. Element `(i, j)` is column `i`, row `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "grid {width}x{height} needs {} elements, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[j * self.width + i]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut T {
        let w = self.width;
        &mut self.data[j * w + i]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    /// Single focal length with the principal point at the image centre
    /// `((W-1)/2, (H-1)/2)`.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self::new(focal, focal, principal_x(width), principal_y(height))
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < width as f64
            && self.cy >= 0.0
            && self.cy < height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("intrinsics {self:?} invalid for {width}x{height}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point at depth `d` seen by pixel `(i, j)`.
    #[inline]
    pub fn backproject(&self, i: f64, j: f64, d: f64) -> Vector3<f64> {
        Vector3::new((i - self.cx) * d / self.fx, (j - self.cy) * d / self.fy, d)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

pub fn principal_x(width: usize) -> f64 {
    (width as f64 - 1.0) / 2.0
}

pub fn principal_y(height: usize) -> f64 {
    (height as f64 - 1.0) / 2.0
}

/// Positive depths with an explicit validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Grid<f64>,
    valid: Grid<bool>,
}

impl DepthMap {
    pub fn new(values: Grid<f64>, valid: Grid<bool>) -> Result<Self> {
        if !values.same_shape(&valid) {
            return Err(Error::ShapeMismatch("depth values and validity differ in shape".into()));
        }
        for (idx, (&d, &v)) in values.data().iter().zip(valid.data()).enumerate() {
            if v && !(d.is_finite() && d > 0.0) {
                return Err(Error::NonFinite { what: "depth".into(), index: idx });
            }
        }
        Ok(Self { values, valid })
    }

    /// Every positive finite entry becomes valid; NaN is rejected.
    pub fn from_values(values: Grid<f64>) -> Result<Self> {
        if let Some(idx) = values.data().iter().position(|d| d.is_nan()) {
            return Err(Error::NonFinite { what: "depth".into(), index: idx });
        }
        let valid = values.map(|&d| d.is_finite() && d > 0.0);
        Ok(Self { values, valid })
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }
}

/// Coordinate frame a pointmap lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameTag {
    /// Camera coordinates of the pair's reference frame.
    PairLocal { reference: usize },
    World,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pointmap {
    points: Grid<Vector3<f64>>,
    valid: Grid<bool>,
    tag: FrameTag,
}

impl Pointmap {
    pub fn new(points: Grid<Vector3<f64>>, valid: Grid<bool>, tag: FrameTag) -> Result<Self> {
        if !points.same_shape(&valid) {
            return Err(Error::ShapeMismatch("pointmap points and validity differ in shape".into()));
        }
        if let Some(idx) = points.data().iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite { what: "pointmap".into(), index: idx });
        }
        Ok(Self { points, valid, tag })
    }

    pub fn dense(points: Grid<Vector3<f64>>, tag: FrameTag) -> Result<Self> {
        let valid = Grid::filled(points.width(), points.height(), true);
        Self::new(points, valid, tag)
    }

    pub fn points(&self) -> &Grid<Vector3<f64>> {
        &self.points
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn tag(&self) -> FrameTag {
        self.tag
    }

    pub fn width(&self) -> usize {
        self.points.width()
    }

    pub fn height(&self) -> usize {
        self.points.height()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    values: Grid<f64>,
}

impl ConfidenceMap {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if let Some(idx) = values.data().iter().position(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::NonFinite { what: "confidence".into(), index: idx });
        }
        Ok(Self { values })
    }

    pub fn uniform(width: usize, height: usize, value: f64) -> Self {
        Self { values: Grid::filled(width, height, value) }
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }
}

/// Pairwise prediction for edge `(n, m)`; both pointmaps are expressed in the
/// camera coordinates of frame `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairPrediction {
    pub edge: (usize, usize),
    pub pointmap_n: Pointmap,
    pub pointmap_m: Pointmap,
    pub conf_n: ConfidenceMap,
    pub conf_m: ConfidenceMap,
}

impl PairPrediction {
    pub fn new(
        edge: (usize, usize),
        pointmap_n: Pointmap,
        pointmap_m: Pointmap,
        conf_n: ConfidenceMap,
        conf_m: ConfidenceMap,
    ) -> Result<Self> {
        if edge.0 == edge.1 {
            return Err(Error::InvalidInput(format!("pair edge {edge:?} links a frame to itself")));
        }
        let (w, h) = (pointmap_n.width(), pointmap_n.height());
        let same = pointmap_m.width() == w
            && pointmap_m.height() == h
            && conf_n.values().width() == w
            && conf_n.values().height() == h
            && conf_m.values().width() == w
            && conf_m.values().height() == h;
        if !same {
            return Err(Error::ShapeMismatch(format!("pair {edge:?} grids differ in shape")));
        }
        Ok(Self { edge, pointmap_n, pointmap_m, conf_n, conf_m })
    }

    /// Pointmap and confidence for frame `t` of this pair.
    pub fn slot(&self, t: usize) -> Option<(&Pointmap, &ConfidenceMap)> {
        if t == self.edge.0 {
            Some((&self.pointmap_n, &self.conf_n))
        } else if t == self.edge.1 {
            Some((&self.pointmap_m, &self.conf_m))
        } else {
            None
        }
    }
}

/// Dense displacement from frame `from` to frame `to`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub from: usize,
    pub to: usize,
    displacement: Grid<Vector2<f64>>,
    valid: Grid<bool>,
}

impl FlowField {
    pub fn new(from: usize, to: usize, displacement: Grid<Vector2<f64>>, valid: Grid<bool>) -> Result<Self> {
        if from == to {
            return Err(Error::InvalidInput(format!("flow {from}->{to} links a frame to itself")));
        }
        if !displacement.same_shape(&valid) {
            return Err(Error::ShapeMismatch("flow displacement and validity differ in shape".into()));
        }
        for (idx, (d, &v)) in displacement.data().iter().zip(valid.data()).enumerate() {
            if v && !(d.x.is_finite() && d.y.is_finite()) {
                return Err(Error::NonFinite { what: format!("flow {from}->{to}"), index: idx });
            }
        }
        Ok(Self { from, to, displacement, valid })
    }

    pub fn displacement(&self) -> &Grid<Vector2<f64>> {
        &self.displacement
    }

    pub fn valid(&self) -> &Grid<bool> {
        &self.valid
    }

    pub fn width(&self) -> usize {
        self.displacement.width()
    }

    pub fn height(&self) -> usize {
        self.displacement.height()
    }

    pub fn key(&self) -> String {
        format!("flow_{}_{}", self.from, self.to)
    }
}

/// Flows keyed by `(from, to)`.
pub type FlowSet = BTreeMap<(usize, usize), FlowField>;

/// Long-term 2D tracks. Per-track arrays are stored track-major: entry
/// `(n, t)` lives at `n * num_frames + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    num_tracks: usize,
    num_frames: usize,
    positions: Vec<Vector2<f64>>,
    visibility: Vec<bool>,
    confidence: Vec<f64>,
    mobility: Vec<bool>,
    query_frame: Vec<usize>,
}

impl TrackSet {
    pub fn new(
        num_tracks: usize,
        num_frames: usize,
        positions: Vec<Vector2<f64>>,
        visibility: Vec<bool>,
        confidence: Vec<f64>,
        mobility: Vec<bool>,
        query_frame: Vec<usize>,
    ) -> Result<Self> {
        let n = num_tracks * num_frames;
        if positions.len() != n
            || visibility.len() != n
            || confidence.len() != n
            || mobility.len() != n
            || query_frame.len() != num_tracks
        {
            return Err(Error::ShapeMismatch(format!("track arrays inconsistent with {num_tracks}x{num_frames}")));
        }
        for (idx, (p, &v)) in positions.iter().zip(&visibility).enumerate() {
            if v && !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::NonFinite { what: "track position".into(), index: idx });
            }
        }
        if let Some(idx) = confidence.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidInput(format!("track confidence out of [0,1] at index {idx}")));
        }
        if let Some(&q) = query_frame.iter().find(|&&q| q >= num_frames) {
            return Err(Error::InvalidInput(format!("query frame {q} out of range")));
        }
        Ok(Self { num_tracks, num_frames, positions, visibility, confidence, mobility, query_frame })
    }

    pub fn empty(num_frames: usize) -> Self {
        Self {
            num_tracks: 0,
            num_frames,
            positions: Vec::new(),
            visibility: Vec::new(),
            confidence: Vec::new(),
            mobility: Vec::new(),
            query_frame: Vec::new(),
        }
    }

    pub fn num_tracks(&self) -> usize {
        self.num_tracks
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    #[inline]
    fn at(&self, n: usize, t: usize) -> usize {
        n * self.num_frames + t
    }

    pub fn position(&self, n: usize, t: usize) -> Vector2<f64> {
        self.positions[self.at(n, t)]
    }

    pub fn visible(&self, n: usize, t: usize) -> bool {
        self.visibility[self.at(n, t)]
    }

    pub fn confidence(&self, n: usize, t: usize) -> f64 {
        self.confidence[self.at(n, t)]
    }

    pub fn dynamic(&self, n: usize, t: usize) -> bool {
        self.mobility[self.at(n, t)]
    }

    pub fn query_frame(&self, n: usize) -> usize {
        self.query_frame[n]
    }

    pub fn positions(&self) -> &[Vector2<f64>] {
        &self.positions
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidence
    }

    pub fn mobility(&self) -> &[bool] {
        &self.mobility
    }

    pub fn query_frames(&self) -> &[usize] {
        &self.query_frame
    }
}

/// Per-frame segmentation of pixels moving in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMask {
    pub frame: usize,
    dynamic: Grid<bool>,
}

impl MotionMask {
    pub fn new(frame: usize, dynamic: Grid<bool>) -> Self {
        Self { frame, dynamic }
    }

    pub fn all_static(frame: usize, width: usize, height: usize) -> Self {
        Self::new(frame, Grid::filled(width, height, false))
    }

    pub fn dynamic(&self) -> &Grid<bool> {
        &self.dynamic
    }

    pub fn is_dynamic(&self, i: usize, j: usize) -> bool {
        *self.dynamic.get(i, j)
    }

    pub fn count(&self) -> usize {
        self.dynamic.data().iter().filter(|&&d| d).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_indexing_is_row_major() {
        let g = Grid::from_fn(3, 2, |i, j| 10 * j + i);
        assert_eq!(g.data(), &[0, 1, 2, 10, 11, 12]);
        assert_eq!(*g.get(2, 1), 12);
        assert!(Grid::from_vec(3, 2, vec![0; 5]).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::centered(50.0, 64, 48).validate(64, 48).is_ok());
        assert!(Intrinsics::new(-1.0, 50.0, 10.0, 10.0).validate(64, 48).is_err());
        assert!(Intrinsics::new(50.0, 50.0, 64.0, 10.0).validate(64, 48).is_err());
    }

    #[test]
    fn depth_rejects_nan_and_nonpositive_valid_entries() {
        let mut v = Grid::filled(2, 2, 1.0);
        *v.get_mut(1, 1) = f64::NAN;
        match DepthMap::from_values(v) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 3),
            other => panic!("unexpected {other:?}"),
        }
        let v = Grid::filled(2, 2, 0.0);
        assert!(DepthMap::new(v, Grid::filled(2, 2, true)).is_err());
    }

    #[test]
    fn pair_rejects_self_loop_and_shape_mismatch() {
        let pm = |w, h| Pointmap::dense(Grid::filled(w, h, Vector3::zeros()), FrameTag::PairLocal { reference: 0 }).unwrap();
        let c = |w, h| ConfidenceMap::uniform(w, h, 1.0);
        assert!(PairPrediction::new((0, 0), pm(2, 2), pm(2, 2), c(2, 2), c(2, 2)).is_err());
        assert!(PairPrediction::new((0, 1), pm(2, 2), pm(3, 2), c(2, 2), c(2, 2)).is_err());
        assert!(PairPrediction::new((0, 1), pm(2, 2), pm(2, 2), c(2, 2), c(2, 2)).is_ok());
    }

    #[test]
    fn track_set_shapes_checked() {
        let ok = TrackSet::new(1, 2, vec![Vector2::zeros(); 2], vec![true; 2], vec![1.0; 2], vec![false; 2], vec![0]);
        assert!(ok.is_ok());
        let bad = TrackSet::new(1, 2, vec![Vector2::zeros(); 3], vec![true; 2], vec![1.0; 2], vec![false; 2], vec![0]);
        assert!(bad.is_err());
    }
}
