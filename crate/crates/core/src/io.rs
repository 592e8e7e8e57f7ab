//! On-disk container: binary tensor files, JSON scene manifests and PLY
//! export.
//!
//! A tensor file is `"C4DT"`, a version byte, a dtype byte, a rank byte,
//! `rank` little-endian `u32` dimensions and a row-major little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::scene::{
    CameraPose, ConfidenceMap, DepthMap, FlowField, FlowSet, FrameTag, Grid, Intrinsics, MotionMask, PairPrediction,
    Pointmap, SceneGraph, TrackSet,
};
use crate::trajectory::Trajectory3D;
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"C4DT";
pub const TENSOR_VERSION: u8 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    VersionMismatch(u8),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimensions overflow the addressable size")]
    DimOverflow,
    #[error("tensor must have at least one dimension")]
    NoDims,
    #[error("payload has {found} elements but dims imply {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingData(usize),
    #[error("expected dtype {expected:?}, found {found:?}")]
    WrongDtype { expected: DType, found: DType },
    #[error("expected shape {expected:?}, found {found:?}")]
    WrongShape { expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    U8 = 2,
    I32 = 3,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Self::F32),
            2 => Some(Self::U8),
            3 => Some(Self::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 | Self::I32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::U8(_) => DType::U8,
            Self::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

fn element_count(dims: &[usize]) -> Result<usize, TensorError> {
    if dims.is_empty() {
        return Err(TensorError::NoDims);
    }
    dims.iter().try_fold(1usize, |acc, &d| {
        if d > u32::MAX as usize {
            return Err(TensorError::DimOverflow);
        }
        acc.checked_mul(d).ok_or(TensorError::DimOverflow)
    })
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { expected, found: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::I32(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * self.dims.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(TENSOR_VERSION);
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let truncated = |expected: u64| TensorError::Truncated { expected, found: bytes.len() as u64 };
        if bytes.len() < 4 {
            return Err(truncated(7));
        }
        if &bytes[..4] != TENSOR_MAGIC {
            return Err(TensorError::BadMagic);
        }
        if bytes.len() < 7 {
            return Err(truncated(7));
        }
        if bytes[4] != TENSOR_VERSION {
            return Err(TensorError::VersionMismatch(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5]).ok_or(TensorError::UnknownDtype(bytes[5]))?;
        let ndim = bytes[6] as usize;
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(truncated(header as u64));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|k| u32::from_le_bytes(bytes[7 + 4 * k..11 + 4 * k].try_into().expect("4 bytes")) as usize)
            .collect();
        let count = element_count(&dims)?;
        let payload_len = count.checked_mul(dtype.size()).ok_or(TensorError::DimOverflow)?;
        let total = header.checked_add(payload_len).ok_or(TensorError::DimOverflow)?;
        if bytes.len() < total {
            return Err(truncated(total as u64));
        }
        if bytes.len() > total {
            return Err(TensorError::TrailingData(bytes.len() - total));
        }
        let p = &bytes[header..];
        let data = match dtype {
            DType::U8 => TensorData::U8(p.to_vec()),
            DType::F32 => {
                TensorData::F32(p.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
            }
            DType::I32 => {
                TensorData::I32(p.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect())
            }
        };
        Ok(Self { dims, data })
    }

    fn expect_shape(&self, expected: &[usize]) -> Result<(), TensorError> {
        if self.dims != expected {
            return Err(TensorError::WrongShape { expected: expected.to_vec(), found: self.dims.clone() });
        }
        Ok(())
    }

    /// `f32` payload checked against `expected` dims.
    pub fn f32_data(&self, expected: &[usize]) -> Result<&[f32], TensorError> {
        self.expect_shape(expected)?;
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(TensorError::WrongDtype { expected: DType::F32, found: other.dtype() }),
        }
    }

    pub fn u8_data(&self, expected: &[usize]) -> Result<&[u8], TensorError> {
        self.expect_shape(expected)?;
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(TensorError::WrongDtype { expected: DType::U8, found: other.dtype() }),
        }
    }

    pub fn i32_data(&self, expected: &[usize]) -> Result<&[i32], TensorError> {
        self.expect_shape(expected)?;
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(TensorError::WrongDtype { expected: DType::I32, found: other.dtype() }),
        }
    }
}

fn tensor_err(path: &Path) -> impl FnOnce(TensorError) -> Error + '_ {
    move |source| Error::Tensor { path: path.to_path_buf(), source }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, tensor.encode())?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    Tensor::decode(&bytes).map_err(tensor_err(path))
}

// ---------------------------------------------------------------------------
// grid <-> tensor conversions

fn f32_grid_tensor(grid: &Grid<f64>) -> Tensor {
    Tensor::f32(vec![grid.height(), grid.width()], grid.data().iter().map(|&v| v as f32).collect()).expect("grid dims")
}

fn bool_grid_tensor(grid: &Grid<bool>) -> Tensor {
    Tensor::u8(vec![grid.height(), grid.width()], grid.data().iter().map(|&b| b as u8).collect()).expect("grid dims")
}

fn vec3_grid_tensor(grid: &Grid<Vector3<f64>>) -> Tensor {
    let data = grid.data().iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Tensor::f32(vec![grid.height(), grid.width(), 3], data).expect("grid dims")
}

fn vec2_grid_tensor(grid: &Grid<Vector2<f64>>) -> Tensor {
    let data = grid.data().iter().flat_map(|p| [p.x as f32, p.y as f32]).collect();
    Tensor::f32(vec![grid.height(), grid.width(), 2], data).expect("grid dims")
}

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what: what.to_string(), index }),
        None => Ok(()),
    }
}

struct Reader<'a> {
    dir: &'a Path,
    width: usize,
    height: usize,
}

impl Reader<'_> {
    fn load(&self, rel: &str) -> Result<(PathBuf, Tensor)> {
        let path = self.dir.join(rel);
        if !path.is_file() {
            return Err(Error::MissingEntry(format!("file {rel}")));
        }
        let t = read_tensor(&path)?;
        Ok((path, t))
    }

    fn f32_grid(&self, rel: &str) -> Result<Grid<f64>> {
        let (path, t) = self.load(rel)?;
        let v = t.f32_data(&[self.height, self.width]).map_err(tensor_err(&path))?;
        check_finite(v, rel)?;
        Grid::from_vec(self.width, self.height, v.iter().map(|&x| x as f64).collect())
    }

    fn bool_grid(&self, rel: &str) -> Result<Grid<bool>> {
        let (path, t) = self.load(rel)?;
        let v = t.u8_data(&[self.height, self.width]).map_err(tensor_err(&path))?;
        Grid::from_vec(self.width, self.height, v.iter().map(|&x| x != 0).collect())
    }

    fn vec3_grid(&self, rel: &str) -> Result<Grid<Vector3<f64>>> {
        let (path, t) = self.load(rel)?;
        let v = t.f32_data(&[self.height, self.width, 3]).map_err(tensor_err(&path))?;
        check_finite(v, rel)?;
        let pts = v.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
        Grid::from_vec(self.width, self.height, pts)
    }

    fn vec2_grid(&self, rel: &str, valid: &Grid<bool>) -> Result<Grid<Vector2<f64>>> {
        let (path, t) = self.load(rel)?;
        let v = t.f32_data(&[self.height, self.width, 2]).map_err(tensor_err(&path))?;
        let pts: Vec<_> = v.chunks_exact(2).map(|c| Vector2::new(c[0] as f64, c[1] as f64)).collect();
        if let Some(index) = pts.iter().zip(valid.data()).position(|(p, &ok)| ok && !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::NonFinite { what: rel.to_string(), index });
        }
        Grid::from_vec(self.width, self.height, pts)
    }

    fn vector(&self, rel: &str, len: usize) -> Result<Vec<f64>> {
        let (path, t) = self.load(rel)?;
        let v = t.f32_data(&[len]).map_err(tensor_err(&path))?;
        check_finite(v, rel)?;
        Ok(v.iter().map(|&x| x as f64).collect())
    }

    fn depth(&self, rel: &str) -> Result<DepthMap> {
        let values = self.f32_grid(rel).map_err(|e| match e {
            Error::NonFinite { index, .. } => Error::NonFinite { what: format!("depth {rel} pixel"), index },
            e => e,
        })?;
        DepthMap::from_values(values)
    }

    fn pose(&self, rel: &str) -> Result<CameraPose> {
        let v = self.vector(rel, 7)?;
        let q = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        if (q - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidInput(format!("{rel}: quaternion norm {q}")));
        }
        Ok(CameraPose::from_array7(v.try_into().expect("7 entries")))
    }

    fn intrinsics(&self, rel: &str) -> Result<Intrinsics> {
        let v = self.vector(rel, 4)?;
        let k = Intrinsics::from_array(v.try_into().expect("4 entries"));
        k.validate(self.width, self.height)?;
        Ok(k)
    }

    fn tracks(&self, entry: &TrackEntry, num_frames: usize) -> Result<TrackSet> {
        let (path, qt) = self.load(&entry.query_frame)?;
        let n = qt.dims().first().copied().unwrap_or(0);
        let query: Vec<usize> = qt
            .i32_data(&[n])
            .map_err(tensor_err(&path))?
            .iter()
            .map(|&q| usize::try_from(q).map_err(|_| Error::InvalidInput(format!("negative query frame {q}"))))
            .collect::<Result<_>>()?;
        let (path, pt) = self.load(&entry.positions)?;
        let pos = pt.f32_data(&[n, num_frames, 2]).map_err(tensor_err(&path))?;
        let positions: Vec<_> = pos.chunks_exact(2).map(|c| Vector2::new(c[0] as f64, c[1] as f64)).collect();
        let (path, vt) = self.load(&entry.visibility)?;
        let visibility: Vec<bool> = vt.u8_data(&[n, num_frames]).map_err(tensor_err(&path))?.iter().map(|&b| b != 0).collect();
        let (path, ct) = self.load(&entry.confidence)?;
        let confidence: Vec<f64> = ct.f32_data(&[n, num_frames]).map_err(tensor_err(&path))?.iter().map(|&c| c as f64).collect();
        let (path, mt) = self.load(&entry.mobility)?;
        let mobility: Vec<bool> = mt.u8_data(&[n, num_frames]).map_err(tensor_err(&path))?.iter().map(|&b| b != 0).collect();
        TrackSet::new(n, num_frames, positions, visibility, confidence, mobility, query)
    }
}

struct Writer<'a> {
    dir: &'a Path,
}

impl Writer<'_> {
    fn put(&self, rel: String, tensor: &Tensor) -> Result<String> {
        write_tensor(&self.dir.join(&rel), tensor)?;
        Ok(rel)
    }

    fn vector(&self, rel: String, v: &[f64]) -> Result<String> {
        self.put(rel, &Tensor::f32(vec![v.len()], v.iter().map(|&x| x as f32).collect()).expect("1-d"))
    }

    fn depth(&self, rel: String, d: &DepthMap) -> Result<String> {
        let values = Grid::from_fn(d.width(), d.height(), |i, j| if *d.valid().get(i, j) { *d.values().get(i, j) } else { 0.0 });
        self.put(rel, &f32_grid_tensor(&values))
    }

    fn tracks(&self, prefix: &str, tracks: &TrackSet) -> Result<TrackEntry> {
        let (n, t) = (tracks.num_tracks(), tracks.num_frames());
        let pos = tracks.positions().iter().flat_map(|p| [p.x as f32, p.y as f32]).collect();
        let conf = tracks.confidences().iter().map(|&c| c as f32).collect();
        let flags = |v: &[bool]| v.iter().map(|&b| b as u8).collect::<Vec<_>>();
        let query = tracks.query_frames().iter().map(|&q| q as i32).collect();
        Ok(TrackEntry {
            positions: self.put(format!("{prefix}/positions.c4dt"), &Tensor::f32(vec![n, t, 2], pos).expect("dims"))?,
            visibility: self.put(format!("{prefix}/visibility.c4dt"), &Tensor::u8(vec![n, t], flags(tracks.visibility())).expect("dims"))?,
            confidence: self.put(format!("{prefix}/confidence.c4dt"), &Tensor::f32(vec![n, t], conf).expect("dims"))?,
            mobility: self.put(format!("{prefix}/mobility.c4dt"), &Tensor::u8(vec![n, t], flags(tracks.mobility())).expect("dims"))?,
            query_frame: self.put(format!("{prefix}/query_frame.c4dt"), &Tensor::i32(vec![n], query).expect("dims"))?,
        })
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub window: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub depth: String,
    pub pose: String,
    pub intrinsics: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointmap: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub pointmap_n: String,
    pub pointmap_m: String,
    pub conf_n: String,
    pub conf_m: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub displacement: String,
    pub valid: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub positions: String,
    pub visibility: String,
    pub confidence: String,
    pub mobility: String,
    pub query_frame: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tracks3dEntry {
    pub points: String,
    pub visibility: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub depth: Vec<String>,
    pub poses: Vec<String>,
    pub intrinsics: Vec<String>,
    #[serde(default)]
    pub masks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks: Option<TrackEntry>,
}

/// Index of a scene or reconstruction directory. Paths are relative to the
/// manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub graph: GraphEntry,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pairs: BTreeMap<String, PairEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub flows: BTreeMap<String, FlowEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks: Option<TrackEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub masks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks3d: Option<Tracks3dEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        if !path.is_file() {
            return Err(Error::MissingEntry(format!("{}", path.display())));
        }
        let text = fs::read_to_string(&path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if m.num_frames < 2 || m.width == 0 || m.height == 0 {
            return Err(Error::Manifest(format!(
                "invalid dimensions: {} frames at {}x{}",
                m.num_frames, m.width, m.height
            )));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_NAME), text)?;
        Ok(())
    }

    fn reader<'a>(&self, dir: &'a Path) -> Reader<'a> {
        Reader { dir, width: self.width, height: self.height }
    }
}

pub fn pair_key(n: usize, m: usize) -> String {
    format!("pair_{n}_{m}")
}

pub fn flow_key(from: usize, to: usize) -> String {
    format!("flow_{from}_{to}")
}

// ---------------------------------------------------------------------------
// scene bundles

/// Ground truth for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub depth: Vec<DepthMap>,
    pub poses: Vec<CameraPose>,
    pub intrinsics: Vec<Intrinsics>,
    pub masks: Vec<MotionMask>,
    pub tracks: Option<TrackSet>,
}

/// All reconstruction inputs of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub width: usize,
    pub height: usize,
    pub graph: SceneGraph,
    /// One prediction per graph edge, in edge order.
    pub pairs: Vec<PairPrediction>,
    pub flows: FlowSet,
    pub tracks: TrackSet,
    pub ground_truth: Option<GroundTruth>,
}

impl SceneData {
    pub fn num_frames(&self) -> usize {
        self.graph.num_frames()
    }

    /// Checks that every edge has a prediction and both flow directions.
    pub fn validate(&self) -> Result<()> {
        let edges = self.graph.edges();
        if self.pairs.len() != edges.len() {
            return Err(Error::ShapeMismatch(format!("{} pair predictions for {} edges", self.pairs.len(), edges.len())));
        }
        for (p, &e) in self.pairs.iter().zip(edges) {
            if p.edge != e {
                return Err(Error::MissingEntry(pair_key(e.0, e.1)));
            }
            if p.pointmap_n.width() != self.width || p.pointmap_n.height() != self.height {
                return Err(Error::ShapeMismatch(format!("{} resolution", pair_key(e.0, e.1))));
            }
        }
        for (t, tp) in self.graph.directed_pairs() {
            let f = self.flows.get(&(t, tp)).ok_or_else(|| Error::MissingEntry(flow_key(t, tp)))?;
            if f.width() != self.width || f.height() != self.height {
                return Err(Error::ShapeMismatch(format!("{} resolution", flow_key(t, tp))));
            }
        }
        if self.tracks.num_frames() != self.num_frames() {
            return Err(Error::ShapeMismatch(format!(
                "tracks cover {} frames, scene has {}",
                self.tracks.num_frames(),
                self.num_frames()
            )));
        }
        Ok(())
    }
}

fn write_frames(w: &Writer, prefix: &str, depth: &[DepthMap], poses: &[CameraPose], ks: &[Intrinsics]) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for (t, ((d, p), k)) in depth.iter().zip(poses).zip(ks).enumerate() {
        out.0.push(w.depth(format!("{prefix}/depth_{t}.c4dt"), d)?);
        out.1.push(w.vector(format!("{prefix}/pose_{t}.c4dt"), &p.to_array7())?);
        out.2.push(w.vector(format!("{prefix}/intrinsics_{t}.c4dt"), &k.to_array())?);
    }
    Ok(out)
}

fn write_masks(w: &Writer, prefix: &str, masks: &[MotionMask]) -> Result<Vec<String>> {
    masks.iter().map(|m| w.put(format!("{prefix}/mask_{}.c4dt", m.frame), &bool_grid_tensor(m.dynamic()))).collect()
}

/// Writes a scene directory with its manifest.
pub fn save_scene(dir: &Path, scene: &SceneData) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir)?;
    let w = Writer { dir };
    let mut pairs = BTreeMap::new();
    for p in &scene.pairs {
        let (n, m) = p.edge;
        let key = pair_key(n, m);
        let entry = PairEntry {
            pointmap_n: w.put(format!("pairs/{key}_pointmap_n.c4dt"), &vec3_grid_tensor(p.pointmap_n.points()))?,
            pointmap_m: w.put(format!("pairs/{key}_pointmap_m.c4dt"), &vec3_grid_tensor(p.pointmap_m.points()))?,
            conf_n: w.put(format!("pairs/{key}_conf_n.c4dt"), &f32_grid_tensor(p.conf_n.values()))?,
            conf_m: w.put(format!("pairs/{key}_conf_m.c4dt"), &f32_grid_tensor(p.conf_m.values()))?,
        };
        pairs.insert(key, entry);
    }
    let mut flows = BTreeMap::new();
    for f in scene.flows.values() {
        let key = f.key();
        let entry = FlowEntry {
            displacement: w.put(format!("flows/{key}_displacement.c4dt"), &vec2_grid_tensor(f.displacement()))?,
            valid: w.put(format!("flows/{key}_valid.c4dt"), &bool_grid_tensor(f.valid()))?,
        };
        flows.insert(key, entry);
    }
    let tracks = if scene.tracks.num_tracks() > 0 { Some(w.tracks("tracks", &scene.tracks)?) } else { None };
    let ground_truth = match &scene.ground_truth {
        None => None,
        Some(gt) => {
            let (depth, poses, intrinsics) = write_frames(&w, "gt", &gt.depth, &gt.poses, &gt.intrinsics)?;
            let masks = write_masks(&w, "gt", &gt.masks)?;
            let tracks = gt.tracks.as_ref().map(|t| w.tracks("gt/tracks", t)).transpose()?;
            Some(GroundTruthEntry { depth, poses, intrinsics, masks, tracks })
        }
    };
    let manifest = Manifest {
        num_frames: scene.num_frames(),
        width: scene.width,
        height: scene.height,
        graph: GraphEntry { window: scene.graph.window(), stride: scene.graph.stride() },
        frames: Vec::new(),
        pairs,
        flows,
        tracks,
        masks: Vec::new(),
        tracks3d: None,
        ground_truth,
    };
    manifest.write(dir)
}

fn load_ground_truth(r: &Reader, gt: &GroundTruthEntry, num_frames: usize) -> Result<GroundTruth> {
    for (what, n) in [("depth", gt.depth.len()), ("poses", gt.poses.len()), ("intrinsics", gt.intrinsics.len())] {
        if n != num_frames {
            return Err(Error::ShapeMismatch(format!("ground truth has {n} {what} entries for {num_frames} frames")));
        }
    }
    if !gt.masks.is_empty() && gt.masks.len() != num_frames {
        return Err(Error::ShapeMismatch(format!("ground truth has {} masks for {num_frames} frames", gt.masks.len())));
    }
    Ok(GroundTruth {
        depth: gt.depth.iter().map(|p| r.depth(p)).collect::<Result<_>>()?,
        poses: gt.poses.iter().map(|p| r.pose(p)).collect::<Result<_>>()?,
        intrinsics: gt.intrinsics.iter().map(|p| r.intrinsics(p)).collect::<Result<_>>()?,
        masks: gt.masks.iter().enumerate().map(|(t, p)| Ok(MotionMask::new(t, r.bool_grid(p)?))).collect::<Result<_>>()?,
        tracks: gt.tracks.as_ref().map(|e| r.tracks(e, num_frames)).transpose()?,
    })
}

/// Loads and validates a scene directory.
pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let m = Manifest::read(dir)?;
    let graph = SceneGraph::build(m.num_frames, m.graph.window, m.graph.stride)?;
    let r = m.reader(dir);
    let mut pairs = Vec::with_capacity(graph.edges().len());
    for &(n, mm) in graph.edges() {
        let key = pair_key(n, mm);
        let e = m.pairs.get(&key).ok_or_else(|| Error::MissingEntry(key.clone()))?;
        let tag = FrameTag::PairLocal { reference: n };
        pairs.push(PairPrediction::new(
            (n, mm),
            Pointmap::dense(r.vec3_grid(&e.pointmap_n)?, tag)?,
            Pointmap::dense(r.vec3_grid(&e.pointmap_m)?, tag)?,
            ConfidenceMap::new(r.f32_grid(&e.conf_n)?)?,
            ConfidenceMap::new(r.f32_grid(&e.conf_m)?)?,
        )?);
    }
    let mut flows = FlowSet::new();
    for (t, tp) in graph.directed_pairs() {
        let key = flow_key(t, tp);
        let e = m.flows.get(&key).ok_or_else(|| Error::MissingEntry(key.clone()))?;
        let valid = r.bool_grid(&e.valid)?;
        let disp = r.vec2_grid(&e.displacement, &valid)?;
        flows.insert((t, tp), FlowField::new(t, tp, disp, valid)?);
    }
    let tracks = match &m.tracks {
        Some(e) => r.tracks(e, m.num_frames)?,
        None => TrackSet::empty(m.num_frames),
    };
    let ground_truth = m.ground_truth.as_ref().map(|gt| load_ground_truth(&r, gt, m.num_frames)).transpose()?;
    let scene = SceneData { width: m.width, height: m.height, graph, pairs, flows, tracks, ground_truth };
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// reconstruction outputs

/// Everything the pipeline produces for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub width: usize,
    pub height: usize,
    pub graph: GraphEntry,
    pub depth: Vec<DepthMap>,
    pub poses: Vec<CameraPose>,
    pub intrinsics: Vec<Intrinsics>,
    pub masks: Vec<MotionMask>,
    pub tracks: TrackSet,
    pub tracks3d: Option<Trajectory3D>,
}

impl Reconstruction {
    pub fn num_frames(&self) -> usize {
        self.depth.len()
    }

    pub fn world_pointmaps(&self) -> Vec<Pointmap> {
        (0..self.num_frames())
            .map(|t| crate::geometry::unproject(&self.depth[t], &self.intrinsics[t], &self.poses[t]))
            .collect()
    }
}

pub fn save_reconstruction(dir: &Path, rec: &Reconstruction) -> Result<()> {
    fs::create_dir_all(dir)?;
    let w = Writer { dir };
    let (depth, poses, intrinsics) = write_frames(&w, "frames", &rec.depth, &rec.poses, &rec.intrinsics)?;
    let mut frames = Vec::with_capacity(rec.num_frames());
    for (t, pm) in rec.world_pointmaps().iter().enumerate() {
        let pointmap = w.put(format!("frames/pointmap_{t}.c4dt"), &vec3_grid_tensor(pm.points()))?;
        frames.push(FrameEntry {
            depth: depth[t].clone(),
            pose: poses[t].clone(),
            intrinsics: intrinsics[t].clone(),
            pointmap: Some(pointmap),
        });
    }
    let masks = write_masks(&w, "masks", &rec.masks)?;
    let tracks = if rec.tracks.num_tracks() > 0 { Some(w.tracks("tracks", &rec.tracks)?) } else { None };
    let tracks3d = match &rec.tracks3d {
        Some(tr) if tr.num_tracks() > 0 => {
            let (n, t) = (tr.num_tracks(), tr.num_frames());
            let pts = tr.points().iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
            let vis = tr.visibility().iter().map(|&b| b as u8).collect();
            Some(Tracks3dEntry {
                points: w.put("tracks3d/points.c4dt".into(), &Tensor::f32(vec![n, t, 3], pts).expect("dims"))?,
                visibility: w.put("tracks3d/visibility.c4dt".into(), &Tensor::u8(vec![n, t], vis).expect("dims"))?,
            })
        }
        _ => None,
    };
    let manifest = Manifest {
        num_frames: rec.num_frames(),
        width: rec.width,
        height: rec.height,
        graph: rec.graph,
        frames,
        pairs: BTreeMap::new(),
        flows: BTreeMap::new(),
        tracks,
        masks,
        tracks3d,
        ground_truth: None,
    };
    manifest.write(dir)
}

pub fn load_reconstruction(dir: &Path) -> Result<Reconstruction> {
    let m = Manifest::read(dir)?;
    if m.frames.len() != m.num_frames {
        return Err(Error::MissingEntry(format!("frames ({} of {} present)", m.frames.len(), m.num_frames)));
    }
    let r = m.reader(dir);
    let depth = m.frames.iter().map(|f| r.depth(&f.depth)).collect::<Result<Vec<_>>>()?;
    let poses = m.frames.iter().map(|f| r.pose(&f.pose)).collect::<Result<Vec<_>>>()?;
    let intrinsics = m.frames.iter().map(|f| r.intrinsics(&f.intrinsics)).collect::<Result<Vec<_>>>()?;
    let masks = if m.masks.is_empty() {
        (0..m.num_frames).map(|t| MotionMask::all_static(t, m.width, m.height)).collect()
    } else if m.masks.len() == m.num_frames {
        m.masks.iter().enumerate().map(|(t, p)| Ok(MotionMask::new(t, r.bool_grid(p)?))).collect::<Result<_>>()?
    } else {
        return Err(Error::ShapeMismatch(format!("{} masks for {} frames", m.masks.len(), m.num_frames)));
    };
    let tracks = match &m.tracks {
        Some(e) => r.tracks(e, m.num_frames)?,
        None => TrackSet::empty(m.num_frames),
    };
    let tracks3d = match &m.tracks3d {
        None => None,
        Some(e) => {
            let n = tracks.num_tracks();
            let (path, pt) = r.load(&e.points)?;
            let pts = pt.f32_data(&[n, m.num_frames, 3]).map_err(tensor_err(&path))?;
            let points = pts.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
            let (path, vt) = r.load(&e.visibility)?;
            let vis = vt.u8_data(&[n, m.num_frames]).map_err(tensor_err(&path))?.iter().map(|&b| b != 0).collect();
            Some(Trajectory3D::new(n, m.num_frames, points, vis)?)
        }
    };
    Ok(Reconstruction { width: m.width, height: m.height, graph: m.graph, depth, poses, intrinsics, masks, tracks, tracks3d })
}

// ---------------------------------------------------------------------------
// PLY export

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    #[default]
    Ascii,
    BinaryLittleEndian,
}

/// Treatment of pixels inside the motion mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DynamicPoints {
    #[default]
    Keep,
    /// Colour dynamic points pure red.
    Flag,
    Drop,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlyOptions {
    pub format: PlyFormat,
    pub dynamic: DynamicPoints,
}

const STATIC_GREY: [u8; 3] = [200, 200, 200];
const DYNAMIC_RED: [u8; 3] = [255, 0, 0];

/// Writes valid pixels of world pointmaps as a PLY point cloud. Returns the
/// number of vertices written.
pub fn export_ply(
    path: &Path,
    pointmaps: &[Pointmap],
    colors: Option<&[Grid<[u8; 3]>]>,
    masks: Option<&[MotionMask]>,
    opts: PlyOptions,
) -> Result<usize> {
    if let Some(pm) = pointmaps.iter().find(|p| p.tag() != FrameTag::World) {
        return Err(Error::InvalidInput(format!("PLY export needs world pointmaps, got {:?}", pm.tag())));
    }
    if colors.is_some_and(|c| c.len() != pointmaps.len()) || masks.is_some_and(|m| m.len() != pointmaps.len()) {
        return Err(Error::ShapeMismatch("colors/masks must match the number of pointmaps".into()));
    }
    if opts.dynamic != DynamicPoints::Keep && masks.is_none() {
        return Err(Error::InvalidInput("dynamic-point handling requires motion masks".into()));
    }
    let with_color = colors.is_some() || opts.dynamic == DynamicPoints::Flag;

    let mut verts: Vec<(Vector3<f64>, [u8; 3])> = Vec::new();
    for (t, pm) in pointmaps.iter().enumerate() {
        for j in 0..pm.height() {
            for i in 0..pm.width() {
                if !*pm.valid().get(i, j) {
                    continue;
                }
                let dynamic = masks.is_some_and(|m| m[t].is_dynamic(i, j));
                if dynamic && opts.dynamic == DynamicPoints::Drop {
                    continue;
                }
                let mut rgb = colors.map_or(STATIC_GREY, |c| *c[t].get(i, j));
                if dynamic && opts.dynamic == DynamicPoints::Flag {
                    rgb = DYNAMIC_RED;
                }
                verts.push((*pm.points().get(i, j), rgb));
            }
        }
    }

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    let fmt = match opts.format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(out, "ply\nformat {fmt} 1.0\nelement vertex {}", verts.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    if with_color {
        writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    }
    writeln!(out, "end_header")?;
    for (p, c) in &verts {
        let xyz = [p.x as f32, p.y as f32, p.z as f32];
        match opts.format {
            PlyFormat::Ascii => {
                write!(out, "{} {} {}", xyz[0], xyz[1], xyz[2])?;
                if with_color {
                    write!(out, " {} {} {}", c[0], c[1], c[2])?;
                }
                writeln!(out)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for v in xyz {
                    out.write_all(&v.to_le_bytes())?;
                }
                if with_color {
                    out.write_all(c)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(verts.len())
}
