use crate::{Error, Result};

/// Strided sliding-window scene graph over `num_frames` frames.
///
/// Temporal offsets are `{1} ∪ {k·stride : k ≥ 1, k·stride ≤ window}`; edge
/// `(i, i + d)` is present for every offset `d` with `i + d < num_frames`.
/// The offset 1 is always present so consecutive frames are always linked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneGraph {
    num_frames: usize,
    window: usize,
    stride: usize,
    edges: Vec<(usize, usize)>,
}

impl SceneGraph {
    pub fn build(num_frames: usize, window: usize, stride: usize) -> Result<Self> {
        if num_frames < 2 {
            return Err(Error::InvalidInput(format!("scene graph needs at least 2 frames, got {num_frames}")));
        }
        if window < 1 || stride < 1 {
            return Err(Error::InvalidInput(format!("window ({window}) and stride ({stride}) must be >= 1")));
        }
        let offsets = Self::offsets_for(window, stride);
        let mut edges = Vec::new();
        for i in 0..num_frames {
            for &d in &offsets {
                if i + d < num_frames {
                    edges.push((i, i + d));
                }
            }
        }
        Ok(Self { num_frames, window, stride, edges })
    }

    /// Sorted, de-duplicated temporal offsets.
    pub fn offsets_for(window: usize, stride: usize) -> Vec<usize> {
        let mut offsets = vec![1];
        let mut d = stride;
        while d <= window {
            if d != 1 {
                offsets.push(d);
            }
            d += stride;
        }
        offsets
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_index(&self, edge: (usize, usize)) -> Option<usize> {
        self.edges.iter().position(|&e| e == edge)
    }

    /// `(edge index, other frame)` for every edge touching `t`, in edge order.
    pub fn neighbors(&self, t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().enumerate().filter_map(move |(k, &(n, m))| {
            if n == t {
                Some((k, m))
            } else if m == t {
                Some((k, n))
            } else {
                None
            }
        })
    }

    /// Both orderings of every edge, edge-sorted: `(n, m), (m, n), ...`.
    pub fn directed_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().flat_map(|&(n, m)| [(n, m), (m, n)]).collect()
    }
}
