//! Tensors, rectangular regions over them, and chunks.
//!
//! Every tensor is a logical global array. Each rank holds a buffer with the
//! full logical shape; regions address the same coordinates on every rank.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

pub type TensorId = String;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub tensor_id: TensorId,
    pub shape: Vec<usize>,
    pub elem_bytes: usize,
    #[serde(default)]
    pub global: bool,
}

impl TensorSpec {
    pub fn new(tensor_id: impl Into<TensorId>, shape: Vec<usize>, elem_bytes: usize) -> Self {
        TensorSpec {
            tensor_id: tensor_id.into(),
            shape,
            elem_bytes,
            global: true,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.shape.is_empty() {
            return Err(format!("tensor {}: empty shape", self.tensor_id));
        }
        if self.shape.contains(&0) {
            return Err(format!(
                "tensor {}: zero extent in {:?}",
                self.tensor_id, self.shape
            ));
        }
        if !matches!(self.elem_bytes, 1 | 2 | 4 | 8) {
            return Err(format!(
                "tensor {}: elem_bytes {} not in {{1,2,4,8}}",
                self.tensor_id, self.elem_bytes
            ));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn full_region(&self) -> Region {
        Region {
            tensor_id: self.tensor_id.clone(),
            offsets: vec![0; self.shape.len()],
            sizes: self.shape.clone(),
        }
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for a in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        strides
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub tensor_id: TensorId,
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl Region {
    pub fn new(tensor_id: impl Into<TensorId>, offsets: Vec<usize>, sizes: Vec<usize>) -> Self {
        Region {
            tensor_id: tensor_id.into(),
            offsets,
            sizes,
        }
    }

    pub fn rank(&self) -> usize {
        self.sizes.len()
    }

    pub fn numel(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn bytes(&self, elem_bytes: usize) -> usize {
        self.numel() * elem_bytes
    }

    pub fn end(&self, axis: usize) -> usize {
        self.offsets[axis] + self.sizes[axis]
    }

    pub fn check_against(&self, spec: &TensorSpec) -> Result<(), String> {
        if self.tensor_id != spec.tensor_id {
            return Err(format!(
                "region names tensor {} but spec is {}",
                self.tensor_id, spec.tensor_id
            ));
        }
        if self.offsets.len() != spec.shape.len() || self.sizes.len() != spec.shape.len() {
            return Err(format!(
                "region {} has rank {} but tensor has rank {}",
                self,
                self.sizes.len(),
                spec.shape.len()
            ));
        }
        for axis in 0..spec.shape.len() {
            if self.sizes[axis] == 0 {
                return Err(format!("region {self}: zero size on axis {axis}"));
            }
            if self.end(axis) > spec.shape[axis] {
                return Err(format!(
                    "region {self} out of bounds on axis {axis} (extent {})",
                    spec.shape[axis]
                ));
            }
        }
        Ok(())
    }

    pub fn intersection(&self, other: &Region) -> Option<Region> {
        if self.tensor_id != other.tensor_id || self.rank() != other.rank() {
            return None;
        }
        let mut offsets = Vec::with_capacity(self.rank());
        let mut sizes = Vec::with_capacity(self.rank());
        for a in 0..self.rank() {
            let lo = self.offsets[a].max(other.offsets[a]);
            let hi = self.end(a).min(other.end(a));
            if lo >= hi {
                return None;
            }
            offsets.push(lo);
            sizes.push(hi - lo);
        }
        Some(Region::new(self.tensor_id.clone(), offsets, sizes))
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.intersection(other).is_some()
    }

    pub fn contains(&self, other: &Region) -> bool {
        self.tensor_id == other.tensor_id
            && self.rank() == other.rank()
            && (0..self.rank())
                .all(|a| self.offsets[a] <= other.offsets[a] && other.end(a) <= self.end(a))
    }

    /// Whether the region occupies one contiguous span of row-major storage.
    pub fn is_contiguous(&self, shape: &[usize]) -> bool {
        // Find the first axis that is not a singleton; every later axis must be full.
        let first = match (0..self.rank()).find(|&a| self.sizes[a] != 1) {
            Some(a) => a,
            None => return true,
        };
        (first + 1..self.rank()).all(|a| self.offsets[a] == 0 && self.sizes[a] == shape[a])
    }

    /// Linear storage indices of every element, visited in `layout` order.
    pub fn linear_indices(&self, shape: &[usize], layout: Layout) -> Vec<usize> {
        let n = self.rank();
        let mut strides = vec![1usize; n];
        for a in (0..n.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * shape[a + 1];
        }
        let axes: Vec<usize> = match layout {
            // fastest-varying axis last
            Layout::RowMajor => (0..n).collect(),
            Layout::ColMajor => (0..n).rev().collect(),
        };
        let mut out = Vec::with_capacity(self.numel());
        if self.numel() == 0 {
            return out;
        }
        let mut idx = vec![0usize; n];
        loop {
            let lin: usize = (0..n)
                .map(|a| (self.offsets[a] + idx[a]) * strides[a])
                .sum();
            out.push(lin);
            // odometer increment over `axes`, last entry fastest
            let mut k = n;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                let a = axes[k];
                idx[a] += 1;
                if idx[a] < self.sizes[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.tensor_id)?;
        for a in 0..self.rank() {
            if a > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}:{}", self.offsets[a], self.end(a))?;
        }
        write!(f, "]")
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    RowMajor,
    ColMajor,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub region: Region,
    #[serde(default)]
    pub layout: Layout,
}

impl Chunk {
    pub fn new(chunk_id: impl Into<String>, region: Region) -> Self {
        Chunk {
            chunk_id: chunk_id.into(),
            region,
            layout: Layout::RowMajor,
        }
    }

    pub fn is_contiguous(&self, shape: &[usize]) -> bool {
        let contiguous = self.region.is_contiguous(shape);
        match self.layout {
            Layout::RowMajor => contiguous,
            // a transposed view is only contiguous when it is effectively 1-D
            Layout::ColMajor => {
                contiguous && self.region.sizes.iter().filter(|&&s| s > 1).count() <= 1
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SplitError {
    #[error("indivisible split: extent {extent} on axis {axis} by factor {factor}")]
    Indivisible {
        extent: usize,
        axis: usize,
        factor: usize,
    },
    #[error("split factor must be >= 1")]
    ZeroFactor,
    #[error("axis {axis} out of range for rank-{rank} region")]
    BadAxis { axis: usize, rank: usize },
    #[error("factor {factor} exceeds extent {extent} on axis {axis}")]
    TooFine {
        extent: usize,
        axis: usize,
        factor: usize,
    },
}

/// Sizes of `factor` pieces of `extent`; the first `extent % factor` pieces get one extra.
pub fn split_sizes(
    extent: usize,
    axis: usize,
    factor: usize,
    allow_remainder: bool,
) -> Result<Vec<usize>, SplitError> {
    if factor == 0 {
        return Err(SplitError::ZeroFactor);
    }
    if factor > extent {
        return Err(SplitError::TooFine {
            extent,
            axis,
            factor,
        });
    }
    let rem = extent % factor;
    if rem != 0 && !allow_remainder {
        return Err(SplitError::Indivisible {
            extent,
            axis,
            factor,
        });
    }
    let base = extent / factor;
    Ok((0..factor).map(|i| base + usize::from(i < rem)).collect())
}

/// Split a region into `factor` pieces along `axis`, in ascending offset order.
pub fn split_region(
    region: &Region,
    axis: usize,
    factor: usize,
    allow_remainder: bool,
) -> Result<Vec<Region>, SplitError> {
    if axis >= region.rank() {
        return Err(SplitError::BadAxis {
            axis,
            rank: region.rank(),
        });
    }
    if factor == 1 {
        return Ok(vec![region.clone()]);
    }
    let sizes = split_sizes(region.sizes[axis], axis, factor, allow_remainder)?;
    let mut offset = region.offsets[axis];
    Ok(sizes
        .into_iter()
        .map(|size| {
            let mut piece = region.clone();
            piece.offsets[axis] = offset;
            piece.sizes[axis] = size;
            offset += size;
            piece
        })
        .collect())
}

/// Split a chunk into `factor` chunks along `axis`.
///
/// With `allow_remainder`, non-divisible extents use ceil-first distribution.
pub fn split_chunk(
    chunk: &Chunk,
    axis: usize,
    factor: usize,
    allow_remainder: bool,
) -> Result<Vec<Chunk>, SplitError> {
    let regions = split_region(&chunk.region, axis, factor, allow_remainder)?;
    if regions.len() == 1 {
        return Ok(vec![chunk.clone()]);
    }
    Ok(regions
        .into_iter()
        .enumerate()
        .map(|(i, region)| Chunk {
            chunk_id: format!("{}.{}", chunk.chunk_id, i),
            region,
            layout: chunk.layout,
        })
        .collect())
}

/// Merge regions that tile a box along a single axis. Returns `None` if they do not.
pub fn merge_regions(parts: &[Region]) -> Option<Region> {
    let first = parts.first()?;
    if parts.len() == 1 {
        return Some(first.clone());
    }
    let rank = first.rank();
    // the merge axis is the one where offsets differ
    let axis = (0..rank).find(|&a| parts.iter().any(|p| p.offsets[a] != first.offsets[a]))?;
    let mut sorted: Vec<&Region> = parts.iter().collect();
    sorted.sort_by_key(|p| p.offsets[axis]);
    let mut expect = sorted[0].offsets[axis];
    for p in &sorted {
        if p.tensor_id != first.tensor_id || p.rank() != rank {
            return None;
        }
        for a in (0..rank).filter(|&a| a != axis) {
            if p.offsets[a] != first.offsets[a] || p.sizes[a] != first.sizes[a] {
                return None;
            }
        }
        if p.offsets[axis] != expect {
            return None;
        }
        expect += p.sizes[axis];
    }
    let mut merged = sorted[0].clone();
    merged.sizes[axis] = expect - merged.offsets[axis];
    Some(merged)
}

/// Split a chunk into row-wise pieces that are each contiguous in row-major storage.
pub fn contiguous_pieces(chunk: &Chunk, shape: &[usize]) -> Vec<Chunk> {
    if chunk.is_contiguous(shape) {
        return vec![chunk.clone()];
    }
    let mut out = Vec::new();
    let mut stack = vec![chunk.region.clone()];
    while let Some(region) = stack.pop() {
        let as_chunk = Chunk {
            chunk_id: String::new(),
            region: region.clone(),
            layout: Layout::RowMajor,
        };
        if as_chunk.is_contiguous(shape) {
            out.push(region);
            continue;
        }
        let axis = (0..region.rank())
            .find(|&a| region.sizes[a] > 1)
            .expect("non-contiguous region has a non-singleton axis");
        let pieces = split_region(&region, axis, region.sizes[axis], false)
            .expect("unit split always divides");
        stack.extend(pieces.into_iter().rev());
    }
    out.into_iter()
        .enumerate()
        .map(|(i, region)| Chunk {
            chunk_id: format!("{}.c{}", chunk.chunk_id, i),
            region,
            layout: Layout::RowMajor,
        })
        .collect()
}

/// Whether `target` is fully covered by the union of `cover`.
pub fn covered_by(target: &Region, cover: &[Region]) -> bool {
    let relevant: Vec<Region> = cover
        .iter()
        .filter_map(|c| c.intersection(target))
        .collect();
    if relevant.is_empty() {
        return false;
    }
    let mut bounds: Vec<Vec<usize>> = (0..target.rank())
        .map(|a| vec![target.offsets[a], target.end(a)])
        .collect();
    for r in &relevant {
        for (a, b) in bounds.iter_mut().enumerate() {
            b.push(r.offsets[a]);
            b.push(r.end(a));
        }
    }
    for b in bounds.iter_mut() {
        b.sort_unstable();
        b.dedup();
    }
    let grid = CellGrid { bounds };
    let mut marked = vec![false; grid.cell_count()];
    for r in &relevant {
        for c in grid.cells(r) {
            marked[c] = true;
        }
    }
    grid.cells(target).into_iter().all(|c| marked[c])
}

/// Coordinate-compressed grid over one tensor: cells are the boxes between
/// consecutive boundaries of every region ever mentioned for that tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGrid {
    pub bounds: Vec<Vec<usize>>,
}

impl CellGrid {
    pub fn new<'a>(shape: &[usize], regions: impl IntoIterator<Item = &'a Region>) -> Self {
        let mut bounds: Vec<Vec<usize>> = shape.iter().map(|&e| vec![0, e]).collect();
        for r in regions {
            for (a, b) in bounds.iter_mut().enumerate() {
                b.push(r.offsets[a]);
                b.push(r.end(a));
            }
        }
        for b in bounds.iter_mut() {
            b.sort_unstable();
            b.dedup();
        }
        CellGrid { bounds }
    }

    pub fn cell_count(&self) -> usize {
        self.bounds.iter().map(|b| b.len() - 1).product()
    }

    /// Indices of the cells overlapping `region`.
    pub fn cells(&self, region: &Region) -> Vec<usize> {
        let ranges: Vec<(usize, usize)> = self
            .bounds
            .iter()
            .enumerate()
            .map(|(a, b)| {
                let lo = b.partition_point(|&x| x <= region.offsets[a]) - 1;
                let hi = b.partition_point(|&x| x < region.end(a));
                (lo, hi)
            })
            .collect();
        let dims: Vec<usize> = self.bounds.iter().map(|b| b.len() - 1).collect();
        let mut out = Vec::new();
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        if ranges.iter().any(|r| r.0 >= r.1) {
            return out;
        }
        loop {
            let mut lin = 0;
            for a in 0..dims.len() {
                lin = lin * dims[a] + idx[a];
            }
            out.push(lin);
            let mut k = dims.len();
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < ranges[k].1 {
                    break;
                }
                idx[k] = ranges[k].0;
            }
        }
    }
}

/// Cell grids for every tensor, keyed by tensor id.
pub type Grids = BTreeMap<TensorId, CellGrid>;
