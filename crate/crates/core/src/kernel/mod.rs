//! Abstract tile-level compute kernels and their wave schedules.

mod annotate;

pub use annotate::{
    parse_annotations, print_annotated, AnnotationDirective, Diagnostic, DirectiveKind,
    KernelSkeleton, ParseError, SkeletonAxis,
};

use crate::region::{Region, TensorId, TensorSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_SM_COUNT: usize = 132;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub name: String,
    pub extent: usize,
    pub block: usize,
    /// Reduction axes live inside a tile's loop and do not produce tiles.
    #[serde(default)]
    pub reduction: bool,
}

impl AxisSpec {
    pub fn spatial(name: &str, extent: usize, block: usize) -> Self {
        AxisSpec {
            name: name.to_string(),
            extent,
            block,
            reduction: false,
        }
    }

    pub fn reduction(name: &str, extent: usize, block: usize) -> Self {
        AxisSpec {
            reduction: true,
            ..Self::spatial(name, extent, block)
        }
    }

    pub fn tiles(&self) -> usize {
        self.extent.div_ceil(self.block)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Persistent,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduler {
    pub kind: SchedulerKind,
    pub sm_count: usize,
}

/// A tensor access: one axis name per tensor dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub tensor: TensorId,
    pub axes: Vec<String>,
}

impl Access {
    pub fn new(tensor: &str, axes: &[&str]) -> Self {
        Access {
            tensor: tensor.to_string(),
            axes: axes.iter().map(|a| a.to_string()).collect(),
        }
    }
}

/// What a tile computes when payloads are simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileKernel {
    /// `out[m, n] = sum_k a[m, k] * b[n, k]` over the first two reads.
    #[default]
    Gemm,
    /// Every written element is the sum of every element read.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileProgram {
    pub axes: Vec<AxisSpec>,
    pub scheduler: Scheduler,
    pub reads: Vec<Access>,
    pub writes: Vec<Access>,
    #[serde(default = "two")]
    pub elem_bytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_per_tile: Option<f64>,
    #[serde(default)]
    pub kernel: TileKernel,
}

fn two() -> usize {
    2
}

#[derive(Debug, thiserror::Error)]
pub enum KernelError {
    #[error("invalid tile program: {0}")]
    Invalid(String),
    #[error("unbound symbol {0}")]
    Unbound(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("tile program json: {0}")]
    Json(#[from] serde_json::Error),
}

impl TileProgram {
    /// Persistent GEMM `C[M,N] = A[M,K] * B[N,K]^T` with K as the reduction axis.
    pub fn gemm(m: usize, n: usize, k: usize, bm: usize, bn: usize, bk: usize) -> Self {
        TileProgram {
            axes: vec![
                AxisSpec::spatial("M", m, bm),
                AxisSpec::spatial("N", n, bn),
                AxisSpec::reduction("K", k, bk),
            ],
            scheduler: Scheduler {
                kind: SchedulerKind::Persistent,
                sm_count: DEFAULT_SM_COUNT,
            },
            reads: vec![Access::new("A", &["M", "K"]), Access::new("B", &["N", "K"])],
            writes: vec![Access::new("C", &["M", "N"])],
            elem_bytes: 2,
            flops_per_tile: None,
            kernel: TileKernel::Gemm,
        }
    }

    /// A program with no tiles; used for communication-only workloads.
    pub fn empty() -> Self {
        TileProgram {
            axes: Vec::new(),
            scheduler: Scheduler {
                kind: SchedulerKind::Persistent,
                sm_count: DEFAULT_SM_COUNT,
            },
            reads: Vec::new(),
            writes: Vec::new(),
            elem_bytes: 2,
            flops_per_tile: Some(0.0),
            kernel: TileKernel::Sum,
        }
    }

    pub fn with_sm_count(mut self, sm_count: usize) -> Self {
        self.scheduler.sm_count = sm_count;
        self
    }

    pub fn with_names(mut self, a: &str, b: &str, c: &str) -> Self {
        self.reads[0].tensor = a.to_string();
        self.reads[1].tensor = b.to_string();
        self.writes[0].tensor = c.to_string();
        self
    }

    pub fn axis(&self, name: &str) -> Option<&AxisSpec> {
        self.axes.iter().find(|a| a.name == name)
    }

    pub fn spatial_axes(&self) -> impl Iterator<Item = &AxisSpec> {
        self.axes.iter().filter(|a| !a.reduction)
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }

    pub fn tile_count(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        self.spatial_axes().map(AxisSpec::tiles).product()
    }

    /// Tile coordinates (one per spatial axis, declaration order), row-major ids.
    pub fn coords(&self, tile: usize) -> Vec<usize> {
        let dims: Vec<usize> = self.spatial_axes().map(AxisSpec::tiles).collect();
        let mut c = vec![0; dims.len()];
        let mut rest = tile;
        for a in (0..dims.len()).rev() {
            c[a] = rest % dims[a];
            rest /= dims[a];
        }
        c
    }

    pub fn tile_id(&self, coords: &[usize]) -> usize {
        self.spatial_axes()
            .zip(coords)
            .fold(0, |acc, (ax, &c)| acc * ax.tiles() + c)
    }

    fn access_region(&self, access: &Access, coords: &[usize]) -> Region {
        let spatial: BTreeMap<&str, usize> = self
            .spatial_axes()
            .enumerate()
            .map(|(i, a)| (a.name.as_str(), coords[i]))
            .collect();
        let mut offsets = Vec::new();
        let mut sizes = Vec::new();
        for name in &access.axes {
            let ax = self.axis(name).expect("access axis checked");
            match spatial.get(name.as_str()) {
                Some(&c) => {
                    let off = c * ax.block;
                    offsets.push(off);
                    sizes.push(ax.block.min(ax.extent - off));
                }
                None => {
                    offsets.push(0);
                    sizes.push(ax.extent);
                }
            }
        }
        Region::new(access.tensor.clone(), offsets, sizes)
    }

    pub fn read_regions(&self, tile: usize) -> Vec<Region> {
        let c = self.coords(tile);
        self.reads
            .iter()
            .map(|a| self.access_region(a, &c))
            .collect()
    }

    pub fn write_regions(&self, tile: usize) -> Vec<Region> {
        let c = self.coords(tile);
        self.writes
            .iter()
            .map(|a| self.access_region(a, &c))
            .collect()
    }

    /// Tiles with a read region intersecting `r`, ascending.
    pub fn tiles_reading(&self, r: &Region) -> Vec<usize> {
        self.tiles_touching(&self.reads, r)
    }

    /// Tiles with a write region intersecting `r`, ascending.
    pub fn tiles_writing(&self, r: &Region) -> Vec<usize> {
        self.tiles_touching(&self.writes, r)
    }

    fn tiles_touching(&self, accesses: &[Access], r: &Region) -> Vec<usize> {
        let spatial: Vec<&AxisSpec> = self.spatial_axes().collect();
        if self.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        for acc in accesses {
            if acc.tensor != r.tensor_id || acc.axes.len() != r.rank() {
                continue;
            }
            // box of tile coordinates whose access region meets `r`
            let mut ranges: Vec<(usize, usize)> = spatial.iter().map(|a| (0, a.tiles())).collect();
            let mut empty = false;
            for (d, name) in acc.axes.iter().enumerate() {
                let ax = self.axis(name).expect("access axis checked");
                if r.sizes[d] == 0 || r.offsets[d] >= ax.extent {
                    empty = true;
                    break;
                }
                if let Some(i) = spatial.iter().position(|a| a.name == *name) {
                    let lo = r.offsets[d] / ax.block;
                    let hi = (r.end(d) - 1) / ax.block + 1;
                    ranges[i] = (ranges[i].0.max(lo), ranges[i].1.min(hi));
                }
            }
            if empty || ranges.iter().any(|&(lo, hi)| lo >= hi) {
                continue;
            }
            let mut c: Vec<usize> = ranges.iter().map(|r| r.0).collect();
            loop {
                out.push(self.tile_id(&c));
                let mut k = c.len();
                loop {
                    if k == 0 {
                        break;
                    }
                    k -= 1;
                    c[k] += 1;
                    if c[k] < ranges[k].1 {
                        break;
                    }
                    c[k] = ranges[k].0;
                    if k == 0 {
                        k = usize::MAX;
                        break;
                    }
                }
                if k == usize::MAX || c.is_empty() {
                    break;
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Shapes of every tensor the program touches.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut out: Vec<TensorSpec> = Vec::new();
        for access in self.reads.iter().chain(&self.writes) {
            if out.iter().any(|t| t.tensor_id == access.tensor) {
                continue;
            }
            let shape = access
                .axes
                .iter()
                .map(|n| self.axis(n).map_or(0, |a| a.extent))
                .collect();
            let mut spec = TensorSpec::new(access.tensor.clone(), shape, self.elem_bytes);
            spec.global = false;
            out.push(spec);
        }
        out
    }

    /// Flops per tile: explicit override, else `2 * prod(spatial blocks) * prod(reduction extents)`.
    pub fn flops_per_tile(&self) -> f64 {
        if let Some(f) = self.flops_per_tile {
            return f;
        }
        if self.is_empty() {
            return 0.0;
        }
        let spatial: f64 = self.spatial_axes().map(|a| a.block as f64).product();
        let reduce: f64 = self
            .axes
            .iter()
            .filter(|a| a.reduction)
            .map(|a| a.extent as f64)
            .product();
        2.0 * spatial * reduce
    }

    pub fn check(&self) -> Result<(), KernelError> {
        let bad = |m: String| Err(KernelError::Invalid(m));
        for a in &self.axes {
            if a.extent == 0 || a.block == 0 {
                return bad(format!("axis {} has zero extent or block", a.name));
            }
        }
        for (i, a) in self.axes.iter().enumerate() {
            if self.axes[..i].iter().any(|b| b.name == a.name) {
                return bad(format!("axis {} declared twice", a.name));
            }
        }
        if self.scheduler.sm_count == 0 {
            return bad("sm_count must be positive".into());
        }
        for access in self.reads.iter().chain(&self.writes) {
            for n in &access.axes {
                if self.axis(n).is_none() {
                    return bad(format!(
                        "access to {} names unknown axis {n}",
                        access.tensor
                    ));
                }
            }
        }
        if self.kernel == TileKernel::Gemm && !self.is_empty() {
            let shaped = self.reads.len() >= 2
                && self.writes.len() == 1
                && self.reads[0].axes.len() == 2
                && self.reads[1].axes.len() == 2
                && self.writes[0].axes.len() == 2
                && self.reads[0].axes[1] == self.reads[1].axes[1]
                && self.writes[0].axes[0] == self.reads[0].axes[0]
                && self.writes[0].axes[1] == self.reads[1].axes[0];
            if !shaped {
                return bad("gemm kernel needs reads A[m,k], B[n,k] and write C[m,n]".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, KernelError> {
        let p: TileProgram = serde_json::from_str(text)?;
        p.check()?;
        Ok(p)
    }
}

/// A tile order grouped into waves of `sm_count` tiles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveSchedule {
    pub order: Vec<usize>,
    pub sm_count: usize,
}

impl WaveSchedule {
    pub fn new(order: Vec<usize>, sm_count: usize) -> Self {
        WaveSchedule { order, sm_count }
    }

    pub fn waves(&self) -> Vec<&[usize]> {
        self.order.chunks(self.sm_count.max(1)).collect()
    }

    pub fn wave_count(&self) -> usize {
        self.order.len().div_ceil(self.sm_count.max(1))
    }

    pub fn is_permutation_of(&self, tile_count: usize) -> bool {
        let mut seen = vec![false; tile_count];
        self.order.len() == tile_count
            && self
                .order
                .iter()
                .all(|&t| t < tile_count && !std::mem::replace(&mut seen[t], true))
    }
}

/// The kernel's native row-major traversal, grouped into waves.
pub fn default_tile_order(p: &TileProgram) -> WaveSchedule {
    WaveSchedule::new((0..p.tile_count()).collect(), p.scheduler.sm_count)
}

/// Fraction of SM slots doing useful work: `tiles / (waves * sm_count)`.
pub fn sm_utilization(p: &TileProgram, order: &WaveSchedule) -> f64 {
    let tiles = p.tile_count();
    if tiles == 0 {
        return 1.0;
    }
    tiles as f64 / (order.wave_count() * order.sm_count) as f64
}

/// Same as [`sm_utilization`] from raw counts.
pub fn wave_utilization(tile_count: usize, sm_count: usize) -> f64 {
    if tile_count == 0 {
        return 1.0;
    }
    tile_count as f64 / (tile_count.div_ceil(sm_count) * sm_count) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gemm_tiles_and_regions() {
        let p = TileProgram::gemm(256, 512, 64, 128, 128, 32);
        assert_eq!(p.tile_count(), 8);
        assert_eq!(p.coords(5), vec![1, 1]);
        assert_eq!(p.tile_id(&[1, 1]), 5);
        let reads = p.read_regions(5);
        assert_eq!(reads[0], Region::new("A", vec![128, 0], vec![128, 64]));
        assert_eq!(reads[1], Region::new("B", vec![128, 0], vec![128, 64]));
        assert_eq!(
            p.write_regions(5)[0],
            Region::new("C", vec![128, 128], vec![128, 128])
        );
        assert_eq!(p.flops_per_tile(), 2.0 * 128.0 * 128.0 * 64.0);
        p.check().unwrap();
    }

    proptest! {
        #[test]
        fn tile_lookup_matches_scan(
            m in 1usize..300, n in 1usize..300, off in (0usize..300, 0usize..300), size in (0usize..200, 1usize..200)
        ) {
            let p = TileProgram::gemm(m, n, 32, 64, 48, 32);
            let c = Region::new("C", vec![off.0, off.1], vec![size.0, size.1]);
            let a = Region::new("A", vec![off.0, 0], vec![size.0, 32]);
            let scan = |r: &Region, w: bool| -> Vec<usize> {
                (0..p.tile_count())
                    .filter(|&t| {
                        let rs = if w { p.write_regions(t) } else { p.read_regions(t) };
                        rs.iter().any(|x| x.intersects(r))
                    })
                    .collect()
            };
            prop_assert_eq!(p.tiles_writing(&c), scan(&c, true));
            prop_assert_eq!(p.tiles_reading(&a), scan(&a, false));
            prop_assert_eq!(p.tiles_reading(&c), Vec::<usize>::new());
        }
    }

    #[test]
    fn ragged_last_tile_is_clipped() {
        let p = TileProgram::gemm(200, 128, 16, 128, 128, 16);
        assert_eq!(p.tile_count(), 2);
        assert_eq!(p.write_regions(1)[0].sizes, vec![72, 128]);
    }

    #[test]
    fn default_order_waves() {
        let p = TileProgram::gemm(4, 4, 1, 1, 1, 1).with_sm_count(4);
        let ws = default_tile_order(&p);
        let waves: Vec<Vec<usize>> = ws.waves().iter().map(|w| w.to_vec()).collect();
        assert_eq!(
            waves,
            vec![
                vec![0, 1, 2, 3],
                vec![4, 5, 6, 7],
                vec![8, 9, 10, 11],
                vec![12, 13, 14, 15]
            ]
        );
        let one = TileProgram::gemm(1, 1, 1, 1, 1, 1);
        assert_eq!(default_tile_order(&one).waves(), vec![&[0usize][..]]);
    }

    #[test]
    fn big_gemm_wave_count() {
        // 32 x 32 tiles of 128 x 128
        let p = TileProgram::gemm(4096, 4096, 128, 128, 128, 64);
        let ws = default_tile_order(&p);
        assert_eq!(ws.wave_count(), 8);
        assert_eq!(ws.waves().last().unwrap().len(), 1024 - 7 * 132);
    }

    #[test]
    fn utilization_points() {
        assert!((wave_utilization(1024, 132) - 1024.0 / 1056.0).abs() < 1e-12);
        assert_eq!(wave_utilization(132, 132), 1.0);
        assert!((wave_utilization(64, 132) - 64.0 / 132.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn utilization_staircase(sms in 2usize..200, tiles in 2usize..2000) {
            let u = wave_utilization(tiles, sms);
            let prev = wave_utilization(tiles - 1, sms);
            prop_assert!(u > 0.0 && u <= 1.0);
            if tiles.div_ceil(sms) == (tiles - 1).div_ceil(sms) {
                prop_assert!(prev <= u);
            } else {
                // crossing into a new wave always drops utilization
                prop_assert!(u < prev);
            }
        }

        #[test]
        fn every_tile_in_bounds(m in 1usize..300, n in 1usize..300, bm in 1usize..64, bn in 1usize..64) {
            let p = TileProgram::gemm(m, n, 8, bm, bn, 8);
            let specs = p.tensor_specs();
            let order = default_tile_order(&p);
            prop_assert!(order.is_permutation_of(p.tile_count()));
            for &t in &order.order {
                for r in p.read_regions(t).iter().chain(&p.write_regions(t)) {
                    let spec = specs.iter().find(|s| s.tensor_id == r.tensor_id).unwrap();
                    prop_assert!(r.check_against(spec).is_ok());
                }
            }
        }
    }
}
