//! The sparse 2D bird's-eye-view grid and its structural operations.
//!
//! A [`SparseGrid`] stores the active cells in canonical order (ascending
//! `(i, j)`) together with one feature row per active cell. All operations
//! return new grids; provenance values returned by padding and pooling carry
//! the correspondences needed by unpooling and by the backward passes.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::points::PointCloud;

/// Metric extent and resolution of a dense grid `I x J`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, cell_size: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::invalid("grid extent must have max > min"));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid("cell_size must be positive"));
        }
        let count = |span: f64, axis: &str| -> Result<usize> {
            let n = (span / cell_size).round();
            if n < 1.0 || (n * cell_size - span).abs() > 1e-9 * span.max(1.0) {
                return Err(Error::invalid(format!(
                    "{axis} extent {span} is not an integer multiple of cell size {cell_size}"
                )));
            }
            Ok(n as usize)
        };
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            cell_size,
            nx: count(x_max - x_min, "x")?,
            ny: count(y_max - y_min, "y")?,
        })
    }

    /// Half-open containment `[min, max)` on both axes.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] < self.x_max && p[1] >= self.y_min && p[1] < self.y_max
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn in_bounds(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.nx && (j as usize) < self.ny
    }

    /// Metric center of a cell.
    pub fn center(&self, c: CellIndex) -> [f64; 2] {
        [
            (c.i as f64 + 0.5) * self.cell_size + self.x_min,
            (c.j as f64 + 0.5) * self.cell_size + self.y_min,
        ]
    }

    /// Same extent at `factor` times coarser resolution.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.nx % factor != 0 || self.ny % factor != 0 {
            return Err(Error::invalid(format!(
                "grid {}x{} is not divisible by {factor}",
                self.nx, self.ny
            )));
        }
        Ok(Self {
            cell_size: self.cell_size * factor as f64,
            nx: self.nx / factor,
            ny: self.ny / factor,
            ..*self
        })
    }

    /// Same extent, `factor` times finer resolution.
    pub fn refine(&self, factor: usize) -> Self {
        Self {
            cell_size: self.cell_size / factor as f64,
            nx: self.nx * factor,
            ny: self.ny * factor,
            ..*self
        }
    }
}

/// Integer cell coordinates; ordering is the canonical row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub i: usize,
    pub j: usize,
}

impl CellIndex {
    pub const fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    pub(crate) fn offset(self, di: i64, dj: i64, spec: &GridSpec) -> Option<CellIndex> {
        let (i, j) = (self.i as i64 + di, self.j as i64 + dj);
        spec.in_bounds(i, j).then(|| CellIndex::new(i as usize, j as usize))
    }
}

/// Features over the active set `S` of a dense grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    pub spec: GridSpec,
    cells: Vec<CellIndex>,
    features: Array2<f64>,
}

impl SparseGrid {
    /// Validates canonical order, bounds, shape and finiteness.
    pub fn new(spec: GridSpec, cells: Vec<CellIndex>, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != cells.len() {
            return Err(Error::invalid(format!(
                "{} feature rows for {} active cells",
                features.nrows(),
                cells.len()
            )));
        }
        if let Some(w) = cells.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "active cells not strictly ascending at {:?}",
                w[1]
            )));
        }
        if let Some(c) = cells.iter().find(|c| c.i >= spec.nx || c.j >= spec.ny) {
            return Err(Error::invalid(format!("cell {c:?} outside {}x{} grid", spec.nx, spec.ny)));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse grid features".into()));
        }
        Ok(Self {
            spec,
            cells,
            features,
        })
    }

    /// Builds from unordered `(cell, feature)` pairs; duplicates are rejected.
    pub fn from_pairs(spec: GridSpec, channels: usize, pairs: Vec<(CellIndex, Vec<f64>)>) -> Result<Self> {
        let mut pairs = pairs;
        pairs.sort_by_key(|(c, _)| *c);
        let mut features = Array2::zeros((pairs.len(), channels));
        let mut cells = Vec::with_capacity(pairs.len());
        for (row, (c, f)) in pairs.into_iter().enumerate() {
            if f.len() != channels {
                return Err(Error::invalid(format!("feature of cell {c:?} has {} channels", f.len())));
            }
            features.row_mut(row).assign(&ArrayView1::from(&f));
            cells.push(c);
        }
        Self::new(spec, cells, features)
    }

    pub fn empty(spec: GridSpec, channels: usize) -> Self {
        Self {
            spec,
            cells: Vec::new(),
            features: Array2::zeros((0, channels)),
        }
    }

    /// Internal constructor for results that are canonical by construction.
    pub(crate) fn from_sorted(spec: GridSpec, cells: Vec<CellIndex>, features: Array2<f64>) -> Self {
        debug_assert_eq!(cells.len(), features.nrows());
        debug_assert!(cells.windows(2).all(|w| w[0] < w[1]));
        Self {
            spec,
            cells,
            features,
        }
    }

    pub fn cells(&self) -> &[CellIndex] {
        &self.cells
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn into_features(self) -> Array2<f64> {
        self.features
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.len() as f64 / self.spec.cell_count() as f64
    }

    /// Same active set, new features.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.len() {
            return Err(Error::invalid(format!(
                "{} feature rows for {} active cells",
                features.nrows(),
                self.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse grid features".into()));
        }
        Ok(Self {
            spec: self.spec,
            cells: self.cells.clone(),
            features,
        })
    }

    pub fn index_map(&self) -> HashMap<CellIndex, usize> {
        index_map(&self.cells)
    }

    pub fn feature(&self, c: CellIndex) -> Option<ArrayView1<'_, f64>> {
        self.cells.binary_search(&c).ok().map(|r| self.features.row(r))
    }
}

pub(crate) fn index_map(cells: &[CellIndex]) -> HashMap<CellIndex, usize> {
    cells.iter().enumerate().map(|(k, c)| (*c, k)).collect()
}

/// Dense `Nx x Ny x C` feature array; used as a test oracle representation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub spec: GridSpec,
    pub features: Array3<f64>,
}

impl DenseGrid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self {
            spec,
            features: Array3::zeros((spec.nx, spec.ny, channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.features.len_of(Axis(2))
    }
}

/// Cell containing `p`, or `None` outside the half-open extent.
pub fn point_to_cell(spec: &GridSpec, p: [f64; 2]) -> Option<CellIndex> {
    if !spec.contains(p) {
        return None;
    }
    let i = ((p[0] - spec.x_min) / spec.cell_size).floor() as usize;
    let j = ((p[1] - spec.y_min) / spec.cell_size).floor() as usize;
    // floating error at the upper edge
    Some(CellIndex::new(i.min(spec.nx - 1), j.min(spec.ny - 1)))
}

/// Groups in-bounds point indices by cell; keys form the occupancy set.
pub fn scatter_points(spec: &GridSpec, cloud: &PointCloud) -> BTreeMap<CellIndex, Vec<usize>> {
    let mut out: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
    for (idx, p) in cloud.points.iter().enumerate() {
        if let Some(c) = point_to_cell(spec, p.xy()) {
            out.entry(c).or_default().push(idx);
        }
    }
    out
}

pub fn to_dense(g: &SparseGrid) -> DenseGrid {
    let mut d = DenseGrid::zeros(g.spec, g.channels());
    for (c, f) in g.cells.iter().zip(g.features.rows()) {
        d.features.slice_mut(ndarray::s![c.i, c.j, ..]).assign(&f);
    }
    d
}

/// Keeps the cells whose feature vector satisfies `keep`.
pub fn from_dense(d: &DenseGrid, keep: impl Fn(ArrayView1<'_, f64>) -> bool) -> SparseGrid {
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for i in 0..d.spec.nx {
        for j in 0..d.spec.ny {
            let f = d.features.slice(ndarray::s![i, j, ..]);
            if keep(f) {
                cells.push(CellIndex::new(i, j));
                rows.extend(f.iter().copied());
            }
        }
    }
    let features = Array2::from_shape_vec((cells.len(), d.channels()), rows).expect("row-major fill");
    SparseGrid::from_sorted(d.spec, cells, features)
}

pub fn nonzero(f: ArrayView1<'_, f64>) -> bool {
    f.iter().any(|&v| v != 0.0)
}

/// 8-connected dilation of an active set, clipped to the grid.
pub fn dilate_cells(spec: &GridSpec, cells: &[CellIndex]) -> Vec<CellIndex> {
    let mut out: Vec<CellIndex> = cells
        .iter()
        .flat_map(|c| {
            (-1i64..=1).flat_map(move |di| (-1i64..=1).filter_map(move |dj| c.offset(di, dj, spec)))
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Row positions of the original cells inside a padded grid.
#[derive(Debug, Clone)]
pub struct PadProvenance {
    pub rows: Vec<usize>,
    pub padded_len: usize,
}

impl PadProvenance {
    /// Gradient w.r.t. the unpadded features; padded cells carry constants.
    pub fn backward(&self, grad_padded: &Array2<f64>) -> Array2<f64> {
        grad_padded.select(Axis(0), &self.rows)
    }
}

/// Extends the active set to its 8-connected neighbours with zero features.
pub fn voxel_pad(g: &SparseGrid) -> SparseGrid {
    voxel_pad_with_provenance(g).0
}

pub fn voxel_pad_with_provenance(g: &SparseGrid) -> (SparseGrid, PadProvenance) {
    let cells = dilate_cells(&g.spec, &g.cells);
    let mut features = Array2::zeros((cells.len(), g.channels()));
    let mut rows = Vec::with_capacity(g.len());
    // both lists are sorted, so a merge walk finds the original rows
    let mut k = 0;
    for (src, c) in g.cells.iter().enumerate() {
        while cells[k] != *c {
            k += 1;
        }
        features.row_mut(k).assign(&g.features.row(src));
        rows.push(k);
    }
    let prov = PadProvenance {
        rows,
        padded_len: cells.len(),
    };
    (SparseGrid::from_sorted(g.spec, cells, features), prov)
}

/// Correspondence recorded by [`max_pool2`].
#[derive(Debug, Clone)]
pub struct PoolProvenance {
    pub fine_spec: GridSpec,
    pub coarse_spec: GridSpec,
    /// Active set before pooling.
    pub fine_cells: Vec<CellIndex>,
    /// Coarse row of each fine cell.
    pub parent: Vec<usize>,
    /// Winning fine row per coarse row and channel.
    pub argmax: Array2<usize>,
}

impl PoolProvenance {
    pub fn backward(&self, grad_coarse: &Array2<f64>) -> Array2<f64> {
        let channels = grad_coarse.ncols();
        let mut grad = Array2::zeros((self.fine_cells.len(), channels));
        for (r, arg) in self.argmax.rows().into_iter().enumerate() {
            for (ch, &src) in arg.iter().enumerate() {
                grad[[src, ch]] += grad_coarse[[r, ch]];
            }
        }
        grad
    }
}

/// Size-two max pooling; empty children are ignored (not treated as zero).
pub fn max_pool2(g: &SparseGrid) -> Result<(SparseGrid, PoolProvenance)> {
    let coarse_spec = g.spec.coarsen(2)?;
    let mut coarse: Vec<CellIndex> = g.cells.iter().map(|c| CellIndex::new(c.i / 2, c.j / 2)).collect();
    coarse.sort_unstable();
    coarse.dedup();
    let lookup = index_map(&coarse);
    let channels = g.channels();
    let mut features = Array2::from_elem((coarse.len(), channels), f64::NEG_INFINITY);
    let mut argmax = Array2::zeros((coarse.len(), channels));
    let mut parent = Vec::with_capacity(g.len());
    for (src, c) in g.cells.iter().enumerate() {
        let r = lookup[&CellIndex::new(c.i / 2, c.j / 2)];
        parent.push(r);
        for ch in 0..channels {
            let v = g.features[[src, ch]];
            if v > features[[r, ch]] {
                features[[r, ch]] = v;
                argmax[[r, ch]] = src;
            }
        }
    }
    let prov = PoolProvenance {
        fine_spec: g.spec,
        coarse_spec,
        fine_cells: g.cells.clone(),
        parent,
        argmax,
    };
    Ok((SparseGrid::from_sorted(coarse_spec, coarse, features), prov))
}

/// Coarse row feeding each fine cell in [`voxel_unpool`].
#[derive(Debug, Clone)]
pub struct UnpoolCache {
    pub source: Vec<usize>,
    pub coarse_len: usize,
}

impl UnpoolCache {
    pub fn backward(&self, grad_fine: &Array2<f64>) -> Array2<f64> {
        let mut grad = Array2::zeros((self.coarse_len, grad_fine.ncols()));
        for (row, &src) in self.source.iter().enumerate() {
            let mut dst = grad.row_mut(src);
            dst += &grad_fine.row(row);
        }
        grad
    }
}

/// Inverse of [`max_pool2`]: restores the pre-pooling active set and copies
/// each coarse feature to every fine child.
///
/// The coarse grid may carry more cells than the pooled one (e.g. after
/// padding); every fine cell's parent must be active.
pub fn voxel_unpool(g: &SparseGrid, prov: &PoolProvenance) -> Result<SparseGrid> {
    Ok(voxel_unpool_cached(g, prov)?.0)
}

pub fn voxel_unpool_cached(g: &SparseGrid, prov: &PoolProvenance) -> Result<(SparseGrid, UnpoolCache)> {
    if g.spec != prov.coarse_spec {
        return Err(Error::invalid(format!(
            "unpool resolution mismatch: grid is {}x{} at {} m, provenance expects {}x{} at {} m",
            g.spec.nx,
            g.spec.ny,
            g.spec.cell_size,
            prov.coarse_spec.nx,
            prov.coarse_spec.ny,
            prov.coarse_spec.cell_size
        )));
    }
    let mut source = Vec::with_capacity(prov.fine_cells.len());
    for c in &prov.fine_cells {
        let parent = CellIndex::new(c.i / 2, c.j / 2);
        let r = g.cells.binary_search(&parent).map_err(|_| {
            Error::invalid(format!("coarse parent {parent:?} of fine cell {c:?} is not active"))
        })?;
        source.push(r);
    }
    let features = g.features.select(Axis(0), &source);
    let cache = UnpoolCache {
        source,
        coarse_len: g.len(),
    };
    Ok((SparseGrid::from_sorted(prov.fine_spec, prov.fine_cells.clone(), features), cache))
}

/// Active cells viewed as a point cloud of metric cell centers, in canonical order.
pub fn cells_as_points(g: &SparseGrid) -> Vec<[f64; 2]> {
    g.cells.iter().map(|c| g.spec.center(*c)).collect()
}
