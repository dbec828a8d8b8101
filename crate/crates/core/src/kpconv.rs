//! Kernel point convolution with a linear influence function.
//!
//! For a reference point `m` with neighbours `N(m)`:
//!
//! ```text
//! out_m = b + sum_{n in N(m)} sum_k h_k(p_n - p_m) * W_k f_n
//! h_k(o) = max(0, 1 - |o - x_k| / sigma)
//! ```
//!
//! The forward pass first accumulates the influence-weighted neighbour
//! features per kernel point (`G[m, k, :]`) and then applies all kernel
//! weights with a single matrix product.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{cells_as_points, SparseGrid};
use crate::nn::{Ctx, Module, ParamInit, Parameter};
use crate::points::NeighborIndex;
use crate::profile::{LayerKind, LayerStat};
use crate::rng::{self, streams};

/// Kernel point layout relative to the reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPointSet {
    pub positions: Vec<[f64; 2]>,
    pub radius: f64,
    pub influence_sigma: f64,
}

const RING_FRACTION: f64 = 0.7;
const LAYOUT_ITERATIONS: usize = 100;
const LAYOUT_STEP: f64 = 0.01;
const LAYOUT_MAX_MOVE: f64 = 0.05;
const LAYOUT_ATTRACTION: f64 = 1.0;

/// One point at the origin plus `k - 1` points spread by repulsion.
///
/// The free points start on a ring of `0.7 * radius` (seeded angular phase)
/// and run a fixed number of descent steps on a Coulomb repulsion energy with
/// a weak quadratic pull towards the origin, clipped to the disk.
pub fn place_kernel_points(k: usize, radius: f64, seed: u64) -> Result<KernelPointSet> {
    if k == 0 {
        return Err(Error::invalid("kernel needs at least one point"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("kernel radius must be positive, got {radius}")));
    }
    let mut rng = rng::stream(seed, streams::KERNEL_POINTS);
    let free = k - 1;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    // unit-disk coordinates; index 0 is the fixed center
    let mut q: Vec<[f64; 2]> = vec![[0.0, 0.0]];
    for i in 0..free {
        let a = phase + std::f64::consts::TAU * i as f64 / free as f64;
        q.push([RING_FRACTION * a.cos(), RING_FRACTION * a.sin()]);
    }
    for _ in 0..LAYOUT_ITERATIONS {
        let snapshot = q.clone();
        for i in 1..k {
            let mut force = [-2.0 * LAYOUT_ATTRACTION * snapshot[i][0], -2.0 * LAYOUT_ATTRACTION * snapshot[i][1]];
            for (j, other) in snapshot.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = [snapshot[i][0] - other[0], snapshot[i][1] - other[1]];
                let r2 = (d[0] * d[0] + d[1] * d[1]).max(1e-6);
                let inv = 1.0 / (r2 * r2.sqrt());
                force[0] += d[0] * inv;
                force[1] += d[1] * inv;
            }
            let mut step = [LAYOUT_STEP * force[0], LAYOUT_STEP * force[1]];
            let len = step[0].hypot(step[1]);
            if len > LAYOUT_MAX_MOVE {
                step = [step[0] * LAYOUT_MAX_MOVE / len, step[1] * LAYOUT_MAX_MOVE / len];
            }
            let mut p = [snapshot[i][0] + step[0], snapshot[i][1] + step[1]];
            let norm = p[0].hypot(p[1]);
            if norm > 1.0 {
                p = [p[0] / norm, p[1] / norm];
            }
            q[i] = p;
        }
    }
    Ok(KernelPointSet {
        positions: q.into_iter().map(|p| [p[0] * radius, p[1] * radius]).collect(),
        radius,
        influence_sigma: radius / 2.0,
    })
}

impl KernelPointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Linear influence of every kernel point on a neighbour at `offset`.
    pub fn influence(&self, offset: [f64; 2]) -> Vec<f64> {
        influence(&self.positions, self.influence_sigma, offset)
    }
}

pub fn influence(positions: &[[f64; 2]], sigma: f64, offset: [f64; 2]) -> Vec<f64> {
    positions
        .iter()
        .map(|x| (1.0 - (offset[0] - x[0]).hypot(offset[1] - x[1]) / sigma).max(0.0))
        .collect()
}

/// Neighbour lists in compressed row form: references `m` own the entries
/// `offsets[m]..offsets[m + 1]` of `support` and `rel` (support minus reference).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighborhoods {
    pub offsets: Vec<usize>,
    pub support: Vec<usize>,
    pub rel: Vec<[f64; 2]>,
}

impl Neighborhoods {
    /// Radius search of every reference against the support positions.
    pub fn search(references: &[[f64; 2]], support: &[[f64; 2]], radius: f64) -> Result<Self> {
        let index = NeighborIndex::new(support.to_vec(), radius)?;
        let mut out = Self {
            offsets: vec![0],
            ..Self::default()
        };
        let mut buf = Vec::new();
        for r in references {
            index.query_into(*r, radius, &mut buf);
            for &n in &buf {
                out.support.push(n);
                out.rel.push([support[n][0] - r[0], support[n][1] - r[1]]);
            }
            out.offsets.push(out.support.len());
        }
        Ok(out)
    }

    /// Explicit lists; offsets are computed from the given positions.
    pub fn from_lists(references: &[[f64; 2]], support: &[[f64; 2]], lists: &[Vec<usize>]) -> Result<Self> {
        if references.len() != lists.len() {
            return Err(Error::invalid("one neighbour list per reference required"));
        }
        let mut out = Self {
            offsets: vec![0],
            ..Self::default()
        };
        for (r, list) in references.iter().zip(lists) {
            for &n in list {
                let p = support
                    .get(n)
                    .ok_or_else(|| Error::invalid(format!("neighbour index {n} out of range")))?;
                out.support.push(n);
                out.rel.push([p[0] - r[0], p[1] - r[1]]);
            }
            out.offsets.push(out.support.len());
        }
        Ok(out)
    }

    pub fn references(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn pairs(&self) -> usize {
        self.support.len()
    }

    fn range(&self, m: usize) -> std::ops::Range<usize> {
        self.offsets[m]..self.offsets[m + 1]
    }
}

/// Reference/pair counts of the equivalent computation on a fully dense grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseEquivalent {
    pub refs: usize,
    pub pairs: usize,
}

/// Dense-grid equivalent for a kernel of `radius` meters on `spec`.
pub fn grid_dense_equivalent(spec: &crate::grid::GridSpec, radius: f64) -> DenseEquivalent {
    let reach = (radius / spec.cell_size).floor() as i64;
    let mut disk = 0usize;
    for di in -reach..=reach {
        for dj in -reach..=reach {
            let (x, y) = (di as f64 * spec.cell_size, dj as f64 * spec.cell_size);
            if x * x + y * y <= radius * radius {
                disk += 1;
            }
        }
    }
    DenseEquivalent {
        refs: spec.cell_count(),
        pairs: spec.cell_count() * disk,
    }
}

#[derive(Debug, Clone)]
pub struct KpCache {
    /// `[M, K * C_in]` influence-weighted neighbour sums.
    gathered: Array2<f64>,
    /// Per neighbour pair: range into `entries`.
    entry_ptr: Vec<usize>,
    /// `(kernel point, influence)` with non-zero influence.
    entries: Vec<(u32, f64)>,
    support_len: usize,
}

/// A kernel point convolution layer with frozen kernel positions.
#[derive(Debug, Clone)]
pub struct KpConvLayer {
    pub name: String,
    /// `[K, 2]`, frozen.
    pub kernel_points: Parameter,
    pub radius: f64,
    pub sigma: f64,
    /// `[K, C_out, C_in]`
    pub weight: Parameter,
    /// `[C_out]`
    pub bias: Parameter,
}

impl KpConvLayer {
    pub fn new(name: &str, kernel: &KernelPointSet, c_in: usize, c_out: usize, init: &mut ParamInit) -> Self {
        let k = kernel.len();
        let flat: Vec<f64> = kernel.positions.iter().flat_map(|p| p.iter().copied()).collect();
        Self {
            name: name.to_string(),
            kernel_points: Parameter::frozen(
                format!("{name}.kernel_points"),
                ArrayD::from_shape_vec(IxDyn(&[k, 2]), flat).expect("k x 2"),
            ),
            radius: kernel.radius,
            sigma: kernel.influence_sigma,
            weight: init.uniform(format!("{name}.weight"), &[k, c_out, c_in], c_in * k),
            bias: init.uniform(format!("{name}.bias"), &[c_out], c_in * k),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn kernel(&self) -> KernelPointSet {
        KernelPointSet {
            positions: self
                .kernel_points
                .value
                .outer_iter()
                .map(|p| [p[0], p[1]])
                .collect(),
            radius: self.radius,
            influence_sigma: self.sigma,
        }
    }

    /// `[C_out, K * C_in]` view of the kernel weights.
    fn weight_matrix(&self) -> Array2<f64> {
        let (k, co, ci) = (self.kernel_size(), self.c_out(), self.c_in());
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix3>().expect("3d");
        let mut m = Array2::zeros((co, k * ci));
        for kk in 0..k {
            m.slice_mut(ndarray::s![.., kk * ci..(kk + 1) * ci]).assign(&w.index_axis(Axis(0), kk));
        }
        m
    }

    pub fn forward(
        &self,
        nb: &Neighborhoods,
        support: &Array2<f64>,
        dense: Option<DenseEquivalent>,
        ctx: &mut Ctx,
    ) -> Result<(Array2<f64>, KpCache)> {
        let start = std::time::Instant::now();
        let (k, ci) = (self.kernel_size(), self.c_in());
        if support.ncols() != ci {
            return Err(Error::invalid(format!(
                "{}: expected {ci} input channels, got {}",
                self.name,
                support.ncols()
            )));
        }
        let r2 = self.radius * self.radius * (1.0 + 1e-12);
        if let Some(p) = nb.rel.iter().position(|o| o[0] * o[0] + o[1] * o[1] > r2) {
            return Err(Error::invalid(format!(
                "{}: neighbour {} lies {:.4} m from its reference, beyond the {} m radius",
                self.name,
                nb.support[p],
                nb.rel[p][0].hypot(nb.rel[p][1]),
                self.radius
            )));
        }
        if let Some(&n) = nb.support.iter().find(|&&n| n >= support.nrows()) {
            return Err(Error::invalid(format!("{}: support index {n} out of range", self.name)));
        }
        let kernel: Vec<[f64; 2]> = self.kernel().positions;
        let mut entry_ptr = Vec::with_capacity(nb.pairs() + 1);
        let mut entries = Vec::new();
        entry_ptr.push(0);
        for o in &nb.rel {
            for (kk, h) in influence(&kernel, self.sigma, *o).into_iter().enumerate() {
                if h > 0.0 {
                    entries.push((kk as u32, h));
                }
            }
            entry_ptr.push(entries.len());
        }
        let refs = nb.references();
        let mut gathered = Array2::<f64>::zeros((refs, k * ci));
        gathered
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(m, mut row)| {
                for pair in nb.range(m) {
                    let f = support.row(nb.support[pair]);
                    for &(kk, h) in &entries[entry_ptr[pair]..entry_ptr[pair + 1]] {
                        let base = kk as usize * ci;
                        for c in 0..ci {
                            row[base + c] += h * f[c];
                        }
                    }
                }
            });
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d");
        let out = gathered.dot(&self.weight_matrix().t()) + &bias;
        if ctx.recording() {
            let per_pair = (k * ci) as u64;
            let per_ref = (k * ci * self.c_out()) as u64;
            let dense = dense.unwrap_or(DenseEquivalent {
                refs,
                pairs: nb.pairs(),
            });
            ctx.record(LayerStat {
                name: self.name.clone(),
                kind: LayerKind::KpConv,
                active_in: support.nrows(),
                active_out: refs,
                pairs: nb.pairs() as u64,
                macs: nb.pairs() as u64 * per_pair + refs as u64 * per_ref,
                dense_macs: dense.pairs as u64 * per_pair + dense.refs as u64 * per_ref,
                nanos: start.elapsed().as_nanos(),
            });
        }
        Ok((
            out,
            KpCache {
                gathered,
                entry_ptr,
                entries,
                support_len: support.nrows(),
            },
        ))
    }

    /// Accumulates weight/bias gradients; returns the support-feature gradient.
    pub fn backward(&mut self, nb: &Neighborhoods, cache: &KpCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let (k, co, ci) = (self.kernel_size(), self.c_out(), self.c_in());
        let dwm = grad_out.t().dot(&cache.gathered);
        let mut dw = Array3::<f64>::zeros((k, co, ci));
        for kk in 0..k {
            dw.index_axis_mut(Axis(0), kk)
                .assign(&dwm.slice(ndarray::s![.., kk * ci..(kk + 1) * ci]));
        }
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(0)).into_dyn();
        let dg = grad_out.dot(&self.weight_matrix());
        let mut grad_support = Array2::zeros((cache.support_len, ci));
        for m in 0..nb.references() {
            let g = dg.row(m);
            for pair in nb.range(m) {
                let mut dst = grad_support.row_mut(nb.support[pair]);
                for &(kk, h) in &cache.entries[cache.entry_ptr[pair]..cache.entry_ptr[pair + 1]] {
                    let base = kk as usize * ci;
                    for c in 0..ci {
                        dst[c] += h * g[base + c];
                    }
                }
            }
        }
        grad_support
    }
}

impl Module for KpConvLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.kernel_points);
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Neighbourhoods of the active cells of `g` viewed as pseudo-points.
pub fn grid_neighborhoods(g: &SparseGrid, radius: f64) -> Result<Neighborhoods> {
    let pts = cells_as_points(g);
    Neighborhoods::search(&pts, &pts, radius)
}

/// KPConv over the active cells of a grid; the output keeps the active set.
pub fn kpconv_on_grid(layer: &KpConvLayer, g: &SparseGrid, ctx: &mut Ctx) -> Result<(SparseGrid, Neighborhoods, KpCache)> {
    let nb = grid_neighborhoods(g, layer.radius)?;
    let dense = grid_dense_equivalent(&g.spec, layer.radius);
    let (out, cache) = layer.forward(&nb, g.features(), Some(dense), ctx)?;
    Ok((g.with_features(out)?, nb, cache))
}
