//! Rulebook-driven sparse convolutions.
//!
//! A [`Rulebook`] lists, per kernel offset, the `(input row, output row)`
//! pairs connected by that offset. Execution is gather, multiply, scatter:
//! the per-offset products run in parallel, the scatter runs sequentially in
//! fixed offset order so results never depend on scheduling.
//!
//! Offsets span `[-p, f - 1 - p]` with `p = (f - 1) / 2`, i.e. centered for
//! odd `f` and `[0, 1]` for the `f = s = 2` downsampling convolution. All
//! convolutions are cross-correlations: `out[o] = b + sum_d W_d in[o * s + d]`.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Axis, IxDyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{index_map, CellIndex, DenseGrid, GridSpec, SparseGrid};
use crate::nn::{Ctx, Module, ParamInit, Parameter};
use crate::profile::{LayerKind, LayerStat};

/// `SC(m, n, f, s)`: `m` input channels, `n` outputs, kernel `f`, stride `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub m: usize,
    pub n: usize,
    pub f: usize,
    pub s: usize,
}

impl ConvSpec {
    pub fn new(m: usize, n: usize, f: usize, s: usize) -> Result<Self> {
        if m == 0 || n == 0 || f == 0 || s == 0 {
            return Err(Error::invalid(format!("conv spec needs positive sizes, got m={m} n={n} f={f} s={s}")));
        }
        if f % 2 == 0 && f != s {
            return Err(Error::invalid(format!(
                "even kernel size {f} is only supported as a downsampling kernel with stride {f}"
            )));
        }
        Ok(Self { m, n, f, s })
    }

    pub fn submanifold(m: usize, n: usize, f: usize) -> Result<Self> {
        Self::new(m, n, f, 1)
    }

    /// Lowest offset along each axis.
    pub fn low(&self) -> i64 {
        -(((self.f - 1) / 2) as i64)
    }

    /// Kernel offsets in weight order (`di` major).
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let lo = self.low();
        let hi = lo + self.f as i64;
        (lo..hi).flat_map(|di| (lo..hi).map(move |dj| (di, dj))).collect()
    }

    pub fn taps(&self) -> usize {
        self.f * self.f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Submanifold,
    Strided,
    Deconv,
}

/// Connectivity of one sparse convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub mode: ConvMode,
    pub offsets: Vec<(i64, i64)>,
    /// Per offset: `(input row, output row)` pairs.
    pub pairs: Vec<Vec<(usize, usize)>>,
    pub in_len: usize,
    pub out_spec: GridSpec,
    pub out_cells: Vec<CellIndex>,
}

impl Rulebook {
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Active set and resolution of the fine side of a strided convolution.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub spec: &'a GridSpec,
    pub cells: &'a [CellIndex],
}

pub fn build_rulebook(
    active_in: &[CellIndex],
    in_spec: &GridSpec,
    spec: &ConvSpec,
    mode: ConvMode,
    reference_out: Option<Reference<'_>>,
) -> Result<Rulebook> {
    match mode {
        ConvMode::Submanifold => submanifold_rulebook(active_in, in_spec, spec),
        ConvMode::Strided => strided_rulebook(active_in, in_spec, spec),
        ConvMode::Deconv => {
            let reference = reference_out
                .ok_or_else(|| Error::invalid("deconvolution requires the reference active set of its strided conv"))?;
            let forward = strided_rulebook(reference.cells, reference.spec, spec)?;
            if forward.out_spec != *in_spec {
                return Err(Error::invalid(format!(
                    "deconvolution input is {}x{}, reference downsamples to {}x{}",
                    in_spec.nx, in_spec.ny, forward.out_spec.nx, forward.out_spec.ny
                )));
            }
            if forward.out_cells != active_in {
                return Err(Error::invalid(
                    "deconvolution input active set differs from the strided output of the reference",
                ));
            }
            Ok(Rulebook {
                mode,
                pairs: forward
                    .pairs
                    .into_iter()
                    .map(|p| p.into_iter().map(|(a, b)| (b, a)).collect())
                    .collect(),
                offsets: forward.offsets,
                in_len: active_in.len(),
                out_spec: *reference.spec,
                out_cells: reference.cells.to_vec(),
            })
        }
    }
}

fn check_sorted(cells: &[CellIndex], spec: &GridSpec) -> Result<()> {
    if cells.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("active cells must be unique and in canonical order"));
    }
    if let Some(c) = cells.iter().find(|c| c.i >= spec.nx || c.j >= spec.ny) {
        return Err(Error::invalid(format!("active cell {c:?} outside {}x{} grid", spec.nx, spec.ny)));
    }
    Ok(())
}

fn submanifold_rulebook(active: &[CellIndex], in_spec: &GridSpec, spec: &ConvSpec) -> Result<Rulebook> {
    if spec.s != 1 || spec.f % 2 == 0 {
        return Err(Error::invalid(format!(
            "submanifold convolution needs odd f and s = 1, got f={} s={}",
            spec.f, spec.s
        )));
    }
    check_sorted(active, in_spec)?;
    let lookup = index_map(active);
    let offsets = spec.offsets();
    let pairs = offsets
        .iter()
        .map(|&(di, dj)| {
            active
                .iter()
                .enumerate()
                .filter_map(|(b, c)| c.offset(di, dj, in_spec).and_then(|a| lookup.get(&a)).map(|&a| (a, b)))
                .collect()
        })
        .collect();
    Ok(Rulebook {
        mode: ConvMode::Submanifold,
        offsets,
        pairs,
        in_len: active.len(),
        out_spec: *in_spec,
        out_cells: active.to_vec(),
    })
}

fn strided_rulebook(active: &[CellIndex], in_spec: &GridSpec, spec: &ConvSpec) -> Result<Rulebook> {
    check_sorted(active, in_spec)?;
    let out_spec = if spec.s == 1 { *in_spec } else { in_spec.coarsen(spec.s)? };
    let s = spec.s as i64;
    let offsets = spec.offsets();
    // input a connects to output o at offset d iff a = o * s + d
    let target = |c: &CellIndex, (di, dj): (i64, i64)| -> Option<CellIndex> {
        let (ni, nj) = (c.i as i64 - di, c.j as i64 - dj);
        if ni.rem_euclid(s) != 0 || nj.rem_euclid(s) != 0 {
            return None;
        }
        let (oi, oj) = (ni.div_euclid(s), nj.div_euclid(s));
        out_spec.in_bounds(oi, oj).then(|| CellIndex::new(oi as usize, oj as usize))
    };
    let mut out_cells: Vec<CellIndex> = active
        .iter()
        .flat_map(|c| offsets.iter().filter_map(move |&d| target(c, d)))
        .collect();
    out_cells.sort_unstable();
    out_cells.dedup();
    let lookup: HashMap<CellIndex, usize> = index_map(&out_cells);
    let pairs = offsets
        .iter()
        .map(|&d| {
            let mut p: Vec<(usize, usize)> = active
                .iter()
                .enumerate()
                .filter_map(|(a, c)| target(c, d).map(|o| (a, lookup[&o])))
                .collect();
            p.sort_unstable_by_key(|&(a, b)| (b, a));
            p
        })
        .collect();
    Ok(Rulebook {
        mode: ConvMode::Strided,
        offsets,
        pairs,
        in_len: active.len(),
        out_spec,
        out_cells,
    })
}

/// A sparse convolution layer; weights are stored `[f * f, n, m]` in offset order.
#[derive(Debug, Clone)]
pub struct SparseConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: Parameter,
    pub bias: Parameter,
}

impl SparseConvLayer {
    pub fn new(name: &str, spec: ConvSpec, init: &mut ParamInit) -> Self {
        let fan_in = spec.m * spec.taps();
        Self {
            name: name.to_string(),
            spec,
            weight: init.uniform(format!("{name}.weight"), &[spec.taps(), spec.n, spec.m], fan_in),
            bias: init.uniform(format!("{name}.bias"), &[spec.n], fan_in),
        }
    }

    pub fn from_values(name: &str, spec: ConvSpec, weight: Array3<f64>, bias: ndarray::Array1<f64>) -> Result<Self> {
        if weight.dim() != (spec.taps(), spec.n, spec.m) || bias.len() != spec.n {
            return Err(Error::Shape {
                name: format!("{name}.weight"),
                expected: vec![spec.taps(), spec.n, spec.m],
                found: weight.shape().to_vec(),
            });
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            weight: Parameter::new(format!("{name}.weight"), weight.into_dyn()),
            bias: Parameter::new(format!("{name}.bias"), bias.into_dyn()),
        })
    }

    fn tap(&self, k: usize) -> ndarray::ArrayView2<'_, f64> {
        self.weight
            .value
            .index_axis(Axis(0), k)
            .into_dimensionality()
            .expect("2d tap")
    }

    fn kind(rb: &Rulebook) -> LayerKind {
        match rb.mode {
            ConvMode::Submanifold => LayerKind::Submanifold,
            ConvMode::Strided => LayerKind::Strided,
            ConvMode::Deconv => LayerKind::Transposed,
        }
    }

    /// Gather, multiply, scatter over a prebuilt rulebook.
    pub fn forward(&self, x: &Array2<f64>, rb: &Rulebook, ctx: &mut Ctx) -> Result<Array2<f64>> {
        let start = std::time::Instant::now();
        if x.ncols() != self.spec.m {
            return Err(Error::invalid(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.spec.m,
                x.ncols()
            )));
        }
        if x.nrows() != rb.in_len || rb.offsets.len() != self.spec.taps() {
            return Err(Error::invalid(format!(
                "{}: rulebook built for {} inputs and {} taps, got {} rows and kernel size {}",
                self.name,
                rb.in_len,
                rb.offsets.len(),
                x.nrows(),
                self.spec.f
            )));
        }
        let bias = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d");
        let mut out = Array2::zeros((rb.out_cells.len(), self.spec.n));
        out += &bias;
        let products: Vec<Array2<f64>> = rb
            .pairs
            .par_iter()
            .enumerate()
            .map(|(k, pairs)| {
                let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                x.select(Axis(0), &rows).dot(&self.tap(k).t())
            })
            .collect();
        for (pairs, prod) in rb.pairs.iter().zip(&products) {
            for (r, &(_, o)) in pairs.iter().enumerate() {
                let mut dst = out.row_mut(o);
                dst += &prod.row(r);
            }
        }
        if ctx.recording() {
            let mn = (self.spec.m * self.spec.n) as u64;
            ctx.record(LayerStat {
                name: self.name.clone(),
                kind: Self::kind(rb),
                active_in: rb.in_len,
                active_out: rb.out_cells.len(),
                pairs: rb.pair_count() as u64,
                macs: rb.pair_count() as u64 * mn,
                dense_macs: (rb.out_spec.cell_count() * self.spec.taps()) as u64 * mn,
                nanos: start.elapsed().as_nanos(),
            });
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, rb: &Rulebook, grad_out: &Array2<f64>) -> Array2<f64> {
        let mut dw = Array3::<f64>::zeros((self.spec.taps(), self.spec.n, self.spec.m));
        let mut dx = Array2::zeros(x.raw_dim());
        for (k, pairs) in rb.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let ins: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let outs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let g = grad_out.select(Axis(0), &outs);
            dw.index_axis_mut(Axis(0), k).assign(&g.t().dot(&x.select(Axis(0), &ins)));
            let back = g.dot(&self.tap(k));
            for (r, &a) in ins.iter().enumerate() {
                let mut dst = dx.row_mut(a);
                dst += &back.row(r);
            }
        }
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(0)).into_dyn();
        dx
    }
}

impl Module for SparseConvLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Submanifold convolution: the output keeps the input active set.
pub fn ssc_forward(layer: &SparseConvLayer, g: &SparseGrid, ctx: &mut Ctx) -> Result<(SparseGrid, Rulebook)> {
    let rb = build_rulebook(g.cells(), &g.spec, &layer.spec, ConvMode::Submanifold, None)?;
    let out = layer.forward(g.features(), &rb, ctx)?;
    Ok((SparseGrid::from_sorted(rb.out_spec, rb.out_cells.clone(), out), rb))
}

/// Strided (or, with `s = 1`, dilating) sparse convolution.
pub fn sc_forward(layer: &SparseConvLayer, g: &SparseGrid, ctx: &mut Ctx) -> Result<(SparseGrid, Rulebook)> {
    let rb = build_rulebook(g.cells(), &g.spec, &layer.spec, ConvMode::Strided, None)?;
    let out = layer.forward(g.features(), &rb, ctx)?;
    Ok((SparseGrid::from_sorted(rb.out_spec, rb.out_cells.clone(), out), rb))
}

/// Transposed convolution restoring the `reference` active set of a strided conv.
pub fn dc_forward(
    layer: &SparseConvLayer,
    g: &SparseGrid,
    reference: Reference<'_>,
    ctx: &mut Ctx,
) -> Result<(SparseGrid, Rulebook)> {
    let rb = build_rulebook(g.cells(), &g.spec, &layer.spec, ConvMode::Deconv, Some(reference))?;
    let out = layer.forward(g.features(), &rb, ctx)?;
    Ok((SparseGrid::from_sorted(rb.out_spec, rb.out_cells.clone(), out), rb))
}

/// Zero-padded strided cross-correlation on a dense grid.
pub fn dense_conv_oracle(dense: &DenseGrid, layer: &SparseConvLayer) -> Result<DenseGrid> {
    let spec = layer.spec;
    if dense.channels() != spec.m {
        return Err(Error::invalid(format!(
            "dense oracle: expected {} channels, got {}",
            spec.m,
            dense.channels()
        )));
    }
    let out_spec = if spec.s == 1 { dense.spec } else { dense.spec.coarsen(spec.s)? };
    let mut out = DenseGrid::zeros(out_spec, spec.n);
    let w = layer.weight.value.view();
    let offsets = spec.offsets();
    for oi in 0..out_spec.nx {
        for oj in 0..out_spec.ny {
            for o in 0..spec.n {
                let mut acc = layer.bias.value[o];
                for (k, &(di, dj)) in offsets.iter().enumerate() {
                    let ii = (oi * spec.s) as i64 + di;
                    let jj = (oj * spec.s) as i64 + dj;
                    if !dense.spec.in_bounds(ii, jj) {
                        continue;
                    }
                    for c in 0..spec.m {
                        acc += w[IxDyn(&[k, o, c])] * dense.features[[ii as usize, jj as usize, c]];
                    }
                }
                out.features[[oi, oj, o]] = acc;
            }
        }
    }
    Ok(out)
}

/// MACs of [`dense_conv_oracle`] for a layer on `spec`.
pub fn dense_macs(spec: &GridSpec, conv: &ConvSpec) -> Result<u64> {
    let out = if conv.s == 1 { *spec } else { spec.coarsen(conv.s)? };
    Ok((out.cell_count() * conv.taps() * conv.m * conv.n) as u64)
}
