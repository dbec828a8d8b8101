//! Grid renderers: sparse pillars (SPP), sparse kernel-point BEV (SKPBEV)
//! and the multigrid aggregator combining them (SKPP).
//!
//! All renderers produce features on the occupancy set of the cloud, so
//! their outputs can be summed cell by cell.

use std::io::Write;

use ndarray::Array2;

use crate::config::{Config, RenderMode};
use crate::error::{Error, Result};
use crate::grid::{scatter_points, CellIndex, GridSpec, SparseGrid};
use crate::kpconv::{place_kernel_points, KpCache, KpConvLayer, Neighborhoods};
use crate::nn::{relu, relu_backward, BatchNorm, BnCache, Ctx, Linear, Module, ParamInit, Parameter};
use crate::points::PointCloud;

/// Occupied cells and, per cell, the indices of the points inside it.
fn occupancy(spec: &GridSpec, cloud: &PointCloud) -> (Vec<CellIndex>, Vec<Vec<usize>>) {
    scatter_points(spec, cloud).into_iter().unzip()
}

/// Per-point `Linear -> BN -> ReLU`, then channel-wise max per cell.
///
/// Point features are `(x - cell center x, y - cell center y, vr, rcs)`.
#[derive(Debug, Clone)]
pub struct PillarEncoder {
    pub linear: Linear,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct PillarCache {
    input: Array2<f64>,
    bn: BnCache,
    pre: Array2<f64>,
    /// Winning point row per cell and channel.
    argmax: Array2<usize>,
}

pub const PILLAR_INPUTS: usize = 4;

impl PillarEncoder {
    pub fn new(name: &str, f_out: usize, init: &mut ParamInit) -> Self {
        Self {
            linear: Linear::new(&format!("{name}.linear"), PILLAR_INPUTS, f_out, init),
            bn: BatchNorm::new(&format!("{name}.bn"), f_out),
        }
    }

    pub fn f_out(&self) -> usize {
        self.linear.c_out()
    }

    pub fn forward(&mut self, spec: &GridSpec, cloud: &PointCloud, ctx: &mut Ctx) -> Result<(SparseGrid, PillarCache)> {
        let (cells, members) = occupancy(spec, cloud);
        let rows: usize = members.iter().map(Vec::len).sum();
        let mut input = Array2::zeros((rows, PILLAR_INPUTS));
        let mut r = 0;
        for (c, pts) in cells.iter().zip(&members) {
            let [x0, y0] = spec.center(*c);
            for &p in pts {
                let q = &cloud.points[p];
                input.row_mut(r).assign(&ndarray::arr1(&[q.x - x0, q.y - y0, q.vr, q.rcs]));
                r += 1;
            }
        }
        let f = self.f_out();
        let lin = self.linear.forward_profiled(&input, rows, ctx)?;
        let (pre, bn) = self.bn.forward(&lin, ctx)?;
        let act = relu(&pre);
        let mut features = Array2::from_elem((cells.len(), f), f64::NEG_INFINITY);
        let mut argmax = Array2::zeros((cells.len(), f));
        let mut r = 0;
        for (k, pts) in members.iter().enumerate() {
            for _ in pts {
                for ch in 0..f {
                    if act[[r, ch]] > features[[k, ch]] {
                        features[[k, ch]] = act[[r, ch]];
                        argmax[[k, ch]] = r;
                    }
                }
                r += 1;
            }
        }
        let grid = SparseGrid::new(*spec, cells, features)?;
        Ok((
            grid,
            PillarCache {
                input,
                bn,
                pre,
                argmax,
            },
        ))
    }

    pub fn backward(&mut self, cache: &PillarCache, grad: &Array2<f64>) {
        let mut d_act = Array2::zeros(cache.pre.raw_dim());
        for ((k, ch), &r) in cache.argmax.indexed_iter() {
            d_act[[r, ch]] += grad[[k, ch]];
        }
        if cache.input.nrows() == 0 {
            return;
        }
        let d_pre = relu_backward(&cache.pre, &d_act);
        let d_lin = self.bn.backward(&cache.bn, &d_pre);
        self.linear.backward(&cache.input, &d_lin);
    }
}

impl Module for PillarEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.linear.visit_params(f);
        self.bn.visit_params(f);
    }
}

/// KPConv from the raw points onto the centers of the occupied cells.
///
/// Point features are `(vr, rcs)`, or `(x, y, vr, rcs)` with raw coordinates enabled.
#[derive(Debug, Clone)]
pub struct SkpbevEncoder {
    pub kp: KpConvLayer,
    pub raw_coords: bool,
}

#[derive(Debug, Clone)]
pub struct SkpbevCache {
    nb: Neighborhoods,
    kp: KpCache,
}

impl SkpbevEncoder {
    pub fn new(name: &str, cfg: &Config, init: &mut ParamInit) -> Result<Self> {
        let r = &cfg.render;
        let mut kernel = place_kernel_points(r.kp_points, r.kp_radius, init.next_seed())?;
        kernel.influence_sigma = r.kp_radius * r.kp_sigma_ratio;
        let c_in = if r.raw_coords { 4 } else { 2 };
        Ok(Self {
            kp: KpConvLayer::new(&format!("{name}.kpconv"), &kernel, c_in, r.f_out, init),
            raw_coords: r.raw_coords,
        })
    }

    fn point_features(&self, cloud: &PointCloud) -> Array2<f64> {
        let width = if self.raw_coords { 4 } else { 2 };
        let mut x = Array2::zeros((cloud.len(), width));
        for (k, p) in cloud.points.iter().enumerate() {
            if self.raw_coords {
                x.row_mut(k).assign(&ndarray::arr1(&[p.x, p.y, p.vr, p.rcs]));
            } else {
                x.row_mut(k).assign(&ndarray::arr1(&[p.vr, p.rcs]));
            }
        }
        x
    }

    pub fn forward(&self, spec: &GridSpec, cloud: &PointCloud, ctx: &mut Ctx) -> Result<(SparseGrid, SkpbevCache)> {
        let (cells, _) = occupancy(spec, cloud);
        let refs: Vec<[f64; 2]> = cells.iter().map(|c| spec.center(*c)).collect();
        let nb = Neighborhoods::search(&refs, &cloud.positions(), self.kp.radius)?;
        let (out, kp) = self.kp.forward(&nb, &self.point_features(cloud), None, ctx)?;
        Ok((SparseGrid::new(*spec, cells, out)?, SkpbevCache { nb, kp }))
    }

    pub fn backward(&mut self, cache: &SkpbevCache, grad: &Array2<f64>) {
        self.kp.backward(&cache.nb, &cache.kp, grad);
    }
}

impl Module for SkpbevEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.kp.visit_params(f);
    }
}

/// `f_out = sum_m BN_m(f_m)` over renderings sharing one active set.
#[derive(Debug, Clone)]
pub struct MultigridAggregator {
    pub bns: Vec<BatchNorm>,
}

impl MultigridAggregator {
    pub fn new(name: &str, members: usize, channels: usize) -> Self {
        Self {
            bns: (0..members).map(|m| BatchNorm::new(&format!("{name}.bn{m}"), channels)).collect(),
        }
    }

    pub fn forward(&mut self, members: &[SparseGrid], ctx: &mut Ctx) -> Result<(SparseGrid, Vec<BnCache>)> {
        if members.is_empty() || members.len() != self.bns.len() {
            return Err(Error::invalid(format!(
                "aggregator has {} members, got {} renderings",
                self.bns.len(),
                members.len()
            )));
        }
        let first = &members[0];
        for (m, g) in members.iter().enumerate().skip(1) {
            if g.cells() != first.cells() || g.spec != first.spec {
                return Err(Error::invalid(format!("rendering {m} has a different active set")));
            }
            if g.channels() != first.channels() {
                return Err(Error::invalid(format!("rendering {m} has a different channel count")));
            }
        }
        let mut sum = Array2::zeros(first.features().raw_dim());
        let mut caches = Vec::with_capacity(members.len());
        for (bn, g) in self.bns.iter_mut().zip(members) {
            let (y, cache) = bn.forward(g.features(), ctx)?;
            sum += &y;
            caches.push(cache);
        }
        Ok((first.with_features(sum)?, caches))
    }

    /// Gradient per member.
    pub fn backward(&mut self, caches: &[BnCache], grad: &Array2<f64>) -> Vec<Array2<f64>> {
        self.bns
            .iter_mut()
            .zip(caches)
            .map(|(bn, c)| {
                if grad.nrows() == 0 {
                    grad.clone()
                } else {
                    bn.backward(c, grad)
                }
            })
            .collect()
    }
}

impl Module for MultigridAggregator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for bn in &mut self.bns {
            bn.visit_params(f);
        }
    }
}

/// The configured rendering front end.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub mode: RenderMode,
    pub spp: Option<PillarEncoder>,
    pub skpbev: Option<SkpbevEncoder>,
    pub aggregator: MultigridAggregator,
}

#[derive(Debug, Clone)]
pub struct RenderCache {
    spp: Option<PillarCache>,
    skpbev: Option<SkpbevCache>,
    bns: Vec<BnCache>,
}

impl Renderer {
    pub fn new(cfg: &Config, init: &mut ParamInit) -> Result<Self> {
        let mode = cfg.render.mode;
        let f = cfg.render.f_out;
        let spp = matches!(mode, RenderMode::Spp | RenderMode::Skpp).then(|| PillarEncoder::new("render.spp", f, init));
        let skpbev = match mode {
            RenderMode::Skpbev | RenderMode::Skpp => Some(SkpbevEncoder::new("render.skpbev", cfg, init)?),
            RenderMode::Spp => None,
        };
        let members = spp.is_some() as usize + skpbev.is_some() as usize;
        Ok(Self {
            mode,
            spp,
            skpbev,
            aggregator: MultigridAggregator::new("render.aggregate", members, f),
        })
    }

    /// Renders each member separately.
    pub fn members(&mut self, spec: &GridSpec, cloud: &PointCloud, ctx: &mut Ctx) -> Result<Vec<SparseGrid>> {
        let mut out = Vec::new();
        if let Some(spp) = &mut self.spp {
            out.push(spp.forward(spec, cloud, ctx)?.0);
        }
        if let Some(kp) = &self.skpbev {
            out.push(kp.forward(spec, cloud, ctx)?.0);
        }
        Ok(out)
    }

    pub fn forward(&mut self, spec: &GridSpec, cloud: &PointCloud, ctx: &mut Ctx) -> Result<(SparseGrid, RenderCache)> {
        let mut grids = Vec::new();
        let spp = match &mut self.spp {
            Some(enc) => {
                let (g, c) = enc.forward(spec, cloud, ctx)?;
                grids.push(g);
                Some(c)
            }
            None => None,
        };
        let skpbev = match &self.skpbev {
            Some(enc) => {
                let (g, c) = enc.forward(spec, cloud, ctx)?;
                grids.push(g);
                Some(c)
            }
            None => None,
        };
        let (out, bns) = self.aggregator.forward(&grids, ctx)?;
        Ok((out, RenderCache { spp, skpbev, bns }))
    }

    pub fn backward(&mut self, cache: &RenderCache, grad: &Array2<f64>) {
        let grads = self.aggregator.backward(&cache.bns, grad);
        let mut it = grads.iter();
        if let (Some(enc), Some(c)) = (&mut self.spp, &cache.spp) {
            enc.backward(c, it.next().expect("spp gradient"));
        }
        if let (Some(enc), Some(c)) = (&mut self.skpbev, &cache.skpbev) {
            enc.backward(c, it.next().expect("skpbev gradient"));
        }
    }
}

impl Module for Renderer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        if let Some(e) = &mut self.spp {
            e.visit_params(f);
        }
        if let Some(e) = &mut self.skpbev {
            e.visit_params(f);
        }
        self.aggregator.visit_params(f);
    }
}

pub fn spp_encode(spec: &GridSpec, cloud: &PointCloud, encoder: &mut PillarEncoder, ctx: &mut Ctx) -> Result<SparseGrid> {
    Ok(encoder.forward(spec, cloud, ctx)?.0)
}

pub fn skpbev_encode(spec: &GridSpec, cloud: &PointCloud, encoder: &SkpbevEncoder, ctx: &mut Ctx) -> Result<SparseGrid> {
    Ok(encoder.forward(spec, cloud, ctx)?.0)
}

pub fn multigrid_aggregate(members: &[SparseGrid], aggregator: &mut MultigridAggregator, ctx: &mut Ctx) -> Result<SparseGrid> {
    Ok(aggregator.forward(members, ctx)?.0)
}

pub fn skpp_encode(
    spec: &GridSpec,
    cloud: &PointCloud,
    spp: &mut PillarEncoder,
    skpbev: &SkpbevEncoder,
    aggregator: &mut MultigridAggregator,
    ctx: &mut Ctx,
) -> Result<SparseGrid> {
    let a = spp_encode(spec, cloud, spp, ctx)?;
    let b = skpbev_encode(spec, cloud, skpbev, ctx)?;
    multigrid_aggregate(&[a, b], aggregator, ctx)
}

/// Writes the text grid dump: a `#` header line, then `i j f0 f1 ...` per active cell.
pub fn write_grid_dump(g: &SparseGrid, mut out: impl Write) -> std::io::Result<()> {
    let s = &g.spec;
    writeln!(
        out,
        "# grid nx={} ny={} cell_size={} x_min={} y_min={} channels={} active={}",
        s.nx,
        s.ny,
        s.cell_size,
        s.x_min,
        s.y_min,
        g.channels(),
        g.len()
    )?;
    for (c, row) in g.cells().iter().zip(g.features().outer_iter()) {
        write!(out, "{} {}", c.i, c.j)?;
        for v in row {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
