//! Dual point/voxel convolution blocks, the submanifold baseline block, and
//! the encoder / FPN decoder backbone.

use ndarray::Array2;

use crate::config::{BlockKind, BranchNorm, Config, DpvcLayout};
use crate::error::{Error, Result};
use crate::grid::{max_pool2, voxel_pad_with_provenance, voxel_unpool_cached, PadProvenance, PoolProvenance, SparseGrid, UnpoolCache};
use crate::kpconv::{grid_dense_equivalent, grid_neighborhoods, place_kernel_points, DenseEquivalent, KpCache, KpConvLayer, Neighborhoods};
use crate::nn::{l2_normalize, l2_normalize_backward, relu, relu_backward, BatchNorm, BnCache, Ctx, Linear, Module, ParamInit, Parameter};
use crate::sparse_conv::{build_rulebook, ConvMode, ConvSpec, Rulebook, SparseConvLayer};

/// Connectivity shared by all convolutions of one block.
struct Support<'a> {
    rulebook: &'a Rulebook,
    neighborhoods: Option<&'a Neighborhoods>,
    dense: DenseEquivalent,
}

#[derive(Debug, Clone)]
enum BranchConv {
    Ssc(SparseConvLayer),
    Kp(KpConvLayer),
}

#[derive(Debug, Clone)]
enum ConvCache {
    Ssc(Array2<f64>),
    Kp(KpCache),
}

impl BranchConv {
    fn forward(&self, x: &Array2<f64>, s: &Support<'_>, ctx: &mut Ctx) -> Result<(Array2<f64>, ConvCache)> {
        match self {
            BranchConv::Ssc(l) => Ok((l.forward(x, s.rulebook, ctx)?, ConvCache::Ssc(x.clone()))),
            BranchConv::Kp(l) => {
                let nb = s.neighborhoods.expect("kpconv branch needs neighbourhoods");
                let (y, c) = l.forward(nb, x, Some(s.dense), ctx)?;
                Ok((y, ConvCache::Kp(c)))
            }
        }
    }

    fn backward(&mut self, cache: &ConvCache, s: &Support<'_>, grad: &Array2<f64>) -> Array2<f64> {
        match (self, cache) {
            (BranchConv::Ssc(l), ConvCache::Ssc(x)) => l.backward(x, s.rulebook, grad),
            (BranchConv::Kp(l), ConvCache::Kp(c)) => l.backward(s.neighborhoods.expect("neighbourhoods"), c, grad),
            _ => unreachable!("cache kind matches layer kind"),
        }
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            BranchConv::Ssc(l) => l.visit_params(f),
            BranchConv::Kp(l) => l.visit_params(f),
        }
    }
}

#[derive(Debug, Clone)]
enum FinalCache {
    Bn(BnCache),
    L2 { y: Array2<f64>, norms: ndarray::Array1<f64> },
}

/// `conv -> BN -> ReLU -> conv [-> BN -> ReLU] -> final norm`.
#[derive(Debug, Clone)]
struct Branch {
    conv1: BranchConv,
    bn1: BatchNorm,
    conv2: BranchConv,
    bn2: Option<BatchNorm>,
    last: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
struct BranchCache {
    c1: ConvCache,
    b1: BnCache,
    z1: Array2<f64>,
    c2: ConvCache,
    b2: Option<(BnCache, Array2<f64>)>,
    last: FinalCache,
}

impl Branch {
    fn forward(&mut self, x: &Array2<f64>, s: &Support<'_>, ctx: &mut Ctx) -> Result<(Array2<f64>, BranchCache)> {
        let (h1, c1) = self.conv1.forward(x, s, ctx)?;
        let (z1, b1) = self.bn1.forward(&h1, ctx)?;
        let (h2, c2) = self.conv2.forward(&relu(&z1), s, ctx)?;
        let (u, b2) = match &mut self.bn2 {
            Some(bn) => {
                let (z2, cache) = bn.forward(&h2, ctx)?;
                (relu(&z2), Some((cache, z2)))
            }
            None => (h2, None),
        };
        let (y, last) = match &mut self.last {
            Some(bn) => {
                let (y, c) = bn.forward(&u, ctx)?;
                (y, FinalCache::Bn(c))
            }
            None => {
                let (y, norms) = l2_normalize(&u);
                (y.clone(), FinalCache::L2 { y, norms })
            }
        };
        Ok((
            y,
            BranchCache {
                c1,
                b1,
                z1,
                c2,
                b2,
                last,
            },
        ))
    }

    fn backward(&mut self, cache: &BranchCache, s: &Support<'_>, grad: &Array2<f64>) -> Array2<f64> {
        let du = match (&mut self.last, &cache.last) {
            (Some(bn), FinalCache::Bn(c)) => bn.backward(c, grad),
            (None, FinalCache::L2 { y, norms }) => l2_normalize_backward(y, norms, grad),
            _ => unreachable!("final norm matches cache"),
        };
        let dh2 = match (&mut self.bn2, &cache.b2) {
            (Some(bn), Some((c, z2))) => bn.backward(c, &relu_backward(z2, &du)),
            _ => du,
        };
        let dr1 = self.conv2.backward(&cache.c2, s, &dh2);
        let dh1 = self.bn1.backward(&cache.b1, &relu_backward(&cache.z1, &dr1));
        self.conv1.backward(&cache.c1, s, &dh1)
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit(f);
        self.bn1.visit_params(f);
        self.conv2.visit(f);
        if let Some(bn) = &mut self.bn2 {
            bn.visit_params(f);
        }
        if let Some(bn) = &mut self.last {
            bn.visit_params(f);
        }
    }
}

/// Settings of one DPVC block.
#[derive(Debug, Clone, Copy)]
pub struct DpvcSettings {
    pub c_in: usize,
    pub c_out: usize,
    pub radius: f64,
    pub kernel_points: usize,
    pub sigma_ratio: f64,
    pub layout: DpvcLayout,
    pub norm: BranchNorm,
}

/// Dual point/voxel convolution block: pad once, then a submanifold branch
/// and a KPConv branch over the padded cells, normalised and summed.
#[derive(Debug, Clone)]
pub struct DpvcBlock {
    pub name: String,
    ssc: Branch,
    kp: Branch,
    radius: f64,
}

#[derive(Debug, Clone)]
pub struct DpvcCache {
    pad: PadProvenance,
    padded: SparseGrid,
    rulebook: Rulebook,
    neighborhoods: Neighborhoods,
    ssc: BranchCache,
    kp: BranchCache,
}

impl DpvcBlock {
    pub fn new(name: &str, s: DpvcSettings, init: &mut ParamInit) -> Result<Self> {
        let mut kernel = place_kernel_points(s.kernel_points, s.radius, init.next_seed())?;
        kernel.influence_sigma = s.radius * s.sigma_ratio;
        let norm_bn = |branch: &str, tag: &str| BatchNorm::new(&format!("{name}.{branch}.{tag}"), s.c_out);
        let make = |branch: &str, conv1: BranchConv, conv2: BranchConv| Branch {
            conv1,
            bn1: norm_bn(branch, "bn1"),
            conv2,
            bn2: (s.layout == DpvcLayout::Figure).then(|| norm_bn(branch, "bn2")),
            last: (s.norm == BranchNorm::Bn).then(|| norm_bn(branch, "bn_out")),
        };
        let ssc = make(
            "ssc",
            BranchConv::Ssc(SparseConvLayer::new(&format!("{name}.ssc.conv1"), ConvSpec::submanifold(s.c_in, s.c_out, 3)?, init)),
            BranchConv::Ssc(SparseConvLayer::new(&format!("{name}.ssc.conv2"), ConvSpec::submanifold(s.c_out, s.c_out, 3)?, init)),
        );
        let kp = make(
            "kp",
            BranchConv::Kp(KpConvLayer::new(&format!("{name}.kp.conv1"), &kernel, s.c_in, s.c_out, init)),
            BranchConv::Kp(KpConvLayer::new(&format!("{name}.kp.conv2"), &kernel, s.c_out, s.c_out, init)),
        );
        Ok(Self {
            name: name.to_string(),
            ssc,
            kp,
            radius: s.radius,
        })
    }

    /// The two submanifold convolutions of the voxel branch.
    pub fn ssc_layers(&self) -> Vec<&SparseConvLayer> {
        [&self.ssc.conv1, &self.ssc.conv2]
            .into_iter()
            .filter_map(|c| match c {
                BranchConv::Ssc(l) => Some(l),
                BranchConv::Kp(_) => None,
            })
            .collect()
    }

    pub fn c_in(&self) -> usize {
        match &self.ssc.conv1 {
            BranchConv::Ssc(l) => l.spec.m,
            BranchConv::Kp(l) => l.c_in(),
        }
    }

    pub fn forward(&mut self, g: &SparseGrid, ctx: &mut Ctx) -> Result<(SparseGrid, DpvcCache)> {
        if g.channels() != self.c_in() {
            return Err(Error::invalid(format!(
                "{}: expected {} channels, got {}",
                self.name,
                self.c_in(),
                g.channels()
            )));
        }
        let (padded, pad) = voxel_pad_with_provenance(g);
        let spec3 = ConvSpec::submanifold(1, 1, 3)?;
        let rulebook = build_rulebook(padded.cells(), &padded.spec, &spec3, ConvMode::Submanifold, None)?;
        let neighborhoods = grid_neighborhoods(&padded, self.radius)?;
        let support = Support {
            rulebook: &rulebook,
            neighborhoods: Some(&neighborhoods),
            dense: grid_dense_equivalent(&padded.spec, self.radius),
        };
        let (a, ssc) = self.ssc.forward(padded.features(), &support, ctx)?;
        let (b, kp) = self.kp.forward(padded.features(), &support, ctx)?;
        let out = padded.with_features(a + b)?;
        Ok((
            out,
            DpvcCache {
                pad,
                padded,
                rulebook,
                neighborhoods,
                ssc,
                kp,
            },
        ))
    }

    pub fn backward(&mut self, cache: &DpvcCache, grad: &Array2<f64>) -> Array2<f64> {
        let support = Support {
            rulebook: &cache.rulebook,
            neighborhoods: Some(&cache.neighborhoods),
            dense: grid_dense_equivalent(&cache.padded.spec, self.radius),
        };
        let ga = self.ssc.backward(&cache.ssc, &support, grad);
        let gb = self.kp.backward(&cache.kp, &support, grad);
        cache.pad.backward(&(ga + gb))
    }
}

impl Module for DpvcBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.ssc.visit(f);
        self.kp.visit(f);
    }
}

/// Pre-activated submanifold block `(BN -> ReLU -> SSC(3)) x 2`; the active set is unchanged.
#[derive(Debug, Clone)]
pub struct SscnBlock {
    pub name: String,
    pub bn1: BatchNorm,
    pub conv1: SparseConvLayer,
    pub bn2: BatchNorm,
    pub conv2: SparseConvLayer,
}

#[derive(Debug, Clone)]
pub struct SscnCache {
    rulebook: Rulebook,
    b1: BnCache,
    z1: Array2<f64>,
    r1: Array2<f64>,
    b2: BnCache,
    z2: Array2<f64>,
    r2: Array2<f64>,
}

impl SscnBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, init: &mut ParamInit) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            bn1: BatchNorm::new(&format!("{name}.bn1"), c_in),
            conv1: SparseConvLayer::new(&format!("{name}.conv1"), ConvSpec::submanifold(c_in, c_out, 3)?, init),
            bn2: BatchNorm::new(&format!("{name}.bn2"), c_out),
            conv2: SparseConvLayer::new(&format!("{name}.conv2"), ConvSpec::submanifold(c_out, c_out, 3)?, init),
        })
    }

    pub fn forward(&mut self, g: &SparseGrid, ctx: &mut Ctx) -> Result<(SparseGrid, SscnCache)> {
        if g.channels() != self.conv1.spec.m {
            return Err(Error::invalid(format!(
                "{}: expected {} channels, got {}",
                self.name,
                self.conv1.spec.m,
                g.channels()
            )));
        }
        let rulebook = build_rulebook(g.cells(), &g.spec, &self.conv1.spec, ConvMode::Submanifold, None)?;
        let (z1, b1) = self.bn1.forward(g.features(), ctx)?;
        let r1 = relu(&z1);
        let h = self.conv1.forward(&r1, &rulebook, ctx)?;
        let (z2, b2) = self.bn2.forward(&h, ctx)?;
        let r2 = relu(&z2);
        let out = self.conv2.forward(&r2, &rulebook, ctx)?;
        Ok((
            g.with_features(out)?,
            SscnCache {
                rulebook,
                b1,
                z1,
                r1,
                b2,
                z2,
                r2,
            },
        ))
    }

    pub fn backward(&mut self, c: &SscnCache, grad: &Array2<f64>) -> Array2<f64> {
        let dr2 = self.conv2.backward(&c.r2, &c.rulebook, grad);
        let dh = self.bn2.backward(&c.b2, &relu_backward(&c.z2, &dr2));
        let dr1 = self.conv1.backward(&c.r1, &c.rulebook, &dh);
        self.bn1.backward(&c.b1, &relu_backward(&c.z1, &dr1))
    }
}

impl Module for SscnBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.bn1.visit_params(f);
        self.conv1.visit_params(f);
        self.bn2.visit_params(f);
        self.conv2.visit_params(f);
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Dpvc(DpvcBlock),
    Sscn(SscnBlock),
}

#[derive(Debug, Clone)]
pub enum BlockCache {
    Dpvc(DpvcCache),
    Sscn(SscnCache),
}

impl Block {
    pub fn forward(&mut self, g: &SparseGrid, ctx: &mut Ctx) -> Result<(SparseGrid, BlockCache)> {
        match self {
            Block::Dpvc(b) => b.forward(g, ctx).map(|(y, c)| (y, BlockCache::Dpvc(c))),
            Block::Sscn(b) => b.forward(g, ctx).map(|(y, c)| (y, BlockCache::Sscn(c))),
        }
    }

    pub fn backward(&mut self, cache: &BlockCache, grad: &Array2<f64>) -> Array2<f64> {
        match (self, cache) {
            (Block::Dpvc(b), BlockCache::Dpvc(c)) => b.backward(c, grad),
            (Block::Sscn(b), BlockCache::Sscn(c)) => b.backward(c, grad),
            _ => unreachable!("cache kind matches block kind"),
        }
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Dpvc(_) => BlockKind::Dpvc,
            Block::Sscn(_) => BlockKind::Sscn,
        }
    }
}

impl Module for Block {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            Block::Dpvc(b) => b.visit_params(f),
            Block::Sscn(b) => b.visit_params(f),
        }
    }
}

/// Encoder stages and the FPN decoder.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<Block>,
    pub top: Linear,
    /// Lateral projection per decoder level below the top, indexed by level.
    pub laterals: Vec<Option<Linear>>,
    pub fpn: Vec<Option<SscnBlock>>,
    /// Finest decoder level produced.
    pub min_level: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Block output per stage.
    pub maps: Vec<SparseGrid>,
    /// Pooling after each stage but the last.
    pub pools: Vec<PoolProvenance>,
    caches: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub encoder: EncoderOutput,
    /// Decoder map per level, present for `min_level..stages`.
    pub levels: Vec<Option<SparseGrid>>,
    unpools: Vec<Option<UnpoolCache>>,
    sums: Vec<Option<SscnCache>>,
}

impl Backbone {
    pub fn new(cfg: &Config, init: &mut ParamInit) -> Result<Self> {
        cfg.validate()?;
        let b = &cfg.backbone;
        let n = b.channels.len();
        let mut stages = Vec::with_capacity(n);
        let mut c_in = cfg.render.f_out;
        for (k, (&c_out, &kind)) in b.channels.iter().zip(&b.blocks).enumerate() {
            let name = format!("backbone.enc{k}");
            stages.push(match kind {
                BlockKind::Dpvc => Block::Dpvc(DpvcBlock::new(
                    &name,
                    DpvcSettings {
                        c_in,
                        c_out,
                        radius: cfg.dpvc_radius_at(k),
                        kernel_points: b.dpvc_points,
                        sigma_ratio: b.dpvc_sigma_ratio,
                        layout: b.dpvc_layout,
                        norm: b.branch_norm,
                    },
                    init,
                )?),
                BlockKind::Sscn => Block::Sscn(SscnBlock::new(&name, c_in, c_out, init)?),
            });
            c_in = c_out;
        }
        let d = b.decoder_channels;
        let min_level = cfg.head.car_level.min(cfg.head.vru_level);
        let top = Linear::new(&format!("backbone.fpn{}.proj", n - 1), b.channels[n - 1], d, init);
        let mut laterals = vec![None; n];
        let mut fpn = vec![None; n];
        for k in (min_level..n - 1).rev() {
            laterals[k] = Some(Linear::new(&format!("backbone.fpn{k}.lateral"), b.channels[k], d, init));
            fpn[k] = Some(SscnBlock::new(&format!("backbone.fpn{k}.block"), d, d, init)?);
        }
        Ok(Self {
            stages,
            top,
            laterals,
            fpn,
            min_level,
        })
    }

    pub fn encoder_forward(&mut self, g0: &SparseGrid, ctx: &mut Ctx) -> Result<EncoderOutput> {
        let n = self.stages.len();
        let mut maps = Vec::with_capacity(n);
        let mut pools = Vec::with_capacity(n - 1);
        let mut caches = Vec::with_capacity(n);
        let mut x = g0.clone();
        for (k, stage) in self.stages.iter_mut().enumerate() {
            let (y, cache) = stage.forward(&x, ctx)?;
            caches.push(cache);
            if k + 1 < n {
                let (pooled, prov) = max_pool2(&y)?;
                pools.push(prov);
                x = pooled;
            }
            maps.push(y);
        }
        Ok(EncoderOutput { maps, pools, caches })
    }

    pub fn forward(&mut self, g0: &SparseGrid, ctx: &mut Ctx) -> Result<BackboneOutput> {
        let encoder = self.encoder_forward(g0, ctx)?;
        let n = self.stages.len();
        let mut levels = vec![None; n];
        let mut unpools = vec![None; n];
        let mut sums = vec![None; n];
        let deepest = &encoder.maps[n - 1];
        let top = self.top.forward_profiled(deepest.features(), deepest.spec.cell_count(), ctx)?;
        let mut p = deepest.with_features(top)?;
        levels[n - 1] = Some(p.clone());
        for k in (self.min_level..n - 1).rev() {
            let (up, cache) = voxel_unpool_cached(&p, &encoder.pools[k])?;
            let lateral = self.laterals[k].as_ref().expect("lateral per decoder level");
            let enc = &encoder.maps[k];
            let lat = lateral.forward_profiled(enc.features(), enc.spec.cell_count(), ctx)?;
            let s = up.with_features(up.features() + &lat)?;
            let (out, c) = self.fpn[k].as_mut().expect("fpn block per level").forward(&s, ctx)?;
            unpools[k] = Some(cache);
            sums[k] = Some(c);
            levels[k] = Some(out.clone());
            p = out;
        }
        Ok(BackboneOutput {
            encoder,
            levels,
            unpools,
            sums,
        })
    }

    /// Backpropagates gradients given per decoder level; returns the input gradient.
    pub fn backward(&mut self, out: &BackboneOutput, grads: &[Option<Array2<f64>>]) -> Array2<f64> {
        let n = self.stages.len();
        let maps = &out.encoder.maps;
        let zeros = |g: &SparseGrid| Array2::zeros(g.features().raw_dim());
        let mut grad_p: Vec<Option<Array2<f64>>> = grads.to_vec();
        grad_p.resize(n, None);
        let mut grad_y: Vec<Array2<f64>> = maps.iter().map(zeros).collect();
        for k in self.min_level..n - 1 {
            let gp = grad_p[k]
                .take()
                .unwrap_or_else(|| out.levels[k].as_ref().map(zeros).expect("decoder level present"));
            self.propagate_level(k, out, &gp, &mut grad_p, &mut grad_y);
        }
        if let Some(gp) = grad_p[n - 1].take() {
            grad_y[n - 1] += &self.top.backward(maps[n - 1].features(), &gp);
        }
        let mut g = self.stages[n - 1].backward(&out.encoder.caches[n - 1], &grad_y[n - 1]);
        for k in (0..n - 1).rev() {
            grad_y[k] += &out.encoder.pools[k].backward(&g);
            g = self.stages[k].backward(&out.encoder.caches[k], &grad_y[k]);
        }
        g
    }

    fn propagate_level(
        &mut self,
        k: usize,
        out: &BackboneOutput,
        grad: &Array2<f64>,
        grad_p: &mut [Option<Array2<f64>>],
        grad_y: &mut [Array2<f64>],
    ) {
        let block = self.fpn[k].as_mut().expect("fpn block");
        let gs = block.backward(out.sums[k].as_ref().expect("fpn cache"), grad);
        let lateral = self.laterals[k].as_mut().expect("lateral");
        grad_y[k] += &lateral.backward(out.encoder.maps[k].features(), &gs);
        let up = out.unpools[k].as_ref().expect("unpool cache").backward(&gs);
        match &mut grad_p[k + 1] {
            Some(g) => *g += &up,
            slot => *slot = Some(up),
        }
    }
}

impl Module for Backbone {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for s in &mut self.stages {
            s.visit_params(f);
        }
        self.top.visit_params(f);
        for k in 0..self.laterals.len() {
            if let Some(l) = &mut self.laterals[k] {
                l.visit_params(f);
            }
            if let Some(b) = &mut self.fpn[k] {
                b.visit_params(f);
            }
        }
    }
}
