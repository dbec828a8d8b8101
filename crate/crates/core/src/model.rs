//! The end-to-end detector: rendering, backbone, per-class heads, toy
//! training and the sparse-vs-dense benchmark.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::backbone::{Backbone, BackboneOutput, Block};
use crate::config::Config;
use crate::detection::{decode_predictions, nms_per_class, toy_loss, ClassId, Detection, Head, HeadCache, LossParts, Obb};
use crate::error::{Error, Result};
use crate::grid::{DenseGrid, GridSpec, SparseGrid};
use crate::nn::{sgd_step, Ctx, Module, ParamInit, Parameter};
use crate::points::{augment_rcs, PointCloud};
use crate::profile::{BenchReport, LayerStat};
use crate::render::{RenderCache, Renderer};
use crate::rng::{self, streams};
use crate::sparse_conv::{dense_conv_oracle, SparseConvLayer};

/// A scene for training or evaluation: the cloud and its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cloud: PointCloud,
    pub truth: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: Config,
    pub spec: GridSpec,
    pub renderer: Renderer,
    pub backbone: Backbone,
    pub car_head: Head,
    pub vru_head: Head,
}

/// Everything a forward pass produces that the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub grid: SparseGrid,
    render: RenderCache,
    pub backbone: BackboneOutput,
    /// Raw head output per class, in [`ClassId::ALL`] order.
    pub raw: Vec<Array2<f64>>,
    heads: Vec<HeadCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss before the update of each step.
    pub losses: Vec<f64>,
    pub final_parts: Option<LossParts>,
}

impl Detector {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let spec = config.grid_spec()?;
        let mut init = ParamInit::new(config.seed);
        let renderer = Renderer::new(config, &mut init)?;
        let backbone = Backbone::new(config, &mut init)?;
        let d = config.backbone.decoder_channels;
        Ok(Self {
            config: config.clone(),
            spec,
            renderer,
            backbone,
            car_head: Head::new("head.car", d, &mut init)?,
            vru_head: Head::new("head.vru", d, &mut init)?,
        })
    }

    pub fn level_of(&self, class: ClassId) -> usize {
        match class {
            ClassId::Car => self.config.head.car_level,
            ClassId::Vru => self.config.head.vru_level,
        }
    }

    fn head(&self, class: ClassId) -> &Head {
        match class {
            ClassId::Car => &self.car_head,
            ClassId::Vru => &self.vru_head,
        }
    }

    fn head_mut(&mut self, class: ClassId) -> &mut Head {
        match class {
            ClassId::Car => &mut self.car_head,
            ClassId::Vru => &mut self.vru_head,
        }
    }

    pub fn forward(&mut self, cloud: &PointCloud, ctx: &mut Ctx) -> Result<Forward> {
        let (grid, render) = self.renderer.forward(&self.spec, cloud, ctx)?;
        let backbone = self.backbone.forward(&grid, ctx)?;
        let mut raw = Vec::new();
        let mut heads = Vec::new();
        for class in ClassId::ALL {
            let map = backbone.levels[self.level_of(class)].as_ref().expect("head level decoded");
            let (r, c) = self.head(class).forward(map, ctx)?;
            raw.push(r);
            heads.push(c);
        }
        Ok(Forward {
            grid,
            render,
            backbone,
            raw,
            heads,
        })
    }

    /// Feature map a class head reads.
    pub fn head_map<'a>(&self, fwd: &'a Forward, class: ClassId) -> &'a SparseGrid {
        fwd.backbone.levels[self.level_of(class)].as_ref().expect("head level decoded")
    }

    /// Sum of the per-class toy losses and the gradient per head.
    pub fn loss(&self, fwd: &Forward, truth: &[Detection]) -> Result<(LossParts, Vec<Array2<f64>>)> {
        let mut total = LossParts {
            cls: 0.0,
            reg: 0.0,
            total: 0.0,
            positives: 0,
        };
        let mut grads = Vec::new();
        for (k, class) in ClassId::ALL.into_iter().enumerate() {
            let map = self.head_map(fwd, class);
            let gts: Vec<Obb> = truth.iter().filter(|d| d.class == class).map(|d| d.obb).collect();
            let (parts, g) = toy_loss(&fwd.raw[k], &map.spec, map.cells(), &gts, self.config.train.lambda)?;
            total.cls += parts.cls;
            total.reg += parts.reg;
            total.total += parts.total;
            total.positives += parts.positives;
            grads.push(g);
        }
        Ok((total, grads))
    }

    /// Accumulates parameter gradients from per-head output gradients.
    pub fn backward(&mut self, fwd: &Forward, head_grads: &[Array2<f64>]) {
        let mut level_grads: Vec<Option<Array2<f64>>> = vec![None; self.backbone.stages.len()];
        for (k, class) in ClassId::ALL.into_iter().enumerate() {
            let g = self.head_mut(class).backward(&fwd.heads[k], &head_grads[k]);
            let slot = &mut level_grads[self.level_of(class)];
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }
        let g0 = self.backbone.backward(&fwd.backbone, &level_grads);
        self.renderer.backward(&fwd.render, &g0);
    }

    /// Decodes, thresholds and suppresses the head outputs of an eval-mode pass.
    pub fn decode(&self, fwd: &Forward) -> Vec<Detection> {
        let mut all = Vec::new();
        for (k, class) in ClassId::ALL.into_iter().enumerate() {
            let map = self.head_map(fwd, class);
            all.extend(decode_predictions(
                &map.spec,
                map.cells(),
                &fwd.raw[k],
                class,
                self.config.head.score_threshold,
            ));
        }
        nms_per_class(&all, self.config.head.nms_iou)
    }

    /// Eval-mode inference.
    pub fn detect(&mut self, cloud: &PointCloud) -> Result<Vec<Detection>> {
        let fwd = self.forward(cloud, &mut Ctx::eval())?;
        Ok(self.decode(&fwd))
    }

    fn clip_gradients(&mut self) {
        let clip = self.config.train.clip_norm;
        if clip <= 0.0 {
            return;
        }
        let mut sq = 0.0;
        self.visit_params(&mut |p| {
            if p.trainable {
                sq += p.grad.iter().map(|g| g * g).sum::<f64>();
            }
        });
        let norm = sq.sqrt();
        if norm > clip {
            let scale = clip / norm;
            self.visit_params(&mut |p| p.grad *= scale);
        }
    }

    /// SGD over the samples, one sample per step, visiting them in a seeded
    /// order per epoch. Batch norm statistics are recalibrated afterwards.
    pub fn train_toy(&mut self, samples: &[Sample], steps: usize, lr: f64) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(Error::invalid("training needs at least one scene"));
        }
        let seed = self.config.seed;
        let mut shuffle = rng::stream(seed, streams::SHUFFLE);
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(steps);
        let mut final_parts = None;
        self.zero_grad();
        for step in 0..steps {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut shuffle);
                order.reverse();
            }
            let sample = &samples[order.pop().expect("refilled")];
            let sigma = self.config.render.rcs_sigma;
            let cloud = if sigma > 0.0 {
                augment_rcs(&sample.cloud, sigma, seed.wrapping_add(step as u64))?
            } else {
                sample.cloud.clone()
            };
            let diverged = |e| match e {
                Error::NonFinite(_) => Error::Diverged { step, loss: f64::NAN },
                other => other,
            };
            let fwd = self.forward(&cloud, &mut Ctx::train()).map_err(diverged)?;
            let (parts, grads) = self.loss(&fwd, &sample.truth).map_err(diverged)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: parts.total,
                });
            }
            losses.push(parts.total);
            final_parts = Some(parts);
            self.backward(&fwd, &grads);
            self.clip_gradients();
            sgd_step(self, lr)?;
            let mut finite = true;
            self.visit_params(&mut |p| finite &= p.value.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Diverged {
                    step,
                    loss: parts.total,
                });
            }
        }
        self.recalibrate_bn(samples)?;
        Ok(TrainReport { losses, final_parts })
    }

    /// Sets every batch norm's running statistics to the average of the
    /// batch statistics over `samples`.
    pub fn recalibrate_bn(&mut self, samples: &[Sample]) -> Result<()> {
        for (k, s) in samples.iter().enumerate() {
            let mut ctx = Ctx::train();
            ctx.momentum_override = Some(1.0 / (k as f64 + 1.0));
            self.forward(&s.cloud, &mut ctx)?;
        }
        self.zero_grad();
        Ok(())
    }

    /// Layers of the backbone executed on `cloud` (eval mode).
    pub fn profile(&mut self, cloud: &PointCloud) -> Result<(f64, Vec<LayerStat>)> {
        let mut ctx = Ctx::eval().with_stats();
        let fwd = self.forward(cloud, &mut ctx)?;
        let stats = ctx
            .take_stats()
            .into_iter()
            .filter(|s| s.name.starts_with("backbone"))
            .collect();
        Ok((fwd.grid.density(), stats))
    }

    /// Submanifold layers of the backbone with the resolution they run at.
    fn ssc_layers(&self) -> Result<Vec<(&SparseConvLayer, GridSpec)>> {
        let mut out = Vec::new();
        for (k, stage) in self.backbone.stages.iter().enumerate() {
            let spec = self.config.stage_spec(k)?;
            match stage {
                Block::Dpvc(b) => out.extend(b.ssc_layers().into_iter().map(|l| (l, spec))),
                Block::Sscn(b) => out.extend([(&b.conv1, spec), (&b.conv2, spec)]),
            }
            if let Some(b) = &self.backbone.fpn[k] {
                out.extend([(&b.conv1, spec), (&b.conv2, spec)]);
            }
        }
        Ok(out)
    }

    /// Sparse pipeline vs dense oracle on `cloud`: exact MAC counts of the
    /// backbone and median wall times over `repeat` runs. The dense timing
    /// runs the dense convolution oracle for every submanifold layer.
    pub fn bench(&mut self, cloud: &PointCloud, repeat: usize, dense_timing: bool) -> Result<BenchReport> {
        let repeat = repeat.max(1);
        let (density, layers) = self.profile(cloud)?;
        let mut report = BenchReport::from_layers(layers, density);
        let mut sparse = Vec::with_capacity(repeat);
        for _ in 0..repeat {
            let t = Instant::now();
            self.forward(cloud, &mut Ctx::eval())?;
            sparse.push(t.elapsed().as_secs_f64());
        }
        report.sparse_seconds = median(&mut sparse);
        if dense_timing {
            let mut dense = Vec::with_capacity(repeat);
            for _ in 0..repeat {
                let t = Instant::now();
                for (layer, spec) in self.ssc_layers()? {
                    dense_conv_oracle(&DenseGrid::zeros(spec, layer.spec.m), layer)?;
                }
                dense.push(t.elapsed().as_secs_f64());
            }
            report.dense_seconds = median(&mut dense);
        }
        Ok(report)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl Module for Detector {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.renderer.visit_params(f);
        self.backbone.visit_params(f);
        self.car_head.visit_params(f);
        self.vru_head.visit_params(f);
    }
}
