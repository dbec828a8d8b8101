//! Differentiable building blocks with hand-written backward passes.
//!
//! Layers follow one pattern: `forward` returns the output together with a
//! cache, and `backward` consumes that cache and the upstream gradient,
//! accumulating parameter gradients in place and returning the gradient with
//! respect to the layer input. There is no tape; composite layers call their
//! children's backward passes in reverse order.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::profile::{LayerKind, LayerStat};
use crate::rng::{self, streams, SeedSequence};

/// A named tensor with a gradient accumulator.
///
/// Frozen parameters (running statistics, kernel point layouts) travel with
/// the model and the checkpoint but are skipped by the optimizer and the
/// gradient checker.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    fn trainable_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

/// Per-call execution settings threaded through every forward pass.
#[derive(Debug, Clone, Default)]
pub struct Ctx {
    pub train: bool,
    /// Replaces every batch norm's momentum for this pass (BN recalibration).
    pub momentum_override: Option<f64>,
    stats: Option<Vec<LayerStat>>,
}

impl Ctx {
    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    pub fn with_stats(mut self) -> Self {
        self.stats = Some(Vec::new());
        self
    }

    pub fn recording(&self) -> bool {
        self.stats.is_some()
    }

    pub fn record(&mut self, stat: LayerStat) {
        if let Some(s) = &mut self.stats {
            s.push(stat);
        }
    }

    pub fn take_stats(&mut self) -> Vec<LayerStat> {
        self.stats.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

/// Uniform initialisation in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
pub fn init_params(name: impl Into<String>, shape: &[usize], fan_in: usize, seed: u64) -> Parameter {
    init_with(name, shape, fan_in, &mut rng::stream(seed, streams::PARAM_INIT))
}

fn init_with(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> Parameter {
    assert!(fan_in >= 1, "fan_in must be at least 1");
    let bound = (1.0 / fan_in as f64).sqrt();
    let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound));
    Parameter::new(name, value)
}

/// Deterministic source of initial parameter values.
#[derive(Debug, Clone)]
pub struct ParamInit {
    seq: SeedSequence,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            seq: SeedSequence::new(seed, streams::PARAM_INIT),
        }
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> Parameter {
        init_with(name, shape, fan_in, &mut self.seq.next_rng())
    }

    pub fn next_seed(&mut self) -> u64 {
        self.seq.next_rng().random()
    }
}

/// `y = x W^T + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    /// `[out, in]`
    pub weight: Parameter,
    /// `[out]`
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, c_in: usize, c_out: usize, init: &mut ParamInit) -> Self {
        Self {
            name: name.to_string(),
            weight: init.uniform(format!("{name}.weight"), &[c_out, c_in], c_in),
            bias: init.uniform(format!("{name}.bias"), &[c_out], c_in),
        }
    }

    pub fn from_values(name: &str, weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self {
            name: name.to_string(),
            weight: Parameter::new(format!("{name}.weight"), weight.into_dyn()),
            bias: Parameter::new(format!("{name}.bias"), bias.into_dyn()),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality().expect("2d weight")
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.c_in() {
            return Err(Error::invalid(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.c_in(),
                x.ncols()
            )));
        }
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d bias");
        Ok(x.dot(&self.w().t()) + &b)
    }

    /// Forward that also records its cost when profiling; `dense_rows` is
    /// the row count of the dense-grid equivalent.
    pub fn forward_profiled(&self, x: &Array2<f64>, dense_rows: usize, ctx: &mut Ctx) -> Result<Array2<f64>> {
        let start = std::time::Instant::now();
        let y = self.forward(x)?;
        if ctx.recording() {
            let per_row = (self.c_in() * self.c_out()) as u64;
            ctx.record(LayerStat {
                name: self.name.clone(),
                kind: LayerKind::Linear,
                active_in: x.nrows(),
                active_out: x.nrows(),
                pairs: x.nrows() as u64,
                macs: x.nrows() as u64 * per_row,
                dense_macs: dense_rows as u64 * per_row,
                nanos: start.elapsed().as_nanos(),
            });
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        let dw = grad_out.t().dot(x);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad_out.sum_axis(Axis(0)).into_dyn();
        grad_out.dot(&self.w())
    }
}

impl Module for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over the rows of a feature matrix.
///
/// Running variance tracks the biased batch variance, so a single-batch
/// recalibration makes eval mode reproduce train mode exactly.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    train: bool,
}

impl BnCache {
    /// Cache of a pass over zero rows.
    pub fn empty(channels: usize) -> Self {
        Self {
            xhat: Array2::zeros((0, channels)),
            inv_std: Array1::zeros(channels),
            train: false,
        }
    }
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self::with_settings(name, channels, BN_MOMENTUM, BN_EPS)
    }

    pub fn with_settings(name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels]))),
            beta: Parameter::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Parameter::frozen(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Parameter::frozen(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn vec(p: &Parameter) -> ndarray::ArrayView1<'_, f64> {
        p.value.view().into_dimensionality().expect("1d")
    }

    pub fn forward(&mut self, x: &Array2<f64>, ctx: &Ctx) -> Result<(Array2<f64>, BnCache)> {
        let c = self.channels();
        if x.ncols() != c {
            return Err(Error::invalid(format!(
                "{}: expected {c} channels, got {}",
                self.gamma.name,
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Ok((x.clone(), BnCache::empty(c)));
        }
        let (mean, var) = if ctx.train {
            let n = x.nrows();
            if n < 2 {
                return Err(Error::invalid(format!(
                    "{}: batch norm in train mode needs at least 2 rows, got {n}",
                    self.gamma.name
                )));
            }
            let mean = x.mean_axis(Axis(0)).expect("non-empty");
            let var = x.var_axis(Axis(0), 0.0);
            let m = ctx.momentum_override.unwrap_or(self.momentum);
            let rm = &Self::vec(&self.running_mean) * (1.0 - m) + &mean * m;
            let rv = &Self::vec(&self.running_var) * (1.0 - m) + &var * m;
            self.running_mean.value = rm.into_dyn();
            self.running_var.value = rv.into_dyn();
            (mean, var)
        } else {
            (Self::vec(&self.running_mean).to_owned(), Self::vec(&self.running_var).to_owned())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let y = &xhat * &Self::vec(&self.gamma) + &Self::vec(&self.beta);
        Ok((
            y,
            BnCache {
                xhat,
                inv_std,
                train: ctx.train,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BnCache, grad_out: &Array2<f64>) -> Array2<f64> {
        let gamma = Self::vec(&self.gamma).to_owned();
        self.gamma.grad += &(grad_out * &cache.xhat).sum_axis(Axis(0)).into_dyn();
        self.beta.grad += &grad_out.sum_axis(Axis(0)).into_dyn();
        let dxhat = grad_out * &gamma;
        if !cache.train {
            return dxhat * &cache.inv_std;
        }
        let n = grad_out.nrows() as f64;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let scale = &cache.inv_std / n;
        (dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat) * &scale
    }
}

impl Module for BatchNorm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient of ReLU given its input; the subgradient at 0 is 0.
pub fn relu_backward(x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut g = grad_out.clone();
    ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
        if x <= 0.0 {
            *g = 0.0
        }
    });
    g
}

const L2_EPS: f64 = 1e-12;

/// Row-wise L2 normalisation `x / sqrt(|x|^2 + eps)`.
pub fn l2_normalize(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| (r.dot(&r) + L2_EPS).sqrt());
    let y = x / &norms.view().insert_axis(Axis(1));
    (y, norms)
}

pub fn l2_normalize_backward(y: &Array2<f64>, norms: &Array1<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let proj = (y * grad_out).sum_axis(Axis(1));
    (grad_out - &(y * &proj.insert_axis(Axis(1)))) / &norms.view().insert_axis(Axis(1))
}

/// Plain SGD: `v <- v - lr * grad`, then clears gradients.
pub fn sgd_step(model: &mut (impl Module + ?Sized), lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    model.visit_params(&mut |p| {
        if p.trainable {
            p.value.scaled_add(-lr, &p.grad);
        }
        p.zero_grad();
    });
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Tensors larger than this are checked on a random subset of this many
    /// coordinates (never fewer than 32).
    pub max_coords: usize,
    pub seed: u64,
    /// Lower bound of the relative-error denominator. Gradients that are
    /// exactly zero in theory (a bias feeding a train-mode batch norm) carry
    /// pure round-off in their finite differences.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            step: 1e-5,
            max_coords: 64,
            seed: 0,
            floor: GRAD_CHECK_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)` with the default floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, GRAD_CHECK_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients with central finite differences.
///
/// `loss(model, backward)` must return the scalar loss and, when `backward`
/// is true, accumulate analytic gradients into the model's parameters.
pub fn grad_check<M, F>(model: &mut M, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Module + ?Sized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.zero_grad();
    let base = loss(model, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss = {base}")));
    }
    let mut analytic: Vec<(String, ArrayD<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        if p.trainable {
            analytic.push((p.name.clone(), p.grad.clone()));
        }
    });
    model.zero_grad();

    let mut rng = rng::stream(opts.seed, streams::GRAD_CHECK);
    let max_coords = opts.max_coords.max(32);
    let mut params = Vec::new();
    for (index, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &coord in &coords {
            let plus = perturbed_loss(model, index, coord, opts.step, &mut loss)?;
            let minus = perturbed_loss(model, index, coord, -opts.step, &mut loss)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.as_slice_memory_order().expect("contiguous")[coord];
            worst = worst.max(relative_error_with_floor(a, numeric, opts.floor));
        }
        params.push(ParamCheck {
            name: name.clone(),
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_err,
        tolerance: opts.tolerance,
        pass: max_rel_err < opts.tolerance,
    })
}

fn perturbed_loss<M, F>(model: &mut M, index: usize, coord: usize, delta: f64, loss: &mut F) -> Result<f64>
where
    M: Module + ?Sized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    let mut k = 0;
    let mut original = None;
    model.visit_params(&mut |p| {
        if p.trainable {
            if k == index {
                let slot = &mut p.value.as_slice_memory_order_mut().expect("contiguous")[coord];
                original = Some(*slot);
                *slot += delta;
            }
            k += 1;
        }
    });
    let original = original.expect("parameter index in range");
    let value = loss(model, false);
    let mut k = 0;
    model.visit_params(&mut |p| {
        if p.trainable {
            if k == index {
                p.value.as_slice_memory_order_mut().expect("contiguous")[coord] = original;
            }
            k += 1;
        }
    });
    let value = value?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    Ok(value)
}

pub const CHECKPOINT_MAGIC: &str = "skpp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes every parameter (trainable and frozen) as text.
///
/// Layout: a header line `skpp-checkpoint 1`, then per tensor one line
/// `param <name> <trainable:0|1> <rank> <dims...>` followed by one line of
/// space-separated values in row-major order. Values use the shortest
/// representation that round-trips exactly.
pub fn save_checkpoint(model: &mut (impl Module + ?Sized), mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    let mut result = Ok(());
    model.visit_params(&mut |p| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let dims: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "param {} {} {} {}", p.name, u8::from(p.trainable), p.shape().len(), dims.join(" "))?;
            let values: Vec<String> = p.value.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", values.join(" "))
        })();
    });
    result
}

/// Loads values into an already-constructed model; names and shapes must match.
pub fn load_checkpoint(model: &mut (impl Module + ?Sized), input: impl BufRead) -> Result<()> {
    let mut lines = input.lines().enumerate();
    let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {}: {msg}", line + 1));
    let (_, header) = lines.next().ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    let header = header.map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(0, "missing checkpoint header"));
    }
    match parts.next().and_then(|v| v.parse::<u32>().ok()) {
        Some(CHECKPOINT_VERSION) => {}
        other => return Err(bad(0, &format!("unsupported version {other:?}"))),
    }
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    while let Some((ln, line)) = lines.next() {
        let line = line.map_err(|e| Error::Checkpoint(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 || fields[0] != "param" {
            return Err(bad(ln, "expected `param <name> <trainable> <rank> <dims...>`"));
        }
        let rank: usize = fields[3].parse().map_err(|_| bad(ln, "bad rank"))?;
        if fields.len() != 4 + rank {
            return Err(bad(ln, "dimension count does not match rank"));
        }
        let shape = fields[4..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| bad(ln, "bad dimension")))
            .collect::<Result<Vec<_>>>()?;
        let (vln, values) = lines.next().ok_or_else(|| bad(ln, "missing value line"))?;
        let values = values.map_err(|e| Error::Checkpoint(e.to_string()))?;
        let values = values
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad(vln, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != shape.iter().product::<usize>() {
            return Err(bad(vln, "value count does not match shape"));
        }
        tensors.insert(fields[1].to_string(), (shape, values));
    }
    let mut err = None;
    model.visit_params(&mut |p| {
        if err.is_some() {
            return;
        }
        match tensors.remove(&p.name) {
            None => err = Some(Error::Checkpoint(format!("missing parameter `{}`", p.name))),
            Some((shape, values)) => {
                if shape != p.shape() {
                    err = Some(Error::Shape {
                        name: p.name.clone(),
                        expected: p.shape().to_vec(),
                        found: shape,
                    });
                } else {
                    p.value = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("checked shape");
                    p.zero_grad();
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = tensors.keys().min() {
        return Err(Error::Checkpoint(format!("unknown parameter `{name}`")));
    }
    Ok(())
}
