//! Convolutional detection head and its training loss.

use ndarray::Array2;

use super::{decode_obb, encode_obb, sigmoid, ClassId, Detection, Obb};
use crate::error::{Error, Result};
use crate::grid::{CellIndex, GridSpec, SparseGrid};
use crate::nn::{relu, relu_backward, Ctx, Linear, Module, ParamInit, Parameter};
use crate::sparse_conv::{build_rulebook, ConvMode, ConvSpec, Rulebook, SparseConvLayer};

/// `[objectness logit, dx, dy, log w, log l, sin yaw, cos yaw]`
pub const RAW_WIDTH: usize = 7;

/// A ground truth is assigned to the nearest active cell within this distance (meters).
pub const TARGET_RADIUS: f64 = 2.0;

/// `SSC(D, D, 3) -> ReLU -> Linear(D, 7)` at every active cell.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv: SparseConvLayer,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    rulebook: Rulebook,
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl Head {
    pub fn new(name: &str, channels: usize, init: &mut ParamInit) -> Result<Self> {
        let spec = ConvSpec::submanifold(channels, channels, 3)?;
        Ok(Self {
            conv: SparseConvLayer::new(&format!("{name}.conv"), spec, init),
            out: Linear::new(&format!("{name}.out"), channels, RAW_WIDTH, init),
        })
    }

    pub fn forward(&self, g: &SparseGrid, ctx: &mut Ctx) -> Result<(Array2<f64>, HeadCache)> {
        if g.channels() != self.conv.spec.m {
            return Err(Error::invalid(format!(
                "{}: expected {} channels, got {}",
                self.conv.name,
                self.conv.spec.m,
                g.channels()
            )));
        }
        let rulebook = build_rulebook(g.cells(), &g.spec, &self.conv.spec, ConvMode::Submanifold, None)?;
        let pre = self.conv.forward(g.features(), &rulebook, ctx)?;
        let hidden = relu(&pre);
        let raw = self.out.forward_profiled(&hidden, g.spec.cell_count(), ctx)?;
        Ok((
            raw,
            HeadCache {
                rulebook,
                input: g.features().clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache, grad_raw: &Array2<f64>) -> Array2<f64> {
        let dh = self.out.backward(&cache.hidden, grad_raw);
        let dpre = relu_backward(&cache.pre, &dh);
        self.conv.backward(&cache.input, &cache.rulebook, &dpre)
    }
}

impl Module for Head {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv.visit_params(f);
        self.out.visit_params(f);
    }
}

/// Decodes every active cell whose score reaches `score_threshold`, in canonical cell order.
pub fn decode_predictions(
    spec: &GridSpec,
    cells: &[CellIndex],
    raw: &Array2<f64>,
    class: ClassId,
    score_threshold: f64,
) -> Vec<Detection> {
    cells
        .iter()
        .zip(raw.outer_iter())
        .map(|(c, r)| decode_obb(spec, *c, r.as_slice().expect("contiguous row"), class))
        .filter(|d| d.score >= score_threshold)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
    pub positives: usize,
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Positive cell per ground truth: the nearest active cell center within
/// [`TARGET_RADIUS`] (ties to the lower cell). A cell claimed by an earlier
/// ground truth is not reassigned.
pub fn assign_targets(spec: &GridSpec, cells: &[CellIndex], gts: &[Obb]) -> Vec<(usize, Obb)> {
    let mut taken = vec![false; cells.len()];
    let mut out = Vec::new();
    for gt in gts {
        let mut best: Option<(usize, f64)> = None;
        for (r, c) in cells.iter().enumerate() {
            let [x, y] = spec.center(*c);
            let d = (x - gt.cx).hypot(y - gt.cy);
            if d <= TARGET_RADIUS && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((r, d));
            }
        }
        if let Some((r, _)) = best {
            if !taken[r] {
                taken[r] = true;
                out.push((r, *gt));
            }
        }
    }
    out
}

/// Binary cross-entropy summed over all active cells plus `lambda` times the
/// smooth-L1 box loss summed over the six components; both terms are divided
/// by the number of positives (at least one). Returns the loss and its
/// gradient w.r.t. `raw`.
pub fn toy_loss(
    raw: &Array2<f64>,
    spec: &GridSpec,
    cells: &[CellIndex],
    gts: &[Obb],
    lambda: f64,
) -> Result<(LossParts, Array2<f64>)> {
    if raw.nrows() != cells.len() || raw.ncols() != RAW_WIDTH {
        return Err(Error::invalid(format!(
            "loss expects {} x {RAW_WIDTH} predictions, got {} x {}",
            cells.len(),
            raw.nrows(),
            raw.ncols()
        )));
    }
    let mut grad = Array2::zeros(raw.raw_dim());
    let n = cells.len();
    if n == 0 {
        return Ok((
            LossParts {
                cls: 0.0,
                reg: 0.0,
                total: 0.0,
                positives: 0,
            },
            grad,
        ));
    }
    let targets = assign_targets(spec, cells, gts);
    let mut label = vec![0.0; n];
    for &(r, _) in &targets {
        label[r] = 1.0;
    }
    let norm = targets.len().max(1) as f64;
    let mut cls = 0.0;
    for (r, &y) in label.iter().enumerate() {
        let z = raw[[r, 0]];
        cls += softplus(z) - y * z;
        grad[[r, 0]] = (sigmoid(z) - y) / norm;
    }
    cls /= norm;
    let mut reg = 0.0;
    if !targets.is_empty() {
        let scale = lambda / targets.len() as f64;
        for &(r, gt) in &targets {
            let t = encode_obb(spec, cells[r], &gt);
            for (k, &tk) in t.iter().enumerate() {
                let e = raw[[r, k + 1]] - tk;
                let (l, g) = if e.abs() < 1.0 { (0.5 * e * e, e) } else { (e.abs() - 0.5, e.signum()) };
                reg += l;
                grad[[r, k + 1]] = scale * g;
            }
        }
        reg /= targets.len() as f64;
    }
    let total = cls + lambda * reg;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss = {total}")));
    }
    Ok((
        LossParts {
            cls,
            reg,
            total,
            positives: targets.len(),
        },
        grad,
    ))
}
