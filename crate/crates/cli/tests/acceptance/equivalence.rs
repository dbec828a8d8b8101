use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array3, IxDyn};
use rand::Rng;

use skpp_core::grid::to_dense;
use skpp_core::nn::ParamInit;
use skpp_core::sparse_conv::{dc_forward, dense_conv_oracle, sc_forward, ssc_forward, ConvSpec, Reference, SparseConvLayer};
use skpp_core::{CellIndex, Ctx, SparseGrid};

use crate::support::{random_grid, rel, rng, square};
use crate::Outcome;

const CONFIGS: usize = 200;
const TOLERANCE: f64 = 1e-10;
/// Denominator floor: features are O(1), so near-zero outputs are compared absolutely.
const FLOOR: f64 = 1.0;
const BUDGET_SECONDS: f64 = 60.0;

/// Coarse cells whose stride-`s` footprint touches an active fine cell.
fn strided_mask(g: &SparseGrid, spec: &ConvSpec) -> Vec<CellIndex> {
    let coarse = g.spec.coarsen(spec.s).unwrap();
    let active: BTreeSet<CellIndex> = g.cells().iter().copied().collect();
    let mut out = Vec::new();
    for oi in 0..coarse.nx {
        for oj in 0..coarse.ny {
            let touches = spec.offsets().iter().any(|&(di, dj)| {
                let i = (oi * spec.s) as i64 + di;
                let j = (oj * spec.s) as i64 + dj;
                g.spec.in_bounds(i, j) && active.contains(&CellIndex::new(i as usize, j as usize))
            });
            if touches {
                out.push(CellIndex::new(oi, oj));
            }
        }
    }
    out
}

/// Dense transposed convolution: every coarse cell scatters `W_d x` to `2 q + d`.
fn dense_transposed(coarse: &SparseGrid, fine_n: usize, layer: &SparseConvLayer) -> Array3<f64> {
    let x = to_dense(coarse);
    let spec = layer.spec;
    let w = &layer.weight.value;
    let mut out = Array3::zeros((fine_n, fine_n, spec.n));
    for i in 0..fine_n {
        for j in 0..fine_n {
            for o in 0..spec.n {
                out[[i, j, o]] = layer.bias.value[o];
            }
        }
    }
    for qi in 0..coarse.spec.nx {
        for qj in 0..coarse.spec.ny {
            for (k, &(di, dj)) in spec.offsets().iter().enumerate() {
                let i = (qi * spec.s) as i64 + di;
                let j = (qj * spec.s) as i64 + dj;
                if i < 0 || j < 0 || i as usize >= fine_n || j as usize >= fine_n {
                    continue;
                }
                for o in 0..spec.n {
                    for c in 0..spec.m {
                        out[[i as usize, j as usize, o]] += w[IxDyn(&[k, o, c])] * x.features[[qi, qj, c]];
                    }
                }
            }
        }
    }
    out
}

struct Tally {
    worst: f64,
    sites: usize,
    mask_errors: usize,
}

impl Tally {
    fn compare(&mut self, a: f64, b: f64) {
        self.worst = self.worst.max(rel(a, b, FLOOR));
        self.sites += 1;
    }
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0xAC1);
    let mut t = Tally {
        worst: 0.0,
        sites: 0,
        mask_errors: 0,
    };
    for case in 0..CONFIGS {
        let n = 2 * r.random_range(4..=16);
        let density = r.random_range(0.05..0.9);
        let m = r.random_range(1..=8);
        let c_out = r.random_range(1..=8);
        let g = random_grid(square(n), density, m, &mut r);
        let mut init = ParamInit::new(case as u64);

        let ssc = SparseConvLayer::new("ssc", ConvSpec::submanifold(m, c_out, 3).unwrap(), &mut init);
        let (out, _) = ssc_forward(&ssc, &g, &mut Ctx::eval()).unwrap();
        let dense = dense_conv_oracle(&to_dense(&g), &ssc).unwrap();
        if out.cells() != g.cells() {
            t.mask_errors += 1;
        }
        for (row, c) in out.cells().iter().enumerate() {
            for o in 0..c_out {
                t.compare(out.features()[[row, o]], dense.features[[c.i, c.j, o]]);
            }
        }

        for f in [3, 2] {
            let spec = ConvSpec::new(m, c_out, f, 2).unwrap();
            let sc = SparseConvLayer::new("sc", spec, &mut init);
            let (down, _) = sc_forward(&sc, &g, &mut Ctx::eval()).unwrap();
            if down.cells() != strided_mask(&g, &spec).as_slice() {
                t.mask_errors += 1;
            }
            let dense = dense_conv_oracle(&to_dense(&g), &sc).unwrap();
            for (row, c) in down.cells().iter().enumerate() {
                for o in 0..c_out {
                    t.compare(down.features()[[row, o]], dense.features[[c.i, c.j, o]]);
                }
            }

            let dc = SparseConvLayer::new("dc", ConvSpec::new(c_out, m, f, 2).unwrap(), &mut init);
            let reference = Reference {
                spec: &g.spec,
                cells: g.cells(),
            };
            let (up, _) = dc_forward(&dc, &down, reference, &mut Ctx::eval()).unwrap();
            if up.cells() != g.cells() {
                t.mask_errors += 1;
            }
            let dense = dense_transposed(&down, n, &dc);
            for (row, c) in up.cells().iter().enumerate() {
                for o in 0..m {
                    t.compare(up.features()[[row, o]], dense[[c.i, c.j, o]]);
                }
            }
        }
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = t.worst <= TOLERANCE && t.mask_errors == 0 && seconds < BUDGET_SECONDS;
    Outcome::new(
        pass,
        format!(
            "{CONFIGS} configs, {} sites, max rel err {:.2e} (tol {TOLERANCE:e}), {} active-set mismatches, {seconds:.1} s (budget {BUDGET_SECONDS} s)",
            t.sites, t.worst, t.mask_errors
        ),
    )
}
