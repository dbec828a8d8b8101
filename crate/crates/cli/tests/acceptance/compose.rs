use ndarray::{Array2, Axis};
use rand::Rng;

use skpp_core::nn::ParamInit;
use skpp_core::render::{skpbev_encode, skpp_encode, spp_encode, MultigridAggregator, PillarEncoder, SkpbevEncoder};
use skpp_core::{Config, Ctx};

use crate::support::{random_cloud, rel, rng};
use crate::Outcome;

const CLOUDS: u64 = 100;
const TOLERANCE: f64 = 1e-12;
const EPS: f64 = 1e-5;
/// Normalised features have unit scale; smaller values are compared absolutely.
const FLOOR: f64 = 1.0;

/// Per-channel standardisation with the biased batch variance.
fn normalise(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centred = x - &mean;
    let var = centred.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    centred / &var.mapv(|v| (v + EPS).sqrt())
}

pub fn run() -> Outcome {
    let cfg = Config::desk();
    let spec = cfg.grid_spec().unwrap();
    let mut worst = 0.0f64;
    let mut cell_mismatch = 0;
    let mut r = rng(0xAC8);
    for seed in 0..CLOUDS {
        let cloud = random_cloud(r.random_range(10..200), &spec, &mut r);
        let mut init = ParamInit::new(seed);
        let spp = PillarEncoder::new("spp", cfg.render.f_out, &mut init);
        let skpbev = SkpbevEncoder::new("skpbev", &cfg, &mut init).unwrap();
        let mut agg = MultigridAggregator::new("agg", 2, cfg.render.f_out);
        let fused = skpp_encode(&spec, &cloud, &mut spp.clone(), &skpbev, &mut agg, &mut Ctx::train()).unwrap();
        let a = spp_encode(&spec, &cloud, &mut spp.clone(), &mut Ctx::train()).unwrap();
        let b = skpbev_encode(&spec, &cloud, &skpbev, &mut Ctx::train()).unwrap();
        if fused.cells() != a.cells() || a.cells() != b.cells() {
            cell_mismatch += 1;
            continue;
        }
        let expect = normalise(a.features()) + normalise(b.features());
        for (x, e) in fused.features().iter().zip(&expect) {
            worst = worst.max(rel(*x, *e, FLOOR));
        }
    }
    Outcome::new(
        worst <= TOLERANCE && cell_mismatch == 0,
        format!("{CLOUDS} clouds, max rel err {worst:.2e} (tol {TOLERANCE:e}), {cell_mismatch} active-set mismatches"),
    )
}
