use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use skpp_core::backbone::{DpvcBlock, DpvcSettings};
use skpp_core::config::{BranchNorm, DpvcLayout};
use skpp_core::detection::{toy_loss, Head};
use skpp_core::kpconv::{grid_neighborhoods, place_kernel_points, KpConvLayer};
use skpp_core::model::Sample;
use skpp_core::nn::{grad_check, relu, relu_backward, BatchNorm, GradCheckOptions, Linear, ParamInit};
use skpp_core::points::{synth_scene, SceneObject, SceneSpec};
use skpp_core::sparse_conv::{build_rulebook, ConvMode, ConvSpec, Reference, Rulebook, SparseConvLayer};
use skpp_core::{ClassId, Ctx, Detector, Module, Obb, Parameter, RenderMode};

use crate::support::{input_gradient_error, random_grid, random_matrix, rng, square, tiny_config};
use crate::Outcome;

const LAYER_TOLERANCE: f64 = 1e-5;
const COMPOSED_TOLERANCE: f64 = 1e-4;

/// A layer under test with a fixed input and a random linear probe `sum(y * r)`.
struct Probe<L> {
    layer: L,
    x: Array2<f64>,
    r: Array2<f64>,
}

impl<L: Module> Module for Probe<L> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.layer.visit_params(f)
    }
}

struct Check {
    name: String,
    params: f64,
    input: f64,
    tolerance: f64,
}

impl Check {
    fn pass(&self) -> bool {
        self.params < self.tolerance && self.input < self.tolerance
    }
}

/// Parameter check through `grad_check` plus a full input check.
fn check<L: Module>(
    name: &str,
    probe: &mut Probe<L>,
    tolerance: f64,
    forward: impl Fn(&mut L, &Array2<f64>) -> Array2<f64>,
    backward: impl Fn(&mut L, &Array2<f64>, &Array2<f64>) -> Array2<f64>,
) -> Check {
    let report = grad_check(
        probe,
        |p, bw| {
            let y = forward(&mut p.layer, &p.x);
            if bw {
                backward(&mut p.layer, &p.x, &p.r);
            }
            Ok((&y * &p.r).sum())
        },
        &GradCheckOptions::with_tolerance(tolerance),
    )
    .unwrap();
    probe.layer.zero_grad();
    let dx = backward(&mut probe.layer, &probe.x, &probe.r);
    probe.layer.zero_grad();
    let (layer, r) = (&mut probe.layer, &probe.r);
    let input = input_gradient_error(&probe.x, &dx, |x| (&forward(layer, x) * r).sum());
    Check {
        name: name.to_string(),
        params: report.max_rel_err,
        input,
        tolerance,
    }
}

fn probe<L>(layer: L, x: Array2<f64>, out_cols: usize, r: &mut ChaCha8Rng) -> Probe<L> {
    let rows = x.nrows();
    Probe {
        layer,
        x,
        r: random_matrix(rows, out_cols, r),
    }
}

fn linear(r: &mut ChaCha8Rng) -> Check {
    let layer = Linear::new("linear", 4, 3, &mut ParamInit::new(1));
    let mut p = probe(layer, random_matrix(10, 4, r), 3, r);
    check("linear", &mut p, LAYER_TOLERANCE, |l, x| l.forward(x).unwrap(), |l, x, g| l.backward(x, g))
}

fn batchnorm(r: &mut ChaCha8Rng) -> Check {
    let mut layer = BatchNorm::new("bn", 3);
    layer.visit_params(&mut |p| p.value.mapv_inplace(|v| v + 0.3));
    let mut p = probe(layer, random_matrix(12, 3, r), 3, r);
    check(
        "batchnorm",
        &mut p,
        LAYER_TOLERANCE,
        |l, x| l.forward(x, &Ctx::train()).unwrap().0,
        |l, x, g| {
            let (_, cache) = l.forward(x, &Ctx::train()).unwrap();
            l.backward(&cache, g)
        },
    )
}

/// No parameters; inputs stay away from the kink.
fn relu_check(r: &mut ChaCha8Rng) -> Check {
    let x = Array2::from_shape_simple_fn((8, 5), || {
        let v: f64 = r.random_range(0.01..1.0);
        if r.random::<bool>() {
            v
        } else {
            -v
        }
    });
    let g = random_matrix(8, 5, r);
    let dx = relu_backward(&x, &g);
    let input = input_gradient_error(&x, &dx, |x| (&relu(x) * &g).sum());
    Check {
        name: "relu".into(),
        params: 0.0,
        input,
        tolerance: LAYER_TOLERANCE,
    }
}

fn kpconv(r: &mut ChaCha8Rng) -> Check {
    let g = random_grid(square(8), 0.4, 3, r);
    let mut kernel = place_kernel_points(5, 1.5, 3).unwrap();
    kernel.influence_sigma = 0.75;
    let layer = KpConvLayer::new("kp", &kernel, 3, 4, &mut ParamInit::new(3));
    let nb = grid_neighborhoods(&g, layer.radius).unwrap();
    let mut p = probe(layer, g.features().clone(), 4, r);
    check(
        "kpconv",
        &mut p,
        LAYER_TOLERANCE,
        |l, x| l.forward(&nb, x, None, &mut Ctx::eval()).unwrap().0,
        |l, x, g| {
            let (_, cache) = l.forward(&nb, x, None, &mut Ctx::eval()).unwrap();
            l.backward(&nb, &cache, g)
        },
    )
}

fn sparse_conv(name: &str, mode: ConvMode, f: usize, r: &mut ChaCha8Rng) -> Check {
    let g = random_grid(square(12), 0.3, 3, r);
    let layer = SparseConvLayer::new(name, ConvSpec::new(3, 2, f, if mode == ConvMode::Submanifold { 1 } else { 2 }).unwrap(), &mut ParamInit::new(4));
    let rb: Rulebook = match mode {
        ConvMode::Deconv => {
            let down = build_rulebook(g.cells(), &g.spec, &layer.spec, ConvMode::Strided, None).unwrap();
            let reference = Reference {
                spec: &g.spec,
                cells: g.cells(),
            };
            build_rulebook(&down.out_cells, &down.out_spec, &layer.spec, mode, Some(reference)).unwrap()
        }
        _ => build_rulebook(g.cells(), &g.spec, &layer.spec, mode, None).unwrap(),
    };
    let x = random_matrix(rb.in_len, 3, r);
    let out_rows = rb.out_cells.len();
    let mut p = Probe {
        layer,
        x,
        r: random_matrix(out_rows, 2, r),
    };
    check(
        name,
        &mut p,
        LAYER_TOLERANCE,
        |l, x| l.forward(x, &rb, &mut Ctx::eval()).unwrap(),
        |l, x, g| l.backward(x, &rb, g),
    )
}

fn head(r: &mut ChaCha8Rng) -> Check {
    let g = random_grid(square(8), 0.5, 3, r);
    let layer = Head::new("head", 3, &mut ParamInit::new(5)).unwrap();
    let mut p = probe(layer, g.features().clone(), 7, r);
    let grid = |x: &Array2<f64>| g.with_features(x.clone()).unwrap();
    check(
        "head",
        &mut p,
        LAYER_TOLERANCE,
        |l, x| l.forward(&grid(x), &mut Ctx::eval()).unwrap().0,
        |l, x, gr| {
            let (_, cache) = l.forward(&grid(x), &mut Ctx::eval()).unwrap();
            l.backward(&cache, gr)
        },
    )
}

fn loss(r: &mut ChaCha8Rng) -> Check {
    let g = random_grid(square(8), 0.6, 1, r);
    let gts = [Obb::new(2.3, 3.6, 1.0, 2.0, 0.3), Obb::new(6.1, 1.4, 0.6, 0.9, -2.0)];
    let raw = random_matrix(g.len(), 7, r) * 1.5;
    let value = |raw: &Array2<f64>| toy_loss(raw, &g.spec, g.cells(), &gts, 2.0).unwrap();
    let (parts, grad) = value(&raw);
    assert!(parts.positives > 0, "loss fixture needs positives");
    let input = input_gradient_error(&raw, &grad, |x| value(x).0.total);
    Check {
        name: "toy_loss".into(),
        params: 0.0,
        input,
        tolerance: LAYER_TOLERANCE,
    }
}

fn dpvc(r: &mut ChaCha8Rng) -> Check {
    let g = random_grid(square(8), 0.25, 2, r);
    let settings = DpvcSettings {
        c_in: 2,
        c_out: 3,
        radius: 1.5,
        kernel_points: 5,
        sigma_ratio: 0.5,
        layout: DpvcLayout::Figure,
        norm: BranchNorm::Bn,
    };
    let layer = DpvcBlock::new("dpvc", settings, &mut ParamInit::new(6)).unwrap();
    let grid = |x: &Array2<f64>| g.with_features(x.clone()).unwrap();
    let out_rows = layer.clone().forward(&g, &mut Ctx::train()).unwrap().0.len();
    let mut p = Probe {
        layer,
        x: g.features().clone(),
        r: random_matrix(out_rows, 3, r),
    };
    check(
        "dpvc_block",
        &mut p,
        COMPOSED_TOLERANCE,
        |l, x| l.forward(&grid(x), &mut Ctx::train()).unwrap().0.into_features(),
        |l, x, gr| {
            let (_, cache) = l.forward(&grid(x), &mut Ctx::train()).unwrap();
            l.backward(&cache, gr)
        },
    )
}

struct Net {
    det: Detector,
    sample: Sample,
}

impl Module for Net {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.det.visit_params(f);
    }
}

fn full_network() -> Check {
    let mut cfg = tiny_config();
    cfg.render.mode = RenderMode::Skpp;
    let object = |class, cx, cy, w, l, yaw| SceneObject {
        class,
        cx,
        cy,
        w,
        l,
        yaw,
        vx: 1.0,
        vy: -0.5,
    };
    let scene = SceneSpec {
        objects: vec![
            object(ClassId::Car, 3.0, 4.0, 1.6, 3.5, 0.4),
            object(ClassId::Vru, 6.3, 1.7, 0.6, 0.8, -1.0),
        ],
        clutter_count: 6,
        points_per_object: 12,
        seed: 3,
    };
    let (cloud, truth) = synth_scene(&scene, &cfg.grid_spec().unwrap()).unwrap();
    let mut net = Net {
        det: Detector::new(&cfg).unwrap(),
        sample: Sample { cloud, truth },
    };
    let report = grad_check(
        &mut net,
        |n, bw| {
            let fwd = n.det.forward(&n.sample.cloud, &mut Ctx::train())?;
            let (parts, grads) = n.det.loss(&fwd, &n.sample.truth)?;
            if bw {
                n.det.backward(&fwd, &grads);
            }
            Ok(parts.total)
        },
        &GradCheckOptions {
            max_coords: 16,
            ..GradCheckOptions::with_tolerance(COMPOSED_TOLERANCE)
        },
    )
    .unwrap();
    Check {
        name: "full_network".into(),
        params: report.max_rel_err,
        input: 0.0,
        tolerance: COMPOSED_TOLERANCE,
    }
}

/// A linear layer whose backward over-reports the weight gradient by 1%.
fn negative_control(r: &mut ChaCha8Rng) -> bool {
    let layer = Linear::new("corrupt", 4, 3, &mut ParamInit::new(9));
    let mut p = probe(layer, random_matrix(10, 4, r), 3, r);
    let report = grad_check(
        &mut p,
        |p, bw| {
            let y = p.layer.forward(&p.x)?;
            if bw {
                p.layer.backward(&p.x, &p.r);
                p.layer.weight.grad *= 1.01;
            }
            Ok((&y * &p.r).sum())
        },
        &GradCheckOptions::with_tolerance(LAYER_TOLERANCE),
    )
    .unwrap();
    !report.pass
}

pub fn run() -> Outcome {
    let mut r = rng(0xAC2);
    let checks = vec![
        linear(&mut r),
        batchnorm(&mut r),
        relu_check(&mut r),
        kpconv(&mut r),
        sparse_conv("ssc", ConvMode::Submanifold, 3, &mut r),
        sparse_conv("sc_f2", ConvMode::Strided, 2, &mut r),
        sparse_conv("sc_f3", ConvMode::Strided, 3, &mut r),
        sparse_conv("dc", ConvMode::Deconv, 2, &mut r),
        head(&mut r),
        loss(&mut r),
        dpvc(&mut r),
        full_network(),
    ];
    let control_detected = negative_control(&mut r);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass()).map(|c| c.name.as_str()).collect();
    let pass = failed.is_empty() && control_detected;
    let mut outcome = Outcome::new(
        pass,
        format!(
            "{} checks, {} failed{}; corrupted backward {}",
            checks.len(),
            failed.len(),
            if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) },
            if control_detected { "rejected" } else { "NOT rejected" }
        ),
    );
    for c in &checks {
        outcome = outcome.note(format!(
            "{:<13} params {:.2e}  input {:.2e}  (tol {:e})",
            c.name, c.params, c.input, c.tolerance
        ));
    }
    outcome
}
