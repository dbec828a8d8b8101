use skpp_core::{Config, Ctx, Detector};

use crate::support::{random_cloud, rng, skpp, stderr, stdout};
use crate::Outcome;

pub fn run() -> Outcome {
    let out = skpp(&["dump-config", "--preset", "paper"]);
    if !out.status.success() {
        return Outcome::new(false, format!("dump-config failed: {}", stderr(&out)));
    }
    let cfg = Config::from_toml_str(&stdout(&out)).expect("dumped config parses");
    let spec = cfg.grid_spec().unwrap();
    let g = &cfg.grid;
    let mut mismatches = Vec::new();
    let mut expect = |what: &str, ok: bool, found: String| {
        if !ok {
            mismatches.push(format!("{what}: {found}"));
        }
    };
    expect(
        "extent",
        (g.x_min, g.x_max, g.y_min, g.y_max) == (-60.0, 60.0, -60.0, 60.0),
        format!("{g:?}"),
    );
    expect("cell size", g.cell_size == 0.5, g.cell_size.to_string());
    expect("grid", (spec.nx, spec.ny) == (240, 240), format!("{}x{}", spec.nx, spec.ny));
    expect("F_out", cfg.render.f_out == 32, cfg.render.f_out.to_string());
    expect("SKPBEV K", cfg.render.kp_points == 15, cfg.render.kp_points.to_string());
    expect("SKPBEV radius", cfg.render.kp_radius == 1.5, cfg.render.kp_radius.to_string());
    let radii: Vec<f64> = (0..cfg.stages()).map(|k| cfg.dpvc_radius_at(k)).collect();
    expect("DPVC radius", radii.iter().all(|&r| r == 3.75), format!("{radii:?}"));
    expect(
        "channels",
        cfg.backbone.channels == [72, 96, 128, 146, 160],
        format!("{:?}", cfg.backbone.channels),
    );

    let mut det = Detector::new(&cfg).unwrap();
    let cloud = random_cloud(300, &spec, &mut rng(4));
    let fwd = det.forward(&cloud, &mut Ctx::eval()).unwrap();
    let dims: Vec<(usize, usize, usize)> = fwd
        .backbone
        .encoder
        .maps
        .iter()
        .map(|m| (m.spec.nx, m.spec.ny, m.channels()))
        .collect();
    let want = vec![(240, 240, 72), (120, 120, 96), (60, 60, 128), (30, 30, 146), (15, 15, 160)];
    expect("encoder outputs", dims == want, format!("{dims:?}"));

    if mismatches.is_empty() {
        Outcome::new(
            true,
            "240x240 at 0.5 m over [-60,60]^2, F_out 32, K 15 / r 1.5 m, DPVC r 3.75 m, encoder 240/120/60/30/15 x 72/96/128/146/160",
        )
    } else {
        Outcome::new(false, mismatches.join("; "))
    }
}
