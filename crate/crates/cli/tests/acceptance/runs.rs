//! Criteria exercised end to end through the `skpp` binary.

use std::collections::BTreeSet;
use std::time::Instant;

use skpp_cli::commands::ABLATION_HEADER;
use tempfile::TempDir;

use crate::support::{fixture, skpp, stderr, stdout, value};
use crate::Outcome;

const OVERFIT_STEPS: &str = "300";
const OVERFIT_LR: &str = "0.05";
const LOSS_RATIO: f64 = 0.1;
const ASE_MAX: f64 = 0.2;
const AOE_MAX_DEG: f64 = 10.0;
const OVERFIT_BUDGET_SECONDS: f64 = 600.0;

const SPARSE_DENSITY: &str = "0.01";
const SPARSE_RATIO_MAX: f64 = 0.05;
const FULL_RATIO_MIN: f64 = 0.8;

const ABLATION_STEPS: &str = "60";

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

fn metric(csv: &str, name: &str, threshold: &str) -> Option<f64> {
    csv.lines().find_map(|l| {
        let f: Vec<&str> = l.split(',').collect();
        (f.len() == 3 && f[0] == name && f[1] == threshold).then(|| f[2].parse().ok()).flatten()
    })
}

macro_rules! ok_or_fail {
    ($out:expr, $what:expr) => {{
        let out = $out;
        if !out.status.success() {
            return Outcome::new(false, format!("{} failed: {}", $what, stderr(&out).trim()));
        }
        stdout(&out)
    }};
}

pub fn overfit() -> Outcome {
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let scenes = fixture("overfit_scene.toml");
    let ckpt = dir.path().join("overfit.ckpt");
    let dets = dir.path().join("overfit.det");
    ok_or_fail!(
        skpp(&["synth", "--preset", "desk", "--scenes", s(&scenes), "--out-dir", s(dir.path())]),
        "synth"
    );
    let train = ok_or_fail!(
        skpp(&[
            "train-toy", "--preset", "desk", "--scenes", s(&scenes), "--out", s(&ckpt), "--steps", OVERFIT_STEPS, "--lr",
            OVERFIT_LR,
        ]),
        "train-toy"
    );
    let (Some(initial), Some(last)) = (value(&train, "initial_loss"), value(&train, "final_loss")) else {
        return Outcome::new(false, format!("no loss summary in: {train}"));
    };
    let points = dir.path().join("scene_0.csv");
    let truth = dir.path().join("scene_0.gt");
    ok_or_fail!(
        skpp(&["forward", "--preset", "desk", "--points", s(&points), "--params", s(&ckpt), "--out", s(&dets)]),
        "forward"
    );
    let eval = ok_or_fail!(skpp(&["eval", "--detections", s(&dets), "--ground-truth", s(&truth)]), "eval");
    let seconds = start.elapsed().as_secs_f64();

    let ap = |class: &str| metric(&eval, &format!("AP/{class}"), "4").unwrap_or(f64::NAN);
    let ase = |class: &str| metric(&eval, &format!("ASE/{class}"), "").unwrap_or(f64::NAN);
    let aoe = |class: &str| metric(&eval, &format!("AOE_deg/{class}"), "").unwrap_or(f64::NAN);
    let classes = ["car", "vru"];
    let pass = last <= LOSS_RATIO * initial
        && classes.iter().all(|&c| ap(c) == 1.0 && ase(c) < ASE_MAX && aoe(c) < AOE_MAX_DEG)
        && seconds < OVERFIT_BUDGET_SECONDS;
    Outcome::new(
        pass,
        format!(
            "loss {initial:.3} -> {last:.4} (ratio {:.4}, max {LOSS_RATIO}); AP4.0 car {} vru {}; ASE car {:.3} vru {:.3} (max {ASE_MAX}); AOE car {:.2} vru {:.2} deg (max {AOE_MAX_DEG})",
            last / initial,
            ap("car"),
            ap("vru"),
            ase("car"),
            ase("vru"),
            aoe("car"),
            aoe("vru"),
        ),
    )
    .note(format!("{OVERFIT_STEPS} steps at lr {OVERFIT_LR}, desk preset, {seconds:.1} s (budget {OVERFIT_BUDGET_SECONDS} s)"))
}

fn bench(extra: &[&str]) -> Result<(f64, f64), String> {
    let mut args = vec!["bench", "--preset", "desk", "--repeat", "1", "--no-dense-timing"];
    args.extend_from_slice(extra);
    let out = skpp(&args);
    if !out.status.success() {
        return Err(stderr(&out));
    }
    let text = stdout(&out);
    match (value(&text, "input_density"), value(&text, "mac_ratio")) {
        (Some(d), Some(r)) => Ok((d, r)),
        _ => Err(format!("no bench summary in: {text}")),
    }
}

pub fn sparsity() -> Outcome {
    let (sparse, full) = match (bench(&["--density", SPARSE_DENSITY]), bench(&["--density", "1"])) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::new(false, format!("bench failed: {e}")),
    };
    let pass = sparse.0 <= 0.01 && sparse.1 <= SPARSE_RATIO_MAX && full.1 >= FULL_RATIO_MIN;
    let mut outcome = Outcome::new(
        pass,
        format!(
            "DPVCN at density {:.4}: MAC ratio {:.4} (max {SPARSE_RATIO_MAX}); at density {:.2}: {:.4} (min {FULL_RATIO_MIN})",
            sparse.0, sparse.1, full.0, full.1
        ),
    );
    if let Ok((d, r)) = bench(&["--density", SPARSE_DENSITY, "--backbone", "sscn"]) {
        outcome = outcome.note(format!("info: SSCN backbone at density {d:.4}: MAC ratio {r:.4}"));
    }
    if sparse.1 > SPARSE_RATIO_MAX {
        outcome = outcome.note(
            "info: every DPVC block pads its input to the 8-neighbourhood before convolving, so a 1% cloud \
             already occupies about 9% of the first stage",
        );
    }
    outcome
}

pub fn ablation() -> Outcome {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("ablation.csv");
    ok_or_fail!(
        skpp(&[
            "ablation",
            "--preset",
            "desk",
            "--scenes",
            s(&fixture("ablation_scenes.toml")),
            "--steps",
            ABLATION_STEPS,
            "--out",
            s(&csv),
        ]),
        "ablation"
    );
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some(ABLATION_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let width = ABLATION_HEADER.split(',').count();
    let combos: BTreeSet<(&str, &str)> = rows.iter().filter(|r| r.len() >= 2).map(|r| (r[0], r[1])).collect();
    let expected: BTreeSet<(&str, &str)> = ["spp", "skpbev", "skpp"]
        .iter()
        .flat_map(|m| ["sscn", "dpvc"].map(|b| (*m, b)))
        .collect();
    let numeric = rows
        .iter()
        .all(|r| r.len() == width && r[2..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    let pass = header_ok && rows.len() == 6 && combos == expected && numeric;
    let mut outcome = Outcome::new(
        pass,
        format!(
            "{} rows, {} distinct render x backbone combinations, header {}, all metrics finite: {numeric}",
            rows.len(),
            combos.len(),
            if header_ok { "ok" } else { "wrong" }
        ),
    );
    for r in &rows {
        outcome = outcome.note(r.join(","));
    }
    outcome
}
