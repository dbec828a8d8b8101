use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use skpp_core::detection::{evaluate, evaluate_scenes, read_detections, write_detections, ClassMetrics, EvalReport, DEFAULT_THRESHOLDS};
use skpp_core::nn::{load_checkpoint, save_checkpoint};
use skpp_core::points::{load_points_csv, occupancy_cloud, write_points_csv};
use skpp_core::render::write_grid_dump;
use skpp_core::{BlockKind, ClassId, Config, Ctx, Detector, RenderMode};

use crate::scenes::{load_scenes, samples};
use crate::{AblationArgs, BenchArgs, CliError, CliResult, ConfigArgs, EvalArgs, ForwardArgs, RenderArgs, SynthArgs, TrainArgs};

const STDOUT: &str = "<stdout>";

/// Runs `f` against `path` when given, otherwise against `out`.
fn emit(path: Option<&Path>, out: &mut dyn Write, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|e| CliError::io(p, e))?;
            let mut w = BufWriter::new(file);
            f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(p, e))
        }
        None => f(out).map_err(|e| CliError::io(STDOUT, e)),
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> CliResult {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| CliError::io(STDOUT, e))
}

fn load_params(det: &mut Detector, path: &Path) -> CliResult {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    load_checkpoint(det, BufReader::new(file))?;
    Ok(())
}

fn detector(cfg: &Config, params: Option<&Path>) -> CliResult<Detector> {
    let mut det = Detector::new(cfg)?;
    if let Some(p) = params {
        load_params(&mut det, p)?;
    }
    Ok(det)
}

pub fn render(a: &RenderArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.config.resolve()?;
    let cloud = load_points_csv(&a.points)?;
    let mut det = detector(&cfg, a.params.as_deref())?;
    let (grid, _) = det.renderer.forward(&det.spec, &cloud, &mut Ctx::eval())?;
    emit(a.out.as_deref(), out, |w| write_grid_dump(&grid, w))?;
    if a.out.is_some() {
        say(out, format_args!("active_cells={} density={}", grid.len(), grid.density()))?;
    }
    Ok(())
}

pub fn forward(a: &ForwardArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.config.resolve()?;
    let cloud = load_points_csv(&a.points)?;
    let mut det = detector(&cfg, a.params.as_deref())?;
    let dets = det.detect(&cloud)?;
    emit(a.out.as_deref(), out, |w| write_detections(&dets, w))?;
    if a.out.is_some() {
        say(out, format_args!("detections={}", dets.len()))?;
    }
    Ok(())
}

fn trace_path(a: &TrainArgs) -> PathBuf {
    a.trace.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    })
}

pub fn train_toy(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.config.resolve()?;
    let scenes = load_scenes(&a.scenes)?;
    let samples = samples(&scenes, &cfg.grid_spec()?)?;
    let steps = a.steps.unwrap_or(cfg.train.steps);
    let lr = a.lr.unwrap_or(cfg.train.lr);
    let mut det = Detector::new(&cfg)?;
    let report = det.train_toy(&samples, steps, lr)?;
    emit(Some(&a.out), out, |w| save_checkpoint(&mut det, w))?;
    let trace = trace_path(a);
    emit(Some(&trace), out, |w| {
        writeln!(w, "step,loss")?;
        for (k, l) in report.losses.iter().enumerate() {
            writeln!(w, "{k},{l:?}")?;
        }
        Ok(())
    })?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        say(out, format_args!("steps={steps} initial_loss={first} final_loss={last}"))?;
    }
    Ok(())
}

fn write_metrics_csv(report: &EvalReport, w: &mut dyn Write) -> std::io::Result<()> {
    writeln!(w, "metric,threshold,value")?;
    for (metric, threshold, value) in report.csv_rows() {
        writeln!(w, "{metric},{threshold},{value}")?;
    }
    Ok(())
}

fn write_table(report: &EvalReport, thresholds: &[f64], w: &mut dyn Write) -> std::io::Result<()> {
    write!(w, "{:<6}", "class")?;
    for t in thresholds {
        write!(w, " {:>8}", format!("AP@{t}"))?;
    }
    writeln!(w, " {:>8} {:>8} {:>8}", "mAP", "ASE", "AOE[deg]")?;
    for m in &report.classes {
        write!(w, "{:<6}", m.class.as_str())?;
        for (_, ap) in &m.ap {
            write!(w, " {ap:>8.4}")?;
        }
        writeln!(w, " {:>8.4} {:>8.4} {:>8.3}", m.map, m.ase, m.aoe.to_degrees())?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let preds = read_detections(&a.detections)?;
    let gts = read_detections(&a.ground_truth)?;
    let report = evaluate(&preds, &gts, &a.thresholds)?;
    let io = |e| CliError::io(STDOUT, e);
    write_table(&report, &a.thresholds, out).map_err(io)?;
    writeln!(out).map_err(io)?;
    write_metrics_csv(&report, out).map_err(io)?;
    if let Some(p) = &a.out {
        emit(Some(p), out, |w| write_metrics_csv(&report, w))?;
    }
    Ok(())
}

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.config.resolve()?;
    let cloud = match (&a.points, a.density) {
        (Some(p), _) => load_points_csv(p)?,
        (None, Some(f)) => occupancy_cloud(&cfg.grid_spec()?, f, cfg.seed)?,
        (None, None) => return Err(CliError::Usage("either --points or --density is required".into())),
    };
    let mut det = Detector::new(&cfg)?;
    let report = det.bench(&cloud, a.repeat, !a.no_dense_timing)?;
    let io = |e| CliError::io(STDOUT, e);
    writeln!(out, "layer,kind,active_in,active_out,pairs,macs,dense_macs").map_err(io)?;
    for l in &report.layers {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.name, l.kind, l.active_in, l.active_out, l.pairs, l.macs, l.dense_macs
        )
        .map_err(io)?;
    }
    say(out, format_args!("input_density={}", report.input_density))?;
    say(out, format_args!("sparse_macs={}", report.sparse_macs))?;
    say(out, format_args!("dense_macs={}", report.dense_macs))?;
    say(out, format_args!("mac_ratio={}", report.mac_ratio()))?;
    say(out, format_args!("sparse_ms={:.3}", report.sparse_seconds * 1e3))?;
    if !a.no_dense_timing {
        say(out, format_args!("dense_ms={:.3}", report.dense_seconds * 1e3))?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.config.resolve()?;
    let scenes = load_scenes(&a.scenes)?;
    let samples = samples(&scenes, &cfg.grid_spec()?)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    for (k, s) in samples.iter().enumerate() {
        let points = a.out_dir.join(format!("scene_{k}.csv"));
        let truth = a.out_dir.join(format!("scene_{k}.gt"));
        emit(Some(&points), out, |w| write_points_csv(&s.cloud, w))?;
        emit(Some(&truth), out, |w| write_detections(&s.truth, w))?;
        say(out, format_args!("{} {}", points.display(), truth.display()))?;
    }
    Ok(())
}

pub const ABLATION_HEADER: &str =
    "render,backbone,final_loss,AP4.0/car,AP4.0/vru,mAP/car,mAP/vru,ASE/car,ASE/vru,AOE_deg/car,AOE_deg/vru";

fn metric(report: &EvalReport, class: ClassId, f: impl Fn(&ClassMetrics) -> f64) -> String {
    report.class(class).map(|m| f(m).to_string()).unwrap_or_default()
}

pub fn ablation(a: &AblationArgs, out: &mut dyn Write) -> CliResult {
    let base = a.config.resolve()?;
    let scenes = load_scenes(&a.scenes)?;
    let samples = samples(&scenes, &base.grid_spec()?)?;
    let steps = a.steps.unwrap_or(base.train.steps);
    let lr = a.lr.unwrap_or(base.train.lr);
    let mut rows = Vec::new();
    for mode in RenderMode::ALL {
        for kind in [BlockKind::Sscn, BlockKind::Dpvc] {
            let mut cfg = base.clone();
            cfg.render.mode = mode;
            cfg.backbone.blocks = vec![kind; cfg.stages()];
            let mut det = Detector::new(&cfg)?;
            let report = det.train_toy(&samples, steps, lr)?;
            let mut frames = Vec::with_capacity(samples.len());
            for s in &samples {
                frames.push((det.detect(&s.cloud)?, s.truth.clone()));
            }
            let full = evaluate_scenes(&frames, &DEFAULT_THRESHOLDS)?;
            let ap4 = |c| metric(&full, c, |m| m.ap[3].1);
            rows.push(format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                mode.as_str(),
                kind.as_str(),
                report.losses.last().copied().unwrap_or(f64::NAN),
                ap4(ClassId::Car),
                ap4(ClassId::Vru),
                metric(&full, ClassId::Car, |m| m.map),
                metric(&full, ClassId::Vru, |m| m.map),
                metric(&full, ClassId::Car, |m| m.ase),
                metric(&full, ClassId::Vru, |m| m.ase),
                metric(&full, ClassId::Car, |m| m.aoe.to_degrees()),
                metric(&full, ClassId::Vru, |m| m.aoe.to_degrees()),
            ));
        }
    }
    emit(a.out.as_deref(), out, |w| {
        writeln!(w, "{ABLATION_HEADER}")?;
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}

pub fn dump_config(a: &ConfigArgs, out: &mut dyn Write) -> CliResult {
    let cfg = a.resolve()?;
    out.write_all(cfg.to_toml_string().as_bytes())
        .map_err(|e| CliError::io(STDOUT, e))
}
