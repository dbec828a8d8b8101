use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::FRAC_PI_2;

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::Rng;

use skpp_core::detection::nms;
use skpp_core::grid::{max_pool2, voxel_pad, voxel_unpool};
use skpp_core::nn::ParamInit;
use skpp_core::points::radius_neighbors;
use skpp_core::render::Renderer;
use skpp_core::sparse_conv::{build_rulebook, ssc_forward, ConvMode, ConvSpec, Rulebook, SparseConvLayer};
use skpp_core::{CellIndex, ClassId, Ctx, Detection, Obb, PointCloud, RadarPoint, RenderMode, SparseGrid};

use crate::support::{random_cloud, random_grid, rng, square, tiny_config};
use crate::Outcome;

const CASES: u32 = 1000;

fn runner() -> TestRunner {
    TestRunner::new(RunnerConfig {
        cases: CASES,
        failure_persistence: None,
        ..RunnerConfig::default()
    })
}

fn grid_case() -> impl Strategy<Value = (usize, f64, u64)> {
    (4usize..24, 0.02f64..0.9, any::<u64>())
}

fn grid_of((n, density, seed): (usize, f64, u64), channels: usize) -> SparseGrid {
    random_grid(square(n), density, channels, &mut rng(seed))
}

fn ssc_active_set() -> Result<(), String> {
    runner()
        .run(&grid_case(), |case| {
            let g = grid_of(case, 2);
            let layer = SparseConvLayer::new("ssc", ConvSpec::submanifold(2, 3, 3).unwrap(), &mut ParamInit::new(case.2));
            let (out, _) = ssc_forward(&layer, &g, &mut Ctx::eval()).unwrap();
            prop_assert_eq!(out.cells(), g.cells());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Morphological 3 x 3 dilation, cell by cell.
fn dilation_oracle(g: &SparseGrid) -> Vec<CellIndex> {
    let active: BTreeSet<CellIndex> = g.cells().iter().copied().collect();
    let mut out = Vec::new();
    for i in 0..g.spec.nx {
        for j in 0..g.spec.ny {
            let hit = (-1i64..=1).any(|di| {
                (-1i64..=1).any(|dj| {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    g.spec.in_bounds(a, b) && active.contains(&CellIndex::new(a as usize, b as usize))
                })
            });
            if hit {
                out.push(CellIndex::new(i, j));
            }
        }
    }
    out
}

fn pad_is_dilation() -> Result<(), String> {
    runner()
        .run(&grid_case(), |case| {
            let g = grid_of(case, 2);
            let padded = voxel_pad(&g);
            let oracle = dilation_oracle(&g);
            prop_assert_eq!(padded.cells(), oracle.as_slice());
            for c in padded.cells() {
                let expect = g.feature(*c).map(|f| f.to_vec()).unwrap_or_else(|| vec![0.0; 2]);
                prop_assert_eq!(padded.feature(*c).unwrap().to_vec(), expect);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn pool_unpool_round_trip() -> Result<(), String> {
    let case = (2usize..12, 0.02f64..0.9, any::<u64>());
    runner()
        .run(&case, |(half, density, seed)| {
            let g = grid_of((2 * half, density, seed), 2);
            let (pooled, prov) = max_pool2(&g).unwrap();
            let mut children: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
            for (row, c) in g.cells().iter().enumerate() {
                children.entry(CellIndex::new(c.i / 2, c.j / 2)).or_default().push(row);
            }
            let parents: Vec<CellIndex> = children.keys().copied().collect();
            prop_assert_eq!(pooled.cells(), parents.as_slice());
            for (row, rows) in children.values().enumerate() {
                for ch in 0..2 {
                    let max = rows.iter().map(|&r| g.features()[[r, ch]]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(pooled.features()[[row, ch]], max);
                }
            }
            let restored = voxel_unpool(&pooled, &prov).unwrap();
            prop_assert_eq!(restored.cells(), g.cells());
            for c in restored.cells() {
                let parent = pooled.feature(CellIndex::new(c.i / 2, c.j / 2)).unwrap();
                prop_assert_eq!(restored.feature(*c).unwrap(), parent);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn flat(rb: &Rulebook) -> Vec<(usize, usize, usize)> {
    let mut v: Vec<_> = rb
        .pairs
        .iter()
        .enumerate()
        .flat_map(|(k, p)| p.iter().map(move |&(a, b)| (k, a, b)))
        .collect();
    v.sort_unstable();
    v
}

/// Every (offset, input, output) incidence, by scanning all cell pairs.
fn brute_pairs(g: &SparseGrid, spec: &ConvSpec, out_cells: &[CellIndex]) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for (b, o) in out_cells.iter().enumerate() {
        for (a, c) in g.cells().iter().enumerate() {
            let di = c.i as i64 - (o.i * spec.s) as i64;
            let dj = c.j as i64 - (o.j * spec.s) as i64;
            if let Some(k) = spec.offsets().iter().position(|&d| d == (di, dj)) {
                v.push((k, a, b));
            }
        }
    }
    v.sort_unstable();
    v
}

fn rulebook_pairs() -> Result<(), String> {
    let case = (2usize..10, 0.02f64..0.9, any::<u64>());
    runner()
        .run(&case, |(half, density, seed)| {
            let g = grid_of((2 * half, density, seed), 1);
            for (f, s, mode) in [(3, 1, ConvMode::Submanifold), (2, 2, ConvMode::Strided), (3, 2, ConvMode::Strided)] {
                let spec = ConvSpec::new(1, 1, f, s).unwrap();
                let rb = build_rulebook(g.cells(), &g.spec, &spec, mode, None).unwrap();
                if mode == ConvMode::Submanifold {
                    prop_assert_eq!(rb.out_cells.as_slice(), g.cells());
                }
                prop_assert_eq!(flat(&rb), brute_pairs(&g, &spec, &rb.out_cells));
                // outputs without any incidence would be spurious
                let fed: BTreeSet<usize> = flat(&rb).iter().map(|p| p.2).collect();
                prop_assert_eq!(fed.len(), rb.out_cells.len());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn renderings_share_occupancy() -> Result<(), String> {
    let base = tiny_config();
    let spec = base.grid_spec().unwrap();
    let renderers: RefCell<Vec<Renderer>> = RenderMode::ALL
        .iter()
        .map(|&mode| {
            let mut cfg = base.clone();
            cfg.render.mode = mode;
            Renderer::new(&cfg, &mut ParamInit::new(1)).unwrap()
        })
        .collect::<Vec<_>>()
        .into();
    runner()
        .run(&(0usize..40, any::<u64>()), |(n, seed)| {
            let cloud = random_cloud(n, &spec, &mut rng(seed));
            let occupied: BTreeSet<CellIndex> = cloud
                .points
                .iter()
                .map(|p| {
                    let i = ((p.x - spec.x_min) / spec.cell_size).floor() as usize;
                    let j = ((p.y - spec.y_min) / spec.cell_size).floor() as usize;
                    CellIndex::new(i, j)
                })
                .collect();
            let expect: Vec<CellIndex> = occupied.into_iter().collect();
            for r in renderers.borrow_mut().iter_mut() {
                let (grid, _) = r.forward(&spec, &cloud, &mut Ctx::eval()).unwrap();
                prop_assert_eq!(grid.cells(), expect.as_slice());
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn aligned_iou(a: &Obb, b: &Obb) -> f64 {
    let half = |o: &Obb| {
        let (s, c) = (o.yaw.sin().abs(), o.yaw.cos().abs());
        ((c * o.l + s * o.w) / 2.0, (s * o.l + c * o.w) / 2.0)
    };
    let ((ax, ay), (bx, by)) = (half(a), half(b));
    let ix = ((a.cx + ax).min(b.cx + bx) - (a.cx - ax).max(b.cx - bx)).max(0.0);
    let iy = ((a.cy + ay).min(b.cy + by) - (a.cy - ay).max(b.cy - by)).max(0.0);
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Greedy suppression by definition: keep a box iff no kept, higher-scored box overlaps it enough.
fn nms_reference(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| aligned_iou(&k.obb, &d.obb) < threshold) {
            kept.push(*d);
        }
    }
    kept
}

fn nms_matches_reference() -> Result<(), String> {
    runner()
        .run(&(0usize..14, 0.1f64..0.9, any::<u64>()), |(n, threshold, seed)| {
            let mut r = rng(seed);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let yaw = if r.random::<bool>() { 0.0 } else { FRAC_PI_2 };
                    let obb = Obb::new(
                        r.random_range(0.0..8.0),
                        r.random_range(0.0..8.0),
                        r.random_range(0.5..4.0),
                        r.random_range(0.5..4.0),
                        yaw,
                    );
                    Detection::new(obb, r.random(), ClassId::Car)
                })
                .collect();
            let got = nms(&dets, threshold);
            let expect = nms_reference(&dets, threshold);
            prop_assert_eq!(got.len(), expect.len());
            for (a, b) in got.iter().zip(&expect) {
                prop_assert_eq!(a.score, b.score);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn neighbors_match_scan() -> Result<(), String> {
    let case = (0usize..200, -25.0f64..25.0, -25.0f64..25.0, 0.05f64..8.0, any::<u64>());
    runner()
        .run(&case, |(n, cx, cy, radius, seed)| {
            let mut r = rng(seed);
            let points = (0..n)
                .map(|_| RadarPoint::new(r.random_range(-20.0..20.0), r.random_range(-20.0..20.0), 0.0, 0.0))
                .collect();
            let cloud = PointCloud::new(points, 1).unwrap();
            let scan: Vec<usize> = cloud
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| (p.x - cx).powi(2) + (p.y - cy).powi(2) <= radius * radius)
                .map(|(i, _)| i)
                .collect();
            prop_assert_eq!(radius_neighbors(&cloud, [cx, cy], radius).unwrap(), scan);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn run() -> Outcome {
    let properties: [(&str, fn() -> Result<(), String>); 7] = [
        ("ssc keeps the active set", ssc_active_set),
        ("voxel pad is 8-dilation", pad_is_dilation),
        ("pool/unpool round trip", pool_unpool_round_trip),
        ("rulebook pairs", rulebook_pairs),
        ("renderings share occupancy", renderings_share_occupancy),
        ("nms", nms_matches_reference),
        ("neighbour search", neighbors_match_scan),
    ];
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    for (name, property) in properties {
        match property() {
            Ok(()) => notes.push(format!("{name}: {CASES} cases ok")),
            Err(e) => {
                notes.push(format!("{name}: {e}"));
                failures.push(name);
            }
        }
    }
    let mut outcome = Outcome::new(
        failures.is_empty(),
        format!("{} properties x {CASES} cases, {} failed", properties.len(), failures.len()),
    );
    for n in notes {
        outcome = outcome.note(n);
    }
    outcome
}
