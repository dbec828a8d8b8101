//! Radar point clouds, radius neighbour search and synthetic scenes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::{ClassId, Detection, Obb};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::rng::{self, streams};

/// A single ego-motion compensated radar reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint {
    /// meters
    pub x: f64,
    /// meters
    pub y: f64,
    /// radial velocity, m/s
    pub vr: f64,
    /// radar cross section, dBsm
    pub rcs: f64,
}

impl RadarPoint {
    pub fn new(x: f64, y: f64, vr: f64, rcs: f64) -> Self {
        Self { x, y, vr, rcs }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.vr.is_finite() && self.rcs.is_finite()
    }
}

/// Points aggregated over `frame_count` sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<RadarPoint>,
    pub frame_count: u32,
}

impl PointCloud {
    pub fn new(points: Vec<RadarPoint>, frame_count: u32) -> Result<Self> {
        if frame_count == 0 {
            return Err(Error::invalid("frame_count must be at least 1"));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("radar point {i}")));
        }
        Ok(Self {
            points,
            frame_count,
        })
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            frame_count: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(RadarPoint::xy).collect()
    }
}

fn check_radius(radius: f64) -> Result<()> {
    if radius > 0.0 && radius.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("radius must be positive, got {radius}")))
    }
}

#[inline]
pub(crate) fn within(a: [f64; 2], b: [f64; 2], radius: f64) -> bool {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy <= radius * radius
}

/// Spatial hash over square buckets; bucket side is the expected query radius.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    positions: Vec<[f64; 2]>,
    bucket: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl NeighborIndex {
    pub fn new(positions: Vec<[f64; 2]>, bucket: f64) -> Result<Self> {
        check_radius(bucket)?;
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (idx, p) in positions.iter().enumerate() {
            buckets.entry(Self::key(*p, bucket)).or_default().push(idx);
        }
        Ok(Self {
            positions,
            bucket,
            buckets,
        })
    }

    #[inline]
    fn key(p: [f64; 2], bucket: f64) -> (i64, i64) {
        ((p[0] / bucket).floor() as i64, (p[1] / bucket).floor() as i64)
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    /// Indices within the closed ball of `radius` around `center`, ascending.
    pub fn query(&self, center: [f64; 2], radius: f64) -> Result<Vec<usize>> {
        check_radius(radius)?;
        let mut out = Vec::new();
        self.query_into(center, radius, &mut out);
        Ok(out)
    }

    pub(crate) fn query_into(&self, center: [f64; 2], radius: f64, out: &mut Vec<usize>) {
        out.clear();
        let reach = (radius / self.bucket).ceil() as i64;
        let (ci, cj) = Self::key(center, self.bucket);
        for bi in ci - reach..=ci + reach {
            for bj in cj - reach..=cj + reach {
                if let Some(list) = self.buckets.get(&(bi, bj)) {
                    out.extend(
                        list.iter()
                            .copied()
                            .filter(|&i| within(self.positions[i], center, radius)),
                    );
                }
            }
        }
        out.sort_unstable();
    }
}

/// Indices of points within `radius` of `center` (closed ball), ascending.
pub fn radius_neighbors(cloud: &PointCloud, center: [f64; 2], radius: f64) -> Result<Vec<usize>> {
    check_radius(radius)?;
    NeighborIndex::new(cloud.positions(), radius)?.query(center, radius)
}

/// Linear-scan reference for [`radius_neighbors`].
pub fn brute_force_neighbors(
    cloud: &PointCloud,
    center: [f64; 2],
    radius: f64,
) -> Result<Vec<usize>> {
    check_radius(radius)?;
    Ok(cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| within(p.xy(), center, radius))
        .map(|(i, _)| i)
        .collect())
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma` to every RCS.
pub fn augment_rcs(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::stream(seed, streams::AUGMENT);
    let points = cloud
        .points
        .iter()
        .map(|p| RadarPoint {
            rcs: p.rcs + normal.sample(&mut rng),
            ..*p
        })
        .collect();
    Ok(PointCloud {
        points,
        frame_count: cloud.frame_count,
    })
}

/// One object of a synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ClassId,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
}

impl SceneObject {
    pub fn obb(&self) -> Obb {
        Obb::new(self.cx, self.cy, self.w, self.l, self.yaw)
    }
}

/// Description of a synthetic radar scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub clutter_count: usize,
    pub points_per_object: usize,
    pub seed: u64,
}

const PERIMETER_JITTER: f64 = 0.05;

/// Samples a scene: reflections on each object's perimeter plus uniform static clutter.
///
/// Object points carry the radial projection of the object velocity as seen
/// from a sensor at the origin. Returns the cloud and ground-truth boxes
/// (score 1).
pub fn synth_scene(scene: &SceneSpec, extent: &GridSpec) -> Result<(PointCloud, Vec<Detection>)> {
    let mut rng = rng::stream(scene.seed, streams::SCENE);
    let mut points = Vec::new();
    let mut truth = Vec::new();
    let rcs_noise = Normal::new(0.0, 2.0).expect("valid normal");
    for (k, obj) in scene.objects.iter().enumerate() {
        if !(obj.w > 0.0 && obj.l > 0.0) {
            return Err(Error::invalid(format!("object {k} has non-positive extent")));
        }
        let obb = obj.obb();
        if !obb.corners().iter().all(|c| extent.contains(*c)) {
            return Err(Error::invalid(format!(
                "object {k} at ({}, {}) lies outside the grid extent",
                obj.cx, obj.cy
            )));
        }
        let base_rcs = match obj.class {
            ClassId::Car => 10.0,
            ClassId::Vru => -5.0,
        };
        let perimeter = 2.0 * (obb.w + obb.l);
        for _ in 0..scene.points_per_object {
            let t = rng.random::<f64>() * perimeter;
            let [lx, ly] = perimeter_point(obb.l, obb.w, t);
            let r = PERIMETER_JITTER * rng.random::<f64>().sqrt();
            let phi = rng.random::<f64>() * std::f64::consts::TAU;
            let (s, c) = obb.yaw.sin_cos();
            let x = obb.cx + c * lx - s * ly + r * phi.cos();
            let y = obb.cy + s * lx + c * ly + r * phi.sin();
            let norm = x.hypot(y);
            let vr = if norm > 0.0 {
                (obj.vx * x + obj.vy * y) / norm
            } else {
                0.0
            };
            points.push(RadarPoint::new(x, y, vr, base_rcs + rcs_noise.sample(&mut rng)));
        }
        truth.push(Detection::new(obb, 1.0, obj.class));
    }
    let clutter_rcs = Normal::new(-8.0, 3.0).expect("valid normal");
    for _ in 0..scene.clutter_count {
        let x = extent.x_min + rng.random::<f64>() * (extent.x_max - extent.x_min);
        let y = extent.y_min + rng.random::<f64>() * (extent.y_max - extent.y_min);
        // keep clutter strictly inside the half-open extent
        let x = x.min(extent.x_max - 1e-9);
        let y = y.min(extent.y_max - 1e-9);
        points.push(RadarPoint::new(x, y, 0.0, clutter_rcs.sample(&mut rng)));
    }
    Ok((PointCloud::new(points, 1)?, truth))
}

/// One point in each of `round(fraction * cells)` distinct cells picked
/// uniformly at random, placed uniformly inside its cell.
pub fn occupancy_cloud(spec: &GridSpec, fraction: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("occupancy fraction must lie in [0, 1], got {fraction}")));
    }
    let total = spec.cell_count();
    let count = (fraction * total as f64).round() as usize;
    let mut rng = rng::stream(seed, streams::SCENE);
    let mut cells = rand::seq::index::sample(&mut rng, total, count).into_vec();
    cells.sort_unstable();
    let points = cells
        .into_iter()
        .map(|c| {
            let (i, j) = (c / spec.ny, c % spec.ny);
            let x = spec.x_min + (i as f64 + rng.random::<f64>()) * spec.cell_size;
            let y = spec.y_min + (j as f64 + rng.random::<f64>()) * spec.cell_size;
            RadarPoint::new(x, y, rng.random_range(-10.0..10.0), rng.random_range(-15.0..15.0))
        })
        .collect();
    PointCloud::new(points, 1)
}

/// Point at arc length `t` along the perimeter of an `l` x `w` box centred at the origin.
fn perimeter_point(l: f64, w: f64, t: f64) -> [f64; 2] {
    let (hl, hw) = (l / 2.0, w / 2.0);
    if t < l {
        [-hl + t, -hw]
    } else if t < l + w {
        [hl, -hw + (t - l)]
    } else if t < 2.0 * l + w {
        [hl - (t - l - w), hw]
    } else {
        [-hl, hw - (t - 2.0 * l - w)]
    }
}

pub const CSV_HEADER: &str = "frame,x,y,vr,rcs";
const CSV_COLUMNS: [&str; 5] = ["frame", "x", "y", "vr", "rcs"];

/// Loads a `frame,x,y,vr,rcs` file.
pub fn load_points_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_points_csv(file)
}

pub fn parse_points_csv(reader: impl Read) -> Result<PointCloud> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header_err = |message: String| Error::Parse {
        row: 0,
        column: "header".into(),
        message,
    };
    let headers = rdr.headers().map_err(|e| header_err(e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(header_err("empty file".into()));
    }
    let mut slots = [0usize; 5];
    for (slot, name) in slots.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 0,
                column: name.into(),
                message: "missing column".into(),
            })?;
    }
    let mut points = Vec::new();
    let mut frames: Option<(i64, i64)> = None;
    for (k, record) in rdr.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: "*".into(),
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            record.get(slots[c]).ok_or_else(|| Error::Parse {
                row,
                column: CSV_COLUMNS[c].into(),
                message: "missing field".into(),
            })
        };
        let frame: i64 = field(0)?.parse().map_err(|_| Error::Parse {
            row,
            column: "frame".into(),
            message: format!("not an integer: {:?}", record.get(slots[0]).unwrap_or("")),
        })?;
        let mut vals = [0.0f64; 4];
        for (c, v) in vals.iter_mut().enumerate() {
            let raw = field(c + 1)?;
            *v = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: CSV_COLUMNS[c + 1].into(),
                    message: format!("not a finite number: {raw:?}"),
                })?;
        }
        frames = Some(match frames {
            None => (frame, frame),
            Some((lo, hi)) => (lo.min(frame), hi.max(frame)),
        });
        points.push(RadarPoint::new(vals[0], vals[1], vals[2], vals[3]));
    }
    let frame_count = frames.map_or(1, |(lo, hi)| (hi - lo + 1) as u32);
    PointCloud::new(points, frame_count)
}

/// Writes the cloud with every point tagged as frame 0.
pub fn write_points_csv(cloud: &PointCloud, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for p in &cloud.points {
        writeln!(out, "0,{},{},{},{}", p.x, p.y, p.vr, p.rcs)?;
    }
    Ok(())
}
