//! Oriented boxes, detection heads, NMS, metrics and the toy training loss.

mod geometry;
mod head;
mod io;
mod metrics;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::grid::{CellIndex, GridSpec};

pub use geometry::{nms, nms_per_class, polygon_area, rotated_iou};
pub use head::{assign_targets, decode_predictions, toy_loss, Head, HeadCache, LossParts, RAW_WIDTH, TARGET_RADIUS};
pub use io::{parse_detections, read_detections, write_detections};
pub use metrics::{aoe, ap_at_distance, ase, evaluate, evaluate_scenes, match_greedy, ClassMetrics, EvalReport, DEFAULT_THRESHOLDS, TP_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassId {
    Car,
    Vru,
}

impl ClassId {
    pub const ALL: [ClassId; 2] = [ClassId::Car, ClassId::Vru];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassId::Car => "car",
            ClassId::Vru => "vru",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "car" => Ok(ClassId::Car),
            "vru" => Ok(ClassId::Vru),
            other => Err(Error::invalid(format!("unknown class `{other}` (expected car or vru)"))),
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Oriented BEV box; `l` runs along the heading `yaw`.
///
/// Stored canonically with `w <= l` and `yaw` in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl Obb {
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, yaw: f64) -> Self {
        let (w, l, yaw) = if w > l { (l, w, yaw + PI / 2.0) } else { (w, l, yaw) };
        Self {
            cx,
            cy,
            w,
            l,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn center(&self) -> [f64; 2] {
        [self.cx, self.cy]
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)].map(|(x, y)| [self.cx + c * x - s * y, self.cy + s * x + c * y])
    }

    pub fn distance(&self, other: &Obb) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub obb: Obb,
    pub score: f64,
    pub class: ClassId,
}

impl Detection {
    pub fn new(obb: Obb, score: f64, class: ClassId) -> Self {
        Self { obb, score, class }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Regression targets `[dx, dy, log w, log l, sin yaw, cos yaw]` of a box relative to a cell.
pub fn encode_obb(spec: &GridSpec, cell: CellIndex, obb: &Obb) -> [f64; 6] {
    let [x, y] = spec.center(cell);
    [
        (obb.cx - x) / spec.cell_size,
        (obb.cy - y) / spec.cell_size,
        obb.w.ln(),
        obb.l.ln(),
        obb.yaw.sin(),
        obb.yaw.cos(),
    ]
}

/// Decodes `[objectness logit, dx, dy, log w, log l, sin, cos]` at `cell`.
pub fn decode_obb(spec: &GridSpec, cell: CellIndex, raw: &[f64], class: ClassId) -> Detection {
    let [x, y] = spec.center(cell);
    let obb = Obb::new(
        x + raw[1] * spec.cell_size,
        y + raw[2] * spec.cell_size,
        raw[3].exp(),
        raw[4].exp(),
        raw[5].atan2(raw[6]),
    );
    Detection::new(obb, sigmoid(raw[0]), class)
}
