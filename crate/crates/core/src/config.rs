//! Structured configuration, presets and validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Spp,
    Skpbev,
    Skpp,
}

impl RenderMode {
    pub const ALL: [RenderMode; 3] = [RenderMode::Spp, RenderMode::Skpbev, RenderMode::Skpp];

    pub fn as_str(self) -> &'static str {
        match self {
            RenderMode::Spp => "spp",
            RenderMode::Skpbev => "skpbev",
            RenderMode::Skpp => "skpp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Dpvc,
    Sscn,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Dpvc => "dpvc",
            BlockKind::Sscn => "sscn",
        }
    }
}

/// Placement of normalisation inside each DPVC branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpvcLayout {
    /// conv, BN, ReLU, conv, BN, ReLU, then a final BN.
    Figure,
    /// conv, BN, ReLU, conv, then the final BN.
    Compact,
}

/// How each DPVC branch is normalised before the summation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchNorm {
    Bn,
    L2,
}

/// Unit of the DPVC KPConv radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusUnits {
    /// The same metric radius at every stage.
    Meters,
    /// The radius is given in meters at the input resolution and scaled
    /// with the stage cell size, keeping its extent in cells constant.
    Cells,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub mode: RenderMode,
    pub f_out: usize,
    /// KPConv radius of the kernel-point renderer (meters).
    pub kp_radius: f64,
    pub kp_points: usize,
    /// Influence sigma as a fraction of the radius.
    pub kp_sigma_ratio: f64,
    /// Append raw point coordinates to the kernel-point renderer input.
    pub raw_coords: bool,
    /// Standard deviation of the RCS augmentation (dBsm); 0 disables it.
    pub rcs_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels per encoder stage.
    pub channels: Vec<usize>,
    /// Block type per encoder stage.
    pub blocks: Vec<BlockKind>,
    pub dpvc_radius: f64,
    pub radius_units: RadiusUnits,
    pub dpvc_points: usize,
    pub dpvc_sigma_ratio: f64,
    pub dpvc_layout: DpvcLayout,
    pub branch_norm: BranchNorm,
    /// Channel width of the FPN decoder and heads.
    pub decoder_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Decoder level (0 = input resolution) of the car head.
    pub car_level: usize,
    pub vru_level: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Weight of the box regression loss.
    pub lambda: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub grid: GridConfig,
    pub render: RenderConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::paper()
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

impl Config {
    /// Full-scale configuration: 240 x 240 grid, five DPVC stages.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            grid: GridConfig {
                x_min: -60.0,
                x_max: 60.0,
                y_min: -60.0,
                y_max: 60.0,
                cell_size: 0.5,
            },
            render: RenderConfig {
                mode: RenderMode::Skpp,
                f_out: 32,
                kp_radius: 1.5,
                kp_points: 15,
                kp_sigma_ratio: 0.5,
                raw_coords: false,
                rcs_sigma: 0.7,
            },
            backbone: BackboneConfig {
                channels: vec![72, 96, 128, 146, 160],
                blocks: vec![BlockKind::Dpvc; 5],
                dpvc_radius: 3.75,
                radius_units: RadiusUnits::Meters,
                dpvc_points: 15,
                dpvc_sigma_ratio: 0.5,
                dpvc_layout: DpvcLayout::Figure,
                branch_norm: BranchNorm::Bn,
                decoder_channels: 128,
            },
            head: HeadConfig {
                car_level: 2,
                vru_level: 1,
                score_threshold: 0.1,
                nms_iou: 0.5,
            },
            train: TrainConfig {
                lr: 0.01,
                steps: 300,
                lambda: 1.0,
                clip_norm: 10.0,
            },
        }
    }

    /// Small configuration for tests and laptop runs: 64 x 64 grid, three stages.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.grid = GridConfig {
            x_min: -16.0,
            x_max: 16.0,
            y_min: -16.0,
            y_max: 16.0,
            cell_size: 0.5,
        };
        c.render.f_out = 8;
        c.render.rcs_sigma = 0.0;
        c.backbone.channels = vec![16, 24, 32];
        c.backbone.blocks = vec![BlockKind::Dpvc; 3];
        c.backbone.decoder_channels = 16;
        c.head.car_level = 1;
        c.head.vru_level = 0;
        c.train.lr = 0.05;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(config_err("preset", format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_err("", e.message().to_string()))?;
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            config_err(&key, e.into_inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn stages(&self) -> usize {
        self.backbone.channels.len()
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = &self.grid;
        GridSpec::new(g.x_min, g.x_max, g.y_min, g.y_max, g.cell_size).map_err(|e| config_err("grid", e.to_string()))
    }

    /// Grid resolution of encoder stage `k`.
    pub fn stage_spec(&self, k: usize) -> Result<GridSpec> {
        self.grid_spec()?.coarsen(1 << k).map_err(|e| config_err("grid", e.to_string()))
    }

    /// Metric DPVC KPConv radius at stage `k`.
    pub fn dpvc_radius_at(&self, k: usize) -> f64 {
        match self.backbone.radius_units {
            RadiusUnits::Meters => self.backbone.dpvc_radius,
            RadiusUnits::Cells => self.backbone.dpvc_radius * (1u64 << k) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.grid_spec()?;
        let r = &self.render;
        if r.f_out == 0 {
            return Err(config_err("render.f_out", "must be at least 1"));
        }
        if !(r.kp_radius > 0.0) {
            return Err(config_err("render.kp_radius", "must be positive"));
        }
        if r.kp_points == 0 {
            return Err(config_err("render.kp_points", "must be at least 1"));
        }
        if !(r.kp_sigma_ratio > 0.0) {
            return Err(config_err("render.kp_sigma_ratio", "must be positive"));
        }
        if !(r.rcs_sigma >= 0.0) {
            return Err(config_err("render.rcs_sigma", "must be non-negative"));
        }
        let b = &self.backbone;
        if b.channels.len() < 2 {
            return Err(config_err("backbone.channels", "at least two stages are required"));
        }
        if b.channels.contains(&0) {
            return Err(config_err("backbone.channels", "channel counts must be positive"));
        }
        if b.blocks.len() != b.channels.len() {
            return Err(config_err(
                "backbone.blocks",
                format!("{} block types for {} stages", b.blocks.len(), b.channels.len()),
            ));
        }
        let factor = 1usize << (b.channels.len() - 1);
        if spec.nx % factor != 0 || spec.ny % factor != 0 {
            return Err(config_err(
                "grid.cell_size",
                format!(
                    "grid {}x{} is not divisible by {factor} for {} stages",
                    spec.nx,
                    spec.ny,
                    b.channels.len()
                ),
            ));
        }
        if !(b.dpvc_radius > 0.0) {
            return Err(config_err("backbone.dpvc_radius", "must be positive"));
        }
        if b.dpvc_points == 0 {
            return Err(config_err("backbone.dpvc_points", "must be at least 1"));
        }
        if !(b.dpvc_sigma_ratio > 0.0) {
            return Err(config_err("backbone.dpvc_sigma_ratio", "must be positive"));
        }
        if b.decoder_channels == 0 {
            return Err(config_err("backbone.decoder_channels", "must be at least 1"));
        }
        let h = &self.head;
        for (key, level) in [("head.car_level", h.car_level), ("head.vru_level", h.vru_level)] {
            if level >= b.channels.len() {
                return Err(config_err(key, format!("level {level} beyond the {} encoder stages", b.channels.len())));
            }
        }
        for (key, v) in [("head.score_threshold", h.score_threshold), ("head.nms_iou", h.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(key, format!("{v} outside [0, 1]")));
            }
        }
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(config_err("train.lr", "must be finite and non-negative"));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return Err(config_err("train.lambda", "must be finite and non-negative"));
        }
        if !(t.clip_norm >= 0.0) {
            return Err(config_err("train.clip_norm", "must be non-negative"));
        }
        Ok(())
    }
}
