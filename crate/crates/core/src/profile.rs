//! Per-layer operation counters used by the benchmark harness.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Submanifold,
    Strided,
    Transposed,
    KpConv,
    Linear,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Submanifold => "ssc",
            LayerKind::Strided => "sc",
            LayerKind::Transposed => "dc",
            LayerKind::KpConv => "kpconv",
            LayerKind::Linear => "linear",
        };
        f.write_str(s)
    }
}

/// Work done by one layer invocation.
///
/// `macs` counts multiply-accumulates actually executed; `dense_macs` is what
/// the same layer costs on the fully dense grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStat {
    pub name: String,
    pub kind: LayerKind,
    pub active_in: usize,
    pub active_out: usize,
    pub pairs: u64,
    pub macs: u64,
    pub dense_macs: u64,
    pub nanos: u128,
}

/// Sparse vs dense cost of one pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub layers: Vec<LayerStat>,
    pub input_density: f64,
    pub sparse_macs: u64,
    pub dense_macs: u64,
    pub sparse_seconds: f64,
    pub dense_seconds: f64,
}

impl BenchReport {
    pub fn from_layers(layers: Vec<LayerStat>, input_density: f64) -> Self {
        let sparse_macs = layers.iter().map(|l| l.macs).sum();
        let dense_macs = layers.iter().map(|l| l.dense_macs).sum();
        Self {
            layers,
            input_density,
            sparse_macs,
            dense_macs,
            sparse_seconds: 0.0,
            dense_seconds: 0.0,
        }
    }

    pub fn mac_ratio(&self) -> f64 {
        if self.dense_macs == 0 {
            return 0.0;
        }
        self.sparse_macs as f64 / self.dense_macs as f64
    }
}
