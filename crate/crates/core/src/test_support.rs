//! Fixtures shared by unit tests.

use ndarray::Array2;
use rand::Rng as _;

use crate::grid::{CellIndex, GridSpec, SparseGrid};
use crate::rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::stream(seed, 77);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn random_grid(spec: GridSpec, density: f64, channels: usize, seed: u64) -> SparseGrid {
    let mut rng = rng::stream(seed, 99);
    let mut pairs = Vec::new();
    for i in 0..spec.nx {
        for j in 0..spec.ny {
            if rng.random::<f64>() < density {
                let f = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                pairs.push((CellIndex::new(i, j), f));
            }
        }
    }
    SparseGrid::from_pairs(spec, channels, pairs).unwrap()
}

pub fn square(n: usize) -> GridSpec {
    GridSpec::new(0.0, n as f64, 0.0, n as f64, 1.0).unwrap()
}

/// Two-stage configuration on an 8 x 8 grid of 1 m cells.
pub fn tiny_config() -> crate::config::Config {
    use crate::config::{BlockKind, Config, GridConfig};
    let mut c = Config::desk();
    c.grid = GridConfig {
        x_min: 0.0,
        x_max: 8.0,
        y_min: 0.0,
        y_max: 8.0,
        cell_size: 1.0,
    };
    c.render.f_out = 2;
    c.render.kp_points = 5;
    c.backbone.channels = vec![3, 4];
    c.backbone.blocks = vec![BlockKind::Dpvc; 2];
    c.backbone.dpvc_radius = 1.5;
    c.backbone.dpvc_points = 5;
    c.backbone.decoder_channels = 3;
    c.head.car_level = 1;
    c.head.vru_level = 0;
    c
}
