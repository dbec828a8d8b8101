//! Shared inputs for the benchmarks.

use rand::Rng;
use skpp_core::points::occupancy_cloud;
use skpp_core::{CellIndex, Config, GridSpec, PointCloud, SparseGrid};

/// A square grid of 1 m cells where each cell is active with probability `density`.
pub fn random_grid(n: usize, density: f64, channels: usize, seed: u64) -> SparseGrid {
    let spec = GridSpec::new(0.0, n as f64, 0.0, n as f64, 1.0).expect("valid grid");
    let mut rng = skpp_core::rng::stream(seed, 0);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if rng.random::<f64>() < density {
                let f = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                pairs.push((CellIndex::new(i, j), f));
            }
        }
    }
    SparseGrid::from_pairs(spec, channels, pairs).expect("valid grid")
}

/// A cloud occupying `density` of the desk preset's cells.
pub fn desk_cloud(density: f64, seed: u64) -> PointCloud {
    let spec = Config::desk().grid_spec().expect("desk preset is valid");
    occupancy_cloud(&spec, density, seed).expect("density in range")
}
