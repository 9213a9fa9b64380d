//! Fixtures shared by the benchmarks.

use bishape::decoder::{
    DecoderWeights, DEFAULT_COARSE_WIDTH, DEFAULT_FINE_WIDTH, DEFAULT_LATENT_DIM,
};
use bishape::optim::PointSet;
use bishape::shapes::fibonacci_directions;
use nalgebra::{DVector, Matrix3xX, Vector3};

/// Untrained decoder of the default size; cost does not depend on training.
pub fn default_model() -> DecoderWeights {
    DecoderWeights::random(DEFAULT_LATENT_DIM, DEFAULT_FINE_WIDTH, DEFAULT_COARSE_WIDTH, 7)
}

/// `n` points on a sphere of radius 0.4 with alternating `±0.05` labels.
pub fn sphere_points(n: usize) -> PointSet {
    let dirs = fibonacci_directions(n);
    let points = Matrix3xX::from_columns(&dirs.iter().map(|d| d * 0.4).collect::<Vec<Vector3<f64>>>());
    let labels = DVector::from_fn(n, |i, _| if i % 2 == 0 { 0.05 } else { -0.05 });
    PointSet::new(points, labels).expect("matching lengths")
}
