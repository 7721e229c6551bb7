//! Shared fixtures for the benchmarks in `benches/`.

use contrec_core::config::ModelConfig;
use contrec_core::model::ModelParams;
use contrec_core::shapes::{
    generate_instance, render_view, sample_points, PointSample, RenderedView, ShapeClass,
};

/// The model size the desk configuration trains.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 16,
        feature_dim: 32,
        encoder_channels: [4, 8, 16],
        point_embed_dim: 16,
        latent_hidden: 32,
        decoder_width: 64,
        decoder_depth: 3,
    }
}

pub fn desk_model() -> ModelParams {
    ModelParams::init(&desk_model_config(), 32, 0).expect("desk model")
}

/// A rendered 32×32 view and 1024 occupancy samples of a 16³ torus.
pub fn torus_object() -> (RenderedView, PointSample) {
    let (_, grid) = generate_instance(ShapeClass::Torus, 16, 1).expect("torus");
    let view = render_view(&grid, 0.6, 0.3, 32, 32).expect("view");
    let sample = sample_points(&grid, 1024, 1).expect("points");
    (view, sample)
}

/// Smooth occupancy of a sphere of radius 0.35 centred in the unit cube.
pub fn sphere_occupancy(p: [f64; 3]) -> f64 {
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    1.0 / (1.0 + (25.0 * (r - 0.35)).exp())
}
