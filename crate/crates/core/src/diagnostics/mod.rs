//! Probes that make the routing structure of a model observable.
//!
//! * [`consumption_probe`] finds, by perturbation, which encoder views each
//!   decoder layer's cross-attention input depends on, and checks the answer
//!   against the routing formulas.
//! * [`grad_path_norms`] splits the gradient reaching the last encoder view
//!   by the decoder layer it flows through.
//! * [`cosine_map`] and [`attention_maps`] export similarity and
//!   cross-attention matrices, and [`render_heatmap`] draws them as SVG.
//! * [`write_bundle`] runs a selection of probes into a directory.
//!
//! All probes work in 64-bit arithmetic; models of other precisions are
//! converted first.

mod bundle;
mod maps;
mod probe;
mod svg;

pub use bundle::{write_bundle, BundleOptions, BundleSummary, LayerDiffusion, Probe};
pub use maps::{
    attention_maps, cosine_map, cosine_maps, cosine_matrix, diffusion, matrix_csv, parse_matrix_csv, AttentionMap,
    CosineMap, LabeledMatrix,
};
pub use probe::{
    analytic_consumption, consumption_probe, consumption_probe_model, encoder_view_values, grad_path_norms,
    measure_consumption, probe_source, ConsumptionMatrix, GradPaths, PROBE_SCALES, ZERO_GRAD,
};
pub use svg::render_heatmap;

use crate::error::Result;
use crate::model::{ModelConfig, Params, Seq2Seq};
use crate::scalar::Scalar;
use crate::Precision;

/// Copy of `model` in 64-bit precision with dropout disabled.
pub fn to_f64<T: Scalar>(model: &Seq2Seq<T>) -> Result<Seq2Seq<f64>> {
    let config = ModelConfig {
        precision: Precision::F64,
        dropout: 0.0,
        ..model.config().clone()
    };
    let mut params = Params::new();
    for (name, t) in model.params().iter() {
        params.insert(name, t.cast::<f64>());
    }
    Seq2Seq::new(config, params)
}
