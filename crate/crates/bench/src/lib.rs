//! Fixtures shared by the benchmarks in `benches/`.

use geofuse_core::fusion::{PipelineKind, Variant};
use geofuse_core::synthdata::{make_dataset, Dataset, SceneConfig};
use geofuse_core::train::{Model, ModelConfig};
use geofuse_core::NumericsConfig;

/// Default scene, a small dataset, and a freshly initialised model.
pub fn fixture(pipeline: PipelineKind, variant: Variant) -> (Dataset, Model) {
    let scene = SceneConfig::default();
    let data = make_dataset(&scene, 64, 16, 7).expect("default scene is valid");
    let cfg = ModelConfig {
        pipeline,
        ..ModelConfig::default()
    };
    let model = Model::new(&cfg, variant, &scene, 7, NumericsConfig::default()).expect("default model builds");
    (data, model)
}
