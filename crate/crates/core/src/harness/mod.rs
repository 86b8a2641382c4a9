//! Scene generation, the end-to-end pipeline and batch evaluation.

pub mod model;
pub mod pipeline;
pub mod scene;

pub use model::{ModelParams, ModelShape};
pub use pipeline::{
    encode_and_sample, eval_batch, run_pipeline, run_stages, threshold_from_dir, BatchReport, IgsOutput,
    PipelineConfig, RunReport, ThresholdSource,
};
pub use scene::{gen_scene, Scene, SceneConfig, SceneInputs};
