//! Benchmark generation, training, evaluation and the variant comparison report.

pub mod bench;
pub mod gate;
pub mod link;
pub mod metrics;
pub mod pipeline;
pub mod train;

pub use bench::{detect_and_track, generate_scene, labelable_gt, BenchScene, BenchmarkConfig, Split};
pub use gate::{report_criteria, Criterion};
pub use link::{link_pair, merge_fragments, simulate_annotator_link, FrameConflict, LinkOutcome};
pub use metrics::{breakdown_static_moving, eval_labels, EvalTable, THRESHOLDS};
pub use pipeline::{
    annotator_pass, auto4d_refine, run_all, run_pipeline, train_models, AnnotatorConfig, AnnotatorReport,
    AnnotatorSceneRow, Models, PipelineConfig, Report, SceneRow, TrainSummary, Variant, VariantRow,
};
pub use train::{train_path_branch, train_size_branch, TrainConfig, TrainReport, TrainScene};
