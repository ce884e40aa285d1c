//! Experiment configuration, data, models and training loops.

pub mod config;
pub mod data;
pub mod deepsets;
pub mod gradsuite;
pub mod runner;
pub mod topo;

pub use config::{DataSource, ExperimentConfig, ExperimentMode, ProteinSpec};
pub use data::{build_dataset, kfold_split, protein_surrogate, Dataset, Sample};
pub use deepsets::{deepsets_classify, DeepSets, DeepSetsConfig, DEEPSETS_PRESETS};
pub use runner::{
    build_models, checkpoint_config, evaluate_checkpoint, load_models, report_csv, run_experiment, DataShape, ExperimentReport, MetricRecord, Models,
    ReportRow,
};
pub use topo::{
    cell_route, diagram_node, fixed_diagram, pd_backward, topo_loss, FiltrationMode, FixedDiagram, TopoBranch,
    TopoClassifier, TopoOutput,
};
