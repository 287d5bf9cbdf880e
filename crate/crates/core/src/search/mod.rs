//! Architecture search: configuration, the searchable model, bilevel
//! gradients, the search loop and from-scratch evaluation.

pub mod bilevel;
pub mod config;
pub mod eval;
pub mod model;
pub mod run;

pub use config::{DataConfig, EvalConfig, InputMode, Order, SearchConfig, TaskConfig};
pub use eval::{evaluate_genotype, EvalEpoch, EvalReport};
pub use model::{LossEval, Prepared, SearchModel};
pub use run::{drive, resume_search, run_search, AlphaSnapshot, EpochMetrics, Phase, RunRecord, Search, SearchData, SearchState, StepRow, SCHEMA_VERSION};
