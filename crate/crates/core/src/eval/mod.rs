//! Downstream evaluation: retrieval, classification, ablations and
//! diagnostics.

pub mod ablation;
pub mod classify;
pub mod diagnostics;
pub mod retrieval;

use kvlp_tensor::Scalar;

use crate::config::RunConfig;
use crate::data::{Dataset, Sample, Split};
use crate::error::Result;
use crate::model::Model;

pub use ablation::{run_ablation, AblationReport, AblationRow};
pub use classify::{finetune_classifier, presence_labels, ClassifierConfig, ClassifierReport};
pub use diagnostics::{dump_diagnostics, DiagnosticsSummary};
pub use retrieval::{
    finetune_retrieval, rank_of, rank_retrieval, score_matrix, Direction, FinetuneConfig, RetrievalReport,
    RECALL_KS,
};

/// The first `run.max_pool` samples of the configured evaluation split.
pub fn eval_pool<'a, T: Scalar>(data: &'a Dataset<T>, run: &RunConfig) -> Result<Vec<&'a Sample<T>>> {
    let split: Split = run.eval_split.parse()?;
    let mut pool = data.split(split);
    pool.truncate(run.max_pool);
    Ok(pool)
}

/// Recall in both directions on `pool` without any task training.
pub fn zero_shot<T: Scalar>(model: &Model<T>, pool: &[&Sample<T>], mode: &str) -> Result<[RetrievalReport; 2]> {
    rank_retrieval(&score_matrix(model, pool)?, mode)
}
