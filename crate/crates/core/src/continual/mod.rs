//! Sequential task training with per-task prompt isolation, task-identity
//! prediction from clustered backbone features, and recall/forgetting
//! metrics.

mod eval;
mod metrics;
mod pool;
mod train;

pub use eval::{evaluate_stage, Evaluator, GalleryScope, QueryRankings};
pub use metrics::{
    forgetting, forgetting_from, group_histories, rank_descending, recall_at_k, Direction, Forgetting, IdentityMode,
    MetricsRecord,
};
pub use pool::{
    build_task_key, key_from_features, kmeans, name_tokens, predict_task, task_name_embedding, PoolEntry, PromptPool,
    TaskKey, KMEANS_ITERATIONS,
};
pub use train::{train_task, TrainConfig, TrainReport, Variant};
