//! Retrieval metrics over candidate rankings and the singular-value
//! diversity score of stacked latent samples.

mod ranking;
mod svd;

pub use ranking::{
    ndcg, rank_of_gt, ranked_order, retrieval_metrics, RankedList, RetrievalMetrics,
};
pub use svd::{singular_values, svd_diversity};
