//! Rank candidate lists and report recall@k, MRR, mean rank and NDCG.

use uqrank::metrics::{ndcg, rank_of_gt, retrieval_metrics, RankedList};
use uqrank::Result;

fn main() -> Result<()> {
    let lists = vec![
        RankedList::new(vec![0.9, 0.05, 0.05], 0).with_relevance(vec![1.0, 0.0, 0.0]),
        RankedList::new(vec![0.2, 0.5, 0.3], 2).with_relevance(vec![0.5, 0.0, 1.0]),
        RankedList::new(vec![0.1, 0.1, 0.1, 0.7], 1).with_relevance(vec![0.0, 1.0, 0.0, 0.5]),
    ];
    for (i, l) in lists.iter().enumerate() {
        println!("list {i}: gt rank {}  NDCG {:.4}", rank_of_gt(l)?, ndcg(l)?);
    }
    let m = retrieval_metrics(&lists, &[1, 2, 3])?;
    println!(
        "R@1 {:.3}  R@2 {:.3}  R@3 {:.3}  MRR {:.4}  mean rank {:.3}",
        m.recall_at(1).unwrap_or(0.0),
        m.recall_at(2).unwrap_or(0.0),
        m.recall_at(3).unwrap_or(0.0),
        m.mrr,
        m.mean_rank
    );
    Ok(())
}
