use crate::error::{Error, Result};

/// Scores for one candidate list plus the reference answer.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub scores: Vec<f64>,
    pub gt_index: usize,
    pub relevance: Option<Vec<f64>>,
}

impl RankedList {
    pub fn new(scores: Vec<f64>, gt_index: usize) -> Self {
        RankedList {
            scores,
            gt_index,
            relevance: None,
        }
    }

    pub fn with_relevance(mut self, relevance: Vec<f64>) -> Self {
        self.relevance = Some(relevance);
        self
    }
}

/// Candidate indices best first. Equal scores (including `0.0` and `-0.0`)
/// keep ascending index order.
pub fn ranked_order(scores: &[f64]) -> Vec<usize> {
    let key = |i: usize| scores[i] + 0.0;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    idx
}

/// 1-based rank of the reference answer under the tie rule of
/// [`ranked_order`].
pub fn rank_of_gt(list: &RankedList) -> Result<usize> {
    let s = &list.scores;
    if s.is_empty() {
        return Err(Error::Usage("empty candidate list".into()));
    }
    let g = *s.get(list.gt_index).ok_or_else(|| {
        Error::Usage(format!(
            "gt index {} out of {} candidates",
            list.gt_index,
            s.len()
        ))
    })?;
    let better = s
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > g || (x == g && j < list.gt_index))
        .count();
    Ok(better + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub mean_rank: f64,
    /// `(k, fraction of lists with rank ≤ k)`
    pub recall: Vec<(usize, f64)>,
    pub mrr: f64,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

pub fn retrieval_metrics(lists: &[RankedList], ks: &[usize]) -> Result<RetrievalMetrics> {
    if lists.is_empty() {
        return Err(Error::Usage("no ranked lists".into()));
    }
    let ranks = lists.iter().map(rank_of_gt).collect::<Result<Vec<_>>>()?;
    let n = ranks.len() as f64;
    Ok(RetrievalMetrics {
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
        recall: ks
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect(),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
    })
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains
        .enumerate()
        .map(|(i, g)| g / ((i + 2) as f64).log2())
        .sum()
}

/// Normalised discounted cumulative gain over the whole list.
pub fn ndcg(list: &RankedList) -> Result<f64> {
    let rel = list
        .relevance
        .as_ref()
        .ok_or_else(|| Error::Usage("ndcg needs relevance weights".into()))?;
    if rel.len() != list.scores.len() {
        return Err(Error::shape(format!(
            "{} relevances for {} candidates",
            rel.len(),
            list.scores.len()
        )));
    }
    if !rel.iter().any(|&r| r > 0.0) {
        return Err(Error::Domain(
            "ndcg is undefined without a relevant candidate".into(),
        ));
    }
    let got = dcg(ranked_order(&list.scores).into_iter().map(|i| rel[i]));
    let mut ideal = rel.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    Ok(got / dcg(ideal.into_iter()))
}
