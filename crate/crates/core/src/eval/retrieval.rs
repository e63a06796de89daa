use std::cmp::Ordering;

use mico_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gallery indices per query, best first: descending `τ·⟨q, g⟩`, ties by
/// ascending gallery index.
pub fn retrieval_rank(queries: &Tensor<f32>, gallery: &Tensor<f32>, tau: f64) -> Result<Vec<Vec<usize>>> {
    if gallery.rank() != 2 || gallery.rows() == 0 {
        return Err(Error::Invalid("retrieval needs a non-empty gallery matrix".into()));
    }
    if queries.rank() != 2 || queries.cols() != gallery.cols() {
        return Err(Error::Invalid(format!(
            "query dimension {:?} does not match gallery dimension {}",
            queries.shape().get(1),
            gallery.cols()
        )));
    }
    let scores = crate::objectives::similarity(queries, gallery, tau);
    let m = gallery.rows();
    Ok(scores.chunks(m).map(rank_scores).collect())
}

/// Indices sorted by descending score, ties by ascending index; NaN sorts last.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| desc(scores[a], scores[b]).then(a.cmp(&b)));
    idx
}

fn desc(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => b.partial_cmp(&a).unwrap(),
    }
}

/// Reorders the first `min(k, len)` entries by descending `p_v`, keeping the
/// prior order among ties. Entries past the cutoff stay where they are.
pub fn rerank_top_k(ranked: &[usize], k: usize, mut p_v: impl FnMut(usize) -> f64) -> Vec<usize> {
    let cut = k.min(ranked.len());
    let mut head: Vec<(usize, f64)> = ranked[..cut].iter().map(|&c| (c, p_v(c))).collect();
    // stable sort: equal scores keep their contrastive order
    head.sort_by(|a, b| desc(a.1, b.1));
    head.into_iter().map(|(c, _)| c).chain(ranked[cut..].iter().copied()).collect()
}

/// Zero-based position of `target` in a ranking.
pub fn rank_of(ranked: &[usize], target: usize) -> usize {
    ranked.iter().position(|&c| c == target).unwrap_or(ranked.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recall {
    /// From the zero-based rank of each query's true pair.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        Self {
            r1: recall_at(ranks, 1),
            r5: recall_at(ranks, 5),
            r10: recall_at(ranks, 10),
        }
    }
}

pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "text->X")]
    TextToKnowledge,
    #[serde(rename = "X->text")]
    KnowledgeToText,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub dataset: String,
    pub direction: Direction,
    pub candidates: usize,
    pub rerank_k: usize,
    pub reranked: bool,
    pub pre: Recall,
    pub post: Recall,
    /// Zero-based rank of each query's true pair, before and after rerank.
    pub ranks_pre: Vec<usize>,
    pub ranks_post: Vec<usize>,
}

/// Ranks every query (query `i` is paired with gallery item `i`), then
/// optionally reranks the top `k` with `p_v(query, candidate)`.
pub fn retrieval_report(
    dataset: &str,
    direction: Direction,
    queries: &Tensor<f32>,
    gallery: &Tensor<f32>,
    tau: f64,
    rerank_k: usize,
    p_v: Option<&mut dyn FnMut(usize, &[usize]) -> Result<Vec<f64>>>,
) -> Result<RetrievalReport> {
    if queries.rows() != gallery.rows() {
        return Err(Error::Invalid("paired retrieval needs as many queries as gallery items".into()));
    }
    let ranked = retrieval_rank(queries, gallery, tau)?;
    let ranks_pre: Vec<usize> = ranked.iter().enumerate().map(|(q, r)| rank_of(r, q)).collect();
    let reranked = p_v.is_some();
    let ranks_post = match p_v {
        Some(score) => {
            let mut out = Vec::with_capacity(ranked.len());
            for (q, r) in ranked.iter().enumerate() {
                let cut = rerank_k.min(r.len());
                let s = score(q, &r[..cut])?;
                let lookup: std::collections::HashMap<usize, f64> = r[..cut].iter().copied().zip(s).collect();
                let rr = rerank_top_k(r, rerank_k, |c| lookup[&c]);
                out.push(rank_of(&rr, q));
            }
            out
        }
        None => ranks_pre.clone(),
    };
    Ok(RetrievalReport {
        dataset: dataset.to_string(),
        direction,
        candidates: gallery.rows(),
        rerank_k,
        reranked,
        pre: Recall::from_ranks(&ranks_pre),
        post: Recall::from_ranks(&ranks_post),
        ranks_pre,
        ranks_post,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gallery_ranks_self_first() {
        let g = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let ranked = retrieval_rank(&g, &g, 1.0).unwrap();
        for (q, r) in ranked.iter().enumerate() {
            assert_eq!(r[0], q);
        }
    }

    #[test]
    fn ties_by_index() {
        assert_eq!(rank_scores(&[0.5, 1.0, 0.5, 1.0]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn rerank_leaves_tail() {
        let r = rerank_top_k(&[4, 3, 2, 1, 0], 3, |c| c as f64);
        assert_eq!(r, vec![4, 3, 2, 1, 0]);
        let r = rerank_top_k(&[0, 1, 2, 3, 4], 3, |c| c as f64);
        assert_eq!(r, vec![2, 1, 0, 3, 4]);
        let r = rerank_top_k(&[0, 1, 2], 1, |c| c as f64);
        assert_eq!(r, vec![0, 1, 2]);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 4]);
        assert!(retrieval_rank(&a, &b, 1.0).is_err());
    }
}
