//! Retrieval and zero-shot metrics over precomputed similarity scores.
//!
//! Rankings sort by descending score and break ties by ascending item index,
//! so callers order their corpus by clip id before scoring.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_clip, FrameSource, ManifestRecord};
use crate::error::{Error, Result};
use crate::ethogram::Ethogram;
use crate::lora::Placement;
use crate::matrix::{dot, Matrix};
use crate::model::{ByteTokenizer, DualEncoder, ModelConfig, TokenSequence, VideoEncoding};
use crate::scalar::Scalar;

pub const HITS_KS: [usize; 5] = [1, 2, 3, 5, 10];
pub const TOP_KS: [usize; 5] = [1, 2, 3, 5, 10];
/// Behaviours need strictly more samples than this to get an NDCG entry.
pub const NDCG_MIN_SAMPLES: usize = 10;

/// Item indices ordered by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of `item` under [`rank_desc`] ordering.
pub fn rank_of(scores: &[f64], item: usize) -> usize {
    rank_desc(scores).iter().position(|&i| i == item).expect("item in range") + 1
}

/// `scores` is queries × clips; `gold[q]` is the one relevant clip of query `q`.
pub fn hits_at_k(scores: &Matrix<f64>, gold: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    if gold.len() != scores.rows() {
        return Err(Error::shape(scores.rows(), gold.len()));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= scores.cols()) {
        return Err(Error::Input(format!("gold clip {g} absent from a corpus of {}", scores.cols())));
    }
    if scores.rows() == 0 {
        return Err(Error::Input("no queries".into()));
    }
    let ranks: Vec<usize> = gold
        .iter()
        .enumerate()
        .map(|(q, &g)| rank_of(scores.row(q), g))
        .collect();
    Ok(hits_from_ranks(&ranks, ks))
}

/// Hits@K from 1-based gold ranks.
pub fn hits_from_ranks(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Binary-gain NDCG@K with a `log₂(rank + 1)` discount. `None` when nothing is relevant.
pub fn ndcg_at_k(scores: &[f64], relevant: &[bool], k: usize) -> Result<Option<f64>> {
    if scores.len() != relevant.len() {
        return Err(Error::shape(scores.len(), relevant.len()));
    }
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Ok(None);
    }
    let disc = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = rank_desc(scores)
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &item)| relevant[item])
        .map(|(i, _)| disc(i))
        .sum();
    let ideal: f64 = (0..total.min(k)).map(disc).sum();
    Ok(Some(dcg / ideal))
}

/// `scores` is clips × classes. A clip is a Top-K hit when any of its labels
/// is among the K best-scoring classes.
pub fn zero_shot_topk(scores: &Matrix<f64>, labels: &[Vec<usize>], ks: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != scores.rows() || scores.rows() == 0 {
        return Err(Error::shape(scores.rows(), labels.len()));
    }
    let mut best = Vec::with_capacity(labels.len());
    for (c, ls) in labels.iter().enumerate() {
        if ls.is_empty() {
            return Err(Error::Input(format!("clip {c} has no labels")));
        }
        if let Some(&l) = ls.iter().find(|&&l| l >= scores.cols()) {
            return Err(Error::Input(format!("label {l} outside {} classes", scores.cols())));
        }
        let order = rank_desc(scores.row(c));
        best.push(order.iter().position(|i| ls.contains(i)).expect("label present") + 1);
    }
    Ok(hits_from_ranks(&best, ks))
}

/// A model entered into selection, with its Top-1/2/3 figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub rank: usize,
    pub placement: Placement,
    pub top: [f64; 3],
}

impl Candidate {
    pub fn mean(&self) -> f64 {
        self.top.iter().sum::<f64>() / 3.0
    }
}

/// Index of the candidate with the highest mean of Top-1/2/3; ties go to the
/// lower rank, then to placement order Upper, Bottom, Vertical.
pub fn select_best(cands: &[Candidate]) -> Result<usize> {
    if cands.is_empty() {
        return Err(Error::Input("no candidates to select from".into()));
    }
    let mut best = 0;
    for (i, c) in cands.iter().enumerate().skip(1) {
        let b = &cands[best];
        let better = match c.mean().total_cmp(&b.mean()) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => (c.rank, c.placement) < (b.rank, b.placement),
        };
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Monte-Carlo Hits@K of uniformly random rankings over `n` items.
pub fn random_chance_hits<R: Rng + ?Sized>(n: usize, ks: &[usize], trials: usize, rng: &mut R) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut ranks = Vec::with_capacity(trials);
    for _ in 0..trials {
        perm.shuffle(rng);
        ranks.push(perm.iter().position(|&i| i == 0).expect("gold present") + 1);
    }
    hits_from_ranks(&ranks, ks)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(rename = "N")]
    pub n: usize,
    /// Keys `Hits@1` … `Hits@10`.
    pub hits: BTreeMap<String, f64>,
    /// Per behaviour, only for behaviours with more than ten samples.
    #[serde(rename = "NDCG@5")]
    pub ndcg5: BTreeMap<String, f64>,
}

impl RetrievalReport {
    pub fn hits_at(&self, k: usize) -> f64 {
        self.hits.get(&format!("Hits@{k}")).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    #[serde(rename = "Top1")]
    pub top1: f64,
    #[serde(rename = "Top2")]
    pub top2: f64,
    #[serde(rename = "Top3")]
    pub top3: f64,
    #[serde(rename = "Top5")]
    pub top5: f64,
    #[serde(rename = "Top10")]
    pub top10: f64,
}

/// Held-out pairs for evaluation; clip `i` is the gold item of query `i`.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub clips: Vec<crate::model::ClipTensor>,
    pub queries: Vec<TokenSequence>,
    /// Behaviour labels per clip, as class indices.
    pub labels: Vec<Vec<usize>>,
    /// Class names, index-aligned with the label indices.
    pub classes: Vec<String>,
    /// Tokenised class texts used for zero-shot and per-behaviour queries.
    pub class_queries: Vec<TokenSequence>,
}

impl EvalSet {
    /// Held-out records sorted by clip id, with the ethogram as class list.
    /// Behaviours outside the ethogram are an input error.
    pub fn from_records(
        records: &[&ManifestRecord],
        source: &dyn FrameSource,
        config: &ModelConfig,
        ethogram: &Ethogram,
    ) -> Result<Self> {
        let mut records = records.to_vec();
        records.sort_by_cached_key(|r| r.clip_id());
        let tok = ByteTokenizer::new(config.max_text_len);
        let mut labels = Vec::with_capacity(records.len());
        for r in &records {
            let l = r
                .behaviors
                .iter()
                .map(|b| {
                    ethogram
                        .index_of(b)
                        .ok_or_else(|| Error::Input(format!("clip {} has behaviour {b:?} outside the ethogram", r.clip_id())))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(l);
        }
        Ok(Self {
            clips: records
                .iter()
                .map(|r| extract_clip(source, &r.clip(), config))
                .collect::<Result<_>>()?,
            queries: records.iter().map(|r| tok.encode(&r.text)).collect::<Result<_>>()?,
            labels,
            classes: ethogram.names().map(str::to_string).collect(),
            class_queries: ethogram.names().map(|n| tok.encode(n)).collect::<Result<_>>()?,
        })
    }
}

/// `texts × clips` cosine scores of normalised embeddings, accumulated in f64.
pub fn score_matrix<T: Scalar>(texts: &Matrix<T>, clips: &Matrix<T>) -> Matrix<f64> {
    let (t, c): (Matrix<f64>, Matrix<f64>) = (texts.cast(), clips.cast());
    let mut s = Matrix::zeros(t.rows(), c.rows());
    for i in 0..t.rows() {
        for j in 0..c.rows() {
            s.set(i, j, dot(t.row(i), c.row(j)));
        }
    }
    s
}

/// Retrieval with bypass text embeddings against clip embeddings.
pub fn evaluate_retrieval<T: Scalar>(
    model: &DualEncoder<T>,
    set: &EvalSet,
    videos: &VideoEncoding<T>,
) -> Result<RetrievalReport> {
    let q = model.encode_texts_bypass(&set.queries)?;
    let scores = score_matrix(&q, &videos.embeddings);
    let gold: Vec<usize> = (0..set.queries.len()).collect();
    let hits = hits_at_k(&scores, &gold, &HITS_KS)?;
    let mut report = RetrievalReport {
        n: set.clips.len(),
        hits: HITS_KS
            .iter()
            .zip(hits)
            .map(|(k, h)| (format!("Hits@{k}"), h))
            .collect(),
        ndcg5: BTreeMap::new(),
    };
    if !set.class_queries.is_empty() {
        let cq = model.encode_texts_bypass(&set.class_queries)?;
        let cs = score_matrix(&cq, &videos.embeddings);
        for (ci, name) in set.classes.iter().enumerate() {
            let relevant: Vec<bool> = set.labels.iter().map(|l| l.contains(&ci)).collect();
            if relevant.iter().filter(|&&r| r).count() <= NDCG_MIN_SAMPLES {
                continue;
            }
            if let Some(v) = ndcg_at_k(cs.row(ci), &relevant, 5)? {
                report.ndcg5.insert(name.clone(), v);
            }
        }
    }
    Ok(report)
}

/// Zero-shot classification: class texts go through the prompted path,
/// conditioned on each clip in turn.
pub fn evaluate_zero_shot<T: Scalar>(
    model: &DualEncoder<T>,
    set: &EvalSet,
    videos: &VideoEncoding<T>,
) -> Result<ZeroShotReport> {
    let summaries = model.text_summaries(&set.class_queries)?;
    let mut scores = Matrix::zeros(set.clips.len(), set.classes.len());
    for c in 0..set.clips.len() {
        let cls = model.prompted_from_summaries(&summaries, &videos.mit[c])?;
        let clip = Matrix::row_vector(videos.embeddings.row(c));
        let s = score_matrix(&clip, &cls);
        scores.row_mut(c).copy_from_slice(s.row(0));
    }
    let t = zero_shot_topk(&scores, &set.labels, &TOP_KS)?;
    Ok(ZeroShotReport {
        top1: t[0],
        top2: t[1],
        top3: t[2],
        top5: t[3],
        top10: t[4],
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Rank by counting items that beat the gold one: higher score, or equal
    /// score with a lower index.
    fn brute_rank(scores: &[f64], g: usize) -> usize {
        1 + (0..scores.len())
            .filter(|&j| scores[j] > scores[g] || (scores[j] == scores[g] && j < g))
            .count()
    }

    fn brute_ndcg(scores: &[f64], rel: &[bool], k: usize) -> Option<f64> {
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            return None;
        }
        let mut dcg = 0.0;
        for (j, &r) in rel.iter().enumerate() {
            let rank = brute_rank(scores, j);
            if r && rank <= k {
                dcg += 1.0 / (rank as f64 + 1.0).log2();
            }
        }
        let idcg: f64 = (1..=total.min(k)).map(|r| 1.0 / (r as f64 + 1.0).log2()).sum();
        Some(dcg / idcg)
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let e = Matrix::<f64>::identity(5);
        let s = score_matrix(&e, &e);
        let h = hits_at_k(&s, &[0, 1, 2, 3, 4], &[1]).unwrap();
        assert_eq!(h, vec![1.0]);
    }

    #[test]
    fn hand_case_ranks() {
        // gold ranks 1, 3, 2, 4 among 4 clips
        let s = Matrix::from_rows(&[
            vec![0.9, 0.1, 0.2, 0.3],
            vec![0.9, 0.1, 0.8, 0.5],
            vec![0.1, 0.9, 0.5, 0.2],
            vec![0.1, 0.9, 0.5, 0.0],
        ])
        .unwrap();
        let h = hits_at_k(&s, &[0, 3, 2, 3], &[1, 2, 4]).unwrap();
        assert_eq!(h, vec![0.25, 0.5, 1.0]);
        assert!(hits_at_k(&s, &[0, 9, 2, 3], &[1]).is_err());
    }

    #[test]
    fn ties_break_by_index() {
        let s = [0.5, 0.5, 0.5];
        assert_eq!(rank_desc(&s), vec![0, 1, 2]);
        assert_eq!(rank_of(&s, 2), 3);
    }

    #[test]
    fn ndcg_hand_cases() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let v = ndcg_at_k(&scores, &[true, false, true, false], 3).unwrap().unwrap();
        assert!((v - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((v - 0.9197).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&scores, &[true, true, false, false], 2).unwrap(), Some(1.0));
        assert_eq!(ndcg_at_k(&scores, &[false, false, false, true], 3).unwrap(), Some(0.0));
        assert_eq!(ndcg_at_k(&scores, &[false; 4], 3).unwrap(), None);
    }

    #[test]
    fn metrics_match_brute_force_on_random_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.random_range(1..=12);
            let q = rng.random_range(1..=6);
            // coarse grid so ties occur
            let s = Matrix::from_vec(q, n, (0..q * n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect()).unwrap();
            let gold: Vec<usize> = (0..q).map(|_| rng.random_range(0..n)).collect();
            let ks: Vec<usize> = (1..=n + 1).collect();
            let h = hits_at_k(&s, &gold, &ks).unwrap();
            for (ki, &k) in ks.iter().enumerate() {
                let brute = gold
                    .iter()
                    .enumerate()
                    .filter(|(qi, &g)| brute_rank(s.row(*qi), g) <= k)
                    .count() as f64
                    / q as f64;
                assert_eq!(h[ki], brute);
            }
            assert_eq!(*h.last().unwrap(), 1.0);
            assert!(h.windows(2).all(|w| w[0] <= w[1]));
            let rel: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            for k in 1..=n {
                let a = ndcg_at_k(s.row(0), &rel, k).unwrap();
                let b = brute_ndcg(s.row(0), &rel, k);
                match (a, b) {
                    (Some(x), Some(y)) => {
                        assert!((x - y).abs() < 1e-12);
                        assert!((0.0..=1.0 + 1e-12).contains(&x));
                    }
                    (None, None) => {}
                    other => panic!("{other:?}"),
                }
            }
        }
    }

    #[test]
    fn zero_shot_examples() {
        let s = Matrix::from_rows(&[vec![0.9, 0.8, 0.1]]).unwrap();
        assert_eq!(zero_shot_topk(&s, &[vec![1]], &[1, 2, 3]).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(zero_shot_topk(&s, &[vec![2, 0]], &[1]).unwrap(), vec![1.0]);
        assert!(zero_shot_topk(&s, &[vec![]], &[1]).is_err());
        let e = Matrix::<f64>::identity(3);
        let s = score_matrix(&e, &e);
        assert_eq!(zero_shot_topk(&s, &[vec![0], vec![1], vec![2]], &[1]).unwrap(), vec![1.0]);
    }

    fn cand(id: &str, rank: usize, placement: Placement, top: [f64; 3]) -> Candidate {
        Candidate {
            id: id.into(),
            rank,
            placement,
            top,
        }
    }

    #[test]
    fn select_best_examples() {
        let a = cand("A", 1, Placement::Upper, [0.10, 0.12, 0.15]);
        let b = cand("B", 1, Placement::Upper, [0.05, 0.20, 0.20]);
        assert_eq!(select_best(&[a.clone(), b.clone()]).unwrap(), 1);
        assert_eq!(select_best(&[a]).unwrap(), 0);
        let r8 = cand("r8", 8, Placement::Upper, [0.2, 0.3, 0.4]);
        let r4 = cand("r4", 4, Placement::Vertical, [0.3, 0.3, 0.3]);
        assert_eq!(select_best(&[r8.clone(), r4.clone()]).unwrap(), 1);
        let v = cand("v", 4, Placement::Vertical, [0.3, 0.3, 0.3]);
        let bt = cand("b", 4, Placement::Bottom, [0.3, 0.3, 0.3]);
        assert_eq!(select_best(&[v, bt]).unwrap(), 1);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn select_best_is_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let cands: Vec<Candidate> = (0..12)
                .map(|i| {
                    cand(
                        &i.to_string(),
                        [1, 2, 4, 8][i % 4],
                        Placement::ALL[i / 4],
                        [0; 3].map(|_| rng.random_range(0..4) as f64 / 8.0),
                    )
                })
                .collect();
            let scaled: Vec<Candidate> = cands
                .iter()
                .map(|c| Candidate {
                    top: c.top.map(|x| x * 3.0),
                    ..c.clone()
                })
                .collect();
            assert_eq!(select_best(&cands).unwrap(), select_best(&scaled).unwrap());
        }
    }

    #[test]
    fn random_chance_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_chance_hits(20, &[5], 20_000, &mut rng);
        assert!((h[0] - 0.25).abs() < 0.02);
    }
}
