use std::cmp::Ordering;

use crate::format::Index;
use crate::IndexError;

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub entry: usize,
    pub score: f64,
}

/// f64-accumulated dot product of a stored f32 embedding with a query.
pub fn cosine(stored: &[f32], query: &[f64]) -> f64 {
    stored.iter().zip(query).map(|(&a, &b)| f64::from(a) * b).sum()
}

/// Exact top-k by cosine, scores descending and ties broken by clip id.
/// `query` must already be unit-norm. An empty index gives no hits.
pub fn search(index: &Index, query: &[f64], k: usize, behavior: Option<&str>) -> Result<Vec<Hit>, IndexError> {
    if k == 0 {
        return Err(IndexError::Request("k must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(IndexError::Request(format!(
            "query has dimension {}, index has {}",
            query.len(),
            index.dim
        )));
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(IndexError::Request("query embedding is not finite".into()));
    }
    let mut hits: Vec<Hit> = index
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| behavior.is_none_or(|b| e.meta.behaviors.iter().any(|x| x == b)))
        .map(|(i, e)| Hit {
            entry: i,
            score: cosine(&e.embedding, query),
        })
        .collect();
    let order = |a: &Hit, b: &Hit| -> Ordering {
        b.score
            .total_cmp(&a.score)
            .then_with(|| index.entries[a.entry].clip_id.cmp(&index.entries[b.entry].clip_id))
    };
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, order);
        hits.truncate(k);
    }
    hits.sort_by(order);
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::{EntryMeta, IndexEntry};

    fn planted() -> Index {
        let e = |id: &str, v: [f32; 2], b: &str| IndexEntry {
            clip_id: id.into(),
            embedding: v.to_vec(),
            meta: EntryMeta {
                video_id: id.into(),
                t_init: 0.0,
                t_end: 1.0,
                n_frames: 8,
                frame_indices: (0..8).collect(),
                behaviors: vec![b.into()],
                text: String::new(),
            },
        };
        let unit = |s: f32| [s, (1.0 - s * s).sqrt()];
        Index::new(
            2,
            "0".repeat(64),
            vec![e("c", unit(0.1), "Play"), e("a", unit(0.9), "Hug"), e("b", unit(0.5), "Hug")],
        )
        .unwrap()
    }

    #[test]
    fn planted_order() {
        let idx = planted();
        let hits = search(&idx, &[1.0, 0.0], 3, None).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| idx.entries[h.entry].clip_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!((hits[0].score - 0.9).abs() < 1e-7 && (hits[2].score - 0.1).abs() < 1e-7);
        assert_eq!(search(&idx, &[1.0, 0.0], 10, None).unwrap().len(), 3);
        assert_eq!(search(&idx, &[1.0, 0.0], 1, None).unwrap()[0].entry, 1);
    }

    #[test]
    fn filter_ties_and_validation() {
        let idx = planted();
        let hits = search(&idx, &[1.0, 0.0], 5, Some("Play")).unwrap();
        assert_eq!(hits.len(), 1);
        assert!(search(&idx, &[1.0, 0.0], 5, Some("Fight")).unwrap().is_empty());
        assert!(search(&idx, &[1.0, 0.0], 0, None).is_err());
        assert!(search(&idx, &[1.0], 1, None).is_err());
        // Identical embeddings: only the clip id decides.
        let mut tie = idx.clone();
        for e in &mut tie.entries {
            e.embedding = vec![1.0, 0.0];
        }
        let hits = search(&tie, &[1.0, 0.0], 3, None).unwrap();
        let ids: Vec<&str> = hits.iter().map(|h| tie.entries[h.entry].clip_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let empty = Index::new(2, "0".repeat(64), vec![]).unwrap();
        assert!(search(&empty, &[1.0, 0.0], 3, None).unwrap().is_empty());
    }
}
