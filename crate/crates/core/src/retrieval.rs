//! Cosine similarity search over question, rationale and image embeddings.
//!
//! The combined score of two samples is the unweighted sum of their three
//! per-modality cosines (a modality mask can switch terms off for ablations).
//! Neighbor search streams the gallery in fixed-size blocks and keeps a
//! bounded heap per query, so the full similarity matrix is never stored.
//! Ties are broken by ascending gallery id everywhere.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::interchange::{EmbeddingBundle, EmbeddingSet, Modality, NeighborRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cosine is undefined for the zero vector")]
    ZeroVector,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("gallery is empty after exclusions")]
    EmptyAfterExclusion,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no {modality:?} embedding for {id:?}")]
    MissingEmbedding { id: String, modality: Modality },
    #[error("{0:?} is both a query and a gallery item")]
    Overlap(String),
}

/// Which modalities contribute to the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityMask {
    pub question: bool,
    pub rationale: bool,
    pub image: bool,
}

impl Default for ModalityMask {
    fn default() -> Self {
        ModalityMask {
            question: true,
            rationale: true,
            image: true,
        }
    }
}

impl ModalityMask {
    pub fn any(self) -> bool {
        self.question || self.rationale || self.image
    }

    fn enabled(self, m: Modality) -> bool {
        match m {
            Modality::Question => self.question,
            Modality::Rationale => self.rationale,
            Modality::Image => self.image,
        }
    }
}

/// Dot product and squared norms in f64 with Neumaier compensation.
fn dot_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut acc = [Compensated::default(); 3];
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        acc[0].add(x * y);
        acc[1].add(x * x);
        acc[2].add(y * y);
    }
    (acc[0].value(), acc[1].value(), acc[2].value())
}

fn norm(a: &[f32]) -> f64 {
    let mut acc = Compensated::default();
    for &x in a {
        let x = f64::from(x);
        acc.add(x * x);
    }
    acc.value().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = Compensated::default();
    for (&x, &y) in a.iter().zip(b) {
        acc.add(f64::from(x) * f64::from(y));
    }
    acc.value()
}

#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimMismatch(a.len(), b.len()));
    }
    let (d, na, nb) = dot_norms(a, b);
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((d / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn cosine_with_norms(a: &[f32], na: f64, b: &[f32], nb: f64) -> f64 {
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Borrowed question / rationale / image vectors of one sample.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTriple<'a> {
    pub question: &'a [f32],
    pub rationale: &'a [f32],
    pub image: &'a [f32],
}

impl<'a> EmbeddingTriple<'a> {
    fn get(&self, m: Modality) -> &'a [f32] {
        match m {
            Modality::Question => self.question,
            Modality::Rationale => self.rationale,
            Modality::Image => self.image,
        }
    }
}

/// Sum of the three per-modality cosines.
pub fn combined_similarity(a: &EmbeddingTriple, b: &EmbeddingTriple) -> Result<f64, RetrievalError> {
    combined_similarity_masked(a, b, ModalityMask::default())
}

pub fn combined_similarity_masked(
    a: &EmbeddingTriple,
    b: &EmbeddingTriple,
    mask: ModalityMask,
) -> Result<f64, RetrievalError> {
    let mut s = 0.0;
    for m in Modality::ALL {
        if mask.enabled(m) {
            s += cosine(a.get(m), b.get(m))?;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Ranked neighbors of one query: scores non-increasing, ties by id.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl From<&NeighborSet> for NeighborRecord {
    fn from(n: &NeighborSet) -> Self {
        NeighborRecord {
            query_id: n.query_id.clone(),
            neighbors: n.neighbors.iter().map(|x| (x.id.clone(), x.score)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    pub mask: ModalityMask,
    /// Gallery rows scored per block.
    pub block_size: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            mask: ModalityMask::default(),
            block_size: 4096,
        }
    }
}

/// Row lookup into the three embedding sets with cached norms.
pub struct TripleIndex<'a> {
    sets: [&'a EmbeddingSet; 3],
    norms: [Vec<f64>; 3],
}

struct ResolvedRow<'i, 'a> {
    id: &'i str,
    vectors: [&'a [f32]; 3],
    norms: [f64; 3],
}

impl<'a> TripleIndex<'a> {
    pub fn new(bundle: &'a EmbeddingBundle) -> Self {
        Self::from_sets(&bundle.question, &bundle.rationale, &bundle.image)
    }

    pub fn from_sets(
        question: &'a EmbeddingSet,
        rationale: &'a EmbeddingSet,
        image: &'a EmbeddingSet,
    ) -> Self {
        let sets = [question, rationale, image];
        let norms = sets.map(|s| (0..s.len()).map(|i| norm(s.row(i))).collect());
        TripleIndex { sets, norms }
    }

    pub fn triple(&self, id: &str) -> Result<EmbeddingTriple<'a>, RetrievalError> {
        let r = self.resolve(id)?;
        Ok(EmbeddingTriple {
            question: r.vectors[0],
            rationale: r.vectors[1],
            image: r.vectors[2],
        })
    }

    fn resolve<'i>(&self, id: &'i str) -> Result<ResolvedRow<'i, 'a>, RetrievalError> {
        let mut vectors: [&[f32]; 3] = [&[], &[], &[]];
        let mut norms = [0.0; 3];
        for (k, m) in Modality::ALL.into_iter().enumerate() {
            let set = self.sets[k];
            let row = set.row_index(id).ok_or_else(|| RetrievalError::MissingEmbedding {
                id: id.to_string(),
                modality: m,
            })?;
            vectors[k] = set.row(row);
            norms[k] = self.norms[k][row];
        }
        Ok(ResolvedRow { id, vectors, norms })
    }

    fn score(&self, a: &ResolvedRow, b: &ResolvedRow, mask: ModalityMask) -> f64 {
        let mut s = 0.0;
        for (k, m) in Modality::ALL.into_iter().enumerate() {
            if mask.enabled(m) {
                s += cosine_with_norms(a.vectors[k], a.norms[k], b.vectors[k], b.norms[k]);
            }
        }
        s
    }
}

/// Candidate ordering: higher score first, then smaller id.
#[derive(Debug, Clone, Copy)]
struct Candidate<'a> {
    score: f64,
    id: &'a str,
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate<'_> {
    /// `Greater` means ranked ahead.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

/// Bounded best-K selection.
struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<Reverse<Candidate<'a>>>,
}

impl<'a> TopK<'a> {
    fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn push(&mut self, c: Candidate<'a>) {
        if self.heap.len() < self.k {
            self.heap.push(Reverse(c));
        } else if let Some(Reverse(worst)) = self.heap.peek() {
            if c > *worst {
                self.heap.pop();
                self.heap.push(Reverse(c));
            }
        }
    }

    fn into_ranked(self) -> Vec<Candidate<'a>> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}

/// Top-`k` gallery neighbors for every query by combined similarity.
/// Returns all of `gallery` when it holds fewer than `k` items.
pub fn topk_neighbors(
    index: &TripleIndex,
    queries: &[String],
    gallery: &[String],
    k: usize,
    opts: SearchOptions,
) -> Result<Vec<NeighborSet>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    if gallery.is_empty() {
        return Err(RetrievalError::EmptyGallery);
    }
    let query_ids: HashSet<&str> = queries.iter().map(String::as_str).collect();
    if let Some(id) = gallery.iter().find(|g| query_ids.contains(g.as_str())) {
        return Err(RetrievalError::Overlap(id.clone()));
    }
    let gallery_rows = gallery
        .iter()
        .map(|id| index.resolve(id))
        .collect::<Result<Vec<_>, _>>()?;
    let query_rows = queries
        .iter()
        .map(|id| index.resolve(id))
        .collect::<Result<Vec<_>, _>>()?;
    let block = opts.block_size.max(1);

    Ok(query_rows
        .par_iter()
        .map(|q| {
            let mut running = TopK::new(k);
            for chunk in gallery_rows.chunks(block) {
                let mut local = TopK::new(k);
                for g in chunk {
                    local.push(Candidate {
                        score: index.score(q, g, opts.mask),
                        id: g.id,
                    });
                }
                for c in local.into_ranked() {
                    running.push(c);
                }
            }
            NeighborSet {
                query_id: q.id.to_string(),
                neighbors: running
                    .into_ranked()
                    .into_iter()
                    .map(|c| Neighbor {
                        id: c.id.to_string(),
                        score: c.score,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Best gallery row for `query` among rows accepted by `allow`, by cosine.
pub fn top1_filtered(
    query: &[f32],
    gallery: &EmbeddingSet,
    allow: impl Fn(&str) -> bool,
) -> Result<(String, f64), RetrievalError> {
    if query.len() != gallery.dim() {
        return Err(RetrievalError::DimMismatch(query.len(), gallery.dim()));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    // score everything, then test `allow` in rank order: the predicate may be
    // far more expensive than a dot product
    let mut ranked: Vec<Candidate> = gallery
        .ids()
        .iter()
        .enumerate()
        .map(|(row, id)| {
            let v = gallery.row(row);
            Candidate {
                score: cosine_with_norms(query, qn, v, norm(v)),
                id,
            }
        })
        .collect();
    ranked.sort_unstable_by(|a, b| b.cmp(a));
    ranked
        .into_iter()
        .find(|c| allow(c.id))
        .map(|c| (c.id.to_string(), c.score))
        .ok_or(RetrievalError::EmptyAfterExclusion)
}

/// Best gallery row for `query`, skipping `exclude`.
pub fn top1_by_text(
    query: &[f32],
    gallery: &EmbeddingSet,
    exclude: &HashSet<String>,
) -> Result<(String, f64), RetrievalError> {
    top1_filtered(query, gallery, |id| !exclude.contains(id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(m: Modality, rows: &[(&str, Vec<f32>)]) -> EmbeddingSet {
        EmbeddingSet::from_rows(m, rows.iter().map(|(i, v)| (i.to_string(), v.clone())).collect())
            .unwrap()
    }

    #[test]
    fn cosine_basics() {
        let v = [0.3f32, -2.0, 5.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(cosine(&[1.0], &[1.0, 0.0]), Err(RetrievalError::DimMismatch(1, 2)));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(RetrievalError::ZeroVector));
    }

    #[test]
    fn combined_scores() {
        let a = EmbeddingTriple {
            question: &[1.0, 0.0],
            rationale: &[0.0, 1.0],
            image: &[1.0, 1.0],
        };
        assert!((combined_similarity(&a, &a).unwrap() - 3.0).abs() < 1e-12);
        let b = EmbeddingTriple {
            question: &[0.0, 1.0],
            rationale: &[1.0, 0.0],
            image: &[1.0, -1.0],
        };
        assert_eq!(combined_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn combined_is_sum_of_hand_set_cosines() {
        // unit vectors at angles whose cosines are 0.9, 0.8 and 0.5
        let unit = |c: f32| vec![c, (1.0 - c * c).sqrt()];
        let (q, t, v) = (unit(0.9), unit(0.8), unit(0.5));
        let a = EmbeddingTriple {
            question: &[1.0, 0.0],
            rationale: &[1.0, 0.0],
            image: &[1.0, 0.0],
        };
        let b = EmbeddingTriple {
            question: &q,
            rationale: &t,
            image: &v,
        };
        assert!((combined_similarity(&a, &b).unwrap() - 2.2).abs() < 1e-6);
    }

    #[test]
    fn mask_drops_terms() {
        let a = EmbeddingTriple {
            question: &[1.0, 0.0],
            rationale: &[1.0, 0.0],
            image: &[1.0, 0.0],
        };
        let mask = ModalityMask {
            question: true,
            rationale: false,
            image: false,
        };
        assert!((combined_similarity_masked(&a, &a, mask).unwrap() - 1.0).abs() < 1e-12);
    }

    fn triple_sets(rows: &[(&str, Vec<f32>)]) -> (EmbeddingSet, EmbeddingSet, EmbeddingSet) {
        (
            set(Modality::Question, rows),
            set(Modality::Rationale, rows),
            set(Modality::Image, rows),
        )
    }

    #[test]
    fn duplicate_is_the_top_neighbor() {
        let rows = [
            ("q", vec![0.2, 0.7, 0.1]),
            ("a", vec![1.0, 0.0, 0.0]),
            ("b", vec![0.2, 0.7, 0.1]),
            ("c", vec![0.0, 0.0, 1.0]),
        ];
        let (q, t, v) = triple_sets(&rows);
        let index = TripleIndex::from_sets(&q, &t, &v);
        let gallery = vec!["a".to_string(), "b".into(), "c".into()];
        let out = topk_neighbors(&index, &["q".into()], &gallery, 1, SearchOptions::default()).unwrap();
        assert_eq!(out[0].neighbors[0].id, "b");
        assert!((out[0].neighbors[0].score - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        // query along x; gallery cosines 0.2, 0.9, 0.9, 0.5 per modality
        let unit = |c: f32| vec![c, (1.0 - c * c).sqrt()];
        let rows = [
            ("q", vec![1.0, 0.0]),
            ("g0", unit(0.2)),
            ("g1", unit(0.9)),
            ("g2", unit(0.9)),
            ("g3", unit(0.5)),
        ];
        let (q, t, v) = triple_sets(&rows);
        let index = TripleIndex::from_sets(&q, &t, &v);
        let gallery: Vec<String> = ["g3", "g2", "g1", "g0"].iter().map(|s| s.to_string()).collect();
        let out = topk_neighbors(&index, &["q".into()], &gallery, 2, SearchOptions::default()).unwrap();
        let ids: Vec<&str> = out[0].neighbors.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, vec!["g1", "g2"]);
    }

    #[test]
    fn small_gallery_returns_everything() {
        let rows = [
            ("q", vec![1.0, 0.0]),
            ("a", vec![0.5, 0.5]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![1.0, 0.1]),
        ];
        let (q, t, v) = triple_sets(&rows);
        let index = TripleIndex::from_sets(&q, &t, &v);
        let gallery: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let out = topk_neighbors(&index, &["q".into()], &gallery, 10, SearchOptions::default()).unwrap();
        let ids: Vec<&str> = out[0].neighbors.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
    }

    #[test]
    fn search_errors() {
        let rows = [("q", vec![1.0, 0.0]), ("a", vec![0.0, 1.0])];
        let (q, t, v) = triple_sets(&rows);
        let index = TripleIndex::from_sets(&q, &t, &v);
        let opts = SearchOptions::default();
        assert_eq!(
            topk_neighbors(&index, &["q".into()], &[], 1, opts),
            Err(RetrievalError::EmptyGallery)
        );
        assert_eq!(
            topk_neighbors(&index, &["q".into()], &["a".into()], 0, opts),
            Err(RetrievalError::InvalidK)
        );
        assert_eq!(
            topk_neighbors(&index, &["q".into()], &["q".into()], 1, opts),
            Err(RetrievalError::Overlap("q".into()))
        );
        assert!(matches!(
            topk_neighbors(&index, &["q".into()], &["zz".into()], 1, opts),
            Err(RetrievalError::MissingEmbedding { .. })
        ));
    }

    #[test]
    fn top1_cases() {
        let g = set(
            Modality::Rationale,
            &[("a", vec![1.0, 0.0, 0.0]), ("b", vec![0.0, 2.0, 0.0]), ("c", vec![0.0, 0.0, 1.0])],
        );
        assert_eq!(top1_by_text(&[0.0, 1.0, 0.0], &g, &HashSet::new()).unwrap(), ("b".into(), 1.0));

        let orth = set(Modality::Rationale, &[("z", vec![0.0, 1.0]), ("m", vec![0.0, 3.0])]);
        assert_eq!(top1_by_text(&[1.0, 0.0], &orth, &HashSet::new()).unwrap(), ("m".into(), 0.0));

        let all: HashSet<String> = ["z".to_string(), "m".into()].into_iter().collect();
        assert_eq!(
            top1_by_text(&[1.0, 0.0], &orth, &all),
            Err(RetrievalError::EmptyAfterExclusion)
        );
    }
}
