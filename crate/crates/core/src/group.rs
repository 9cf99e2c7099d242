//! Similarity grouping and greedy cover.
//!
//! Each caption heads a group made of itself plus its `k` most similar
//! captions. The greedy cover then picks, one at a time, the group that
//! covers the most still-uncovered captions until nothing is left.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusHandle;
use crate::embed::EmbeddingTable;
use crate::scalar::{dot, dot4, l2_norm, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum GroupError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("non-finite vector component")]
    NonFinite,
    #[error("query id {query} out of range for {n} captions")]
    QueryOutOfRange { query: u64, n: usize },
    #[error("k = {k} must be smaller than the corpus size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("block size must be at least 1")]
    ZeroBlock,
    #[error("caption id {0} is not a member of any group")]
    Uncoverable(u64),
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity<S: Scalar>(u: &[S], v: &[S]) -> Result<S, GroupError> {
    if u.len() != v.len() {
        return Err(GroupError::Dimension(u.len(), v.len()));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(GroupError::NonFinite);
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu.is_zero() || nv.is_zero() {
        return Err(GroupError::ZeroNorm);
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)))
}

#[inline]
fn clamp_unit<S: Scalar>(x: S) -> S {
    x.max(-S::one()).min(S::one())
}

/// A query caption and its `k` nearest neighbours, best first.
///
/// `member_ids[0]` is always the query (score 1). Neighbours follow in
/// non-increasing score order with ties broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup<S> {
    pub query_id: u64,
    pub member_ids: Vec<u64>,
    pub scores: Vec<S>,
}

impl<S: Scalar> ScoredGroup<S> {
    pub fn k(&self) -> usize {
        self.member_ids.len().saturating_sub(1)
    }

    pub fn to_record(&self) -> GroupRecord {
        GroupRecord {
            query_id: self.query_id,
            member_ids: self.member_ids.clone(),
            scores: self.scores.iter().map(|s| s.to_f64_lossy()).collect(),
        }
    }

    pub fn from_record(r: &GroupRecord) -> Self {
        ScoredGroup {
            query_id: r.query_id,
            member_ids: r.member_ids.clone(),
            scores: r.scores.iter().map(|&s| S::from_f64_lossy(s)).collect(),
        }
    }
}

/// Groups file line: `{"query_id", "member_ids", "scores"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub query_id: u64,
    pub member_ids: Vec<u64>,
    #[serde(default)]
    pub scores: Vec<f64>,
}

/// Anything with a query id and a member list can take part in a cover.
pub trait GroupMembers {
    fn query_id(&self) -> u64;
    fn members(&self) -> &[u64];
}

impl<S> GroupMembers for ScoredGroup<S> {
    fn query_id(&self) -> u64 {
        self.query_id
    }
    fn members(&self) -> &[u64] {
        &self.member_ids
    }
}

impl GroupMembers for GroupRecord {
    fn query_id(&self) -> u64 {
        self.query_id
    }
    fn members(&self) -> &[u64] {
        &self.member_ids
    }
}

impl GroupMembers for (u64, Vec<u64>) {
    fn query_id(&self) -> u64 {
        self.0
    }
    fn members(&self) -> &[u64] {
        &self.1
    }
}

/// Neighbour candidate ordered so that the *worse* candidate compares greater;
/// a max-heap of these keeps the current worst on top.
#[derive(Debug, Clone, Copy)]
struct Candidate<S> {
    score: S,
    id: u64,
}

impl<S: Scalar> Candidate<S> {
    fn better_than(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Less
    }
}

impl<S: Scalar> PartialEq for Candidate<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<S: Scalar> Eq for Candidate<S> {}
impl<S: Scalar> PartialOrd for Candidate<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Scalar> Ord for Candidate<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then(self.id.cmp(&other.id))
    }
}

fn check_args<S: Scalar>(matrix: &EmbeddingTable<S>, k: usize) -> Result<usize, GroupError> {
    let n = matrix.rows();
    if k >= n {
        return Err(GroupError::KTooLarge { k, n });
    }
    Ok(n)
}

fn finish<S: Scalar>(query: u64, mut best: Vec<Candidate<S>>) -> ScoredGroup<S> {
    best.sort_unstable();
    let mut member_ids = Vec::with_capacity(best.len() + 1);
    let mut scores = Vec::with_capacity(best.len() + 1);
    member_ids.push(query);
    scores.push(S::one());
    for c in best {
        member_ids.push(c.id);
        scores.push(c.score);
    }
    ScoredGroup {
        query_id: query,
        member_ids,
        scores,
    }
}

/// Top-`k` group for one query by scoring and fully sorting every other caption.
pub fn top_k_group<S: Scalar>(
    query_id: u64,
    matrix: &EmbeddingTable<S>,
    k: usize,
) -> Result<ScoredGroup<S>, GroupError> {
    let n = check_args(matrix, k)?;
    if query_id as usize >= n {
        return Err(GroupError::QueryOutOfRange { query: query_id, n });
    }
    let q = matrix.row(query_id as usize);
    let mut all: Vec<Candidate<S>> = (0..n)
        .filter(|&j| j as u64 != query_id)
        .map(|j| Candidate {
            score: clamp_unit(dot(q, matrix.row(j))),
            id: j as u64,
        })
        .collect();
    all.sort_unstable();
    all.truncate(k);
    Ok(finish(query_id, all))
}

const TILE_ROWS: usize = 256;

/// Top-`k` groups for every caption.
///
/// Queries are processed in blocks of `block` rows against candidate tiles,
/// each query keeping a bounded heap, so the full `n x n` score matrix is
/// never materialized. Blocks run in parallel; output is identical to calling
/// [`top_k_group`] for each query.
pub fn top_k_all<S: Scalar>(
    matrix: &EmbeddingTable<S>,
    k: usize,
    block: usize,
) -> Result<Vec<ScoredGroup<S>>, GroupError> {
    let n = check_args(matrix, k)?;
    if block == 0 {
        return Err(GroupError::ZeroBlock);
    }
    let queries: Vec<usize> = (0..n).collect();
    let groups = queries
        .par_chunks(block)
        .flat_map_iter(|qs| {
            let mut heaps: Vec<BoundedTopK<S>> = qs.iter().map(|_| BoundedTopK::new(k)).collect();
            if k > 0 {
                for tile_start in (0..n).step_by(TILE_ROWS) {
                    let tile_end = (tile_start + TILE_ROWS).min(n);
                    let mut qi = 0;
                    while qi + 4 <= qs.len() {
                        let quad = [qs[qi], qs[qi + 1], qs[qi + 2], qs[qi + 3]];
                        let rows = quad.map(|q| matrix.row(q));
                        for j in tile_start..tile_end {
                            let scores = dot4(rows, matrix.row(j));
                            for t in 0..4 {
                                if j != quad[t] {
                                    heaps[qi + t].offer(scores[t], j as u64);
                                }
                            }
                        }
                        qi += 4;
                    }
                    for (qi, &q) in qs.iter().enumerate().skip(qi) {
                        let qrow = matrix.row(q);
                        for j in tile_start..tile_end {
                            if j != q {
                                heaps[qi].offer(dot(qrow, matrix.row(j)), j as u64);
                            }
                        }
                    }
                }
            }
            qs.iter()
                .zip(heaps)
                .map(|(&q, h)| finish(q as u64, h.heap.into_vec()))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(groups)
}

/// Bounded best-`k` collector. Candidates scoring below the current worst
/// kept score are rejected with a single comparison.
struct BoundedTopK<S> {
    k: usize,
    heap: BinaryHeap<Candidate<S>>,
    floor: S,
}

impl<S: Scalar> BoundedTopK<S> {
    fn new(k: usize) -> Self {
        BoundedTopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
            floor: S::neg_infinity(),
        }
    }

    #[inline]
    fn offer(&mut self, raw_score: S, id: u64) {
        if raw_score < self.floor || self.k == 0 {
            return;
        }
        let cand = Candidate {
            score: clamp_unit(raw_score),
            id,
        };
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if cand.better_than(self.heap.peek().expect("non-empty")) {
            self.heap.pop();
            self.heap.push(cand);
        } else {
            return;
        }
        if self.heap.len() == self.k {
            self.floor = self.heap.peek().expect("non-empty").score;
        }
    }
}

/// Coarse candidate filter: only captions sharing at least one token with the
/// query are scored. Tokens whose posting list exceeds `max_postings` are
/// ignored as too common. Queries with fewer than `k` candidates fall back to
/// an exhaustive scan. Results can differ from exact search.
#[derive(Debug, Clone)]
pub struct TokenPrefilter {
    postings: HashMap<String, Vec<u32>>,
    doc_tokens: Vec<Vec<String>>,
    max_postings: usize,
}

impl TokenPrefilter {
    pub fn new(corpus: &CorpusHandle, max_postings: usize) -> Self {
        let mut postings: HashMap<String, Vec<u32>> = HashMap::new();
        let mut doc_tokens = Vec::with_capacity(corpus.len());
        for c in corpus.captions() {
            let uniq: BTreeSet<&String> = c.tokens.iter().collect();
            for t in &uniq {
                postings.entry((*t).clone()).or_default().push(c.id as u32);
            }
            doc_tokens.push(uniq.into_iter().cloned().collect());
        }
        TokenPrefilter {
            postings,
            doc_tokens,
            max_postings: max_postings.max(1),
        }
    }

    fn candidates(&self, query: usize) -> Vec<u32> {
        let mut set: HashSet<u32> = HashSet::new();
        for t in &self.doc_tokens[query] {
            if let Some(p) = self.postings.get(t) {
                if p.len() <= self.max_postings {
                    set.extend(p.iter().copied());
                }
            }
        }
        set.remove(&(query as u32));
        let mut v: Vec<u32> = set.into_iter().collect();
        v.sort_unstable();
        v
    }
}

/// [`top_k_all`] restricted to prefilter candidates.
pub fn top_k_all_prefiltered<S: Scalar>(
    matrix: &EmbeddingTable<S>,
    k: usize,
    prefilter: &TokenPrefilter,
) -> Result<Vec<ScoredGroup<S>>, GroupError> {
    let n = check_args(matrix, k)?;
    (0..n)
        .into_par_iter()
        .map(|q| {
            let cands = prefilter.candidates(q);
            if cands.len() < k {
                return top_k_group(q as u64, matrix, k);
            }
            let qrow = matrix.row(q);
            let mut top = BoundedTopK::new(k);
            for j in cands {
                top.offer(dot(qrow, matrix.row(j as usize)), j as u64);
            }
            Ok(finish(q as u64, top.heap.into_vec()))
        })
        .collect()
}

/// One step of the greedy cover: cover-file line `{"rank", "query_id", "newly_covered"}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverPick {
    pub rank: usize,
    pub query_id: u64,
    pub newly_covered: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoverState {
    pub uncovered: BTreeSet<u64>,
    pub selected: Vec<u64>,
    pub picks: Vec<CoverPick>,
    /// Index into the input group slice for each pick.
    pub selected_positions: Vec<usize>,
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct HeapKey {
    overlap: usize,
    query: std::cmp::Reverse<u64>,
    pos: std::cmp::Reverse<usize>,
}

/// Greedy set cover over `corpus_ids`.
///
/// Each step takes the group whose members overlap the uncovered set the
/// most, ties going to the smaller query id. Overlap counts only shrink, so
/// a max-heap of possibly stale counts is re-validated on pop instead of
/// rescanning every group per step.
pub fn greedy_cover<G: GroupMembers>(
    groups: &[G],
    corpus_ids: &BTreeSet<u64>,
) -> Result<CoverState, GroupError> {
    let members: Vec<Vec<u64>> = groups
        .iter()
        .map(|g| {
            let mut m: Vec<u64> = g.members().to_vec();
            m.sort_unstable();
            m.dedup();
            m
        })
        .collect();

    let coverable: HashSet<u64> = members.iter().flatten().copied().collect();
    if let Some(id) = corpus_ids.iter().find(|id| !coverable.contains(id)) {
        return Err(GroupError::Uncoverable(*id));
    }

    let mut uncovered: HashSet<u64> = corpus_ids.iter().copied().collect();
    let overlap = |m: &[u64], unc: &HashSet<u64>| m.iter().filter(|x| unc.contains(x)).count();

    let mut heap: BinaryHeap<HeapKey> = members
        .iter()
        .enumerate()
        .map(|(pos, m)| HeapKey {
            overlap: overlap(m, &uncovered),
            query: std::cmp::Reverse(groups[pos].query_id()),
            pos: std::cmp::Reverse(pos),
        })
        .filter(|k| k.overlap > 0)
        .collect();

    let mut state = CoverState::default();
    while !uncovered.is_empty() {
        let Some(top) = heap.pop() else { break };
        let pos = top.pos.0;
        let fresh = overlap(&members[pos], &uncovered);
        if fresh == 0 {
            continue;
        }
        if fresh < top.overlap {
            heap.push(HeapKey {
                overlap: fresh,
                ..top
            });
            continue;
        }
        for m in &members[pos] {
            uncovered.remove(m);
        }
        state.picks.push(CoverPick {
            rank: state.picks.len(),
            query_id: top.query.0,
            newly_covered: fresh,
        });
        state.selected.push(top.query.0);
        state.selected_positions.push(pos);
    }
    state.uncovered = uncovered.into_iter().collect();
    Ok(state)
}
