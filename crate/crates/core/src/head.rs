//! Term-importance and expansion scoring head.
//!
//! Queries become sparse vectors over their own terms, weighted by
//! `ln(1 + softplus(theta_q . f_i))` and summed over repeated occurrences.
//! Documents become dense vocabulary-length vectors: every token embedding is
//! projected onto the whole vocabulary, scaled by its importance, max-pooled
//! over positions per vocabulary term, and gated by a per-document quality
//! factor `sigmoid(theta_c . cls)`. Relevance is the dot product of the two.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncodedSequence, Encoder};
use crate::error::{Error, Result};
use crate::lexicon::{TermId, TokenizedText};
use crate::math::{dot, gaussian_vec, sigmoid, softplus, write_f64s};

pub const INIT_STD: f64 = 0.02;

/// Non-negative, unbounded, log-damped term importance.
#[inline]
pub fn importance(logit: f64) -> f64 {
    softplus(logit).ln_1p()
}

/// Derivative of [`importance`] with respect to its logit.
#[inline]
pub fn importance_grad(logit: f64) -> f64 {
    sigmoid(logit) / (1.0 + softplus(logit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpicHead {
    pub dim: usize,
    pub vocab_size: usize,
    /// Query term importance weights (`dim`).
    pub query_importance: Vec<f64>,
    /// Vocabulary projection, `vocab_size x dim` row-major.
    pub expansion: Vec<f64>,
    /// Document term importance weights (`dim`).
    pub doc_importance: Vec<f64>,
    /// Document quality weights applied to the CLS embedding (`dim`).
    pub quality: Vec<f64>,
}

/// Parameter blocks in checkpoint order.
pub const BLOCK_NAMES: [&str; 4] = ["query_importance", "expansion", "doc_importance", "quality"];

impl EpicHead {
    pub fn init(dim: usize, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query_importance = gaussian_vec(&mut rng, dim, INIT_STD);
        let expansion = gaussian_vec(&mut rng, vocab_size * dim, INIT_STD);
        let doc_importance = gaussian_vec(&mut rng, dim, INIT_STD);
        let quality = gaussian_vec(&mut rng, dim, INIT_STD);
        Self {
            dim,
            vocab_size,
            query_importance,
            expansion,
            doc_importance,
            quality,
        }
    }

    /// Like [`EpicHead::init`], but the expansion matrix starts as the encoder's
    /// token embedding table scaled by `INIT_STD`, so each row initially
    /// favours contexts of its own token.
    pub fn init_tied(encoder: &Encoder, seed: u64) -> Self {
        let mut head = Self::init(encoder.dim(), encoder.vocab_size(), seed);
        head.expansion = encoder.token_embeddings().iter().map(|v| v * INIT_STD).collect();
        head
    }

    pub fn zeros(dim: usize, vocab_size: usize) -> Self {
        Self {
            dim,
            vocab_size,
            query_importance: vec![0.0; dim],
            expansion: vec![0.0; vocab_size * dim],
            doc_importance: vec![0.0; dim],
            quality: vec![0.0; dim],
        }
    }

    pub fn blocks(&self) -> [&Vec<f64>; 4] {
        [
            &self.query_importance,
            &self.expansion,
            &self.doc_importance,
            &self.quality,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.query_importance,
            &mut self.expansion,
            &mut self.doc_importance,
            &mut self.quality,
        ]
    }

    #[inline]
    pub fn expansion_row(&self, term: TermId) -> &[f64] {
        let start = term as usize * self.dim;
        &self.expansion[start..start + self.dim]
    }

    pub fn query_vector(&self, enc: &EncodedSequence, tokens: &TokenizedText) -> QueryVector {
        let mut weights = BTreeMap::new();
        for (f, &id) in enc.token_embeddings.iter().zip(&tokens.ids) {
            *weights.entry(id).or_insert(0.0) += importance(dot(&self.query_importance, f));
        }
        QueryVector {
            vocab_size: self.vocab_size,
            weights,
        }
    }

    pub fn quality_logit(&self, enc: &EncodedSequence) -> f64 {
        dot(&self.quality, &enc.cls_embedding)
    }

    pub fn quality_factor(&self, enc: &EncodedSequence) -> f64 {
        sigmoid(self.quality_logit(enc))
    }

    /// Per-position importances of the document tokens.
    pub fn doc_term_weights(&self, enc: &EncodedSequence) -> Vec<f64> {
        enc.token_embeddings
            .iter()
            .map(|f| importance(dot(&self.doc_importance, f)))
            .collect()
    }

    /// Dense document vector over the whole vocabulary.
    pub fn doc_vector(&self, enc: &EncodedSequence) -> Result<DocVector> {
        if enc.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let weights = self.doc_term_weights(enc);
        let quality = self.quality_factor(enc);
        let mut pooled = vec![f64::NEG_INFINITY; self.vocab_size];
        for (f, w) in enc.token_embeddings.iter().zip(&weights) {
            for (slot, row) in pooled.iter_mut().zip(self.expansion.chunks_exact(self.dim)) {
                let v = w * dot(row, f);
                if v > *slot {
                    *slot = v;
                }
            }
        }
        for v in pooled.iter_mut() {
            *v *= quality;
        }
        Ok(DocVector::Dense(pooled))
    }

    /// Document vector entries for `terms` only, bit-identical to the
    /// corresponding entries of [`EpicHead::doc_vector`].
    pub fn doc_vector_terms(&self, enc: &EncodedSequence, terms: &[TermId]) -> Result<Vec<f64>> {
        if enc.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let weights = self.doc_term_weights(enc);
        let quality = self.quality_factor(enc);
        Ok(terms
            .iter()
            .map(|&t| pool_term(self.expansion_row(t), enc, &weights).0 * quality)
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for block in self.blocks() {
            write_f64s(&mut out, block);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// Max over positions of `w_j * (row . f_j)`, with the first argmax.
pub(crate) fn pool_term(row: &[f64], enc: &EncodedSequence, weights: &[f64]) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (j, (f, w)) in enc.token_embeddings.iter().zip(weights).enumerate() {
        let v = w * dot(row, f);
        if v > best {
            best = v;
            arg = j;
        }
    }
    (best, arg)
}

/// Elementwise max over per-position scored projections, scaled by `quality`.
pub fn max_pool(quality: f64, scored: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = scored.first().ok_or(Error::EmptyDocument)?;
    let mut pooled = first.clone();
    for row in &scored[1..] {
        for (p, v) in pooled.iter_mut().zip(row) {
            if *v > *p {
                *p = *v;
            }
        }
    }
    pooled.iter_mut().for_each(|p| *p *= quality);
    Ok(pooled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    pub vocab_size: usize,
    pub weights: BTreeMap<TermId, f64>,
}

impl QueryVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn terms(&self) -> Vec<TermId> {
        self.weights.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DocVector {
    Dense(Vec<f64>),
    /// Ids strictly increasing.
    Pruned {
        vocab_size: usize,
        entries: Vec<(TermId, f64)>,
    },
}

impl DocVector {
    pub fn vocab_size(&self) -> usize {
        match self {
            DocVector::Dense(v) => v.len(),
            DocVector::Pruned { vocab_size, .. } => *vocab_size,
        }
    }

    pub fn get(&self, term: TermId) -> f64 {
        match self {
            DocVector::Dense(v) => v[term as usize],
            DocVector::Pruned { entries, .. } => entries
                .binary_search_by_key(&term, |e| e.0)
                .map(|i| entries[i].1)
                .unwrap_or(0.0),
        }
    }

    /// Stored values: every entry for dense, retained entries for pruned.
    pub fn values(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            DocVector::Dense(v) => Box::new(v.iter().copied()),
            DocVector::Pruned { entries, .. } => Box::new(entries.iter().map(|e| e.1)),
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        match self {
            DocVector::Dense(v) => v.clone(),
            DocVector::Pruned {
                vocab_size,
                entries,
            } => {
                let mut out = vec![0.0; *vocab_size];
                for &(t, v) in entries {
                    out[t as usize] = v;
                }
                out
            }
        }
    }
}

/// Dot product over the query's support only.
pub fn similarity(q: &QueryVector, d: &DocVector) -> Result<f64> {
    if q.vocab_size != d.vocab_size() {
        return Err(Error::VocabMismatch {
            left: q.vocab_size,
            right: d.vocab_size(),
        });
    }
    Ok(q.weights.iter().map(|(&t, w)| w * d.get(t)).sum())
}

/// Keeps the `r` largest (signed) values, ties to the lower id, output
/// sorted by id.
pub fn prune(d: &DocVector, r: usize) -> DocVector {
    let vocab_size = d.vocab_size();
    let mut entries: Vec<(TermId, f64)> = match d {
        DocVector::Dense(v) => v.iter().enumerate().map(|(i, &x)| (i as TermId, x)).collect(),
        DocVector::Pruned { entries, .. } => entries.clone(),
    };
    if r < entries.len() {
        let by_value = |a: &(TermId, f64), b: &(TermId, f64)| {
            b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
        };
        entries.select_nth_unstable_by(r - 1, by_value);
        entries.truncate(r);
        entries.sort_unstable_by_key(|e| e.0);
    }
    DocVector::Pruned {
        vocab_size,
        entries,
    }
}

/// Counts of stored values per 0.1-wide bin; each value lands in the bin it
/// rounds up to.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValueHistogram {
    /// Bin key `k` covers `((k-1)/10, k/10]`.
    pub bins: BTreeMap<i64, u64>,
    pub total: u64,
}

impl ValueHistogram {
    pub fn bin_of(value: f64) -> i64 {
        // Tolerance absorbs representation error such as 0.3 * 10 = 3.0000000000000004.
        (value * 10.0 - 1e-9).ceil() as i64
    }

    pub fn add(&mut self, value: f64) {
        *self.bins.entry(Self::bin_of(value)).or_default() += 1;
        self.total += 1;
    }

    pub fn count(&self, upper_edge: f64) -> u64 {
        self.bins.get(&Self::bin_of(upper_edge)).copied().unwrap_or(0)
    }

    /// Fraction of values at or below `edge`.
    pub fn fraction_at_or_below(&self, edge: f64) -> f64 {
        let cut = Self::bin_of(edge);
        let n: u64 = self.bins.range(..=cut).map(|(_, c)| c).sum();
        n as f64 / self.total.max(1) as f64
    }
}

pub fn value_histogram<'a, I>(docs: I) -> Result<ValueHistogram>
where
    I: IntoIterator<Item = &'a DocVector>,
{
    let mut hist = ValueHistogram::default();
    let mut seen = false;
    for doc in docs {
        seen = true;
        doc.values().for_each(|v| hist.add(v));
    }
    if !seen {
        return Err(Error::EmptyCorpus);
    }
    Ok(hist)
}
