//! Training the scoring head on (query, positive, negative) triples.
//!
//! The encoder stays frozen, so every text is encoded once and cached. The
//! loss is two-way softmax cross-entropy over the positive and negative
//! scores; gradients are accumulated over a batch and applied with Adam.
//! Validation re-ranks BM25 candidates and tracks MRR@10 for rollback and
//! cutoff selection.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::OnceLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bm25::InvertedIndex;
use crate::encoder::{EncodedText, Encoder};
use crate::error::{Error, Result};
use crate::eval::{reciprocal_rank, Qrels};
use crate::head::{importance, importance_grad, pool_term, EpicHead, BLOCK_NAMES};
use crate::lexicon::{TermId, Vocabulary};
use crate::math::{dot, sigmoid, softplus};
use crate::pipeline::merge_reranked;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

/// `query<TAB>positive_docid<TAB>negative_docid` lines.
pub fn parse_triples(text: &str, source: &str) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{source}:{}", n + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(loc(), "expected `query<TAB>positive<TAB>negative`"));
        }
        if fields[1] == fields[2] {
            return Err(Error::parse(loc(), "positive and negative are the same document"));
        }
        out.push(Triple {
            query: fields[0].to_owned(),
            positive: fields[1].to_owned(),
            negative: fields[2].to_owned(),
        });
    }
    Ok(out)
}

pub fn load_triples(path: &Path) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub cutoff_grid: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 16,
            eval_every: 512,
            patience: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            cutoff_grid: vec![10, 25, 50, 100],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("batch size, evaluation interval and patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if self.cutoff_grid.is_empty() || self.cutoff_grid.contains(&0) {
            return bad("cutoff grid must hold positive cutoffs");
        }
        Ok(())
    }

    pub fn first_stage_depth(&self) -> usize {
        self.cutoff_grid.iter().copied().max().unwrap_or(0)
    }
}

/// `ln(1 + exp(neg - pos))`: cross-entropy with the positive as the true class.
pub fn triple_loss(sim_pos: f64, sim_neg: f64) -> f64 {
    softplus(sim_neg - sim_pos)
}

/// Adam with bias correction. Moment buffers mirror the head's shape.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: EpicHead,
    second: EpicHead,
    step: u64,
}

impl Adam {
    pub fn new(config: &TrainConfig, head: &EpicHead) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            first: EpicHead::zeros(head.dim, head.vocab_size),
            second: EpicHead::zeros(head.dim, head.vocab_size),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort before anything changes.
    pub fn step(&mut self, head: &mut EpicHead, grads: &EpicHead) -> Result<()> {
        for (name, block) in BLOCK_NAMES.iter().zip(grads.blocks()) {
            if let Some(index) = block.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { block: name, index });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in head
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.first.blocks_mut())
            .zip(self.second.blocks_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One scored (query, document) pair with what backpropagation needs.
struct ScoreTrace {
    sim: f64,
    quality: f64,
    doc_logits: Vec<f64>,
    doc_weights: Vec<f64>,
    /// Per query term: (term, query weight, pooled max, argmax position).
    terms: Vec<(TermId, f64, f64, usize)>,
}

fn score_trace(head: &EpicHead, query: &EncodedText, doc: &EncodedText) -> Result<ScoreTrace> {
    if doc.enc.is_empty() {
        return Err(Error::EmptyDocument);
    }
    let q = head.query_vector(&query.enc, &query.tokens);
    let doc_logits: Vec<f64> = doc
        .enc
        .token_embeddings
        .iter()
        .map(|f| dot(&head.doc_importance, f))
        .collect();
    let doc_weights: Vec<f64> = doc_logits.iter().map(|&l| importance(l)).collect();
    let quality = head.quality_factor(&doc.enc);
    let mut sim = 0.0;
    let mut terms = Vec::with_capacity(q.len());
    for (&t, &w) in &q.weights {
        let (pooled, arg) = pool_term(head.expansion_row(t), &doc.enc, &doc_weights);
        sim += w * (pooled * quality);
        terms.push((t, w, pooled, arg));
    }
    Ok(ScoreTrace {
        sim,
        quality,
        doc_logits,
        doc_weights,
        terms,
    })
}

/// Adds `scale * d sim / d params` into `grads`.
fn backprop(head: &EpicHead, trace: &ScoreTrace, query: &EncodedText, doc: &EncodedText, scale: f64, grads: &mut EpicHead) {
    let c = trace.quality;
    let dim = head.dim;
    let mut quality_logit_grad = 0.0;
    for &(t, wq, pooled, arg) in &trace.terms {
        let f = &doc.enc.token_embeddings[arg];
        let wd = trace.doc_weights[arg];
        let psi = dot(head.expansion_row(t), f);
        let up = scale * wq;
        // phi_d(t) = c * wd * psi
        let row = &mut grads.expansion[t as usize * dim..(t as usize + 1) * dim];
        for (g, x) in row.iter_mut().zip(f) {
            *g += up * c * wd * x;
        }
        let dlogit = up * c * psi * importance_grad(trace.doc_logits[arg]);
        for (g, x) in grads.doc_importance.iter_mut().zip(f) {
            *g += dlogit * x;
        }
        quality_logit_grad += up * pooled * c * (1.0 - c);
    }
    for (g, x) in grads.quality.iter_mut().zip(&doc.enc.cls_embedding) {
        *g += quality_logit_grad * x;
    }
    // Query side: each occurrence contributes importance(theta_q . f_i) * phi_d(t_i).
    let phi_d = |t: TermId| {
        trace
            .terms
            .iter()
            .find(|e| e.0 == t)
            .map_or(0.0, |e| e.2 * c)
    };
    for (f, &t) in query.enc.token_embeddings.iter().zip(&query.tokens.ids) {
        let d = scale * phi_d(t) * importance_grad(dot(&head.query_importance, f));
        for (g, x) in grads.query_importance.iter_mut().zip(f) {
            *g += d * x;
        }
    }
}

/// An encoded training triple.
#[derive(Debug, Clone, Copy)]
pub struct TripleRef<'a> {
    pub query: &'a EncodedText,
    pub positive: &'a EncodedText,
    pub negative: &'a EncodedText,
}

pub fn similarity_of(head: &EpicHead, query: &EncodedText, doc: &EncodedText) -> Result<f64> {
    score_trace(head, query, doc).map(|t| t.sim)
}

/// Mean loss over `batch`, adding the gradient of that mean into `grads`.
pub fn accumulate_gradients(head: &EpicHead, batch: &[TripleRef<'_>], grads: &mut EpicHead) -> Result<f64> {
    let n = batch.len() as f64;
    let mut total = 0.0;
    for t in batch {
        let pos = score_trace(head, t.query, t.positive)?;
        let neg = score_trace(head, t.query, t.negative)?;
        total += triple_loss(pos.sim, neg.sim);
        let g = sigmoid(neg.sim - pos.sim) / n;
        backprop(head, &pos, t.query, t.positive, -g, grads);
        backprop(head, &neg, t.query, t.negative, g, grads);
    }
    Ok(total / n)
}

pub fn batch_loss(head: &EpicHead, batch: &[TripleRef<'_>]) -> Result<f64> {
    let mut total = 0.0;
    for t in batch {
        let pos = similarity_of(head, t.query, t.positive)?;
        let neg = similarity_of(head, t.query, t.negative)?;
        total += triple_loss(pos, neg);
    }
    Ok(total / batch.len() as f64)
}

pub fn analytic_gradients(head: &EpicHead, batch: &[TripleRef<'_>]) -> Result<EpicHead> {
    let mut grads = EpicHead::zeros(head.dim, head.vocab_size);
    accumulate_gradients(head, batch, &mut grads)?;
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Block and index of the worst entry.
    pub worst: (&'static str, usize),
    pub passed: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_FLOOR: f64 = 1e-6;
const EXPANSION_SAMPLES: usize = 48;

/// Compares analytic gradients with central differences on every entry of
/// the three weight vectors and on sampled projection entries.
pub fn grad_check(head: &EpicHead, batch: &[TripleRef<'_>], tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(head, batch, tolerance, seed, analytic_gradients)
}

/// [`grad_check`] against an arbitrary gradient routine.
pub fn grad_check_with<F>(head: &EpicHead, batch: &[TripleRef<'_>], tolerance: f64, seed: u64, analytic: F) -> Result<GradCheckReport>
where
    F: Fn(&EpicHead, &[TripleRef<'_>]) -> Result<EpicHead>,
{
    let grads = analytic(head, batch)?;
    let mut probes: Vec<(usize, usize)> = Vec::new();
    for block in [0, 2, 3] {
        probes.extend((0..head.dim).map(|i| (block, i)));
    }
    // Projection rows that the queries touch carry signal; others must be zero.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<TermId> = batch.iter().flat_map(|t| t.query.tokens.ids.iter().copied()).collect();
    rows.sort_unstable();
    rows.dedup();
    for k in 0..EXPANSION_SAMPLES {
        let row = if k % 3 != 2 && !rows.is_empty() {
            *rows.choose(&mut rng).expect("non-empty")
        } else {
            rng.gen_range(0..head.vocab_size as TermId)
        };
        probes.push((1, row as usize * head.dim + rng.gen_range(0..head.dim)));
    }

    let mut probe_head = head.clone();
    let mut worst = (0.0, (BLOCK_NAMES[0], 0));
    for &(block, i) in &probes {
        let original = probe_head.blocks()[block][i];
        probe_head.blocks_mut()[block][i] = original + GRAD_CHECK_STEP;
        let plus = batch_loss(&probe_head, batch)?;
        probe_head.blocks_mut()[block][i] = original - GRAD_CHECK_STEP;
        let minus = batch_loss(&probe_head, batch)?;
        probe_head.blocks_mut()[block][i] = original;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let exact = grads.blocks()[block][i];
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 {
            worst = (rel, (BLOCK_NAMES[block], i));
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        checked: probes.len(),
        worst: worst.1,
        passed: worst.0 < tolerance,
    })
}

/// Read-only resources shared by training and validation.
pub struct TrainContext<'a> {
    pub vocab: &'a Vocabulary,
    pub encoder: &'a Encoder,
    pub index: &'a InvertedIndex,
    /// Document texts by index ordinal.
    pub doc_texts: &'a [String],
    cache: Vec<OnceLock<EncodedText>>,
}

impl<'a> TrainContext<'a> {
    pub fn new(vocab: &'a Vocabulary, encoder: &'a Encoder, index: &'a InvertedIndex, doc_texts: &'a [String]) -> Result<Self> {
        if doc_texts.len() != index.doc_count() {
            return Err(Error::InvalidConfig(format!(
                "{} document texts for an index of {} documents",
                doc_texts.len(),
                index.doc_count()
            )));
        }
        encoder.check_vocab(vocab)?;
        Ok(Self {
            vocab,
            encoder,
            index,
            doc_texts,
            cache: (0..doc_texts.len()).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn encode(&self, text: &str) -> EncodedText {
        EncodedText::new(self.encoder, self.vocab, text)
    }

    pub fn doc(&self, ordinal: u32) -> &EncodedText {
        self.cache[ordinal as usize].get_or_init(|| self.encode(&self.doc_texts[ordinal as usize]))
    }

    fn ordinal(&self, doc_id: &str) -> Result<u32> {
        self.index
            .ordinal(doc_id)
            .ok_or_else(|| Error::UnknownDocId(doc_id.to_owned()))
    }
}

struct ValidationQuery {
    qid: String,
    query: EncodedText,
    candidates: Vec<(u32, String, f64)>,
}

/// BM25 candidates for the judged validation queries. Candidate lists do
/// not depend on the head, so they are fetched once.
struct Validation {
    queries: Vec<ValidationQuery>,
    grid: Vec<usize>,
}

impl Validation {
    fn new(ctx: &TrainContext<'_>, queries: &[(String, String)], qrels: &Qrels, config: &TrainConfig) -> Result<Self> {
        let depth = config.first_stage_depth();
        let queries: Vec<ValidationQuery> = queries
            .iter()
            .filter(|(qid, _)| qrels.has_relevant(qid))
            .map(|(qid, text)| ValidationQuery {
                qid: qid.clone(),
                query: ctx.encode(text),
                candidates: ctx
                    .index
                    .search(text, ctx.vocab, depth)
                    .into_iter()
                    .map(|h| (h.ordinal, h.doc_id, h.score))
                    .collect(),
            })
            .collect();
        if queries.is_empty() {
            return Err(Error::NoJudgedQueries);
        }
        let mut grid = config.cutoff_grid.clone();
        grid.sort_unstable();
        grid.dedup();
        Ok(Self { queries, grid })
    }

    /// MRR@10 per grid cutoff.
    fn evaluate(&self, head: &EpicHead, ctx: &TrainContext<'_>, qrels: &Qrels) -> Result<Vec<f64>> {
        let max_cut = *self.grid.last().expect("grid non-empty");
        let per_query: Vec<Vec<f64>> = self
            .queries
            .par_iter()
            .map(|vq| {
                let q = head.query_vector(&vq.query.enc, &vq.query.tokens);
                let terms = q.terms();
                let head_len = max_cut.min(vq.candidates.len());
                let scores = vq.candidates[..head_len]
                    .iter()
                    .map(|(ord, _, _)| {
                        let doc = ctx.doc(*ord);
                        if doc.enc.is_empty() {
                            return Ok(0.0);
                        }
                        let values = head.doc_vector_terms(&doc.enc, &terms)?;
                        Ok(q.weights.values().zip(values).map(|(w, v)| w * v).sum())
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let cands: Vec<(String, f64)> = vq.candidates.iter().map(|(_, id, s)| (id.clone(), *s)).collect();
                Ok(self
                    .grid
                    .iter()
                    .map(|&cut| {
                        let ranked = merge_reranked(&cands, &scores[..cut.min(head_len)], cut);
                        reciprocal_rank(ranked.iter().map(|r| r.0.as_str()), &vq.qid, qrels)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let n = self.queries.len() as f64;
        Ok((0..self.grid.len())
            .map(|g| per_query.iter().map(|rr| rr[g]).sum::<f64>() / n)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub triples_seen: usize,
    pub mrr: f64,
    pub cutoff: usize,
    /// Mean training loss since the previous evaluation (NaN before training).
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: EpicHead,
    pub rerank_cutoff: usize,
    pub best_mrr: f64,
    pub initial_mrr: f64,
    pub evaluations: Vec<Evaluation>,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Trains `head` on `triples` in order, validating every `eval_every`
/// triples (and once before the first step), and returns the best head seen.
pub fn train(
    mut head: EpicHead,
    ctx: &TrainContext<'_>,
    triples: &[Triple],
    valid_queries: &[(String, String)],
    valid_qrels: &Qrels,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if triples.is_empty() {
        return Err(Error::NoTriples);
    }
    if head.vocab_size != ctx.vocab.len() || head.dim != ctx.encoder.dim() {
        return Err(Error::VocabMismatch {
            left: head.vocab_size,
            right: ctx.vocab.len(),
        });
    }
    let validation = Validation::new(ctx, valid_queries, valid_qrels, config)?;
    let resolved: Vec<(EncodedText, u32, u32)> = triples
        .iter()
        .map(|t| Ok((ctx.encode(&t.query), ctx.ordinal(&t.positive)?, ctx.ordinal(&t.negative)?)))
        .collect::<Result<_>>()?;

    let evaluate = |head: &EpicHead, seen: usize, mean_loss: f64| -> Result<Evaluation> {
        let per_cut = validation.evaluate(head, ctx, valid_qrels)?;
        let (best, mrr) = per_cut
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &m)| if m > acc.1 { (i, m) } else { acc });
        let e = Evaluation {
            triples_seen: seen,
            mrr,
            cutoff: validation.grid[best],
            mean_loss,
        };
        info!("triples {seen}: validation MRR@10 {mrr:.4} at cutoff {} (loss {mean_loss:.4})", e.cutoff);
        Ok(e)
    };

    let first = evaluate(&head, 0, f64::NAN)?;
    let initial_mrr = first.mrr;
    let mut best = (first.clone(), head.clone());
    let mut evaluations = vec![first];
    let mut stale = 0;
    let mut stopped_early = false;

    let mut adam = Adam::new(config, &head);
    let mut grads = EpicHead::zeros(head.dim, head.vocab_size);
    let mut seen = 0;
    let mut next_eval = config.eval_every;
    let mut window_loss = 0.0;
    let mut window_batches = 0usize;
    for chunk in resolved.chunks(config.batch_size) {
        let batch: Vec<TripleRef<'_>> = chunk
            .iter()
            .map(|(q, p, n)| TripleRef {
                query: q,
                positive: ctx.doc(*p),
                negative: ctx.doc(*n),
            })
            .collect();
        grads.blocks_mut().iter_mut().for_each(|b| b.fill(0.0));
        window_loss += accumulate_gradients(&head, &batch, &mut grads)?;
        window_batches += 1;
        adam.step(&mut head, &grads)?;
        seen += chunk.len();
        debug!("step {}: {seen} triples", adam.steps());

        if seen >= next_eval || seen == resolved.len() {
            while next_eval <= seen {
                next_eval += config.eval_every;
            }
            let e = evaluate(&head, seen, window_loss / window_batches as f64)?;
            window_loss = 0.0;
            window_batches = 0;
            if e.mrr > best.0.mrr {
                best = (e.clone(), head.clone());
                stale = 0;
            } else {
                stale += 1;
            }
            evaluations.push(e);
            if stale >= config.patience {
                stopped_early = seen < resolved.len();
                break;
            }
        }
    }
    let (best_eval, best_head) = best;
    Ok(TrainOutcome {
        head: best_head,
        rerank_cutoff: best_eval.cutoff,
        best_mrr: best_eval.mrr,
        initial_mrr,
        evaluations,
        steps: adam.steps(),
        stopped_early,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"EPICHEAD";
const CHECKPOINT_VERSION: u32 = 1;

/// Trained head plus the settings it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: EpicHead,
    pub config: TrainConfig,
    pub vocab_checksum: u64,
    pub rerank_cutoff: usize,
    pub validation_mrr: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut w = |v: u32| out.write_u32::<LittleEndian>(v).unwrap();
        w(CHECKPOINT_VERSION);
        w(self.head.dim as u32);
        w(self.head.vocab_size as u32);
        out.write_u64::<LittleEndian>(self.vocab_checksum).unwrap();
        out.write_u32::<LittleEndian>(self.rerank_cutoff as u32).unwrap();
        out.write_f64::<LittleEndian>(self.validation_mrr).unwrap();
        let c = &self.config;
        out.write_f64::<LittleEndian>(c.learning_rate).unwrap();
        for v in [c.batch_size, c.eval_every, c.patience] {
            out.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        for v in [c.beta1, c.beta2, c.epsilon] {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
        out.write_u64::<LittleEndian>(c.seed).unwrap();
        out.write_u32::<LittleEndian>(c.cutoff_grid.len() as u32).unwrap();
        for &g in &c.cutoff_grid {
            out.write_u32::<LittleEndian>(g as u32).unwrap();
        }
        out.write_u64::<LittleEndian>(self.head.param_count() as u64).unwrap();
        out.extend_from_slice(&self.head.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = || Error::Corrupt("checkpoint truncated or malformed".into());
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| corrupt())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("checkpoint magic not recognized".into()));
        }
        let u32_ = |c: &mut Cursor<&[u8]>| c.read_u32::<LittleEndian>().map_err(|_| corrupt());
        let u64_ = |c: &mut Cursor<&[u8]>| c.read_u64::<LittleEndian>().map_err(|_| corrupt());
        let f64_ = |c: &mut Cursor<&[u8]>| c.read_f64::<LittleEndian>().map_err(|_| corrupt());
        if u32_(&mut cur)? != CHECKPOINT_VERSION {
            return Err(Error::Corrupt("unsupported checkpoint version".into()));
        }
        let dim = u32_(&mut cur)? as usize;
        let vocab_size = u32_(&mut cur)? as usize;
        let vocab_checksum = u64_(&mut cur)?;
        let rerank_cutoff = u32_(&mut cur)? as usize;
        let validation_mrr = f64_(&mut cur)?;
        let learning_rate = f64_(&mut cur)?;
        let batch_size = u32_(&mut cur)? as usize;
        let eval_every = u32_(&mut cur)? as usize;
        let patience = u32_(&mut cur)? as usize;
        let beta1 = f64_(&mut cur)?;
        let beta2 = f64_(&mut cur)?;
        let epsilon = f64_(&mut cur)?;
        let seed = u64_(&mut cur)?;
        let grid_len = u32_(&mut cur)? as usize;
        let cutoff_grid = (0..grid_len)
            .map(|_| u32_(&mut cur).map(|g| g as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut head = EpicHead::zeros(dim, vocab_size);
        if u64_(&mut cur)? != head.param_count() as u64 {
            return Err(Error::Corrupt("checkpoint parameter count does not match shape".into()));
        }
        for block in head.blocks_mut() {
            for v in block.iter_mut() {
                *v = f64_(&mut cur)?;
            }
        }
        if cur.position() as usize != bytes.len() {
            return Err(Error::Corrupt("checkpoint has trailing bytes".into()));
        }
        Ok(Self {
            head,
            config: TrainConfig {
                learning_rate,
                batch_size,
                eval_every,
                patience,
                beta1,
                beta2,
                epsilon,
                seed,
                cutoff_grid,
            },
            vocab_checksum,
            rerank_cutoff,
            validation_mrr,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.checksum() != self.vocab_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.vocab_checksum,
                actual: vocab.checksum(),
            });
        }
        Ok(())
    }
}
