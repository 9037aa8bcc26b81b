//! End-to-end query processing: BM25 candidates, query representation,
//! stored document vectors and the final merged ranking.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::bm25::InvertedIndex;
use crate::encoder::{EncodedText, Encoder};
use crate::error::{Error, Result};
use crate::eval::{QueryRunner, RunFile, StageTimings};
use crate::head::{similarity, EpicHead};
use crate::lexicon::{TermId, Vocabulary, PAD_ID};
use crate::store::StoreReader;
use crate::training::Checkpoint;

/// Re-orders the first `cutoff` candidates by `epic_scores` (descending,
/// ties by doc id) and appends the rest in their original order. Appended
/// scores continue strictly below the re-scored block. With `cutoff == 0`
/// the candidates are returned untouched.
pub fn merge_reranked(candidates: &[(String, f64)], epic_scores: &[f64], cutoff: usize) -> Vec<(String, f64)> {
    let head_len = cutoff.min(candidates.len());
    if head_len == 0 {
        return candidates.to_vec();
    }
    debug_assert_eq!(epic_scores.len(), head_len);
    let mut block: Vec<(String, f64)> = candidates[..head_len]
        .iter()
        .zip(epic_scores)
        .map(|((id, _), &s)| (id.clone(), s))
        .collect();
    block.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let floor = block.last().map(|b| b.1).unwrap_or(0.0);
    block.extend(
        candidates[head_len..]
            .iter()
            .enumerate()
            .map(|(k, (id, _))| (id.clone(), floor - (k + 1) as f64)),
    );
    block
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineConfig {
    pub corpus: Option<PathBuf>,
    pub index: PathBuf,
    pub store: PathBuf,
    pub head: PathBuf,
    pub vocab: PathBuf,
    pub encoder: PathBuf,
    /// `None` uses the cutoff selected during training.
    pub rerank_cutoff: Option<usize>,
    pub first_stage_k: usize,
    pub prune_r: Option<usize>,
}

pub const DEFAULT_FIRST_STAGE_K: usize = 100;

impl PipelineConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut map = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(format!("config:{}", n + 1), "expected key=value"))?;
            map.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let path = |key: &str| -> Result<PathBuf> {
            map.get(key)
                .map(|v| base.join(v))
                .ok_or_else(|| Error::parse("config", format!("missing key {key}")))
        };
        let count = |key: &str| -> Result<Option<usize>> {
            map.get(key)
                .map(|v| v.parse().map_err(|_| Error::parse("config", format!("{key} must be a count"))))
                .transpose()
        };
        let cfg = Self {
            corpus: map.get("corpus").map(|v| base.join(v)),
            index: path("index")?,
            store: path("store")?,
            head: path("head")?,
            vocab: path("vocab")?,
            encoder: path("encoder")?,
            rerank_cutoff: count("rerank_cutoff")?,
            first_stage_k: count("first_stage_k")?.unwrap_or(DEFAULT_FIRST_STAGE_K),
            prune_r: count("prune_r")?,
        };
        for key in map.keys() {
            if !matches!(
                key.as_str(),
                "corpus" | "index" | "store" | "head" | "vocab" | "encoder" | "rerank_cutoff" | "first_stage_k" | "prune_r"
            ) {
                return Err(Error::parse("config", format!("unknown key {key}")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

pub struct Pipeline {
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub head: EpicHead,
    pub index: InvertedIndex,
    pub store: StoreReader,
    pub rerank_cutoff: usize,
    pub first_stage_k: usize,
}

impl Pipeline {
    pub fn open(cfg: &PipelineConfig) -> Result<Self> {
        for path in [&cfg.vocab, &cfg.encoder, &cfg.head, &cfg.store] {
            if !path.exists() {
                return Err(Error::io(path, std::io::ErrorKind::NotFound.into()));
            }
        }
        let vocab = Vocabulary::load(&cfg.vocab)?;
        let encoder = Encoder::load(&cfg.encoder)?;
        encoder.check_vocab(&vocab)?;
        let checkpoint = Checkpoint::load(&cfg.head)?;
        checkpoint.check_vocab(&vocab)?;
        let index = InvertedIndex::load(&cfg.index)?;
        if index.vocab_checksum() != vocab.checksum() {
            return Err(Error::ChecksumMismatch {
                expected: index.vocab_checksum(),
                actual: vocab.checksum(),
            });
        }
        let store = StoreReader::open(&cfg.store)?;
        let cutoff = cfg.rerank_cutoff.unwrap_or(checkpoint.rerank_cutoff);
        Self::from_parts(vocab, encoder, checkpoint.head, index, store, cutoff, cfg.first_stage_k)
    }

    pub fn from_parts(
        vocab: Vocabulary,
        encoder: Encoder,
        head: EpicHead,
        index: InvertedIndex,
        store: StoreReader,
        rerank_cutoff: usize,
        first_stage_k: usize,
    ) -> Result<Self> {
        if rerank_cutoff > first_stage_k {
            return Err(Error::InvalidConfig(format!(
                "rerank cutoff {rerank_cutoff} exceeds first-stage depth {first_stage_k}"
            )));
        }
        if store.vocab_size() != vocab.len() || head.vocab_size != vocab.len() {
            return Err(Error::VocabMismatch {
                left: vocab.len(),
                right: store.vocab_size(),
            });
        }
        Ok(Self {
            vocab,
            encoder,
            head,
            index,
            store,
            rerank_cutoff,
            first_stage_k,
        })
    }

    pub fn rerank_query(&self, text: &str) -> Result<Vec<(String, f64)>> {
        self.rerank_query_timed(text).map(|r| r.0)
    }

    pub fn rerank_query_timed(&self, text: &str) -> Result<(Vec<(String, f64)>, StageTimings)> {
        let mut timings = StageTimings::default();
        let start = Instant::now();
        // The query representation does not feed the first stage, so the two
        // run side by side and join before scoring.
        let (hits, query) = rayon::join(
            || self.index.search(text, &self.vocab, self.first_stage_k),
            || {
                let q = EncodedText::new(&self.encoder, &self.vocab, text);
                self.head.query_vector(&q.enc, &q.tokens)
            },
        );
        timings.first_stage = start.elapsed();

        let head_len = self.rerank_cutoff.min(hits.len());
        let start = Instant::now();
        let mut vectors = Vec::with_capacity(head_len);
        for hit in &hits[..head_len] {
            let record = self.store.read(hit.ordinal as u64);
            match record {
                Ok((id, v)) if id == hit.doc_id => vectors.push(v),
                Ok(_) | Err(Error::OrdinalOutOfRange { .. }) => {
                    return Err(Error::MissingRecord(hit.doc_id.clone()))
                }
                Err(e) => return Err(e),
            }
        }
        timings.fetch = start.elapsed();

        let start = Instant::now();
        let scores = vectors
            .iter()
            .map(|v| similarity(&query, v))
            .collect::<Result<Vec<f64>>>()?;
        let candidates: Vec<(String, f64)> = hits.into_iter().map(|h| (h.doc_id, h.score)).collect();
        let ranked = merge_reranked(&candidates, &scores, self.rerank_cutoff);
        timings.scoring = start.elapsed();
        Ok((ranked, timings))
    }

    /// Re-ranks every query; queries may run on parallel workers but the
    /// run file keeps input order.
    pub fn rerank_all(&self, queries: &[(String, String)]) -> Result<RunFile> {
        let rankings = queries
            .par_iter()
            .map(|(_, text)| self.rerank_query(text))
            .collect::<Result<Vec<_>>>()?;
        let mut run = RunFile::default();
        for ((qid, _), ranking) in queries.iter().zip(rankings) {
            run.push_ordered(qid, ranking);
        }
        Ok(run)
    }
}

impl QueryRunner for Pipeline {
    fn run_query(&self, query: &str) -> Result<StageTimings> {
        self.rerank_query_timed(query).map(|r| r.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExplainMode {
    Query,
    Document,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedTerm {
    pub term: String,
    pub id: TermId,
    pub weight: f64,
    /// True for vocabulary terms absent from the document text.
    pub expansion: bool,
}

/// Term weights behind a query or document representation.
///
/// Query mode lists the query vector entries, highest first. Document mode
/// lists the document's own terms with their vector values, followed by the
/// `top_k` highest-valued vocabulary terms that do not occur in the text.
pub fn explain(
    head: &EpicHead,
    encoder: &Encoder,
    vocab: &Vocabulary,
    text: &str,
    mode: ExplainMode,
    top_k: usize,
) -> Result<Vec<ExplainedTerm>> {
    let encoded = EncodedText::new(encoder, vocab, text);
    if encoded.enc.is_empty() {
        return Ok(Vec::new());
    }
    let by_weight = |a: &ExplainedTerm, b: &ExplainedTerm| b.weight.total_cmp(&a.weight).then_with(|| a.id.cmp(&b.id));
    let entry = |id: TermId, weight: f64, expansion: bool| ExplainedTerm {
        term: vocab.term(id).to_owned(),
        id,
        weight,
        expansion,
    };
    match mode {
        ExplainMode::Query => {
            let q = head.query_vector(&encoded.enc, &encoded.tokens);
            let mut out: Vec<ExplainedTerm> = q.weights.iter().map(|(&t, &w)| entry(t, w, false)).collect();
            out.sort_by(by_weight);
            Ok(out)
        }
        ExplainMode::Document => {
            let dense = head.doc_vector(&encoded.enc)?.to_dense();
            let present: BTreeSet<TermId> = encoded.tokens.ids[..encoded.enc.len()].iter().copied().collect();
            let mut own: Vec<ExplainedTerm> = present.iter().map(|&t| entry(t, dense[t as usize], false)).collect();
            own.sort_by(by_weight);
            let mut expansions: Vec<ExplainedTerm> = (PAD_ID + 1..vocab.len() as TermId)
                .filter(|t| !present.contains(t))
                .map(|t| entry(t, dense[t as usize], true))
                .collect();
            expansions.sort_by(by_weight);
            expansions.truncate(top_k);
            own.extend(expansions);
            Ok(own)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(ids: &[(&str, f64)]) -> Vec<(String, f64)> {
        ids.iter().map(|&(i, s)| (i.to_owned(), s)).collect()
    }

    #[test]
    fn zero_cutoff_is_identity() {
        let c = cands(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        assert_eq!(merge_reranked(&c, &[], 0), c);
    }

    #[test]
    fn inverts_when_epic_disagrees() {
        let c = cands(&[("a", 3.0), ("b", 2.0)]);
        let out = merge_reranked(&c, &[0.1, 0.9], 2);
        assert_eq!(out, cands(&[("b", 0.9), ("a", 0.1)]));
    }

    #[test]
    fn cutoff_one_keeps_tail_order() {
        let c = cands(&[("a", 3.0), ("b", 2.0), ("c", 1.0)]);
        let out = merge_reranked(&c, &[0.25], 1);
        let ids: Vec<&str> = out.iter().map(|o| o.0.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(out[0].1, 0.25);
        assert!(out.windows(2).all(|w| w[0].1 > w[1].1));
    }

    #[test]
    fn ties_break_by_doc_id_and_cutoff_beyond_list() {
        let c = cands(&[("z", 3.0), ("y", 2.0)]);
        let out = merge_reranked(&c, &[0.5, 0.5], 10);
        assert_eq!(out, cands(&[("y", 0.5), ("z", 0.5)]));
    }

    #[test]
    fn config_parsing() {
        let text = "# artifacts\nindex = idx\nstore=s.epic\nhead=h.ckpt\nvocab=v.txt\nencoder=e.bin\nfirst_stage_k=50\nrerank_cutoff = 20\n";
        let cfg = PipelineConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.index, PathBuf::from("/base/idx"));
        assert_eq!(cfg.rerank_cutoff, Some(20));
        assert_eq!(cfg.first_stage_k, 50);
        assert!(PipelineConfig::parse("index=x\nbogus=1", Path::new(".")).is_err());
        assert!(PipelineConfig::parse("index x", Path::new(".")).is_err());
    }
}
