//! Synthetic synonym corpus.
//!
//! Topics own a set of topic words and a few synonym pairs. Documents use
//! only the `a` form of a pair; queries use only the `b` form plus a group
//! word. Groups cut across topics, so a group holds a couple of documents
//! from every topic. BM25 sees nothing but the group word and ranks a whole
//! group at random, while a head that expands `b` forms toward their topic
//! can pick out the relevant document.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::training::Triple;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub groups: usize,
    pub words_per_topic: usize,
    pub synonyms_per_topic: usize,
    pub background_words: usize,
    pub docs_per_topic: usize,
    pub topic_tokens: usize,
    /// Distinct topic words a single document draws from (0 = all).
    pub topic_words_per_doc: usize,
    /// Occurrences of each document-side synonym in a document.
    pub synonym_tf: usize,
    pub background_tokens: usize,
    pub triples_per_query: usize,
    /// Of every `triples_per_query` negatives, how many come from the same topic.
    pub same_topic_negatives: usize,
    /// How many come from other groups (documents without the query's group word).
    pub other_group_negatives: usize,
    pub bench_queries: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            topics: 50,
            groups: 5,
            words_per_topic: 20,
            synonyms_per_topic: 5,
            background_words: 492,
            docs_per_topic: 10,
            topic_tokens: 45,
            topic_words_per_doc: 0,
            synonym_tf: 1,
            background_tokens: 10,
            triples_per_query: 5,
            same_topic_negatives: 0,
            other_group_negatives: 2,
            bench_queries: 2000,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Distinct terms the generator can emit, excluding specials.
    pub fn term_count(&self) -> usize {
        self.topics * (self.words_per_topic + 2 * self.synonyms_per_topic) + self.groups + self.background_words
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_owned()));
        let pairs = self.synonyms_per_topic * self.synonyms_per_topic.saturating_sub(1) / 2;
        if self.groups == 0 || !self.docs_per_topic.is_multiple_of(self.groups) {
            return bad("documents per topic must be a positive multiple of groups");
        }
        if self.docs_per_topic < 3 || pairs < self.docs_per_topic {
            return bad("need at least 3 documents per topic and one synonym pair combination per document");
        }
        if self.words_per_topic == 0 || self.background_words == 0 {
            return bad("topic and background word lists must be non-empty");
        }
        if self.topics < 2 || self.same_topic_negatives + self.other_group_negatives > self.triples_per_query {
            return bad("need two topics and no more special negatives than triples per query");
        }
        if self.other_group_negatives > 0 && self.groups < 2 {
            return bad("other-group negatives need at least two groups");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCollection {
    pub docs: Vec<(String, String)>,
    pub train_triples: Vec<Triple>,
    pub train_queries: Vec<(String, String)>,
    pub valid_queries: Vec<(String, String)>,
    pub valid_qrels: Qrels,
    pub test_queries: Vec<(String, String)>,
    pub test_qrels: Qrels,
    pub bench_queries: Vec<(String, String)>,
}

pub fn group_word(g: usize) -> String {
    format!("g{g}")
}

pub fn topic_word(t: usize, k: usize) -> String {
    format!("t{t}w{k}")
}

/// Document-side form of synonym pair `i` of topic `t`.
pub fn doc_synonym(t: usize, i: usize) -> String {
    format!("s{t}a{i}")
}

/// Query-side form of synonym pair `i` of topic `t`.
pub fn query_synonym(t: usize, i: usize) -> String {
    format!("s{t}b{i}")
}

pub fn background_word(n: usize) -> String {
    format!("bg{n}")
}

fn doc_id(t: usize, k: usize) -> String {
    format!("d{t:03}{k:02}")
}

fn query_text(group: usize, t: usize, (i, j): (usize, usize)) -> String {
    format!("{} {} {}", group_word(group), query_synonym(t, i), query_synonym(t, j))
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCollection> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Groups cut across topics: document k of every topic joins group k mod groups.
    let group_of = |k: usize| k % config.groups;
    let all_pairs: Vec<(usize, usize)> = (0..config.synonyms_per_topic)
        .flat_map(|i| (i + 1..config.synonyms_per_topic).map(move |j| (i, j)))
        .collect();

    let mut docs = Vec::with_capacity(config.topics * config.docs_per_topic);
    // (topic, pair) per document, aligned with `docs`.
    let mut doc_pairs = Vec::with_capacity(docs.capacity());
    for t in 0..config.topics {
        let mut pairs = all_pairs.clone();
        pairs.shuffle(&mut rng);
        for (k, &(i, j)) in pairs.iter().take(config.docs_per_topic).enumerate() {
            let mut tokens = Vec::new();
            for _ in 0..config.synonym_tf.max(1) {
                tokens.push(doc_synonym(t, i));
                tokens.push(doc_synonym(t, j));
            }
            let mut own: Vec<usize> = (0..config.words_per_topic).collect();
            own.shuffle(&mut rng);
            if config.topic_words_per_doc > 0 {
                own.truncate(config.topic_words_per_doc);
            }
            for _ in 0..rng.gen_range(1..=3) {
                tokens.push(group_word(group_of(k)));
            }
            for _ in 0..config.topic_tokens {
                tokens.push(topic_word(t, own[rng.gen_range(0..own.len())]));
            }
            for _ in 0..config.background_tokens {
                tokens.push(background_word(rng.gen_range(0..config.background_words)));
            }
            tokens.shuffle(&mut rng);
            docs.push((doc_id(t, k), tokens.join(" ")));
            doc_pairs.push((t, (i, j)));
        }
    }

    let mut train_queries = Vec::new();
    let mut valid_queries = Vec::new();
    let mut test_queries = Vec::new();
    let mut valid_qrels = Qrels::default();
    let mut test_qrels = Qrels::default();
    let mut train_targets = Vec::new();
    for (n, ((id, _), &(t, pair))) in docs.iter().zip(&doc_pairs).enumerate() {
        let k = n % config.docs_per_topic;
        let qid = format!("q{n:04}");
        let text = query_text(group_of(k), t, pair);
        if k == config.docs_per_topic - 2 {
            valid_qrels.insert(&qid, id, 1);
            valid_queries.push((qid, text));
        } else if k == config.docs_per_topic - 1 {
            test_qrels.insert(&qid, id, 1);
            test_queries.push((qid, text));
        } else {
            train_targets.push((n, text.clone()));
            train_queries.push((qid, text));
        }
    }

    // Held-out documents never serve as negatives, or the head could learn to
    // demote them.
    let train_docs = config.docs_per_topic - 2;
    let mut train_triples = Vec::new();
    for (n, text) in &train_targets {
        let (t, k) = (n / config.docs_per_topic, n % config.docs_per_topic);
        for r in 0..config.triples_per_query {
            let neg = if r < config.same_topic_negatives {
                let mut m = rng.gen_range(0..train_docs - 1);
                if m >= k {
                    m += 1;
                }
                t * config.docs_per_topic + m
            } else {
                let mut u = rng.gen_range(0..config.topics - 1);
                if u >= t {
                    u += 1;
                }
                let other_group = r < config.same_topic_negatives + config.other_group_negatives;
                let pool: Vec<usize> = (0..train_docs)
                    .filter(|&m| (group_of(m) == group_of(k)) != other_group)
                    .collect();
                let m = *pool.choose(&mut rng).expect("every group has training documents");
                u * config.docs_per_topic + m
            };
            train_triples.push(Triple {
                query: text.clone(),
                positive: docs[*n].0.clone(),
                negative: docs[neg].0.clone(),
            });
        }
    }
    train_triples.shuffle(&mut rng);

    let bench_queries = (0..config.bench_queries)
        .map(|n| {
            let t = rng.gen_range(0..config.topics);
            let pair = *all_pairs.choose(&mut rng).expect("pairs non-empty");
            (format!("b{n:05}"), query_text(rng.gen_range(0..config.groups), t, pair))
        })
        .collect();

    Ok(SyntheticCollection {
        docs,
        train_triples,
        train_queries,
        valid_queries,
        valid_qrels,
        test_queries,
        test_qrels,
        bench_queries,
    })
}

impl SyntheticCollection {
    /// Every text the vocabulary should cover: documents, then all queries.
    pub fn vocabulary_texts(&self) -> impl Iterator<Item = &str> {
        self.docs
            .iter()
            .map(|d| d.1.as_str())
            .chain(self.train_queries.iter().map(|q| q.1.as_str()))
            .chain(self.valid_queries.iter().map(|q| q.1.as_str()))
            .chain(self.test_queries.iter().map(|q| q.1.as_str()))
            .chain(self.bench_queries.iter().map(|q| q.1.as_str()))
    }

    /// Writes the collection as TSV files into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pairs = |rows: &[(String, String)]| {
            rows.iter().fold(String::new(), |mut s, (a, b)| {
                let _ = writeln!(s, "{a}\t{b}");
                s
            })
        };
        let triples = self.train_triples.iter().fold(String::new(), |mut s, t| {
            let _ = writeln!(s, "{}\t{}\t{}", t.query, t.positive, t.negative);
            s
        });
        let files = [
            ("corpus.tsv", pairs(&self.docs)),
            ("train_triples.tsv", triples),
            ("train_queries.tsv", pairs(&self.train_queries)),
            ("valid_queries.tsv", pairs(&self.valid_queries)),
            ("valid_qrels.tsv", self.valid_qrels.to_tsv()),
            ("test_queries.tsv", pairs(&self.test_queries)),
            ("test_qrels.tsv", self.test_qrels.to_tsv()),
            ("bench_queries.tsv", pairs(&self.bench_queries)),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn parse_corpus(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(format!("{source}:{}", n + 1), "expected `docid<TAB>text`"))?;
        out.push((id.to_owned(), body.to_owned()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}
