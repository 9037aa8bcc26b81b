//! BM25 first-stage retrieval over an in-memory inverted index.
//!
//! By default terms are the shared vocabulary ids, with the special markers
//! (including the unknown-word sink) left unindexed. With stemming enabled
//! the index keeps its own Porter-stemmed term space.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Error, Result};
use crate::lexicon::{normalize, Vocabulary, PAD_ID};

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

const INDEX_MAGIC: &[u8; 8] = b"EPICBM25";
const INDEX_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const POSTINGS: &str = "postings.bin";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub stem: bool,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
            stem: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    params: Bm25Params,
    vocab_checksum: u64,
    /// Analyzed term -> posting list id. Unused when sharing the vocabulary.
    stemmed_terms: HashMap<String, u32>,
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    doc_ids: Vec<String>,
    ordinals: HashMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub ordinal: u32,
    pub doc_id: String,
    pub score: f64,
}

impl InvertedIndex {
    pub fn build<'a, I>(corpus: I, vocab: &Vocabulary, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let stemmer = params.stem.then(|| Stemmer::create(Algorithm::English));
        let mut index = Self {
            params,
            vocab_checksum: vocab.checksum(),
            stemmed_terms: HashMap::new(),
            postings: if params.stem {
                Vec::new()
            } else {
                vec![Vec::new(); vocab.len()]
            },
            doc_lengths: Vec::new(),
            avg_doc_length: 0.0,
            doc_ids: Vec::new(),
            ordinals: HashMap::new(),
        };
        for (doc_id, text) in corpus {
            let ordinal = index.doc_ids.len() as u32;
            if index.ordinals.insert(doc_id.to_owned(), ordinal).is_some() {
                return Err(Error::DuplicateDocId(doc_id.to_owned()));
            }
            index.doc_ids.push(doc_id.to_owned());

            let tokens = normalize(text);
            index.doc_lengths.push(tokens.len() as u32);
            let mut tfs: HashMap<u32, u32> = HashMap::new();
            for token in &tokens {
                let term = match &stemmer {
                    Some(s) => {
                        let stemmed = s.stem(token).into_owned();
                        let next = index.stemmed_terms.len() as u32;
                        let id = *index.stemmed_terms.entry(stemmed).or_insert(next);
                        if id as usize == index.postings.len() {
                            index.postings.push(Vec::new());
                        }
                        Some(id)
                    }
                    None => vocab.id(token).filter(|&id| id > PAD_ID),
                };
                if let Some(term) = term {
                    *tfs.entry(term).or_default() += 1;
                }
            }
            let mut tfs: Vec<(u32, u32)> = tfs.into_iter().collect();
            tfs.sort_unstable();
            for (term, tf) in tfs {
                index.postings[term as usize].push(Posting { doc: ordinal, tf });
            }
        }
        if index.doc_ids.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let total: u64 = index.doc_lengths.iter().map(|&l| l as u64).sum();
        index.avg_doc_length = total as f64 / index.doc_ids.len() as f64;
        Ok(index)
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn vocab_checksum(&self) -> u64 {
        self.vocab_checksum
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<u32> {
        self.ordinals.get(doc_id).copied()
    }

    fn term_id(&self, token: &str, vocab: &Vocabulary, stemmer: Option<&Stemmer>) -> Option<u32> {
        match stemmer {
            Some(s) => self.stemmed_terms.get(s.stem(token).as_ref()).copied(),
            None => vocab.id(token).filter(|&id| id > PAD_ID),
        }
    }

    /// Postings for an analyzed query token, if indexed.
    pub fn postings_for(&self, token: &str, vocab: &Vocabulary) -> &[Posting] {
        let stemmer = self.params.stem.then(|| Stemmer::create(Algorithm::English));
        self.term_id(token, vocab, stemmer.as_ref())
            .map(|t| self.postings[t as usize].as_slice())
            .unwrap_or(&[])
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top `k` documents by BM25, ties to the lower ordinal. Documents with
    /// score zero are not returned.
    pub fn search(&self, query: &str, vocab: &Vocabulary, k: usize) -> Vec<Hit> {
        let stemmer = self.params.stem.then(|| Stemmer::create(Algorithm::English));
        let Bm25Params { k1, b, .. } = self.params;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        // Each query occurrence contributes, so repeated terms count twice.
        for token in normalize(query) {
            let Some(term) = self.term_id(&token, vocab, stemmer.as_ref()) else {
                continue;
            };
            let postings = &self.postings[term as usize];
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for p in postings {
                let tf = p.tf as f64;
                let len = self.doc_lengths[p.doc as usize] as f64;
                let norm = k1 * (1.0 - b + b * len / self.avg_doc_length);
                *scores.entry(p.doc).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().filter(|&(_, s)| s > 0.0).collect();
        ranked.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
            .into_iter()
            .map(|(ordinal, score)| Hit {
                ordinal,
                doc_id: self.doc_ids[ordinal as usize].clone(),
                score,
            })
            .collect()
    }

    /// Writes `manifest.txt` and `postings.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = format!(
            "version={INDEX_VERSION}\nk1={}\nb={}\nstem={}\nvocab_checksum={:016x}\ndoc_count={}\n",
            self.params.k1,
            self.params.b,
            self.params.stem,
            self.vocab_checksum,
            self.doc_count()
        );
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;

        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.write_u32::<LittleEndian>(INDEX_VERSION)?;
        out.write_u32::<LittleEndian>(self.doc_ids.len() as u32)?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            write_str(&mut out, id)?;
            out.write_u32::<LittleEndian>(*len)?;
        }
        let mut stemmed: Vec<(&String, &u32)> = self.stemmed_terms.iter().collect();
        stemmed.sort_unstable_by_key(|e| *e.1);
        out.write_u32::<LittleEndian>(stemmed.len() as u32)?;
        for (term, _) in stemmed {
            write_str(&mut out, term)?;
        }
        out.write_u32::<LittleEndian>(self.postings.len() as u32)?;
        for list in &self.postings {
            out.write_u32::<LittleEndian>(list.len() as u32)?;
            for p in list {
                out.write_u32::<LittleEndian>(p.doc)?;
                out.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        let path = dir.join(POSTINGS);
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let fields: HashMap<&str, &str> = manifest
            .lines()
            .filter_map(|l| l.split_once('='))
            .collect();
        let field = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::parse(path.display().to_string(), format!("missing {key}")))
        };
        let bad = |key: &str| Error::parse(path.display().to_string(), format!("bad {key}"));
        let params = Bm25Params {
            k1: field("k1")?.parse().map_err(|_| bad("k1"))?,
            b: field("b")?.parse().map_err(|_| bad("b"))?,
            stem: field("stem")?.parse().map_err(|_| bad("stem"))?,
        };
        let vocab_checksum =
            u64::from_str_radix(field("vocab_checksum")?, 16).map_err(|_| bad("vocab_checksum"))?;

        let path = dir.join(POSTINGS);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let corrupt = || Error::Corrupt(format!("{} is truncated or malformed", path.display()));
        let mut cur = Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| corrupt())?;
        if &magic != INDEX_MAGIC || cur.read_u32::<LittleEndian>().map_err(|_| corrupt())? != INDEX_VERSION {
            return Err(corrupt());
        }
        let read_u32 = |cur: &mut Cursor<&[u8]>| cur.read_u32::<LittleEndian>().map_err(|_| corrupt());
        let docs = read_u32(&mut cur)?;
        let mut doc_ids = Vec::with_capacity(docs as usize);
        let mut doc_lengths = Vec::with_capacity(docs as usize);
        let mut ordinals = HashMap::with_capacity(docs as usize);
        for i in 0..docs {
            let id = read_str(&mut cur).ok_or_else(corrupt)?;
            ordinals.insert(id.clone(), i);
            doc_ids.push(id);
            doc_lengths.push(read_u32(&mut cur)?);
        }
        let n_stemmed = read_u32(&mut cur)?;
        let mut stemmed_terms = HashMap::with_capacity(n_stemmed as usize);
        for i in 0..n_stemmed {
            stemmed_terms.insert(read_str(&mut cur).ok_or_else(corrupt)?, i);
        }
        let n_lists = read_u32(&mut cur)?;
        let mut postings = Vec::with_capacity(n_lists as usize);
        for _ in 0..n_lists {
            let n = read_u32(&mut cur)?;
            let mut list = Vec::with_capacity(n as usize);
            for _ in 0..n {
                list.push(Posting {
                    doc: read_u32(&mut cur)?,
                    tf: read_u32(&mut cur)?,
                });
            }
            postings.push(list);
        }
        if docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        Ok(Self {
            params,
            vocab_checksum,
            stemmed_terms,
            postings,
            avg_doc_length: total as f64 / docs as f64,
            doc_lengths,
            doc_ids,
            ordinals,
        })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_str(cur: &mut Cursor<&[u8]>) -> Option<String> {
    let len = cur.read_u32::<LittleEndian>().ok()? as usize;
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf).ok()?;
    String::from_utf8(buf).ok()
}
