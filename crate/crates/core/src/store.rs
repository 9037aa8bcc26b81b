//! On-disk document vector store.
//!
//! ```text
//! header   magic "EPICVEC1" | version u32 | vocab_size u32 | flags u32 | doc_count u64
//! record   id_len u16 | id bytes (UTF-8) | payload
//! dense    vocab_size x binary16
//! pruned   r u32 | r x (term id u16, binary16), ids ascending
//! ```
//!
//! All integers and floats are little-endian. Record start offsets live in
//! a companion `<store>.off` file as `doc_count` u64 values.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use half::f16;
use log::warn;
use rayon::prelude::*;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::head::{prune, DocVector, EpicHead};
use crate::lexicon::{TermId, Vocabulary, MAX_VOCAB};

pub const MAGIC: &[u8; 8] = b"EPICVEC1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 28;
pub const FLAG_PRUNED: u32 = 1;

const PRECOMPUTE_CHUNK: usize = 256;

pub fn offsets_path(store: &Path) -> PathBuf {
    let mut name = store.as_os_str().to_owned();
    name.push(".off");
    PathBuf::from(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u32,
    pub vocab_size: u32,
    pub flags: u32,
    pub doc_count: u64,
}

impl StoreHeader {
    pub fn pruned(&self) -> bool {
        self.flags & FLAG_PRUNED != 0
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[..8].copy_from_slice(MAGIC);
        LittleEndian::write_u32(&mut out[8..12], self.version);
        LittleEndian::write_u32(&mut out[12..16], self.vocab_size);
        LittleEndian::write_u32(&mut out[16..20], self.flags);
        LittleEndian::write_u64(&mut out[20..28], self.doc_count);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN as usize {
            return Err(Error::Corrupt("store header truncated".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("store magic not recognized".into()));
        }
        let header = Self {
            version: LittleEndian::read_u32(&bytes[8..12]),
            vocab_size: LittleEndian::read_u32(&bytes[12..16]),
            flags: LittleEndian::read_u32(&bytes[16..20]),
            doc_count: LittleEndian::read_u64(&bytes[20..28]),
        };
        if header.version != VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported store version {}",
                header.version
            )));
        }
        if header.pruned() && header.vocab_size as usize > MAX_VOCAB {
            return Err(Error::Corrupt(
                "pruned store vocabulary exceeds 16-bit ids".into(),
            ));
        }
        Ok(header)
    }
}

/// Payload bytes of one dense record.
pub fn dense_payload_len(vocab_size: usize) -> usize {
    2 * vocab_size
}

/// Payload bytes of one pruned record with `r` entries.
pub fn pruned_payload_len(r: usize) -> usize {
    4 + 4 * r
}

/// Serializes one record. `pruned` selects the on-disk form; a dense vector
/// written to a pruned store is stored with all of its entries.
pub fn encode_record(doc_id: &str, vector: &DocVector, pruned: bool) -> Result<Vec<u8>> {
    let id = doc_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::InvalidConfig(format!("document id longer than 65535 bytes: {doc_id:?}")))?;
    let mut out = Vec::new();
    out.write_u16::<LittleEndian>(id_len)?;
    out.extend_from_slice(id);
    match (vector, pruned) {
        (DocVector::Dense(values), false) => {
            out.reserve(dense_payload_len(values.len()));
            for &v in values {
                out.write_u16::<LittleEndian>(f16::from_f64(v).to_bits())?;
            }
        }
        (DocVector::Pruned { .. }, false) => {
            return encode_record(doc_id, &DocVector::Dense(vector.to_dense()), false);
        }
        (_, true) => {
            let vocab_size = vector.vocab_size();
            if vocab_size > MAX_VOCAB {
                return Err(Error::VocabularyTooLarge(vocab_size));
            }
            let pruned_form;
            let entries = match vector {
                DocVector::Pruned { entries, .. } => entries,
                DocVector::Dense(_) => {
                    pruned_form = prune(vector, vocab_size);
                    let DocVector::Pruned { entries, .. } = &pruned_form else {
                        unreachable!()
                    };
                    entries
                }
            };
            out.write_u32::<LittleEndian>(entries.len() as u32)?;
            for &(t, v) in entries {
                out.write_u16::<LittleEndian>(t as u16)?;
                out.write_u16::<LittleEndian>(f16::from_f64(v).to_bits())?;
            }
        }
    }
    Ok(out)
}

pub fn decode_record(bytes: &[u8], header: &StoreHeader) -> Result<(String, DocVector)> {
    let truncated = || Error::Corrupt("store record truncated".into());
    if bytes.len() < 2 {
        return Err(truncated());
    }
    let id_len = LittleEndian::read_u16(bytes) as usize;
    let rest = bytes.get(2..2 + id_len).ok_or_else(truncated)?;
    let doc_id = std::str::from_utf8(rest)
        .map_err(|_| Error::Corrupt("document id is not UTF-8".into()))?
        .to_owned();
    let payload = &bytes[2 + id_len..];
    let vocab_size = header.vocab_size as usize;
    let half = |b: &[u8]| f16::from_bits(LittleEndian::read_u16(b)).to_f64();
    let vector = if header.pruned() {
        if payload.len() < 4 {
            return Err(truncated());
        }
        let r = LittleEndian::read_u32(payload) as usize;
        if r > vocab_size {
            return Err(Error::Corrupt(format!("record holds {r} entries for {vocab_size} terms")));
        }
        let body = &payload[4..];
        if body.len() < 4 * r {
            return Err(truncated());
        }
        if body.len() > 4 * r {
            return Err(Error::Corrupt("record has trailing bytes".into()));
        }
        let mut entries = Vec::with_capacity(r);
        for pair in body.chunks_exact(4) {
            let term = LittleEndian::read_u16(pair) as TermId;
            if entries.last().is_some_and(|&(prev, _)| prev >= term) || term as usize >= vocab_size {
                return Err(Error::Corrupt("pruned term ids not strictly increasing".into()));
            }
            entries.push((term, half(&pair[2..])));
        }
        DocVector::Pruned { vocab_size, entries }
    } else {
        if payload.len() < dense_payload_len(vocab_size) {
            return Err(truncated());
        }
        if payload.len() > dense_payload_len(vocab_size) {
            return Err(Error::Corrupt("record has trailing bytes".into()));
        }
        DocVector::Dense(payload.chunks_exact(2).map(half).collect())
    };
    Ok((doc_id, vector))
}

/// Append-only writer; offsets are written on [`StoreWriter::finish`].
pub struct StoreWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: StoreHeader,
    offsets: Vec<u64>,
    position: u64,
}

impl StoreWriter {
    pub fn create(path: &Path, vocab_size: usize, pruned: bool, doc_count: u64) -> Result<Self> {
        if pruned && vocab_size > MAX_VOCAB {
            return Err(Error::VocabularyTooLarge(vocab_size));
        }
        let header = StoreHeader {
            version: VERSION,
            vocab_size: vocab_size as u32,
            flags: if pruned { FLAG_PRUNED } else { 0 },
            doc_count,
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&header.to_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_owned(),
            out,
            header,
            offsets: Vec::with_capacity(doc_count as usize),
            position: HEADER_LEN,
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn append(&mut self, doc_id: &str, vector: &DocVector) -> Result<()> {
        if vector.vocab_size() != self.header.vocab_size as usize {
            return Err(Error::VocabMismatch {
                left: self.header.vocab_size as usize,
                right: vector.vocab_size(),
            });
        }
        let record = encode_record(doc_id, vector, self.header.pruned())?;
        self.append_raw(&record)
    }

    pub fn append_raw(&mut self, record: &[u8]) -> Result<()> {
        if self.offsets.len() as u64 == self.header.doc_count {
            return Err(Error::InvalidConfig(format!(
                "store declared {} documents",
                self.header.doc_count
            )));
        }
        self.offsets.push(self.position);
        self.out.write_all(record).map_err(|e| Error::io(&self.path, e))?;
        self.position += record.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64> {
        if self.offsets.len() as u64 != self.header.doc_count {
            return Err(Error::InvalidConfig(format!(
                "store declared {} documents but {} were written",
                self.header.doc_count,
                self.offsets.len()
            )));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        let off_path = offsets_path(&self.path);
        let mut bytes = Vec::with_capacity(self.offsets.len() * 8);
        for o in &self.offsets {
            bytes.write_u64::<LittleEndian>(*o)?;
        }
        fs::write(&off_path, bytes).map_err(|e| Error::io(&off_path, e))?;
        Ok(self.position)
    }
}

/// Random-access reader. Reads use positional I/O, so one reader can be
/// shared across threads.
#[derive(Debug)]
pub struct StoreReader {
    path: PathBuf,
    file: File,
    header: StoreHeader,
    offsets: Vec<u64>,
    file_len: u64,
}

impl StoreReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut head = [0u8; HEADER_LEN as usize];
        if file_len < HEADER_LEN {
            return Err(Error::Corrupt(format!("{}: header truncated", path.display())));
        }
        file.read_exact_at(&mut head, 0).map_err(|e| Error::io(path, e))?;
        let header = StoreHeader::parse(&head)?;

        let off_path = offsets_path(path);
        let raw = fs::read(&off_path).map_err(|e| Error::io(&off_path, e))?;
        if raw.len() as u64 != header.doc_count * 8 {
            return Err(Error::Corrupt(format!(
                "{}: expected {} offsets",
                off_path.display(),
                header.doc_count
            )));
        }
        let offsets: Vec<u64> = raw.chunks_exact(8).map(LittleEndian::read_u64).collect();
        let monotone = offsets.windows(2).all(|w| w[0] < w[1]);
        let in_bounds = offsets.first().is_none_or(|&o| o == HEADER_LEN)
            && offsets.last().map_or(file_len == HEADER_LEN, |&o| o < file_len);
        if !monotone || !in_bounds {
            return Err(Error::Corrupt(format!(
                "{}: offsets inconsistent with store of {file_len} bytes",
                off_path.display()
            )));
        }
        Ok(Self {
            path: path.to_owned(),
            file,
            header,
            offsets,
            file_len,
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn doc_count(&self) -> u64 {
        self.header.doc_count
    }

    pub fn vocab_size(&self) -> usize {
        self.header.vocab_size as usize
    }

    pub fn record_range(&self, ordinal: u64) -> Result<(u64, u64)> {
        let count = self.header.doc_count;
        if ordinal >= count {
            return Err(Error::OrdinalOutOfRange { ordinal, count });
        }
        let start = self.offsets[ordinal as usize];
        let end = self
            .offsets
            .get(ordinal as usize + 1)
            .copied()
            .unwrap_or(self.file_len);
        Ok((start, end))
    }

    /// Reads and decodes record `ordinal`, returning its document id.
    pub fn read(&self, ordinal: u64) -> Result<(String, DocVector)> {
        let (start, end) = self.record_range(ordinal)?;
        let mut buf = vec![0u8; (end - start) as usize];
        self.file
            .read_exact_at(&mut buf, start)
            .map_err(|e| Error::io(&self.path, e))?;
        decode_record(&buf, &self.header)
    }

    pub fn read_vector(&self, ordinal: u64) -> Result<DocVector> {
        self.read(ordinal).map(|r| r.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrecomputeSummary {
    pub doc_count: u64,
    pub bytes: u64,
    pub empty_docs: u64,
}

/// Encodes every document, builds its vector and writes the store in
/// corpus order. Work is spread over the current rayon pool; output is
/// identical for any worker count.
pub fn precompute<S: AsRef<str> + Sync>(
    head: &EpicHead,
    encoder: &Encoder,
    vocab: &Vocabulary,
    corpus: &[(S, S)],
    prune_r: Option<usize>,
    path: &Path,
) -> Result<PrecomputeSummary> {
    if head.vocab_size != vocab.len() {
        return Err(Error::VocabMismatch {
            left: head.vocab_size,
            right: vocab.len(),
        });
    }
    encoder.check_vocab(vocab)?;
    let mut writer = StoreWriter::create(path, vocab.len(), prune_r.is_some(), corpus.len() as u64)?;
    let mut empty_docs = 0;
    for chunk in corpus.chunks(PRECOMPUTE_CHUNK) {
        let records: Vec<Result<(Vec<u8>, bool)>> = chunk
            .par_iter()
            .map(|(id, text)| {
                let tokens = vocab.tokenize(text.as_ref());
                let enc = encoder.encode(&tokens);
                let (dense, empty) = match head.doc_vector(&enc) {
                    Ok(v) => (v, false),
                    Err(Error::EmptyDocument) => (DocVector::Dense(vec![0.0; vocab.len()]), true),
                    Err(e) => return Err(e),
                };
                let vector = match prune_r {
                    Some(r) => prune(&dense, r.max(1)),
                    None => dense,
                };
                Ok((encode_record(id.as_ref(), &vector, prune_r.is_some())?, empty))
            })
            .collect();
        for ((id, _), record) in chunk.iter().zip(records) {
            let (bytes, empty) = record?;
            if empty {
                warn!("document {:?} has no tokens; storing a zero vector", id.as_ref());
                empty_docs += 1;
            }
            writer.append_raw(&bytes)?;
        }
    }
    let doc_count = writer.header().doc_count;
    let bytes = writer.finish()?;
    Ok(PrecomputeSummary {
        doc_count,
        bytes,
        empty_docs,
    })
}
