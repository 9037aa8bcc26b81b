//! Reference contextual encoder.
//!
//! A small pre-norm transformer: token embeddings scaled by `sqrt(dim)`,
//! sinusoidal positions, `layers` blocks of multi-head self-attention and a
//! GELU feed-forward, then a final layer norm. A CLS marker is prepended and
//! its output row is the classification embedding. Weights are drawn once
//! from a seeded generator and never trained.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lexicon::{TokenizedText, Vocabulary, CLS_ID};
use crate::math::{dot, gaussian_vec, write_f64s};

const MAGIC: &[u8; 8] = b"EPICENC1";
const VERSION: u32 = 1;
const LN_EPS: f64 = 1e-6;
/// Residual-branch output projections start at this fraction of the usual
/// `1/sqrt(fan_in)` scale, so token identity dominates the output.
const RESIDUAL_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            max_len: 128,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "embedding width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "max_len must be at least 2, got {}",
                self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub token_embeddings: Vec<Vec<f64>>,
    pub cls_embedding: Vec<f64>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_embeddings.is_empty()
    }
}

/// Tokens paired with their encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedText {
    pub tokens: TokenizedText,
    pub enc: EncodedSequence,
}

impl EncodedText {
    pub fn new(encoder: &Encoder, vocab: &Vocabulary, text: &str) -> Self {
        let tokens = vocab.tokenize(text);
        let enc = encoder.encode(&tokens);
        Self { tokens, enc }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    inputs: usize,
    outputs: usize,
    /// `outputs x inputs`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, scale: f64) -> Self {
        let std = scale / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: gaussian_vec(rng, inputs * outputs, std),
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    fn params(&self) -> [&Vec<f64>; 2] {
        [&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNorm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(self.gain.iter().zip(&self.bias))
            .map(|(v, (g, b))| (v - mean) * inv * g + b)
            .collect()
    }

    fn params(&self) -> [&Vec<f64>; 2] {
        [&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    attn_norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    ff_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl Block {
    fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self {
            attn_norm: LayerNorm::new(dim),
            query: Linear::init(rng, dim, dim, 1.0),
            key: Linear::init(rng, dim, dim, 1.0),
            value: Linear::init(rng, dim, dim, 1.0),
            attn_out: Linear::init(rng, dim, dim, RESIDUAL_SCALE),
            ff_norm: LayerNorm::new(dim),
            ff_in: Linear::init(rng, dim, 4 * dim, 1.0),
            ff_out: Linear::init(rng, 4 * dim, dim, RESIDUAL_SCALE),
        }
    }

    fn forward(&self, xs: &mut [Vec<f64>], heads: usize) {
        let dim = xs[0].len();
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let normed: Vec<Vec<f64>> = xs.iter().map(|x| self.attn_norm.apply(x)).collect();
        let qs: Vec<Vec<f64>> = normed.iter().map(|x| self.query.apply(x)).collect();
        let ks: Vec<Vec<f64>> = normed.iter().map(|x| self.key.apply(x)).collect();
        let vs: Vec<Vec<f64>> = normed.iter().map(|x| self.value.apply(x)).collect();

        let mut scores = vec![0.0; xs.len()];
        for (i, x) in xs.iter_mut().enumerate() {
            let mut mixed = vec![0.0; dim];
            for h in 0..heads {
                let span = h * head_dim..(h + 1) * head_dim;
                let q = &qs[i][span.clone()];
                for (s, k) in scores.iter_mut().zip(&ks) {
                    *s = dot(q, &k[span.clone()]) * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for (s, v) in scores.iter().zip(&vs) {
                    let w = s / total;
                    for (m, vv) in mixed[span.clone()].iter_mut().zip(&v[span.clone()]) {
                        *m += w * vv;
                    }
                }
            }
            for (xv, d) in x.iter_mut().zip(self.attn_out.apply(&mixed)) {
                *xv += d;
            }
        }

        for x in xs.iter_mut() {
            let hidden: Vec<f64> = self
                .ff_in
                .apply(&self.ff_norm.apply(x))
                .into_iter()
                .map(gelu)
                .collect();
            for (xv, d) in x.iter_mut().zip(self.ff_out.apply(&hidden)) {
                *xv += d;
            }
        }
    }

    fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(16);
        out.extend(self.attn_norm.params());
        for lin in [&self.query, &self.key, &self.value, &self.attn_out] {
            out.extend(lin.params());
        }
        out.extend(self.ff_norm.params());
        out.extend(self.ff_in.params());
        out.extend(self.ff_out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(16);
        out.extend(self.attn_norm.params_mut());
        for lin in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.attn_out,
        ] {
            out.extend(lin.params_mut());
        }
        out.extend(self.ff_norm.params_mut());
        out.extend(self.ff_in.params_mut());
        out.extend(self.ff_out.params_mut());
        out
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn positional(position: usize, dim: usize) -> impl Iterator<Item = f64> {
    (0..dim).map(move |i| {
        let freq = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = position as f64 / freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    vocab_size: usize,
    vocab_checksum: u64,
    /// `vocab_size x dim`, row-major.
    embeddings: Vec<f64>,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn init(config: EncoderConfig, vocab: &Vocabulary) -> Result<Self> {
        Self::init_raw(config, vocab.len(), vocab.checksum())
    }

    fn init_raw(config: EncoderConfig, vocab_size: usize, vocab_checksum: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embeddings = gaussian_vec(&mut rng, vocab_size * config.dim, 1.0);
        let blocks = (0..config.layers)
            .map(|_| Block::init(&mut rng, config.dim))
            .collect();
        Ok(Self {
            config,
            vocab_size,
            vocab_checksum,
            embeddings,
            blocks,
            final_norm: LayerNorm::new(config.dim),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Token embedding table, `vocab_size x dim`, row-major.
    pub fn token_embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_checksum(&self) -> u64 {
        self.vocab_checksum
    }

    /// Number of input tokens that survive truncation.
    pub fn capacity(&self) -> usize {
        self.config.max_len - 1
    }

    pub fn encode(&self, tokens: &TokenizedText) -> EncodedSequence {
        let dim = self.config.dim;
        let kept = tokens.ids.len().min(self.capacity());
        let scale = (dim as f64).sqrt();
        let mut xs: Vec<Vec<f64>> = std::iter::once(CLS_ID)
            .chain(tokens.ids[..kept].iter().copied())
            .enumerate()
            .map(|(pos, id)| {
                let row = &self.embeddings[id as usize * dim..(id as usize + 1) * dim];
                row.iter()
                    .zip(positional(pos, dim))
                    .map(|(e, p)| e * scale + p)
                    .collect()
            })
            .collect();
        for block in &self.blocks {
            block.forward(&mut xs, self.config.heads);
        }
        let mut rows = xs.iter().map(|x| self.final_norm.apply(x));
        let cls_embedding = rows.next().expect("CLS row present");
        EncodedSequence {
            token_embeddings: rows.collect(),
            cls_embedding,
        }
    }

    fn params(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.embeddings];
        for block in &self.blocks {
            out.extend(block.params());
        }
        out.extend(self.final_norm.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.embeddings];
        for block in &mut self.blocks {
            out.extend(block.params_mut());
        }
        out.extend(self.final_norm.params_mut());
        out
    }

    /// SHA-256 over all weights, truncated to 64 bits.
    pub fn weight_checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        for p in self.params() {
            for v in p {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let c = &self.config;
        for v in [VERSION, c.dim as u32, c.layers as u32, c.heads as u32, c.max_len as u32] {
            out.write_u32::<LittleEndian>(v).unwrap();
        }
        out.write_u64::<LittleEndian>(c.seed).unwrap();
        out.write_u32::<LittleEndian>(self.vocab_size as u32).unwrap();
        out.write_u64::<LittleEndian>(self.vocab_checksum).unwrap();
        let params = self.params();
        let total: usize = params.iter().map(|p| p.len()).sum();
        out.write_u64::<LittleEndian>(total as u64).unwrap();
        for p in params {
            write_f64s(&mut out, p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Corrupt(format!("encoder file: {what}"));
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut header = || cur.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"));
        let version = header()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let (dim, layers, heads, max_len) = (header()?, header()?, header()?, header()?);
        let seed = cur.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let vocab_size = cur.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let vocab_checksum = cur.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let total = cur.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header"))?;
        let config = EncoderConfig {
            dim: dim as usize,
            layers: layers as usize,
            heads: heads as usize,
            max_len: max_len as usize,
            seed,
        };
        // Shape comes from the header; values are overwritten below.
        let mut enc = Self::init_raw(config, vocab_size as usize, vocab_checksum)?;
        let expected: usize = enc.params().iter().map(|p| p.len()).sum();
        if expected as u64 != total {
            return Err(corrupt("parameter count does not match header"));
        }
        for p in enc.params_mut() {
            for v in p.iter_mut() {
                *v = cur
                    .read_f64::<LittleEndian>()
                    .map_err(|_| corrupt("truncated weights"))?;
            }
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let actual = vocab.checksum();
        if actual != self.vocab_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.vocab_checksum,
                actual,
            });
        }
        Ok(())
    }
}
