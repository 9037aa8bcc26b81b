//! Learned sparse re-ranking: query term importance, document expansion
//! over the vocabulary, a BM25 first stage and compact vector storage.

pub mod bm25;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod lexicon;
pub mod math;
pub mod pipeline;
pub mod store;
pub mod synthetic;
pub mod training;

pub use bm25::{Bm25Params, InvertedIndex};
pub use encoder::{EncodedText, Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use head::{similarity, DocVector, EpicHead, QueryVector};
pub use lexicon::{TermId, Vocabulary};
pub use pipeline::{Pipeline, PipelineConfig};
pub use training::{Checkpoint, TrainConfig};
