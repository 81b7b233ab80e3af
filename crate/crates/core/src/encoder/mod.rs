//! Contextual encoder for `[CLS] query [SEP] sentence` inputs.
//!
//! A small from-scratch transformer: summed word, position, and segment
//! embeddings followed by stacked post-norm self-attention blocks. All
//! arithmetic is `f64` and every layer has an exact hand-written backward
//! pass so gradients can be verified against finite differences.

mod block;
mod vocab;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use block::{BlockCache, BlockParams};
pub use vocab::{Vocabulary, BEGIN_TOKEN, SEGMENT_TOKEN, UNKNOWN_TOKEN};

use crate::corpus::AnnotatedSentence;
use crate::error::{Error, Result};
use crate::queries::Query;
use crate::tensor::Matrix;

/// Standard deviation of the weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_h: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_len: 128,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len < 3 {
            return Err(Error::Config("encoder widths must be positive and max_len >= 3".into()));
        }
        if !self.d_h.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_h {} is not divisible by n_heads {}",
                self.d_h, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Token ids and segment ids of `[CLS] q_1..q_m [SEP] x_1..x_n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinedInput {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub query_len: usize,
}

impl CombinedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of sentence tokens.
    pub fn sentence_len(&self) -> usize {
        self.ids.len() - self.query_len - 2
    }

    /// Row of the first sentence token.
    pub fn sentence_offset(&self) -> usize {
        self.query_len + 2
    }
}

pub fn build_combined_input(
    query: &Query,
    sentence: &AnnotatedSentence,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<CombinedInput> {
    let len = query.len() + sentence.len() + 2;
    if len > max_len {
        return Err(Error::Overlength {
            id: sentence.id.clone(),
            len,
            max_len,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(Vocabulary::BEGIN);
    ids.extend(query.tokens.iter().map(|t| vocab.id(t)));
    ids.push(Vocabulary::SEGMENT);
    ids.extend(sentence.tokens.iter().map(|t| vocab.id(t)));
    let mut segments = vec![0; query.len() + 2];
    segments.resize(len, 1);
    Ok(CombinedInput {
        ids,
        segments,
        query_len: query.len(),
    })
}

/// Final-layer activations, one row per combined-input position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSequence(pub Matrix);

impl HiddenSequence {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }
}

pub enum Mode<'a> {
    Eval,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub word: Matrix,
    pub position: Matrix,
    pub segment: Matrix,
    pub blocks: Vec<BlockParams>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    ids: Vec<usize>,
    segments: Vec<usize>,
    blocks: Vec<BlockCache>,
}

impl EncoderCache {
    /// Attention weights of `layer`, one `len × len` matrix per head.
    pub fn attention_weights(&self, layer: usize) -> &[Matrix] {
        self.blocks[layer].attention_weights()
    }
}

impl EncoderParams {
    pub fn init(config: &EncoderConfig, vocab_size: usize, rng: &mut impl Rng) -> Self {
        let d = config.d_h;
        Self {
            word: Matrix::random_normal(vocab_size, d, INIT_STD, rng),
            position: Matrix::random_normal(config.max_len, d, INIT_STD, rng),
            segment: Matrix::random_normal(2, d, INIT_STD, rng),
            blocks: (0..config.n_layers)
                .map(|_| BlockParams::init(d, config.d_ff, INIT_STD, rng))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            word: Matrix::zeros(self.word.rows(), self.word.cols()),
            position: Matrix::zeros(self.position.rows(), self.position.cols()),
            segment: Matrix::zeros(self.segment.rows(), self.segment.cols()),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed.word".to_string(), &self.word),
            ("embed.position".to_string(), &self.position),
            ("embed.segment".to_string(), &self.segment),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BlockParams::NAMES.iter().zip(b.tensors()) {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.word, &mut self.position, &mut self.segment];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    /// Initial representations: word + position + segment rows.
    pub fn embed(&self, input: &CombinedInput) -> Result<Matrix> {
        let d = self.word.cols();
        if input.len() > self.position.rows() {
            return Err(Error::Overlength {
                id: String::new(),
                len: input.len(),
                max_len: self.position.rows(),
            });
        }
        let mut e = Matrix::zeros(input.len(), d);
        for (i, (&id, &seg)) in input.ids.iter().zip(&input.segments).enumerate() {
            if id >= self.word.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.word.rows(),
                });
            }
            if seg >= self.segment.rows() {
                return Err(Error::TokenOutOfRange {
                    id: seg,
                    size: self.segment.rows(),
                });
            }
            let row = e.row_mut(i);
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.word.get(id, c) + self.position.get(i, c) + self.segment.get(seg, c);
            }
        }
        Ok(e)
    }

    /// Runs the block stack over `embedded`.
    pub fn encode(
        &self,
        embedded: Matrix,
        config: &EncoderConfig,
        mut mode: Mode<'_>,
    ) -> Result<(HiddenSequence, Vec<BlockCache>)> {
        if !embedded.is_finite() {
            return Err(Error::NonFinite("embeddings".into()));
        }
        let mut x = embedded;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let rng: Option<&mut dyn RngCore> = match &mut mode {
                Mode::Eval => None,
                Mode::Train(r) => Some(&mut **r),
            };
            let (y, cache) = block.forward(&x, config.n_heads, config.dropout_rate, rng);
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("block {i}")));
            }
            caches.push(cache);
            x = y;
        }
        Ok((HiddenSequence(x), caches))
    }

    pub fn forward(
        &self,
        input: &CombinedInput,
        config: &EncoderConfig,
        mode: Mode<'_>,
    ) -> Result<(HiddenSequence, EncoderCache)> {
        let e = self.embed(input)?;
        let (h, blocks) = self.encode(e, config, mode)?;
        Ok((
            h,
            EncoderCache {
                ids: input.ids.clone(),
                segments: input.segments.clone(),
                blocks,
            },
        ))
    }

    /// Backpropagates `d_hidden` through the blocks and embeddings,
    /// accumulating into `grads`.
    pub fn backward(&self, cache: &EncoderCache, d_hidden: &Matrix, config: &EncoderConfig, grads: &mut EncoderParams) {
        let mut d = d_hidden.clone();
        for (i, block) in self.blocks.iter().enumerate().rev() {
            d = block.backward(&d, &cache.blocks[i], config.n_heads, &mut grads.blocks[i]);
        }
        for (i, (&id, &seg)) in cache.ids.iter().zip(&cache.segments).enumerate() {
            let g = d.row(i);
            for (dst, &v) in grads.word.row_mut(id).iter_mut().zip(g) {
                *dst += v;
            }
            for (dst, &v) in grads.position.row_mut(i).iter_mut().zip(g) {
                *dst += v;
            }
            for (dst, &v) in grads.segment.row_mut(seg).iter_mut().zip(g) {
                *dst += v;
            }
        }
    }
}
