//! Encoder plus heads, and the reader interface inference runs against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::AnnotatedSentence;
use crate::encoder::{build_combined_input, CombinedInput, EncoderConfig, EncoderParams, Mode, Vocabulary};
use crate::error::Result;
use crate::heads::{
    predict_sentiment, predict_span_probs, SentimentDistribution, SentimentHeadParams, SpanHeadParams,
    TokenSpanProbabilities,
};
use crate::queries::Query;
use crate::tensor::Matrix;

pub const SPAN_START: &str = "span.start";
pub const SPAN_END: &str = "span.end";
pub const SENTIMENT: &str = "sentiment";

/// Answers reading-comprehension queries over a sentence. Implemented by
/// [`Model`]; any other contextual encoder can stand in for inference.
pub trait Reader {
    fn answer_span(&self, query: &Query, sentence: &AnnotatedSentence) -> Result<TokenSpanProbabilities>;
    fn answer_sentiment(&self, query: &Query, sentence: &AnnotatedSentence) -> Result<SentimentDistribution>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub span: SpanHeadParams,
    pub sentiment: SentimentHeadParams,
}

impl ModelParams {
    pub fn init(config: &EncoderConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(config, vocab_size, &mut rng);
        let span = SpanHeadParams::init(config.d_h, &mut rng);
        let sentiment = SentimentHeadParams::init(config.d_h, &mut rng);
        Self {
            encoder,
            span,
            sentiment,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            span: self.span.zeros_like(),
            sentiment: self.sentiment.zeros_like(),
        }
    }

    /// Every tensor with its checkpoint name, in a fixed order shared with
    /// [`ModelParams::tensors_mut`].
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.named_tensors();
        out.push((SPAN_START.to_string(), &self.span.start));
        out.push((SPAN_END.to_string(), &self.span.end));
        out.push((SENTIMENT.to_string(), &self.sentiment.weights));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.push(&mut self.span.start);
        out.push(&mut self.span.end);
        out.push(&mut self.sentiment.weights);
        out
    }

    pub fn is_head_tensor(name: &str) -> bool {
        matches!(name, SPAN_START | SPAN_END | SENTIMENT)
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, vocab.len(), seed);
        Ok(Self { config, vocab, params })
    }

    pub fn input(&self, query: &Query, sentence: &AnnotatedSentence) -> Result<CombinedInput> {
        build_combined_input(query, sentence, &self.vocab, self.config.max_len)
    }
}

impl Reader for Model {
    fn answer_span(&self, query: &Query, sentence: &AnnotatedSentence) -> Result<TokenSpanProbabilities> {
        let input = self.input(query, sentence)?;
        let (h, _) = self.params.encoder.forward(&input, &self.config, Mode::Eval)?;
        predict_span_probs(&h, input.query_len, &self.params.span)
    }

    fn answer_sentiment(&self, query: &Query, sentence: &AnnotatedSentence) -> Result<SentimentDistribution> {
        let input = self.input(query, sentence)?;
        let (h, _) = self.params.encoder.forward(&input, &self.config, Mode::Eval)?;
        predict_sentiment(&h, &self.params.sentiment)
    }
}
