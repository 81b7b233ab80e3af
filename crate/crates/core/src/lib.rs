//! Aspect sentiment triplet extraction as bidirectional multi-turn
//! reading comprehension.
//!
//! A sentence is read with three kinds of queries: a non-restrictive query
//! that extracts all aspects (or all opinions), a restrictive query that
//! extracts the opinions of one aspect (or the aspects of one opinion), and
//! a sentiment query per aspect. Both extraction orders run at inference
//! and their pair sets are fused.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod inference;
pub mod model;
pub mod queries;
pub mod tensor;
pub mod training;

pub use corpus::{AnnotatedSentence, DatasetSplit, Sentiment, SplitName, TokenSpan, Triplet};
pub use error::{Error, ParseError, Result};
pub use inference::{extract_triplets, InferenceConfig, TripletPrediction};
pub use model::{Model, Reader};
