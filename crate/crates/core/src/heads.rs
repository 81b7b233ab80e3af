//! Answer heads: per-token start/end binary classifiers over sentence
//! positions, and a three-way sentiment classifier on the `[CLS]` row.
//! Heads are bias-free linear maps followed by softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentiment;
use crate::encoder::{HiddenSequence, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SpanHeadParams {
    /// `d_h × 2`
    pub start: Matrix,
    /// `d_h × 2`
    pub end: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentimentHeadParams {
    /// `d_h × 3`
    pub weights: Matrix,
}

impl SpanHeadParams {
    pub fn init(d_h: usize, rng: &mut impl Rng) -> Self {
        Self {
            start: Matrix::random_normal(d_h, 2, INIT_STD, rng),
            end: Matrix::random_normal(d_h, 2, INIT_STD, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            start: Matrix::zeros(self.start.rows(), 2),
            end: Matrix::zeros(self.end.rows(), 2),
        }
    }
}

impl SentimentHeadParams {
    pub fn init(d_h: usize, rng: &mut impl Rng) -> Self {
        Self {
            weights: Matrix::random_normal(d_h, 3, INIT_STD, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.rows(), 3),
        }
    }
}

/// Positive-class probabilities for each sentence token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSpanProbabilities {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

impl TokenSpanProbabilities {
    pub fn len(&self) -> usize {
        self.p_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_start.is_empty()
    }
}

/// Probabilities indexed by [`Sentiment::index`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentDistribution(pub [f64; 3]);

impl SentimentDistribution {
    pub fn probability(&self, s: Sentiment) -> f64 {
        self.0[s.index()]
    }

    /// Most probable class; ties go to the lower index.
    pub fn argmax(&self) -> (Sentiment, f64) {
        let mut best = 0;
        for i in 1..3 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        (Sentiment::from_index(best).expect("index < 3"), self.0[best])
    }
}

/// Logits `h · W` for a `d_h × k` weight matrix.
fn logits(h: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|c| h.iter().enumerate().map(|(r, x)| x * w.get(r, c)).sum())
        .collect()
}

fn check_span_shape(hidden: &HiddenSequence, query_len: usize, n_tokens: Option<usize>) -> Result<usize> {
    let rows = hidden.len();
    if rows < query_len + 3 {
        return Err(Error::Shape(format!(
            "hidden sequence of {rows} rows cannot hold a query of {query_len} tokens and a sentence"
        )));
    }
    let n = rows - query_len - 2;
    if let Some(expected) = n_tokens {
        if expected != n {
            return Err(Error::Shape(format!(
                "hidden sequence holds {n} sentence rows, labels cover {expected}"
            )));
        }
    }
    Ok(n)
}

/// Scores sentence rows `query_len + 2 ..` only.
pub fn predict_span_probs(
    hidden: &HiddenSequence,
    query_len: usize,
    params: &SpanHeadParams,
) -> Result<TokenSpanProbabilities> {
    let n = check_span_shape(hidden, query_len, None)?;
    let offset = query_len + 2;
    let mut p_start = Vec::with_capacity(n);
    let mut p_end = Vec::with_capacity(n);
    for i in 0..n {
        let h = hidden.row(offset + i);
        p_start.push(softmax(&logits(h, &params.start))[1]);
        p_end.push(softmax(&logits(h, &params.end))[1]);
    }
    Ok(TokenSpanProbabilities { p_start, p_end })
}

pub fn predict_sentiment(hidden: &HiddenSequence, params: &SentimentHeadParams) -> Result<SentimentDistribution> {
    if hidden.is_empty() {
        return Err(Error::Shape("empty hidden sequence".into()));
    }
    let p = softmax(&logits(hidden.row(0), &params.weights));
    Ok(SentimentDistribution([p[0], p[1], p[2]]))
}

/// Backward pass of the span head. For a two-class softmax the logit
/// gradients are antisymmetric, so `d_start[i] = ∂L/∂z₁ = -∂L/∂z₀` for
/// token `i` (likewise `d_end`). Returns `∂L/∂H`.
pub fn span_backward(
    hidden: &HiddenSequence,
    query_len: usize,
    params: &SpanHeadParams,
    d_start: &[f64],
    d_end: &[f64],
    grads: &mut SpanHeadParams,
) -> Result<Matrix> {
    let n = check_span_shape(hidden, query_len, Some(d_start.len()))?;
    let offset = query_len + 2;
    let d_h = hidden.0.cols();
    let mut d_hidden = Matrix::zeros(hidden.len(), d_h);
    for i in 0..n {
        let h = hidden.row(offset + i);
        for (g, w, gw) in [
            (d_start[i], &params.start, &mut grads.start),
            (d_end[i], &params.end, &mut grads.end),
        ] {
            if g == 0.0 {
                continue;
            }
            let row = d_hidden.row_mut(offset + i);
            for r in 0..d_h {
                // z₀ gets -g, z₁ gets +g.
                gw.data_mut()[r * 2] -= g * h[r];
                gw.data_mut()[r * 2 + 1] += g * h[r];
                row[r] += g * (w.get(r, 1) - w.get(r, 0));
            }
        }
    }
    Ok(d_hidden)
}

/// Backward pass of the sentiment head given `∂L/∂z` for the three logits.
pub fn sentiment_backward(
    hidden: &HiddenSequence,
    params: &SentimentHeadParams,
    d_logits: &[f64; 3],
    grads: &mut SentimentHeadParams,
) -> Matrix {
    let d_h = hidden.0.cols();
    let mut d_hidden = Matrix::zeros(hidden.len(), d_h);
    let h = hidden.row(0);
    for r in 0..d_h {
        for c in 0..3 {
            grads.weights.data_mut()[r * 3 + c] += h[r] * d_logits[c];
        }
        d_hidden.set(0, r, dot(params.weights.row(r), d_logits));
    }
    d_hidden
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hidden(rows: usize, d: usize, seed: u64) -> HiddenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HiddenSequence(Matrix::random_normal(rows, d, 1.0, &mut rng))
    }

    #[test]
    fn zero_weights_give_half() {
        let h = hidden(10, 8, 0);
        let p = SpanHeadParams {
            start: Matrix::zeros(8, 2),
            end: Matrix::zeros(8, 2),
        };
        let probs = predict_span_probs(&h, 3, &p).unwrap();
        assert_eq!(probs.len(), 5);
        assert!(probs.p_start.iter().chain(&probs.p_end).all(|&x| x == 0.5));
    }

    #[test]
    fn output_length_ignores_query_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SpanHeadParams::init(8, &mut rng);
        for q in 1..6 {
            let h = hidden(q + 2 + 7, 8, q as u64);
            let probs = predict_span_probs(&h, q, &p).unwrap();
            assert_eq!(probs.len(), 7);
            assert!(probs.p_start.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        assert!(predict_span_probs(&hidden(4, 8, 0), 3, &p).is_err());
    }

    #[test]
    fn sentiment_uniform_and_normalized() {
        let h = hidden(6, 8, 2);
        let zero = SentimentHeadParams {
            weights: Matrix::zeros(8, 3),
        };
        let d = predict_sentiment(&h, &zero).unwrap();
        for p in d.0 {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = SentimentHeadParams {
                weights: Matrix::random_normal(8, 3, 1.0, &mut rng),
            };
            let d = predict_sentiment(&h, &p).unwrap();
            assert!((d.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(d.0.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let h = hidden(6, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SentimentHeadParams {
            weights: Matrix::random_normal(8, 3, 1.0, &mut rng),
        };
        let base = predict_sentiment(&h, &p).unwrap().argmax().0;
        // Adding a constant c to every logit: h·w_c' = h·w_c + c for a
        // column shift along h/|h|².
        let h0 = h.row(0);
        let norm2: f64 = h0.iter().map(|x| x * x).sum();
        let mut shifted = p.clone();
        for r in 0..8 {
            for c in 0..3 {
                let v = shifted.weights.get(r, c) + 7.5 * h0[r] / norm2;
                shifted.weights.set(r, c, v);
            }
        }
        assert_eq!(predict_sentiment(&h, &shifted).unwrap().argmax().0, base);
    }

    #[test]
    fn only_cls_row_affects_sentiment() {
        let mut h = hidden(6, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SentimentHeadParams::init(8, &mut rng);
        let before = predict_sentiment(&h, &p).unwrap();
        for r in 1..6 {
            h.0.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(predict_sentiment(&h, &p).unwrap(), before);
    }

    #[test]
    fn start_probabilities_are_complementary_pairs() {
        let h = hidden(9, 8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SpanHeadParams::init(8, &mut rng);
        let probs = predict_span_probs(&h, 2, &p).unwrap();
        for (i, &ps) in probs.p_start.iter().enumerate() {
            let z = logits(h.row(4 + i), &p.start);
            let full = softmax(&z);
            assert!((full[0] + full[1] - 1.0).abs() < 1e-15);
            assert_eq!(full[1], ps);
        }
    }
}
