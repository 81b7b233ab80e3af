//! Cross-entropy objectives for the three query families.

use serde::{Deserialize, Serialize};

use crate::corpus::Sentiment;
use crate::error::{Error, Result};
use crate::heads::{SentimentDistribution, TokenSpanProbabilities};
use crate::queries::SpanLabels;

/// Probabilities below this floor are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_n: f64,
    pub l_r: f64,
    pub l_s: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        *self = total_loss(self.l_n + other.l_n, self.l_r + other.l_r, self.l_s + other.l_s);
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Unit-weight sum of the three family losses.
pub fn total_loss(l_n: f64, l_r: f64, l_s: f64) -> LossBreakdown {
    LossBreakdown {
        l_n,
        l_r,
        l_s,
        total: l_n + l_r + l_s,
    }
}

fn nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

fn binary_nll(p: f64, gold: u8) -> f64 {
    if gold == 1 {
        nll(p)
    } else {
        nll(1.0 - p)
    }
}

/// Start and end cross-entropy summed over instances and tokens.
pub fn span_loss(items: &[(&SpanLabels, &TokenSpanProbabilities)]) -> Result<f64> {
    let mut sum = 0.0;
    for (i, (labels, probs)) in items.iter().enumerate() {
        if labels.len() != probs.len() || probs.p_end.len() != probs.p_start.len() {
            return Err(Error::Shape(format!(
                "instance {i}: {} labels vs {} predictions",
                labels.len(),
                probs.len()
            )));
        }
        for t in 0..labels.len() {
            sum += binary_nll(probs.p_start[t], labels.start[t]);
            sum += binary_nll(probs.p_end[t], labels.end[t]);
        }
    }
    Ok(sum)
}

/// `-log p(gold)` summed over instances.
pub fn sentiment_loss(items: &[(Sentiment, &SentimentDistribution)]) -> f64 {
    items.iter().map(|(gold, dist)| nll(dist.probability(*gold))).sum()
}

/// `∂L/∂z₁` per token for one instance's start and end classifiers. Zero
/// where the loss term is clamped.
pub(crate) fn span_logit_grads(labels: &SpanLabels, probs: &TokenSpanProbabilities) -> (Vec<f64>, Vec<f64>) {
    let g = |p: f64, y: u8| {
        let target_p = if y == 1 { p } else { 1.0 - p };
        if target_p < PROB_FLOOR {
            0.0
        } else {
            p - f64::from(y)
        }
    };
    let start = probs.p_start.iter().zip(&labels.start).map(|(&p, &y)| g(p, y)).collect();
    let end = probs.p_end.iter().zip(&labels.end).map(|(&p, &y)| g(p, y)).collect();
    (start, end)
}

pub(crate) fn sentiment_logit_grads(gold: Sentiment, dist: &SentimentDistribution) -> [f64; 3] {
    if dist.probability(gold) < PROB_FLOOR {
        return [0.0; 3];
    }
    let mut g = dist.0;
    g[gold.index()] -= 1.0;
    g
}
