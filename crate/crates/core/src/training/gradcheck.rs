//! Central-difference verification of the analytic gradients.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::Mode;
use crate::error::Result;
use crate::model::{Model, ModelParams};
use crate::training::{instance_loss, LossBreakdown, PreparedInstance};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences carry
/// roundoff of about `eps·|L|/h` (1e-10 to 1e-9 here), so an entry whose
/// true gradient is zero, such as a key bias under softmax shift
/// invariance, is compared by absolute difference instead.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn total(model: &Model, params: &ModelParams, instances: &[PreparedInstance]) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for inst in instances {
        acc.add(&instance_loss(model, params, inst, Mode::Eval, None)?);
    }
    Ok(acc)
}

/// Eval-mode total loss over `instances` and its analytic gradient.
pub fn loss_and_gradient(model: &Model, instances: &[PreparedInstance]) -> Result<(LossBreakdown, ModelParams)> {
    let mut grads = model.params.zeros_like();
    let mut acc = LossBreakdown::default();
    for inst in instances {
        acc.add(&instance_loss(model, &model.params, inst, Mode::Eval, Some(&mut grads))?);
    }
    Ok((acc, grads))
}

/// A copy of `model` with N(0, std²) noise added to every parameter.
///
/// At the small initialization scale attention is nearly uniform and the
/// query/key gradients fall below central-difference roundoff, so checks
/// run at a perturbed point where every tensor carries real signal.
pub fn perturbed(model: &Model, std: f64, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("finite std");
    let mut out = model.clone();
    for t in out.params.tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    out
}

/// A (tensor index, flat entry index) coordinate.
pub type Site = (usize, usize);

/// Up to `per_tensor` random entries from every tensor. Embedding tables
/// are restricted to the rows the instances actually touch.
pub fn sample_sites(model: &Model, instances: &[PreparedInstance], per_tensor: usize, seed: u64) -> Vec<Site> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let used_words: BTreeSet<usize> = instances.iter().flat_map(|i| i.input.ids.iter().copied()).collect();
    let max_len = instances.iter().map(|i| i.input.len()).max().unwrap_or(0);

    let mut sites = Vec::new();
    for (t, (name, tensor)) in model.params.named_tensors().iter().enumerate() {
        let cols = tensor.cols();
        let candidates: Vec<usize> = match name.as_str() {
            "embed.word" => used_words.iter().flat_map(|&r| r * cols..(r + 1) * cols).collect(),
            "embed.position" => (0..max_len * cols).collect(),
            _ => (0..tensor.data().len()).collect(),
        };
        let k = per_tensor.min(candidates.len());
        for i in sample(&mut rng, candidates.len(), k).into_iter() {
            sites.push((t, candidates[i]));
        }
    }
    sites
}

/// Compares `analytic` against central differences at `sites`.
pub fn compare(
    model: &Model,
    instances: &[PreparedInstance],
    analytic: &ModelParams,
    sites: &[Site],
) -> Result<GradCheckReport> {
    let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic_tensors = analytic.named_tensors();
    let mut params = model.params.clone();
    let mut probes = Vec::with_capacity(sites.len());
    for &(t, i) in sites {
        let original = params.tensors_mut()[t].data()[i];
        params.tensors_mut()[t].data_mut()[i] = original + FD_STEP;
        let plus = total(model, &params, instances)?.total;
        params.tensors_mut()[t].data_mut()[i] = original - FD_STEP;
        let minus = total(model, &params, instances)?.total;
        params.tensors_mut()[t].data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic_tensors[t].1.data()[i];
        probes.push(Probe {
            tensor: names[t].clone(),
            index: i,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, max_rel_error })
}

/// Samples `per_tensor` entries of every tensor and reports the worst
/// relative error between backpropagation and central differences.
pub fn gradient_check(
    model: &Model,
    instances: &[PreparedInstance],
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_gradient(model, instances)?;
    let sites = sample_sites(model, instances, per_tensor, seed);
    compare(model, instances, &analytic, &sites)
}
