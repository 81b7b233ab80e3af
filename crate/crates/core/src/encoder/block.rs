//! One post-norm transformer block: multi-head self-attention and a GELU
//! feed-forward, each followed by a residual add and layer normalization.

use rand::{Rng, RngCore};

use crate::tensor::{dot, softmax_in_place, Matrix};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub query: Matrix,
    pub query_bias: Matrix,
    pub key: Matrix,
    pub key_bias: Matrix,
    pub value: Matrix,
    pub value_bias: Matrix,
    pub output: Matrix,
    pub output_bias: Matrix,
    pub attn_norm_gain: Matrix,
    pub attn_norm_bias: Matrix,
    pub ff_in: Matrix,
    pub ff_in_bias: Matrix,
    pub ff_out: Matrix,
    pub ff_out_bias: Matrix,
    pub ff_norm_gain: Matrix,
    pub ff_norm_bias: Matrix,
}

impl BlockParams {
    pub fn init(d_h: usize, d_ff: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            query: Matrix::random_normal(d_h, d_h, std, rng),
            query_bias: Matrix::zeros(1, d_h),
            key: Matrix::random_normal(d_h, d_h, std, rng),
            key_bias: Matrix::zeros(1, d_h),
            value: Matrix::random_normal(d_h, d_h, std, rng),
            value_bias: Matrix::zeros(1, d_h),
            output: Matrix::random_normal(d_h, d_h, std, rng),
            output_bias: Matrix::zeros(1, d_h),
            attn_norm_gain: Matrix::filled(1, d_h, 1.0),
            attn_norm_bias: Matrix::zeros(1, d_h),
            ff_in: Matrix::random_normal(d_h, d_ff, std, rng),
            ff_in_bias: Matrix::zeros(1, d_ff),
            ff_out: Matrix::random_normal(d_ff, d_h, std, rng),
            ff_out_bias: Matrix::zeros(1, d_h),
            ff_norm_gain: Matrix::filled(1, d_h, 1.0),
            ff_norm_bias: Matrix::zeros(1, d_h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            query: z(&self.query),
            query_bias: z(&self.query_bias),
            key: z(&self.key),
            key_bias: z(&self.key_bias),
            value: z(&self.value),
            value_bias: z(&self.value_bias),
            output: z(&self.output),
            output_bias: z(&self.output_bias),
            attn_norm_gain: z(&self.attn_norm_gain),
            attn_norm_bias: z(&self.attn_norm_bias),
            ff_in: z(&self.ff_in),
            ff_in_bias: z(&self.ff_in_bias),
            ff_out: z(&self.ff_out),
            ff_out_bias: z(&self.ff_out_bias),
            ff_norm_gain: z(&self.ff_norm_gain),
            ff_norm_bias: z(&self.ff_norm_bias),
        }
    }

    /// Tensor suffixes in checkpoint order.
    pub const NAMES: [&'static str; 16] = [
        "attn.query.weight",
        "attn.query.bias",
        "attn.key.weight",
        "attn.key.bias",
        "attn.value.weight",
        "attn.value.bias",
        "attn.output.weight",
        "attn.output.bias",
        "attn.norm.gain",
        "attn.norm.bias",
        "ff.in.weight",
        "ff.in.bias",
        "ff.out.weight",
        "ff.out.bias",
        "ff.norm.gain",
        "ff.norm.bias",
    ];

    pub fn tensors(&self) -> [&Matrix; 16] {
        [
            &self.query,
            &self.query_bias,
            &self.key,
            &self.key_bias,
            &self.value,
            &self.value_bias,
            &self.output,
            &self.output_bias,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ff_in,
            &self.ff_in_bias,
            &self.ff_out,
            &self.ff_out_bias,
            &self.ff_norm_gain,
            &self.ff_norm_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.query,
            &mut self.query_bias,
            &mut self.key,
            &mut self.key_bias,
            &mut self.value,
            &mut self.value_bias,
            &mut self.output,
            &mut self.output_bias,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ff_in,
            &mut self.ff_in_bias,
            &mut self.ff_out,
            &mut self.ff_out_bias,
            &mut self.ff_norm_gain,
            &mut self.ff_norm_bias,
        ]
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head attention weights before dropout.
    probs: Vec<Matrix>,
    /// Per-head inverted-dropout multipliers (train mode only).
    attn_masks: Option<Vec<Matrix>>,
    context: Matrix,
    attn_norm: NormCache,
    attn_out: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
    ff_mask: Option<Matrix>,
    ff_norm: NormCache,
}

impl BlockCache {
    pub fn attention_weights(&self) -> &[Matrix] {
        &self.probs
    }
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, NormCache) {
    let d = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut normalized = Matrix::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * is;
        }
        let orow = out.row_mut(r);
        for (c, o) in orow.iter_mut().enumerate() {
            *o = normalized.get(r, c) * gain.get(0, c) + bias.get(0, c);
        }
    }
    (out, NormCache { normalized, inv_std })
}

fn layer_norm_backward(
    d_out: &Matrix,
    cache: &NormCache,
    gain: &Matrix,
    d_gain: &mut Matrix,
    d_bias: &mut Matrix,
) -> Matrix {
    let cols = d_out.cols();
    let d = cols as f64;
    let mut d_in = Matrix::zeros(d_out.rows(), cols);
    let mut d_norm = vec![0.0; cols];
    for r in 0..d_out.rows() {
        let dy = d_out.row(r);
        let xhat = cache.normalized.row(r);
        for c in 0..cols {
            d_gain.data_mut()[c] += dy[c] * xhat[c];
            d_bias.data_mut()[c] += dy[c];
            d_norm[c] = dy[c] * gain.get(0, c);
        }
        let mean_d = d_norm.iter().sum::<f64>() / d;
        let mean_dx = dot(&d_norm, xhat) / d;
        let is = cache.inv_std[r];
        for (c, o) in d_in.row_mut(r).iter_mut().enumerate() {
            *o = is * (d_norm[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    d_in
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut dyn RngCore) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = x.matmul(w);
    y.add_row_vector(b);
    y
}

impl BlockParams {
    /// `rng` is `Some` in train mode, enabling dropout at `dropout_rate`.
    pub fn forward(
        &self,
        x: &Matrix,
        n_heads: usize,
        dropout_rate: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Matrix, BlockCache) {
        let len = x.rows();
        let d_h = x.cols();
        let d_k = d_h / n_heads;
        let scale = 1.0 / (d_k as f64).sqrt();
        let drop = dropout_rate > 0.0 && rng.is_some();

        let q = affine(x, &self.query, &self.query_bias);
        let k = affine(x, &self.key, &self.key_bias);
        let v = affine(x, &self.value, &self.value_bias);

        let mut probs = Vec::with_capacity(n_heads);
        let mut attn_masks = drop.then(|| Vec::with_capacity(n_heads));
        let mut context = Matrix::zeros(len, d_h);
        for h in 0..n_heads {
            let qh = q.columns(h * d_k, d_k);
            let kh = k.columns(h * d_k, d_k);
            let vh = v.columns(h * d_k, d_k);
            let mut p = qh.matmul_nt(&kh);
            for r in 0..len {
                let row = p.row_mut(r);
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            let ctx = match (&mut attn_masks, rng.as_deref_mut()) {
                (Some(masks), Some(rng)) => {
                    let mask = dropout_mask(len, len, dropout_rate, rng);
                    let ctx = hadamard(&p, &mask).matmul(&vh);
                    masks.push(mask);
                    ctx
                }
                _ => p.matmul(&vh),
            };
            context.set_columns(h * d_k, &ctx);
            probs.push(p);
        }

        let mut residual = affine(&context, &self.output, &self.output_bias);
        residual.add_assign(x);
        let (attn_out, attn_norm) = layer_norm(&residual, &self.attn_norm_gain, &self.attn_norm_bias);

        let ff_pre = affine(&attn_out, &self.ff_in, &self.ff_in_bias);
        let ff_act = Matrix::from_vec(
            ff_pre.rows(),
            ff_pre.cols(),
            ff_pre.data().iter().map(|&z| gelu(z)).collect(),
        );
        let mut ff = affine(&ff_act, &self.ff_out, &self.ff_out_bias);
        let ff_mask = match rng {
            Some(rng) if drop => {
                let mask = dropout_mask(len, d_h, dropout_rate, rng);
                ff = hadamard(&ff, &mask);
                Some(mask)
            }
            _ => None,
        };
        ff.add_assign(&attn_out);
        let (out, ff_norm) = layer_norm(&ff, &self.ff_norm_gain, &self.ff_norm_bias);

        let cache = BlockCache {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            attn_masks,
            context,
            attn_norm,
            attn_out,
            ff_pre,
            ff_act,
            ff_mask,
            ff_norm,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the
    /// gradient with respect to the block input.
    pub fn backward(&self, d_out: &Matrix, cache: &BlockCache, n_heads: usize, grads: &mut BlockParams) -> Matrix {
        let len = d_out.rows();
        let d_h = d_out.cols();
        let d_k = d_h / n_heads;
        let scale = 1.0 / (d_k as f64).sqrt();

        // Feed-forward sublayer.
        let d_ff_res = layer_norm_backward(
            d_out,
            &cache.ff_norm,
            &self.ff_norm_gain,
            &mut grads.ff_norm_gain,
            &mut grads.ff_norm_bias,
        );
        let mut d_attn_out = d_ff_res.clone();
        let d_ff = match &cache.ff_mask {
            Some(mask) => hadamard(&d_ff_res, mask),
            None => d_ff_res,
        };
        cache.ff_act.matmul_tn_acc(&d_ff, &mut grads.ff_out);
        d_ff.sum_rows_acc(&mut grads.ff_out_bias);
        let d_act = d_ff.matmul_nt(&self.ff_out);
        let d_pre = Matrix::from_vec(
            d_act.rows(),
            d_act.cols(),
            d_act
                .data()
                .iter()
                .zip(cache.ff_pre.data())
                .map(|(g, &z)| g * gelu_grad(z))
                .collect(),
        );
        cache.attn_out.matmul_tn_acc(&d_pre, &mut grads.ff_in);
        d_pre.sum_rows_acc(&mut grads.ff_in_bias);
        d_attn_out.add_assign(&d_pre.matmul_nt(&self.ff_in));

        // Attention sublayer.
        let d_attn_res = layer_norm_backward(
            &d_attn_out,
            &cache.attn_norm,
            &self.attn_norm_gain,
            &mut grads.attn_norm_gain,
            &mut grads.attn_norm_bias,
        );
        let mut d_input = d_attn_res.clone();
        cache.context.matmul_tn_acc(&d_attn_res, &mut grads.output);
        d_attn_res.sum_rows_acc(&mut grads.output_bias);
        let d_context = d_attn_res.matmul_nt(&self.output);

        let mut d_q = Matrix::zeros(len, d_h);
        let mut d_k_all = Matrix::zeros(len, d_h);
        let mut d_v = Matrix::zeros(len, d_h);
        for h in 0..n_heads {
            let qh = cache.q.columns(h * d_k, d_k);
            let kh = cache.k.columns(h * d_k, d_k);
            let vh = cache.v.columns(h * d_k, d_k);
            let d_ctx = d_context.columns(h * d_k, d_k);
            let p = &cache.probs[h];
            let mask = cache.attn_masks.as_ref().map(|m| &m[h]);

            let dropped = match mask {
                Some(m) => hadamard(p, m),
                None => p.clone(),
            };
            let mut d_vh = Matrix::zeros(len, d_k);
            dropped.matmul_tn_acc(&d_ctx, &mut d_vh);
            let mut d_p = d_ctx.matmul_nt(&vh);
            if let Some(m) = mask {
                d_p = hadamard(&d_p, m);
            }
            // Softmax backward per row, folded with the score scale.
            let mut d_scores = Matrix::zeros(len, len);
            for r in 0..len {
                let pr = p.row(r);
                let dpr = d_p.row(r);
                let inner = dot(pr, dpr);
                for (c, o) in d_scores.row_mut(r).iter_mut().enumerate() {
                    *o = pr[c] * (dpr[c] - inner) * scale;
                }
            }
            let d_qh = d_scores.matmul(&kh);
            let mut d_kh = Matrix::zeros(len, d_k);
            d_scores.matmul_tn_acc(&qh, &mut d_kh);
            d_q.set_columns(h * d_k, &d_qh);
            d_k_all.set_columns(h * d_k, &d_kh);
            d_v.set_columns(h * d_k, &d_vh);
        }

        for (d, w, gw, gb) in [
            (&d_q, &self.query, &mut grads.query, &mut grads.query_bias),
            (&d_k_all, &self.key, &mut grads.key, &mut grads.key_bias),
            (&d_v, &self.value, &mut grads.value, &mut grads.value_bias),
        ] {
            cache.input.matmul_tn_acc(d, gw);
            d.sum_rows_acc(gb);
            d_input.add_assign(&d.matmul_nt(w));
        }
        d_input
    }
}
