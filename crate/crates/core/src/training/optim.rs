//! Adam with decoupled weight decay and linear warmup.

use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    first: ModelParams,
    second: ModelParams,
    heads: Vec<bool>,
    steps: u64,
    pub head_lr: f64,
    pub encoder_lr: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ModelParams, head_lr: f64, encoder_lr: f64, weight_decay: f64) -> Self {
        let heads = params
            .named_tensors()
            .iter()
            .map(|(n, _)| ModelParams::is_head_tensor(n))
            .collect();
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            heads,
            steps: 0,
            head_lr,
            encoder_lr,
            weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with step sizes scaled by `lr_scale` (the warmup factor).
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut ModelParams, lr_scale: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors_mut())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
            .zip(&self.heads);
        for ((((p, g), m), v), &is_head) in tensors {
            let lr = lr_scale * if is_head { self.head_lr } else { self.encoder_lr };
            let decay = 1.0 - lr * self.weight_decay;
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut());
            for (((w, &grad), m), v) in it {
                *m = BETA1 * *m + (1.0 - BETA1) * grad;
                *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w *= decay;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}

/// Linear ramp from `1/warmup_steps` to 1 over the first `warmup_steps`
/// steps (1-based), then constant.
pub fn warmup_scale(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        1.0
    } else {
        step as f64 / warmup_steps as f64
    }
}
