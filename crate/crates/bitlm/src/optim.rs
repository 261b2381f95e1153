//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! warmup-plus-cosine learning-rate schedule. A `TrainState` owns the
//! parameters and both moment sets and advances deterministically.

use crate::model::{
    build_forward, Batch, InputInterface, ModelConfig, ModelError, Parameters,
};
use crate::nn::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub weight_decay: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 4.0e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

/// Linear warmup to the peak, then cosine decay to zero at the final step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Warmup scaled to run length: 150 warmup steps per 5212 total, with a
    /// floor of 10.
    pub fn with_scaled_warmup(total_steps: u64) -> Self {
        let warmup = (total_steps * 150 / 5212).max(10).min(total_steps.max(1));
        Schedule { warmup_steps: warmup, total_steps }
    }

    /// Learning-rate multiplier in [0, 1] for the given 0-based step.
    pub fn factor(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step + 1 - self.warmup_steps) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients so the global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm. The norm accumulates in f64 in a fixed order.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f32) -> f32 {
    let mut total = 0f64;
    for g in grads.iter() {
        for &x in g.data() {
            total += f64::from(x) * f64::from(x);
        }
    }
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Parameters, optimizer moments, step counter, schedule constants, and the
/// run seed. Owned by exactly one training loop at a time.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    first_moment: Vec<Tensor<f32>>,
    second_moment: Vec<Tensor<f32>>,
    pub step: u64,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub seed: u64,
    /// Whether decoupled weight decay applies to the learned input table.
    pub decay_input_table: bool,
}

impl TrainState {
    pub fn new(params: Parameters, optim: OptimConfig, schedule: Schedule, seed: u64) -> Self {
        let first = params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let second = params.entries().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        TrainState {
            params,
            first_moment: first,
            second_moment: second,
            step: 0,
            optim,
            schedule,
            seed,
            decay_input_table: true,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.optim.peak_lr * self.schedule.factor(step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f32,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f32,
}

/// One optimization step: forward, cross-entropy, backward, global-norm clip,
/// AdamW update under the schedule. Aborts with `NonFiniteLoss` rather than
/// skipping, so a comparison protocol never silently diverges.
pub fn train_step(
    state: &mut TrainState,
    interface: &InputInterface,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<StepMetrics, ModelError> {
    let mut tape = Tape::new();
    let graph = build_forward(
        &mut tape,
        &state.params,
        interface,
        config,
        &batch.tokens,
        (batch.batch_size, batch.seq_len),
    )?;
    let loss_node = tape.softmax_cross_entropy(graph.logits, &batch.targets)?;
    let loss = tape.value(loss_node).item();
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: state.step });
    }
    let mut grad_store = tape.backward(loss_node)?;
    let mut grads: Vec<Tensor<f32>> = graph
        .param_nodes
        .iter()
        .enumerate()
        .map(|(i, &node)| {
            grad_store
                .take(node)
                .unwrap_or_else(|| Tensor::zeros(state.params.entries()[i].value.shape()))
        })
        .collect();
    drop(tape);

    let grad_norm = clip_global_norm(&mut grads, state.optim.grad_clip);
    let lr = state.lr_at(state.step);
    adamw_update(state, &grads, lr);
    state.step += 1;
    Ok(StepMetrics { loss, lr, grad_norm })
}

fn adamw_update(state: &mut TrainState, grads: &[Tensor<f32>], lr: f64) {
    let o = state.optim;
    let t = (state.step + 1) as i32;
    let bias1 = 1.0 - o.beta1.powi(t);
    let bias2 = 1.0 - o.beta2.powi(t);
    let (b1, b2) = (o.beta1 as f32, o.beta2 as f32);
    let (inv_bias1, inv_bias2) = ((1.0 / bias1) as f32, (1.0 / bias2) as f32);
    let (lr_f, eps_f) = (lr as f32, o.eps as f32);
    let decay_table = state.decay_input_table;
    for (i, grad) in grads.iter().enumerate() {
        let param = &mut state.params.entries_mut()[i];
        let decay = if param.name == "input.table" {
            if decay_table {
                o.weight_decay
            } else {
                0.0
            }
        } else if param.decay {
            o.weight_decay
        } else {
            0.0
        };
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = param.value.data_mut();
        let g = grad.data();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] * inv_bias1;
            let v_hat = v[j] * inv_bias2;
            p[j] -= lr_f * (m_hat / (v_hat.sqrt() + eps_f) + decay * p[j]);
        }
    }
}
