//! AdamW, gradient clipping, cosine schedule and the training step.

use std::collections::BTreeMap;

use super::unet::{ForwardMode, ModelWeights, Unet};
use super::{Graph, NnError, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.01)
    }
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, weights: &mut ModelWeights, grads: &BTreeMap<String, Vec<f32>>, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        for (name, g) in grads {
            let Some(p) = weights.params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                let upd = mh / (vh.sqrt() + self.eps as f64) + self.weight_decay as f64 * p.data[i] as f64;
                p.data[i] -= (lr as f64 * upd) as f32;
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        grads.values_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Cosine annealing from `base` at step 0 to `min` at `total`.
pub fn cosine_lr(base: f32, min: f32, step: u64, total: u64) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    (min as f64 + 0.5 * (base - min) as f64 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

pub struct TrainBatch<'a> {
    pub inputs: &'a Tensor,
    pub targets: &'a Tensor,
    pub emb: Option<&'a Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    pub grad_norm: f64,
    pub lr: f32,
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads(
    net: &Unet,
    weights: &ModelWeights,
    batch: &TrainBatch,
    mode: ForwardMode,
) -> Result<(f32, BTreeMap<String, Vec<f32>>), NnError> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, weights, true)?;
    let x = g.input(batch.inputs);
    let y = g.input(batch.targets);
    let e = batch.emb.map(|e| g.input(e));
    let out = net.forward(&mut g, &p, x, e, mode)?;
    let loss = g.smooth_l1(out, y)?;
    let value = g.value(loss)[0];
    let mut grads = g.backward(loss)?;
    let map = p
        .iter()
        .map(|(name, v)| {
            let grad = grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).len()]);
            (name.to_string(), grad)
        })
        .collect();
    Ok((value, map))
}

/// Forward, smooth-L1, backward, global-norm clip and one AdamW update.
pub fn train_step(
    net: &Unet,
    weights: &mut ModelWeights,
    opt: &mut AdamW,
    batch: &TrainBatch,
    lr: f32,
    clip: f64,
    seed: u64,
) -> Result<StepReport, NnError> {
    let mode = ForwardMode::train(seed).with_bypass(batch.emb.is_none());
    let (loss, mut grads) = loss_and_grads(net, weights, batch, mode)?;
    if !loss.is_finite() {
        return Err(NnError::NonFiniteLoss(loss, opt.steps_taken()));
    }
    let grad_norm = clip_global_norm(&mut grads, clip);
    if !grad_norm.is_finite() {
        return Err(NnError::NonFiniteLoss(loss, opt.steps_taken()));
    }
    opt.update(weights, &grads, lr);
    Ok(StepReport { loss, grad_norm, lr })
}
