//! Next-token training for tiny checkpoints.
//!
//! Optimizer schedule (fixed): AdamW with β = (0.9, 0.95), ε = 1e-8, decoupled
//! weight decay on matrices only, linear warmup over `warmup` steps, then cosine
//! decay to 10% of `lr`; gradients are clipped to global norm `grad_clip`.
//! Everything runs on one thread in a fixed order, so a given seed, corpus and
//! hyper-parameter set always produce the same bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::forward::apply_rope;
use super::{Checkpoint, ModelConfig};
use crate::corpus::{tokenize, Corpus, PAD};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_tn, matmul_wt, rmsnorm, sigmoid, silu, softmax_in_place};

const IGNORE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub warmup: usize,
    pub weight_decay: f32,
    pub grad_clip: f32,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { steps: 600, lr: 3e-3, batch: 8, seq_len: 64, seed: 0, warmup: 30, weight_decay: 0.01, grad_clip: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean cross-entropy of every step's batch, before that step's update.
    pub losses: Vec<f32>,
}

/// Seeded initialization used as step 0 of training.
pub fn init_checkpoint(config: ModelConfig, seed: u64) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 0.02f32;
    let resid_std = std / (2.0 * ckpt.config.n_layers as f32).sqrt();
    let normal = |s: f32| Normal::new(0.0f32, s).unwrap();
    let fill = |t: &mut Vec<f32>, s: f32, rng: &mut ChaCha8Rng| {
        let dist = normal(s);
        t.iter_mut().for_each(|v| *v = dist.sample(rng));
    };
    fill(&mut ckpt.embed, std, &mut rng);
    for l in &mut ckpt.layers {
        l.attn_norm.iter_mut().for_each(|g| *g = 1.0);
        l.ffn_norm.iter_mut().for_each(|g| *g = 1.0);
        fill(&mut l.wq, std, &mut rng);
        fill(&mut l.wk, std, &mut rng);
        fill(&mut l.wv, std, &mut rng);
        fill(&mut l.wo, resid_std, &mut rng);
        fill(&mut l.w_gate, std, &mut rng);
        fill(&mut l.w_up, std, &mut rng);
        fill(&mut l.w_down, resid_std, &mut rng);
    }
    ckpt.final_norm.iter_mut().for_each(|g| *g = 1.0);
    fill(&mut ckpt.unembed, std, &mut rng);
    Ok(ckpt)
}

struct LayerCache {
    x_in: Vec<f32>,
    xn1: Vec<f32>,
    rstd1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Per (sequence, head): `[seq, seq]` causal attention probabilities.
    probs: Vec<f32>,
    att: Vec<f32>,
    x_mid: Vec<f32>,
    xn2: Vec<f32>,
    rstd2: Vec<f32>,
    gate: Vec<f32>,
    up: Vec<f32>,
    act: Vec<f32>,
}

/// Mean next-token cross-entropy over non-ignored targets and its gradient.
///
/// `inputs` and `targets` are `batch` rows of `seq` tokens; targets equal to
/// `u32::MAX` are ignored.
pub(crate) fn loss_and_grad(
    ckpt: &Checkpoint,
    inputs: &[u32],
    targets: &[u32],
    seq: usize,
    grads: &mut Checkpoint,
) -> f32 {
    let cfg = &ckpt.config;
    let (d, f, vocab, nh, hd) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads, cfg.head_dim());
    let t = inputs.len();
    let batch = t / seq;
    let scale = 1.0 / (hd as f32).sqrt();

    let mut x = vec![0.0f32; t * d];
    for (row, &tok) in x.chunks_exact_mut(d).zip(inputs) {
        row.copy_from_slice(&ckpt.embed[tok as usize * d..(tok as usize + 1) * d]);
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for layer in &ckpt.layers {
        let x_in = x.clone();
        let mut xn1 = vec![0.0; t * d];
        let mut rstd1 = Vec::new();
        rmsnorm(&x_in, d, &layer.attn_norm, cfg.norm_eps, &mut xn1, &mut rstd1);
        let mut q = vec![0.0; t * d];
        let mut k = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        matmul_wt(&xn1, t, d, &layer.wq, d, &mut q, false);
        matmul_wt(&xn1, t, d, &layer.wk, d, &mut k, false);
        matmul_wt(&xn1, t, d, &layer.wv, d, &mut v, false);
        for b in 0..batch {
            apply_rope(&mut q[b * seq * d..(b + 1) * seq * d], seq, cfg, 0, false);
            apply_rope(&mut k[b * seq * d..(b + 1) * seq * d], seq, cfg, 0, false);
        }
        let mut probs = vec![0.0f32; batch * nh * seq * seq];
        let mut att = vec![0.0f32; t * d];
        for b in 0..batch {
            for h in 0..nh {
                let pbase = (b * nh + h) * seq * seq;
                for i in 0..seq {
                    let qi = &q[(b * seq + i) * d + h * hd..][..hd];
                    let row = &mut probs[pbase + i * seq..pbase + i * seq + i + 1];
                    for (s, p) in row.iter_mut().enumerate() {
                        let ks = &k[(b * seq + s) * d + h * hd..][..hd];
                        *p = qi.iter().zip(ks).map(|(a, c)| a * c).sum::<f32>() * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut att[(b * seq + i) * d + h * hd..][..hd];
                    for (s, &p) in row.iter().enumerate() {
                        let vs = &v[(b * seq + s) * d + h * hd..][..hd];
                        for (o, &vv) in out.iter_mut().zip(vs) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        matmul_wt(&att, t, d, &layer.wo, d, &mut x, true);
        let x_mid = x.clone();
        let mut xn2 = vec![0.0; t * d];
        let mut rstd2 = Vec::new();
        rmsnorm(&x_mid, d, &layer.ffn_norm, cfg.norm_eps, &mut xn2, &mut rstd2);
        let mut gate = vec![0.0; t * f];
        let mut up = vec![0.0; t * f];
        matmul_wt(&xn2, t, d, &layer.w_gate, f, &mut gate, false);
        matmul_wt(&xn2, t, d, &layer.w_up, f, &mut up, false);
        let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        matmul_wt(&act, t, f, &layer.w_down, d, &mut x, true);
        caches.push(LayerCache { x_in, xn1, rstd1, q, k, v, probs, att, x_mid, xn2, rstd2, gate, up, act });
    }

    let mut xnf = vec![0.0; t * d];
    let mut rstdf = Vec::new();
    rmsnorm(&x, d, &ckpt.final_norm, cfg.norm_eps, &mut xnf, &mut rstdf);
    let mut logits = vec![0.0; t * vocab];
    matmul_wt(&xnf, t, d, &ckpt.unembed, vocab, &mut logits, false);

    let valid = targets.iter().filter(|&&y| y != IGNORE).count().max(1);
    let mut loss = 0.0f64;
    for (row, &y) in logits.chunks_exact_mut(vocab).zip(targets) {
        if y == IGNORE {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        softmax_in_place(row);
        loss -= (row[y as usize].max(1e-30) as f64).ln();
        row[y as usize] -= 1.0;
        row.iter_mut().for_each(|v| *v /= valid as f32);
    }
    let dlogits = logits;

    matmul_tn(&dlogits, t, vocab, &xnf, d, &mut grads.unembed, true);
    let mut dxn = vec![0.0; t * d];
    matmul(&dlogits, t, vocab, &ckpt.unembed, d, &mut dxn, false);
    let mut dx = vec![0.0; t * d];
    rmsnorm_backward(&x, &dxn, &ckpt.final_norm, &rstdf, d, &mut dx, &mut grads.final_norm);

    for (li, layer) in ckpt.layers.iter().enumerate().rev() {
        let c = &caches[li];
        let g = &mut grads.layers[li];

        // FFN
        let mut dact = vec![0.0; t * f];
        matmul(&dx, t, d, &layer.w_down, f, &mut dact, false);
        matmul_tn(&dx, t, d, &c.act, f, &mut g.w_down, true);
        let mut dgate = vec![0.0; t * f];
        let mut dup = vec![0.0; t * f];
        for i in 0..t * f {
            let s = sigmoid(c.gate[i]);
            let gv = c.gate[i];
            dup[i] = dact[i] * gv * s;
            dgate[i] = dact[i] * c.up[i] * s * (1.0 + gv * (1.0 - s));
        }
        matmul_tn(&dgate, t, f, &c.xn2, d, &mut g.w_gate, true);
        matmul_tn(&dup, t, f, &c.xn2, d, &mut g.w_up, true);
        matmul(&dgate, t, f, &layer.w_gate, d, &mut dxn, false);
        matmul(&dup, t, f, &layer.w_up, d, &mut dxn, true);
        let mut dx_mid = dx.clone();
        rmsnorm_backward(&c.x_mid, &dxn, &layer.ffn_norm, &c.rstd2, d, &mut dx_mid, &mut g.ffn_norm);

        // Attention
        let mut datt = vec![0.0; t * d];
        matmul(&dx_mid, t, d, &layer.wo, d, &mut datt, false);
        matmul_tn(&dx_mid, t, d, &c.att, d, &mut g.wo, true);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0f32; seq];
        for b in 0..batch {
            for h in 0..nh {
                let pbase = (b * nh + h) * seq * seq;
                for i in 0..seq {
                    let row = &c.probs[pbase + i * seq..pbase + i * seq + i + 1];
                    let dai = &datt[(b * seq + i) * d + h * hd..][..hd];
                    let mut dot = 0.0f32;
                    for (s, &p) in row.iter().enumerate() {
                        let vs = &c.v[(b * seq + s) * d + h * hd..][..hd];
                        dp[s] = dai.iter().zip(vs).map(|(a, c)| a * c).sum();
                        dot += p * dp[s];
                        let dvs = &mut dv[(b * seq + s) * d + h * hd..][..hd];
                        for (o, &a) in dvs.iter_mut().zip(dai) {
                            *o += p * a;
                        }
                    }
                    for (s, &p) in row.iter().enumerate() {
                        let ds = p * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for e in 0..hd {
                            dq[(b * seq + i) * d + h * hd + e] += ds * c.k[(b * seq + s) * d + h * hd + e];
                            dk[(b * seq + s) * d + h * hd + e] += ds * c.q[(b * seq + i) * d + h * hd + e];
                        }
                    }
                }
            }
        }
        for b in 0..batch {
            apply_rope(&mut dq[b * seq * d..(b + 1) * seq * d], seq, cfg, 0, true);
            apply_rope(&mut dk[b * seq * d..(b + 1) * seq * d], seq, cfg, 0, true);
        }
        matmul_tn(&dq, t, d, &c.xn1, d, &mut g.wq, true);
        matmul_tn(&dk, t, d, &c.xn1, d, &mut g.wk, true);
        matmul_tn(&dv, t, d, &c.xn1, d, &mut g.wv, true);
        matmul(&dq, t, d, &layer.wq, d, &mut dxn, false);
        matmul(&dk, t, d, &layer.wk, d, &mut dxn, true);
        matmul(&dv, t, d, &layer.wv, d, &mut dxn, true);
        dx = dx_mid;
        rmsnorm_backward(&c.x_in, &dxn, &layer.attn_norm, &c.rstd1, d, &mut dx, &mut g.attn_norm);
    }

    for (row, &tok) in dx.chunks_exact(d).zip(inputs) {
        let dst = &mut grads.embed[tok as usize * d..(tok as usize + 1) * d];
        for (o, &v) in dst.iter_mut().zip(row) {
            *o += v;
        }
    }
    (loss / valid as f64) as f32
}

/// Accumulates into `dx` and `dgain` the gradients of `y = x * rstd * gain`.
fn rmsnorm_backward(
    x: &[f32],
    dy: &[f32],
    gain: &[f32],
    rstd: &[f32],
    d: usize,
    dx: &mut [f32],
    dgain: &mut [f32],
) {
    for (((xr, dyr), dxr), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).zip(rstd) {
        let mut dot = 0.0f32;
        for k in 0..d {
            dgain[k] += dyr[k] * xr[k] * r;
            dot += dyr[k] * gain[k] * xr[k];
        }
        let coef = r * r * r * dot / d as f32;
        for k in 0..d {
            dxr[k] += r * dyr[k] * gain[k] - coef * xr[k];
        }
    }
}

struct Batcher {
    docs: Vec<Vec<u32>>,
    rng: ChaCha8Rng,
    seq: usize,
}

impl Batcher {
    fn next(&mut self, batch: usize) -> (Vec<u32>, Vec<u32>) {
        let mut inputs = Vec::with_capacity(batch * self.seq);
        let mut targets = Vec::with_capacity(batch * self.seq);
        for _ in 0..batch {
            let doc = &self.docs[self.rng.gen_range(0..self.docs.len())];
            let window = if doc.len() > self.seq + 1 {
                let off = self.rng.gen_range(0..doc.len() - self.seq);
                &doc[off..off + self.seq + 1]
            } else {
                &doc[..]
            };
            let n = window.len() - 1;
            inputs.extend_from_slice(&window[..n]);
            targets.extend_from_slice(&window[1..]);
            inputs.extend(std::iter::repeat_n(PAD, self.seq - n));
            targets.extend(std::iter::repeat_n(IGNORE, self.seq - n));
        }
        (inputs, targets)
    }
}

fn lr_at(step: usize, hyper: &TrainHyper) -> f32 {
    let warm = hyper.warmup.max(1);
    if step < warm {
        return hyper.lr * (step + 1) as f32 / warm as f32;
    }
    let span = hyper.steps.saturating_sub(warm).max(1);
    let progress = (step - warm) as f32 / span as f32;
    let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos());
    hyper.lr * (0.1 + 0.9 * cosine)
}

/// Trains a fresh checkpoint on `corpus` with next-token cross-entropy.
pub fn train_tiny(corpus: &Corpus, config: ModelConfig, hyper: &TrainHyper) -> Result<TrainOutcome> {
    config.validate()?;
    if hyper.batch == 0 || hyper.seq_len == 0 || hyper.seq_len > config.max_seq_len {
        return Err(Error::invalid(format!(
            "batch must be >= 1 and seq_len in 1..={}",
            config.max_seq_len
        )));
    }
    let docs: Vec<Vec<u32>> = corpus
        .documents()
        .map(|(_, doc)| tokenize(&doc.text))
        .filter(|t| t.len() >= 2)
        .collect();
    if docs.is_empty() {
        return Err(Error::invalid("training corpus has no document with at least two tokens"));
    }
    if let Some(bad) = docs.iter().flatten().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange { token: *bad, vocab: config.vocab_size });
    }

    let mut ckpt = init_checkpoint(config, hyper.seed)?;
    let mut batcher = Batcher { docs, rng: ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_ba7c), seq: hyper.seq_len };
    let shapes: Vec<usize> = ckpt.tensors().iter().map(|t| t.len()).collect();
    let mut m: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v: Vec<Vec<f32>> = m.clone();
    let is_matrix: Vec<bool> = super::tensor_layout(&ckpt.config).iter().map(|(_, s)| s.len() == 2).collect();
    let (b1, b2, eps) = (0.9f32, 0.95f32, 1e-8f32);
    let mut losses = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let (inputs, targets) = batcher.next(hyper.batch);
        let mut grads = Checkpoint::zeros(ckpt.config.clone())?;
        let loss = loss_and_grad(&ckpt, &inputs, &targets, hyper.seq_len, &mut grads);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4}");
        }

        let gnorm = grads.tensors().iter().flat_map(|t| t.iter()).map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
        let clip = if gnorm > hyper.grad_clip as f64 { (hyper.grad_clip as f64 / gnorm) as f32 } else { 1.0 };
        let lr = lr_at(step, hyper);
        let bc1 = 1.0 - b1.powi(step as i32 + 1);
        let bc2 = 1.0 - b2.powi(step as i32 + 1);
        for (ti, (p, g)) in ckpt.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let (mt, vt) = (&mut m[ti], &mut v[ti]);
            let decay = if is_matrix[ti] { hyper.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g[i] * clip;
                mt[i] = b1 * mt[i] + (1.0 - b1) * gi;
                vt[i] = b2 * vt[i] + (1.0 - b2) * gi * gi;
                let update = (mt[i] / bc1) / ((vt[i] / bc2).sqrt() + eps);
                p[i] -= lr * (update + decay * p[i]);
            }
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::{random_checkpoint, tiny_config};

    fn loss_only(ckpt: &Checkpoint, inputs: &[u32], targets: &[u32], seq: usize) -> f64 {
        let mut g = Checkpoint::zeros(ckpt.config.clone()).unwrap();
        loss_and_grad(ckpt, inputs, targets, seq, &mut g) as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        let ckpt = random_checkpoint(tiny_config(), 21);
        let seq = 5;
        let inputs = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        let targets = vec![2, 3, 4, 5, IGNORE, 7, 8, 9, 10, 1];
        let mut grads = Checkpoint::zeros(ckpt.config.clone()).unwrap();
        loss_and_grad(&ckpt, &inputs, &targets, seq, &mut grads);

        let analytic: Vec<Vec<f32>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n_tensors = analytic.len();
        let mut checked = 0;
        for ti in 0..n_tensors {
            for _ in 0..4 {
                let idx = rng.gen_range(0..analytic[ti].len());
                let h = 1e-2f32;
                let mut plus = ckpt.clone();
                plus.tensors_mut()[ti][idx] += h;
                let mut minus = ckpt.clone();
                minus.tensors_mut()[ti][idx] -= h;
                let numeric = (loss_only(&plus, &inputs, &targets, seq) - loss_only(&minus, &inputs, &targets, seq))
                    / (2.0 * h as f64);
                let a = analytic[ti][idx] as f64;
                let tol = 2e-3 + 2e-2 * numeric.abs().max(a.abs());
                assert!((a - numeric).abs() < tol, "tensor {ti} idx {idx}: analytic {a} numeric {numeric}");
                checked += 1;
            }
        }
        assert_eq!(checked, n_tensors * 4);
    }

    #[test]
    fn training_loss_matches_forward_cross_entropy() {
        let ckpt = random_checkpoint(tiny_config(), 3);
        let seq = 6;
        let inputs = vec![1u32, 5, 2, 8, 3, 9];
        let targets = vec![5u32, 2, 8, 3, 9, 4];
        let loss = loss_only(&ckpt, &inputs, &targets, seq);
        let out = ckpt.forward(&inputs, &[]).unwrap();
        let mut want = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let p = crate::linalg::softmax_f64(out.logits_at(i));
            want -= p[y as usize].ln();
        }
        want /= seq as f64;
        assert!((loss - want).abs() < 1e-4, "{loss} vs {want}");
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let h = TrainHyper { steps: 100, warmup: 10, lr: 1.0, ..TrainHyper::default() };
        assert!((lr_at(0, &h) - 0.1).abs() < 1e-6);
        assert!((lr_at(9, &h) - 1.0).abs() < 1e-6);
        assert!((lr_at(100, &h) - 0.1).abs() < 1e-6);
    }
}
