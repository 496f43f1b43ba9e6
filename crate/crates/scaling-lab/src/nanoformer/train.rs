//! Manual backpropagation and plain-SGD training for the nanoformer.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, Mat};
use crate::rng::derive_seed;
use crate::sources::{Source, TokenSequence};

use super::{ForwardTrace, LayerParams, Model};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub step_size: f64,
    pub steps: usize,
    /// Sequences per SGD step.
    pub batch_sequences: usize,
    /// Length of each training sequence; the D-token dataset is
    /// materialized once as D / seq_len sequences.
    pub seq_len: usize,
    /// Batch-loss recording interval.
    pub record_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossTrace {
    /// Full-dataset loss before the first step.
    pub initial_loss: f64,
    /// (step, batch loss) records.
    pub records: Vec<(usize, f64)>,
    /// Full-dataset loss after the last step.
    pub final_loss: f64,
}

/// Parameter-shaped gradient accumulator.
pub struct Grads {
    pub embedding: Mat,
    pub layers: Vec<LayerParams>,
    pub head: Mat,
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Grads {
        Grads {
            embedding: Mat::zeros(model.embedding.rows, model.embedding.cols),
            layers: model
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_q: Mat::zeros(l.w_q.rows, l.w_q.cols),
                    w_k: Mat::zeros(l.w_k.rows, l.w_k.cols),
                    w_v: Mat::zeros(l.w_v.rows, l.w_v.cols),
                    ffn_w1: Mat::zeros(l.ffn_w1.rows, l.ffn_w1.cols),
                    ffn_w2: Mat::zeros(l.ffn_w2.rows, l.ffn_w2.cols),
                })
                .collect(),
            head: Mat::zeros(model.head.rows, model.head.cols),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.embedding.data.clone();
        for l in &self.layers {
            v.extend_from_slice(&l.w_q.data);
            v.extend_from_slice(&l.w_k.data);
            v.extend_from_slice(&l.w_v.data);
            v.extend_from_slice(&l.ffn_w1.data);
            v.extend_from_slice(&l.ffn_w2.data);
        }
        v.extend_from_slice(&self.head.data);
        v
    }
}

/// Backward through a norm clip y = x * min(1, cap/||x||): given the
/// clipped output direction and applied scale, maps dL/dy to dL/dx.
fn clip_backward(dy: &[f64], y: &[f64], scale: f64) -> Vec<f64> {
    if scale == 1.0 {
        return dy.to_vec();
    }
    let norm_y = linalg::norm(y);
    // y is on the cap sphere; project out the radial component.
    let radial = linalg::dot(dy, y) / (norm_y * norm_y);
    dy.iter()
        .zip(y)
        .map(|(&g, &yi)| scale * (g - radial * yi))
        .collect()
}

/// Accumulates dLoss/dparams for one sequence into `grads`, where the
/// per-position log-loss terms are weighted by `weight` (the caller
/// divides by the total predicted-position count of the batch).
/// Returns the summed (unweighted) negative log-likelihood and the
/// number of predicted positions.
pub(crate) fn accumulate_gradients(
    model: &Model,
    tokens: &[usize],
    trace: &ForwardTrace,
    weight: f64,
    grads: &mut Grads,
) -> (f64, usize) {
    let n = tokens.len();
    let d = model.config.model_dim;
    let denom = model.config.logit_denominator();
    let act = model.config.ffn_activation;
    let num_layers = model.layers.len();
    let predictions = n.saturating_sub(1);

    // Head and loss.
    let mut nll = 0.0;
    let final_reps: &Vec<Vec<f64>> = if num_layers == 0 {
        unreachable!("config validation requires at least one layer")
    } else {
        &trace.layers[num_layers - 1].reps
    };
    let mut dh: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
    for t in 0..predictions {
        let target = tokens[t + 1];
        let lp = &trace.log_probs[t];
        nll -= lp[target];
        let mut dlogits: Vec<f64> = lp.iter().map(|&l| l.exp() * weight).collect();
        dlogits[target] -= weight;
        // head: logits_c = sum_d head[d][c] h[d]
        for (dd, &hv) in final_reps[t].iter().enumerate() {
            let grow = grads.head.row_mut(dd);
            for (c, &dl) in dlogits.iter().enumerate() {
                grow[c] += hv * dl;
            }
        }
        dh[t] = model.head.mul_vec(&dlogits);
    }

    // Layers, last to first.
    for l in (0..num_layers).rev() {
        let lp = &model.layers[l];
        let lt = &trace.layers[l];
        let g = &mut grads.layers[l];
        let mut dh_in: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut dv: Vec<Vec<f64>> = vec![vec![0.0; d]; n];
        let mut dk: Vec<Vec<f64>> = vec![vec![0.0; model.config.key_dim]; n];
        let mut dr_tilde: Vec<Vec<f64>> = Vec::with_capacity(n);

        // Residual + FFN backward: out = r + W2' act(W1' r).
        for i in 0..n {
            let dout = &dh[i];
            let hidden = &lt.ffn_hidden[i]; // act outputs
            let mut dr = dout.clone();
            // dg_h = sum_d W2[h][d] dout_d, then through the activation.
            let dgh = lp.ffn_w2.mul_vec(dout);
            let du: Vec<f64> = dgh
                .iter()
                .zip(hidden)
                .map(|(&gq, &y)| gq * act.derivative_from_output(y))
                .collect();
            // dW2[h][d] += hidden[h] * dout[d]
            for (hidx, &hv) in hidden.iter().enumerate() {
                linalg::axpy(hv, dout, g.ffn_w2.row_mut(hidx));
            }
            // dW1[d][h] += r[d] * du[h]
            for (dd, &rv) in lt.pre_ffn[i].iter().enumerate() {
                linalg::axpy(rv, &du, g.ffn_w1.row_mut(dd));
            }
            linalg::axpy(1.0, &lp.ffn_w1.mul_vec(&du), &mut dr);
            dr_tilde.push(dr);
        }

        // Attention backward.
        for i in 0..n {
            let dr = &dr_tilde[i];
            let a = &lt.attn[i];
            let da: Vec<f64> = (0..=i).map(|j| linalg::dot(dr, &lt.v[j])).collect();
            for (j, &aj) in a.iter().enumerate() {
                linalg::axpy(aj, dr, &mut dv[j]);
            }
            let dot_sum: f64 = a.iter().zip(&da).map(|(&aj, &dj)| aj * dj).sum();
            let mut dq = vec![0.0; model.config.key_dim];
            for j in 0..=i {
                let dz = a[j] * (da[j] - dot_sum) / denom;
                linalg::axpy(dz, &lt.k[j], &mut dq);
                linalg::axpy(dz, &lt.q[i], &mut dk[j]);
            }
            // Through the query clip, into W_Q and the layer input.
            let dq_raw = clip_backward(&dq, &lt.q[i], lt.q_scale[i]);
            for (dd, &hv) in lt.input[i].iter().enumerate() {
                linalg::axpy(hv, &dq_raw, g.w_q.row_mut(dd));
            }
            linalg::axpy(1.0, &lp.w_q.mul_vec(&dq_raw), &mut dh_in[i]);
        }
        for j in 0..n {
            let dk_raw = clip_backward(&dk[j], &lt.k[j], lt.k_scale[j]);
            for (dd, &hv) in lt.input[j].iter().enumerate() {
                linalg::axpy(hv, &dk_raw, g.w_k.row_mut(dd));
            }
            linalg::axpy(1.0, &lp.w_k.mul_vec(&dk_raw), &mut dh_in[j]);

            let dv_raw = clip_backward(&dv[j], &lt.v[j], lt.v_scale[j]);
            for (dd, &hv) in lt.input[j].iter().enumerate() {
                linalg::axpy(hv, &dv_raw, g.w_v.row_mut(dd));
            }
            linalg::axpy(1.0, &lp.w_v.mul_vec(&dv_raw), &mut dh_in[j]);
        }
        dh = dh_in;
    }

    // Embedding backward.
    for (i, &t) in tokens.iter().enumerate() {
        linalg::axpy(1.0, &dh[i], grads.embedding.row_mut(t));
    }

    (nll, predictions)
}

/// Batch loss and gradient (mean over all predicted positions).
pub fn batch_loss_and_grads(model: &Model, batch: &[&TokenSequence]) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros_like(model);
    let total_predictions: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if total_predictions == 0 {
        return Err(LabError::Usage("batch has no predictable positions".into()));
    }
    let weight = 1.0 / total_predictions as f64;
    let mut nll = 0.0;
    for seq in batch {
        let trace = model.forward(seq)?;
        let (seq_nll, _) = accumulate_gradients(model, &seq.tokens, &trace, weight, &mut grads);
        nll += seq_nll;
    }
    Ok((nll / total_predictions as f64, grads))
}

/// Materializes the fixed D-token training dataset for a source.
pub fn materialize_dataset(
    source: &Source,
    num_tokens: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    if seq_len < 2 {
        return Err(LabError::parameter("seq_len", "must be >= 2"));
    }
    if num_tokens % seq_len != 0 {
        return Err(LabError::parameter(
            "num_tokens",
            format!("must be a multiple of seq_len {seq_len} so the dataset is exactly D tokens"),
        ));
    }
    let num_seqs = num_tokens / seq_len;
    (0..num_seqs)
        .map(|i| source.sample_sequence(seq_len, derive_seed(seed, "train-data", &[i as u64])))
        .collect()
}

/// Trains a copy of the model on a fixed dataset of exactly
/// `num_tokens` tokens with plain constant-step SGD. Deterministic
/// given (model, source, hyper, seed).
pub fn train(
    model: &Model,
    source: &Source,
    num_tokens: usize,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(Model, LossTrace)> {
    if hyper.batch_sequences == 0 {
        return Err(LabError::parameter("batch_sequences", "must be >= 1"));
    }
    if num_tokens < hyper.seq_len {
        return Err(LabError::parameter(
            "num_tokens",
            format!(
                "dataset of {num_tokens} tokens is smaller than one sequence ({})",
                hyper.seq_len
            ),
        ));
    }
    let dataset = materialize_dataset(source, num_tokens, hyper.seq_len, seed)?;
    let num_seqs = dataset.len();

    let mut current = model.clone();
    let all_refs: Vec<&TokenSequence> = dataset.iter().collect();
    let initial_loss = {
        let (loss, _) = batch_loss_and_grads(&current, &all_refs)?;
        loss
    };

    let mut records = Vec::new();
    let record_every = hyper.record_every.max(1);
    for step in 0..hyper.steps {
        let batch: Vec<&TokenSequence> = (0..hyper.batch_sequences)
            .map(|j| &dataset[(step * hyper.batch_sequences + j) % num_seqs])
            .collect();
        let (loss, grads) = batch_loss_and_grads(&current, &batch)?;
        if !loss.is_finite() {
            return Err(LabError::TrainingDiverged { step });
        }
        if step % record_every == 0 {
            records.push((step, loss));
        }
        let lr = hyper.step_size;
        let flat_grads = grads.flat();
        let mut flat = current.flat_params();
        for (p, g) in flat.iter_mut().zip(&flat_grads) {
            *p -= lr * g;
        }
        current.set_flat_params(&flat);
        if current.config.enforce_bounds {
            current.clip_projection_rows();
        }
    }

    let final_loss = {
        let (loss, _) = batch_loss_and_grads(&current, &all_refs)?;
        loss
    };
    if !final_loss.is_finite() {
        return Err(LabError::TrainingDiverged { step: hyper.steps });
    }
    Ok((
        current,
        LossTrace {
            initial_loss,
            records,
            final_loss,
        },
    ))
}
