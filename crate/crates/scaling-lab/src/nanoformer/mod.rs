//! A minimal single-head, multi-layer transformer with enforced
//! norm bounds, a Lipschitz feed-forward block, and full
//! instrumentation of hidden representations and attention weights.
//!
//! The layer map is `r = attn + FFN(attn)` with causal single-head
//! attention and no layer norm, so the instrumented vectors are
//! exactly the quantities the experiment drivers measure.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, Mat};
use crate::rng::CounterRng;
use crate::sources::TokenSequence;

mod assume;
mod train;

pub use assume::{check_assumptions, AssumptionReport};
pub use train::{batch_loss_and_grads, train, Grads, LossTrace, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// Bounded and 1-Lipschitz.
    Tanh,
    /// Makes the FFN a plain linear map; used by diagnostics that need
    /// a known Lipschitz constant.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Divisor applied to query-key dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogitScale {
    /// 1/sqrt(d_k), the standard convention (default).
    Sqrt,
    /// 1/d_k.
    Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub key_dim: usize,
    pub ffn_hidden_dim: usize,
    pub context_cap: usize,
    /// Norm caps for query/key/value vectors.
    pub m_q: f64,
    pub m_k: f64,
    pub m_v: f64,
    pub ffn_activation: Activation,
    /// Divides attention logits; > 0, default 1.
    pub attention_temperature: f64,
    pub logit_scale: LogitScale,
    pub enforce_bounds: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_dims = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("key_dim", self.key_dim),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("context_cap", self.context_cap),
        ];
        for (name, v) in positive_dims {
            if v == 0 {
                return Err(LabError::parameter(name, "must be positive"));
            }
        }
        for (name, v) in [("m_q", self.m_q), ("m_k", self.m_k), ("m_v", self.m_v)] {
            if !(v > 0.0) {
                return Err(LabError::parameter(name, "norm cap must be > 0"));
            }
        }
        if !(self.attention_temperature > 0.0) {
            return Err(LabError::parameter("attention_temperature", "must be > 0"));
        }
        Ok(())
    }

    /// Logit denominator: scale convention times temperature.
    pub fn logit_denominator(&self) -> f64 {
        let base = match self.logit_scale {
            LogitScale::Sqrt => (self.key_dim as f64).sqrt(),
            LogitScale::Linear => self.key_dim as f64,
        };
        base * self.attention_temperature
    }

    /// |logit| bound M' = M_Q M_K / sqrt(d_k) implied by the norm caps
    /// under the sqrt scale convention.
    pub fn logit_bound(&self) -> f64 {
        self.m_q * self.m_k / (self.key_dim as f64).sqrt()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_q: Mat, // d x d_k
    pub w_k: Mat, // d x d_k
    pub w_v: Mat, // d x d
    pub ffn_w1: Mat, // d x h
    pub ffn_w2: Mat, // h x d
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub embedding: Mat, // |V| x d
    pub layers: Vec<LayerParams>,
    pub head: Mat, // d x |V|
}

impl Model {
    pub fn parameter_count(&self) -> usize {
        self.mats().iter().map(|m| m.len()).sum()
    }

    pub(crate) fn mats(&self) -> Vec<&Mat> {
        let mut v = vec![&self.embedding];
        for l in &self.layers {
            v.extend([&l.w_q, &l.w_k, &l.w_v, &l.ffn_w1, &l.ffn_w2]);
        }
        v.push(&self.head);
        v
    }

    pub(crate) fn mats_mut(&mut self) -> Vec<&mut Mat> {
        let mut v: Vec<&mut Mat> = vec![&mut self.embedding];
        for l in &mut self.layers {
            v.push(&mut l.w_q);
            v.push(&mut l.w_k);
            v.push(&mut l.w_v);
            v.push(&mut l.ffn_w1);
            v.push(&mut l.ffn_w2);
        }
        v.push(&mut self.head);
        v
    }

    /// All weights flattened in a stable order (embedding, per-layer
    /// W_Q W_K W_V FFN1 FFN2, head).
    pub fn flat_params(&self) -> Vec<f64> {
        self.mats().iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.mats_mut() {
            let len = m.data.len();
            m.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        debug_assert_eq!(offset, flat.len());
    }

    /// Projects W_Q/W_K/W_V rows back inside their norm caps.
    pub fn clip_projection_rows(&mut self) {
        let (m_q, m_k, m_v) = (self.config.m_q, self.config.m_k, self.config.m_v);
        for l in &mut self.layers {
            l.w_q.clip_rows(m_q);
            l.w_k.clip_rows(m_k);
            l.w_v.clip_rows(m_v);
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| LabError::Experiment(format!("checkpoint encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| LabError::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| LabError::Experiment(format!("checkpoint decode: {e}")))
    }
}

/// Initializes a model with zero-mean weights at scale 1/sqrt(d),
/// deterministic in (config, seed).
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let d = config.model_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = CounterRng::new(seed);
    let mut fill = |rows: usize, cols: usize| {
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = scale * rng.next_gaussian();
        }
        m
    };
    let embedding = fill(config.vocab_size, d);
    let layers: Vec<LayerParams> = (0..config.num_layers)
        .map(|_| LayerParams {
            w_q: fill(d, config.key_dim),
            w_k: fill(d, config.key_dim),
            w_v: fill(d, d),
            ffn_w1: fill(d, config.ffn_hidden_dim),
            ffn_w2: fill(config.ffn_hidden_dim, d),
        })
        .collect();
    let head = fill(d, config.vocab_size);
    let mut model = Model {
        config: config.clone(),
        seed,
        embedding,
        layers,
        head,
    };
    if model.config.enforce_bounds {
        model.clip_projection_rows();
    }
    Ok(model)
}

/// Per-layer instrumentation collected during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Causal attention rows; row i has i+1 entries summing to 1.
    pub attn: Vec<Vec<f64>>,
    /// Raw attention outputs (pre-FFN vectors).
    pub pre_ffn: Vec<Vec<f64>>,
    /// Layer outputs r_l(x, i).
    pub reps: Vec<Vec<f64>>,
    // Caches for the backward pass.
    pub(crate) input: Vec<Vec<f64>>,
    pub(crate) q: Vec<Vec<f64>>,
    pub(crate) k: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
    /// Norm-clip scale applied to each q/k/v vector (1.0 when inactive).
    pub(crate) q_scale: Vec<f64>,
    pub(crate) k_scale: Vec<f64>,
    pub(crate) v_scale: Vec<f64>,
    pub(crate) ffn_hidden: Vec<Vec<f64>>,
}

/// Full forward instrumentation for one sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Per-position next-token log-probability vectors.
    pub log_probs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// Representation r_l(x, i).
    pub fn rep(&self, layer: usize, pos: usize) -> &[f64] {
        &self.layers[layer].reps[pos]
    }
}

/// Clips `vec` to norm at most `cap`, returning the applied scale
/// (1.0 when the cap is inactive).
fn clip_vec(vec: &mut [f64], cap: f64) -> f64 {
    let n = linalg::norm(vec);
    if n > cap {
        let s = cap / n;
        for x in vec.iter_mut() {
            *x *= s;
        }
        s
    } else {
        1.0
    }
}

impl Model {
    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardTrace> {
        self.forward_tokens(&seq.tokens)
    }

    pub fn forward_tokens(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        let n = tokens.len();
        if n > self.config.context_cap {
            return Err(LabError::Capacity {
                n,
                cap: self.config.context_cap,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(LabError::Usage(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        let denom = self.config.logit_denominator();
        let enforce = self.config.enforce_bounds;
        let act = self.config.ffn_activation;

        let mut h: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embedding.row(t).to_vec())
            .collect();
        let mut layer_traces = Vec::with_capacity(self.layers.len());

        for lp in &self.layers {
            let input = h.clone();
            let mut q = Vec::with_capacity(n);
            let mut k = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            let mut q_scale = vec![1.0; n];
            let mut k_scale = vec![1.0; n];
            let mut v_scale = vec![1.0; n];
            for (i, hi) in input.iter().enumerate() {
                let mut qi = lp.w_q.tr_mul_vec(hi);
                let mut ki = lp.w_k.tr_mul_vec(hi);
                let mut vi = lp.w_v.tr_mul_vec(hi);
                if enforce {
                    q_scale[i] = clip_vec(&mut qi, self.config.m_q);
                    k_scale[i] = clip_vec(&mut ki, self.config.m_k);
                    v_scale[i] = clip_vec(&mut vi, self.config.m_v);
                }
                q.push(qi);
                k.push(ki);
                v.push(vi);
            }

            let mut attn = Vec::with_capacity(n);
            let mut pre_ffn = Vec::with_capacity(n);
            for i in 0..n {
                // Causal: position i attends to positions 0..=i.
                let logits: Vec<f64> = (0..=i)
                    .map(|j| linalg::dot(&q[i], &k[j]) / denom)
                    .collect();
                let a = linalg::softmax(&logits);
                let mut r = vec![0.0; self.config.model_dim];
                for (j, &w) in a.iter().enumerate() {
                    linalg::axpy(w, &v[j], &mut r);
                }
                attn.push(a);
                pre_ffn.push(r);
            }

            let mut ffn_hidden = Vec::with_capacity(n);
            let mut reps = Vec::with_capacity(n);
            for r in &pre_ffn {
                let mut u = lp.ffn_w1.tr_mul_vec(r);
                for x in u.iter_mut() {
                    *x = act.apply(*x);
                }
                let f = lp.ffn_w2.tr_mul_vec(&u);
                let mut out = r.clone();
                linalg::axpy(1.0, &f, &mut out);
                ffn_hidden.push(u);
                reps.push(out);
            }

            h = reps.clone();
            layer_traces.push(LayerTrace {
                attn,
                pre_ffn,
                reps,
                input,
                q,
                k,
                v,
                q_scale,
                k_scale,
                v_scale,
                ffn_hidden,
            });
        }

        let log_probs = h
            .iter()
            .map(|hi| linalg::log_softmax(&self.head.tr_mul_vec(hi)))
            .collect();
        Ok(ForwardTrace {
            layers: layer_traces,
            log_probs,
        })
    }
}

/// Mean next-token cross-entropy (nats per predicted token) over a
/// set of sequences.
pub fn next_token_loss(model: &Model, data: &[TokenSequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(LabError::Usage("next_token_loss on empty data".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in data {
        if seq.len() < 2 {
            continue;
        }
        let trace = model.forward(seq)?;
        for t in 0..seq.len() - 1 {
            total -= trace.log_probs[t][seq.tokens[t + 1]];
            count += 1;
        }
    }
    if count == 0 {
        return Err(LabError::Usage(
            "no predictable positions: all sequences shorter than 2 tokens".into(),
        ));
    }
    Ok(total / count as f64)
}
