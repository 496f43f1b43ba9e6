//! Empirical checks of the boundedness and Lipschitz assumptions the
//! noise-scaling analysis relies on.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self};
use crate::rng::CounterRng;
use crate::sources::TokenSequence;

use super::Model;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub max_q_norm: f64,
    pub max_k_norm: f64,
    pub max_v_norm: f64,
    pub caps: (f64, f64, f64),
    /// Empirical FFN Lipschitz estimate per layer (max observed ratio
    /// over batch pairs and small perturbations).
    pub ffn_lipschitz: Vec<f64>,
    pub ffn_lipschitz_max: f64,
    /// Empirical softmax sensitivity: max ||softmax(z+dz)-softmax(z)|| / ||dz||.
    pub softmax_sensitivity: f64,
    /// Max |attention logit| observed, to compare with M' when bounds
    /// are enforced.
    pub max_logit: f64,
}

/// Evaluates one layer's FFN in isolation.
fn ffn_eval(model: &Model, layer: usize, input: &[f64]) -> Vec<f64> {
    let lp = &model.layers[layer];
    let act = model.config.ffn_activation;
    let mut u = lp.ffn_w1.tr_mul_vec(input);
    for x in u.iter_mut() {
        *x = act.apply(*x);
    }
    lp.ffn_w2.tr_mul_vec(&u)
}

pub fn check_assumptions(model: &Model, batch: &[TokenSequence]) -> Result<AssumptionReport> {
    if batch.is_empty() {
        return Err(LabError::Usage("check_assumptions on empty batch".into()));
    }
    let mut max_q: f64 = 0.0;
    let mut max_k: f64 = 0.0;
    let mut max_v: f64 = 0.0;
    let mut max_logit: f64 = 0.0;
    let denom = model.config.logit_denominator();
    let num_layers = model.layers.len();
    let mut pre_ffn_samples: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_layers];
    let mut logit_samples: Vec<Vec<f64>> = Vec::new();

    for seq in batch {
        let trace = model.forward(seq)?;
        for (l, lt) in trace.layers.iter().enumerate() {
            for i in 0..seq.len() {
                max_q = max_q.max(linalg::norm(&lt.q[i]));
                max_k = max_k.max(linalg::norm(&lt.k[i]));
                max_v = max_v.max(linalg::norm(&lt.v[i]));
            }
            for i in 0..seq.len() {
                let logits: Vec<f64> = (0..=i)
                    .map(|j| linalg::dot(&lt.q[i], &lt.k[j]) / denom)
                    .collect();
                for &z in &logits {
                    max_logit = max_logit.max(z.abs());
                }
                if logits.len() >= 2 && logit_samples.len() < 64 {
                    logit_samples.push(logits);
                }
            }
            pre_ffn_samples[l].extend(lt.pre_ffn.iter().cloned());
        }
    }

    // FFN Lipschitz estimate: pairwise ratios over observed inputs plus
    // random small perturbations around them.
    let mut rng = CounterRng::new(0xA55E);
    let mut per_layer = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let inputs = &pre_ffn_samples[l];
        let mut best: f64 = 0.0;
        let m = inputs.len().min(64);
        for a in 0..m {
            let fa = ffn_eval(model, l, &inputs[a]);
            for b in (a + 1)..m {
                let diff = linalg::sub(&inputs[a], &inputs[b]);
                let dn = linalg::norm(&diff);
                if dn < 1e-12 {
                    continue;
                }
                let fb = ffn_eval(model, l, &inputs[b]);
                best = best.max(linalg::norm(&linalg::sub(&fa, &fb)) / dn);
            }
            // Small random perturbations probe the local Jacobian.
            for _ in 0..8 {
                let eps = 1e-5;
                let mut pert = inputs[a].clone();
                let mut delta = vec![0.0; pert.len()];
                for (p, dl) in pert.iter_mut().zip(delta.iter_mut()) {
                    let g = rng.next_gaussian() * eps;
                    *p += g;
                    *dl = g;
                }
                let fp = ffn_eval(model, l, &pert);
                let dn = linalg::norm(&delta);
                if dn > 0.0 {
                    best = best.max(linalg::norm(&linalg::sub(&fp, &fa)) / dn);
                }
            }
        }
        per_layer.push(best);
    }
    let lip_max = per_layer.iter().cloned().fold(0.0, f64::max);

    // Softmax sensitivity on observed logit rows.
    let mut kappa: f64 = 0.0;
    for z in &logit_samples {
        let base = linalg::softmax(z);
        for _ in 0..8 {
            let mut zp = z.clone();
            let mut delta = vec![0.0; z.len()];
            for (v, dl) in zp.iter_mut().zip(delta.iter_mut()) {
                let g = rng.next_gaussian() * 1e-4;
                *v += g;
                *dl = g;
            }
            let per = linalg::softmax(&zp);
            let dn = linalg::norm(&delta);
            if dn > 0.0 {
                kappa = kappa.max(linalg::norm(&linalg::sub(&per, &base)) / dn);
            }
        }
    }

    Ok(AssumptionReport {
        max_q_norm: max_q,
        max_k_norm: max_k,
        max_v_norm: max_v,
        caps: (model.config.m_q, model.config.m_k, model.config.m_v),
        ffn_lipschitz: per_layer,
        ffn_lipschitz_max: lip_max,
        softmax_sensitivity: kappa,
        max_logit,
    })
}
