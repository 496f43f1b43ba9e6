//! Signal-to-noise estimation on the planted-copy task, capability
//! probing, emergence-threshold detection via sigmoid fitting, and the
//! SNR-vs-data scaling regression.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{self, Mat};
use crate::nanoformer::{init_model, train, Model, ModelConfig, TrainHyper};
use crate::rng::{derive_seed, CounterRng};
use crate::sources::{Source, SourceKind, TokenSequence};
use crate::stats;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnrEstimate {
    /// Weighted mean squared norm of class-conditional mean
    /// representations, centered at the grand mean.
    pub signal_power: f64,
    /// Mean squared within-class residual norm.
    pub noise_power: f64,
    pub snr: f64,
    pub class_counts: Vec<usize>,
    pub dropped_classes: usize,
    pub snr_ci: (f64, f64),
}

fn copy_lag(source: &Source) -> Result<usize> {
    match &source.kind {
        SourceKind::PlantedCopy { lag, .. } => Ok(*lag),
        _ => Err(LabError::Usage(
            "signal/noise estimation requires a planted-copy source".into(),
        )),
    }
}

/// Computes the SNR decomposition from labeled representation samples.
/// Classes with fewer than 10 samples are dropped; zero within-class
/// residual makes the ratio undefined and is an estimation error.
pub fn snr_from_labeled(
    samples: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<SnrEstimate> {
    if samples.len() != labels.len() || samples.is_empty() {
        return Err(LabError::Usage("samples and labels must align".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(LabError::Usage(format!("label {c} out of range")));
        }
        by_class[c].push(i);
    }
    let kept: Vec<usize> = (0..num_classes).filter(|&c| by_class[c].len() >= 10).collect();
    let dropped = num_classes - kept.len();
    if kept.is_empty() {
        return Err(LabError::Estimation(
            "all classes below the 10-sample floor".into(),
        ));
    }

    let dim = samples[0].len();
    let powers = |idx_by_class: &[Vec<usize>]| -> (f64, f64) {
        let total: usize = idx_by_class.iter().map(|v| v.len()).sum();
        let mut grand = vec![0.0; dim];
        let mut class_means = Vec::with_capacity(idx_by_class.len());
        for idx in idx_by_class {
            let mut m = vec![0.0; dim];
            for &i in idx {
                linalg::axpy(1.0, &samples[i], &mut m);
            }
            for x in m.iter_mut() {
                *x /= idx.len() as f64;
            }
            linalg::axpy(idx.len() as f64 / total as f64, &m, &mut grand);
            class_means.push(m);
        }
        let mut signal = 0.0;
        let mut noise = 0.0;
        for (idx, m) in idx_by_class.iter().zip(&class_means) {
            let s = linalg::sub(m, &grand);
            signal += idx.len() as f64 / total as f64 * linalg::dot(&s, &s);
            for &i in idx {
                let r = linalg::sub(&samples[i], m);
                noise += linalg::dot(&r, &r) / total as f64;
            }
        }
        (signal, noise)
    };

    let kept_idx: Vec<Vec<usize>> = kept.iter().map(|&c| by_class[c].clone()).collect();
    let (signal_power, noise_power) = powers(&kept_idx);
    if noise_power <= 0.0 {
        return Err(LabError::Estimation(
            "zero within-class residual: SNR undefined".into(),
        ));
    }
    let snr = signal_power / noise_power;

    // Percentile bootstrap, resampling within each class.
    let reps = 400;
    let mut rng = CounterRng::new(seed);
    let mut boot = Vec::with_capacity(reps);
    for _ in 0..reps {
        let resampled: Vec<Vec<usize>> = kept_idx
            .iter()
            .map(|idx| {
                (0..idx.len())
                    .map(|_| idx[rng.next_below(idx.len() as u64) as usize])
                    .collect()
            })
            .collect();
        let (s, n) = powers(&resampled);
        if n > 0.0 {
            boot.push(s / n);
        }
    }
    boot.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let snr_ci = if boot.len() >= 100 {
        (
            stats::percentile(&boot, 0.025),
            stats::percentile(&boot, 0.975),
        )
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(SnrEstimate {
        signal_power,
        noise_power,
        snr,
        class_counts: (0..num_classes).map(|c| by_class[c].len()).collect(),
        dropped_classes: dropped,
        snr_ci,
    })
}

/// Rejection-samples contexts until each planted class has `per_class`
/// representatives (or attempts run out), reading the layer output at
/// the last position. The class label is the token the next position
/// would copy.
pub fn collect_labeled_representations(
    model: &Model,
    source: &Source,
    per_class: usize,
    context: usize,
    layer: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let lag = copy_lag(source)?;
    if context <= lag {
        return Err(LabError::Usage(format!(
            "context {context} must exceed the copy lag {lag}"
        )));
    }
    let vocab = source.vocab_size;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut counts = vec![0usize; vocab];
    let max_attempts = per_class * vocab * 40;
    for attempt in 0..max_attempts {
        if counts.iter().all(|&c| c >= per_class) {
            break;
        }
        let seq = source.sample_sequence(
            context,
            derive_seed(seed, "snr-context", &[attempt as u64]),
        )?;
        let class = seq.tokens[context - lag];
        if counts[class] >= per_class {
            continue;
        }
        let trace = model.forward(&seq)?;
        samples.push(trace.rep(layer, context - 1).to_vec());
        labels.push(class);
        counts[class] += 1;
    }
    Ok((samples, labels))
}

pub fn estimate_signal_noise(
    model: &Model,
    source: &Source,
    per_class: usize,
    context: usize,
    layer: usize,
    seed: u64,
) -> Result<SnrEstimate> {
    if per_class < 50 {
        return Err(LabError::Plan(format!(
            "need >= 50 replicates per class, got {per_class}"
        )));
    }
    let (samples, labels) =
        collect_labeled_representations(model, source, per_class, context, layer, seed)?;
    snr_from_labeled(
        &samples,
        &labels,
        source.vocab_size,
        derive_seed(seed, "snr-bootstrap", &[]),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub ci: (f64, f64),
    pub positions: usize,
}

/// Shared probe loop over copy positions; `log_probs_for` supplies the
/// per-position predictive log-probabilities.
fn probe_positions(
    source: &Source,
    eval_tokens: usize,
    seq_len: usize,
    seed: u64,
    mut log_probs_for: impl FnMut(&TokenSequence) -> Result<Vec<Vec<f64>>>,
) -> Result<ProbeResult> {
    let lag = copy_lag(source)?;
    if seq_len <= lag + 1 {
        return Err(LabError::Usage("sequences too short for the probe".into()));
    }
    let num_seqs = eval_tokens.div_ceil(seq_len);
    let mut hits = 0usize;
    let mut total = 0usize;
    for i in 0..num_seqs {
        let seq = source.sample_sequence(seq_len, derive_seed(seed, "probe", &[i as u64]))?;
        let log_probs = log_probs_for(&seq)?;
        // Prediction at position t targets token t+1, which copies
        // token t+1-lag.
        for t in (lag - 1)..seq_len - 1 {
            let planted = seq.tokens[t + 1 - lag];
            let argmax = log_probs[t]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == planted {
                hits += 1;
            }
            total += 1;
        }
    }
    if total < 1000 {
        return Err(LabError::Plan(format!(
            "probe needs >= 1000 positions, got {total}"
        )));
    }
    let accuracy = hits as f64 / total as f64;
    let se = (accuracy * (1.0 - accuracy) / total as f64).sqrt();
    Ok(ProbeResult {
        accuracy,
        ci: (
            (accuracy - 1.96 * se).max(0.0),
            (accuracy + 1.96 * se).min(1.0),
        ),
        positions: total,
    })
}

/// Next-token accuracy of the model at planted copy positions.
pub fn capability_probe(
    model: &Model,
    source: &Source,
    eval_tokens: usize,
    seq_len: usize,
    seed: u64,
) -> Result<ProbeResult> {
    probe_positions(source, eval_tokens, seq_len, seed, |seq| {
        Ok(model.forward(seq)?.log_probs)
    })
}

/// Accuracy of the true conditional law, the perfect-predictor
/// reference for the probe.
pub fn oracle_probe(
    source: &Source,
    eval_tokens: usize,
    seq_len: usize,
    seed: u64,
) -> Result<ProbeResult> {
    probe_positions(source, eval_tokens, seq_len, seed, |seq| {
        // Row t holds the law of token t+1 given tokens[..=t].
        (0..seq.len())
            .map(|t| {
                let law = source.conditional_distribution(&seq.tokens[..=t.min(seq.len() - 1)])?;
                Ok(law.iter().map(|&p| (p + 1e-300).ln()).collect())
            })
            .collect()
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub lower: f64,
    pub upper: f64,
    pub midpoint: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

/// Least-squares four-parameter sigmoid of y on x: grid search over
/// (midpoint, slope) with the two asymptote parameters solved linearly
/// at each grid point, then two rounds of local refinement.
pub fn fit_sigmoid(xs: &[f64], ys: &[f64]) -> Option<SigmoidFit> {
    if xs.len() < 3 || xs.len() != ys.len() {
        return None;
    }
    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(xmax - xmin).is_finite() || xmax <= xmin {
        return None;
    }
    let ymean = stats::mean(ys);
    let syy: f64 = ys.iter().map(|&y| (y - ymean) * (y - ymean)).sum();
    if syy <= 1e-12 {
        return None; // flat response: nothing to fit
    }

    let eval = |m: f64, s: f64| -> Option<(f64, f64, f64)> {
        // Solve min over (a, c) of sum (y - a - c g(x))^2 subject to
        // the asymptotes staying inside [0, 1]: a >= 0, c >= 0,
        // a + c <= 1. Accuracies live in [0, 1], and without the box
        // the two linear parameters are badly determined on sparse
        // curves.
        let gs: Vec<f64> = xs.iter().map(|&x| 1.0 / (1.0 + (-s * (x - m)).exp())).collect();
        let n = xs.len() as f64;
        let sg: f64 = gs.iter().sum();
        let sgg: f64 = gs.iter().map(|&g| g * g).sum();
        let sy: f64 = ys.iter().sum();
        let sgy: f64 = gs.iter().zip(ys).map(|(&g, &y)| g * y).sum();
        let sse = |a: f64, c: f64| -> f64 {
            gs.iter()
                .zip(ys)
                .map(|(&g, &y)| {
                    let e = y - a - c * g;
                    e * e
                })
                .sum()
        };
        let mut candidates: Vec<(f64, f64)> = Vec::new();
        let det = n * sgg - sg * sg;
        if det.abs() > 1e-12 {
            candidates.push((
                (sy * sgg - sg * sgy) / det,
                (n * sgy - sg * sy) / det,
            ));
        }
        // Active-constraint candidates: floor pinned at 0, and
        // ceiling pinned at 1.
        if sgg > 1e-12 {
            candidates.push((0.0, (sgy / sgg).clamp(0.0, 1.0)));
        }
        let s1g: f64 = gs.iter().map(|&g| (1.0 - g) * (1.0 - g)).sum();
        if s1g > 1e-12 {
            let a = gs
                .iter()
                .zip(ys)
                .map(|(&g, &y)| (y - g) * (1.0 - g))
                .sum::<f64>()
                / s1g;
            let a = a.clamp(0.0, 1.0);
            candidates.push((a, 1.0 - a));
        }
        candidates
            .into_iter()
            .filter(|&(a, c)| a >= 0.0 && c >= 0.0 && a + c <= 1.0 + 1e-12)
            .map(|(a, c)| (a, c, sse(a, c)))
            .min_by(|x, y| x.2.partial_cmp(&y.2).unwrap())
    };

    let mut best: Option<(f64, f64, f64, f64, f64)> = None; // (m, s, a, c, ss)
    let consider = |m: f64, s: f64, best: &mut Option<(f64, f64, f64, f64, f64)>| {
        if let Some((a, c, ss)) = eval(m, s) {
            if best.map_or(true, |b| ss < b.4) {
                *best = Some((m, s, a, c, ss));
            }
        }
    };
    let slopes: Vec<f64> = (0..28).map(|i| 0.1 * 1.3f64.powi(i)).collect();
    for i in 0..=48 {
        let m = xmin + (xmax - xmin) * i as f64 / 48.0;
        for &s in &slopes {
            consider(m, s, &mut best);
        }
    }
    // Local refinement around the grid optimum.
    for round in 0..2 {
        let (m0, s0, ..) = best?;
        let dm = (xmax - xmin) / 48.0 / 4f64.powi(round);
        for i in -6..=6 {
            for j in -6..=6 {
                let m = m0 + dm * i as f64;
                let s = s0 * 1.07f64.powi(j);
                consider(m, s, &mut best);
            }
        }
    }
    let (m, s, a, c, ss) = best?;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| y - (a + c / (1.0 + (-s * (x - m)).exp())))
        .collect();
    Some(SigmoidFit {
        lower: a,
        upper: a + c,
        midpoint: m,
        slope: s,
        r_squared: 1.0 - ss / syy,
        residuals,
    })
}

/// SNR at which the fitted curve crosses the criterion accuracy
/// between chance and the fitted ceiling. `None` when the curve never
/// crosses in the rising direction.
pub fn detect_threshold(fit: &SigmoidFit, chance: f64, criterion: f64) -> Option<f64> {
    let c = fit.upper - fit.lower;
    if c <= 1e-9 || fit.slope <= 0.0 || fit.upper <= chance {
        return None;
    }
    let target = chance + criterion * (fit.upper - chance);
    let g = (target - fit.lower) / c;
    if !(0.0 < g && g < 1.0) {
        return None;
    }
    let x = fit.midpoint - (1.0 / g - 1.0).ln() / fit.slope;
    Some(x.exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DominanceReport {
    /// Fraction of samples where the signal term exceeds the
    /// first-order fluctuation term.
    pub fraction_dominant: f64,
    /// Mean of signal/|fluctuation| over samples with a nonzero
    /// fluctuation; infinite when every fluctuation vanishes.
    pub mean_ratio: f64,
    pub samples: usize,
}

/// Summarizes per-sample signal magnitudes against first-order
/// fluctuation magnitudes.
pub fn dominance_summary(signals: &[f64], fluctuations: &[f64]) -> Result<DominanceReport> {
    if signals.len() != fluctuations.len() || signals.is_empty() {
        return Err(LabError::Usage("dominance inputs must align".into()));
    }
    let mut dominant = 0usize;
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    for (&s, &t) in signals.iter().zip(fluctuations) {
        let t = t.abs();
        if t < s.abs() {
            dominant += 1;
        }
        if t > 0.0 {
            ratio_sum += s.abs() / t;
            ratio_count += 1;
        }
    }
    Ok(DominanceReport {
        fraction_dominant: dominant as f64 / signals.len() as f64,
        mean_ratio: if ratio_count > 0 {
            ratio_sum / ratio_count as f64
        } else {
            f64::INFINITY
        },
        samples: signals.len(),
    })
}

/// Multinomial logistic readout trained by full-batch gradient descent;
/// returns the d x C weight matrix.
pub fn train_logistic(
    samples: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    steps: usize,
    step_size: f64,
) -> Result<Mat> {
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(LabError::Usage("logistic readout needs labeled samples".into()));
    }
    let dim = samples[0].len();
    let mut w = Mat::zeros(dim, num_classes);
    let n = samples.len() as f64;
    for _ in 0..steps {
        let mut grad = Mat::zeros(dim, num_classes);
        for (h, &c) in samples.iter().zip(labels) {
            let p = linalg::softmax(&w.tr_mul_vec(h));
            for j in 0..num_classes {
                let coef = (p[j] - if j == c { 1.0 } else { 0.0 }) / n;
                for (r, &hr) in h.iter().enumerate() {
                    grad.data[r * num_classes + j] += coef * hr;
                }
            }
        }
        for (wv, gv) in w.data.iter_mut().zip(&grad.data) {
            *wv -= step_size * gv;
        }
    }
    Ok(w)
}

/// First-order Taylor dominance check: the surrogate probability at
/// each class mean against the surrogate gradient applied to the
/// within-class residuals.
pub fn taylor_dominance_diagnostic(
    samples: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<DominanceReport> {
    let w = train_logistic(samples, labels, num_classes, 300, 2.0)?;
    let dim = samples[0].len();
    let mut class_means: Vec<Vec<f64>> = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (h, &c) in samples.iter().zip(labels) {
        linalg::axpy(1.0, h, &mut class_means[c]);
        counts[c] += 1;
    }
    for (m, &cnt) in class_means.iter_mut().zip(&counts) {
        if cnt > 0 {
            for x in m.iter_mut() {
                *x /= cnt as f64;
            }
        }
    }
    let mut signals = Vec::with_capacity(samples.len());
    let mut flucts = Vec::with_capacity(samples.len());
    for (h, &c) in samples.iter().zip(labels) {
        if counts[c] == 0 {
            continue;
        }
        let mu = &class_means[c];
        let p = linalg::softmax(&w.tr_mul_vec(mu));
        // Gradient of the class-c softmax probability at the class mean.
        let mut g = vec![0.0; dim];
        for j in 0..num_classes {
            let coef = p[c] * (if j == c { 1.0 } else { 0.0 } - p[j]);
            for (gr, row) in g.iter_mut().zip(0..dim) {
                *gr += coef * w.data[row * num_classes + j];
            }
        }
        let n_vec = linalg::sub(h, mu);
        signals.push(p[c]);
        flucts.push(linalg::dot(&g, &n_vec));
    }
    dominance_summary(&signals, &flucts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergenceCell {
    pub p_index: usize,
    pub param_count: usize,
    pub data_tokens: usize,
    pub seed_index: usize,
    pub snr: Option<SnrEstimate>,
    pub accuracy: f64,
    pub acc_ci: (f64, f64),
    pub dominance: Option<DominanceReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergenceCurve {
    pub cells: Vec<EmergenceCell>,
    pub chance: f64,
    pub criterion: f64,
    pub sigmoid: Option<SigmoidFit>,
    pub theta_c: Option<f64>,
    /// Accuracy level whose crossing defines theta_c.
    pub threshold_accuracy: Option<f64>,
    pub flags: Vec<String>,
    /// Pearson correlation between per-cell dominance fraction and
    /// probe accuracy, when dominance was computed for >= 3 cells.
    pub dominance_accuracy_corr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergencePlan {
    /// Model configurations in increasing parameter count.
    pub capacities: Vec<ModelConfig>,
    /// Training data sizes in tokens, strictly increasing.
    pub data_grid: Vec<usize>,
    pub seeds: usize,
    /// Planted-copy source supplying the capability ground truth.
    pub source: Source,
    /// Per-cell optimizer template; the step count is derived from
    /// `passes` epochs over the *largest* dataset, so every cell gets
    /// the same optimization budget and D is the only thing that
    /// varies along the data axis. Smaller datasets simply cycle.
    pub hyper: TrainHyper,
    pub passes: usize,
    /// Replicates per class for the SNR estimate.
    pub snr_per_class: usize,
    pub snr_context: usize,
    pub layer: usize,
    pub probe_tokens: usize,
    /// Criterion in [0,1] between chance and the fitted ceiling.
    pub criterion: f64,
    /// Run the Taylor dominance diagnostic on first-seed cells.
    pub taylor_diagnostic: bool,
    pub seed: u64,
}

impl EmergencePlan {
    pub fn validate(&self) -> Result<()> {
        if self.capacities.len() < 2 {
            return Err(LabError::Plan("need >= 2 capacities".into()));
        }
        for c in &self.capacities {
            c.validate()?;
        }
        if self.data_grid.len() < 2 {
            return Err(LabError::Plan("need >= 2 data sizes".into()));
        }
        if !self.data_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(LabError::Plan("data grid must be strictly increasing".into()));
        }
        if self.capacities.len() * self.data_grid.len() < 6 {
            return Err(LabError::Plan("grid must span >= 6 cells".into()));
        }
        if self.seeds == 0 || self.passes == 0 {
            return Err(LabError::Plan("seeds and passes must be positive".into()));
        }
        let lag = copy_lag(&self.source)?;
        if self.snr_context <= lag || self.hyper.seq_len <= lag + 1 {
            return Err(LabError::Plan("contexts must exceed the copy lag".into()));
        }
        if self.snr_per_class < 50 {
            return Err(LabError::Plan("need >= 50 SNR replicates per class".into()));
        }
        if !(0.0 < self.criterion && self.criterion < 1.0) {
            return Err(LabError::Plan("criterion must lie in (0,1)".into()));
        }
        if self.layer >= self.capacities.iter().map(|c| c.num_layers).min().unwrap() {
            return Err(LabError::Plan("measured layer out of range".into()));
        }
        for &d in &self.data_grid {
            if d % self.hyper.seq_len != 0 {
                return Err(LabError::Plan(format!(
                    "data size {d} is not a multiple of the sequence length {}",
                    self.hyper.seq_len
                )));
            }
        }
        Ok(())
    }
}

pub fn emergence_sweep(plan: &EmergencePlan) -> Result<EmergenceCurve> {
    plan.validate()?;
    let chance = 1.0 / plan.source.vocab_size as f64;
    let mut coords = Vec::new();
    for p in 0..plan.capacities.len() {
        for &d in &plan.data_grid {
            for s in 0..plan.seeds {
                coords.push((p, d, s));
            }
        }
    }
    let cells: Vec<Result<EmergenceCell>> = coords
        .par_iter()
        .map(|&(p, d, s)| {
            let cfg = &plan.capacities[p];
            let init_seed =
                derive_seed(plan.seed, "emergence-init", &[p as u64, d as u64, s as u64]);
            let train_seed =
                derive_seed(plan.seed, "emergence-train", &[p as u64, d as u64, s as u64]);
            let cell_seed =
                derive_seed(plan.seed, "emergence-cell", &[p as u64, d as u64, s as u64]);
            let model = init_model(cfg, init_seed)?;
            let mut hyper = plan.hyper.clone();
            let batch_tokens = hyper.batch_sequences * hyper.seq_len;
            let d_max = *plan.data_grid.last().unwrap();
            hyper.steps = (plan.passes * d_max).div_ceil(batch_tokens).max(1);
            let (trained, _) = train(&model, &plan.source, d, &hyper, train_seed)?;
            let (samples, labels) = collect_labeled_representations(
                &trained,
                &plan.source,
                plan.snr_per_class,
                plan.snr_context,
                plan.layer,
                cell_seed,
            )?;
            let snr = match snr_from_labeled(
                &samples,
                &labels,
                plan.source.vocab_size,
                derive_seed(cell_seed, "snr-bootstrap", &[]),
            ) {
                Ok(e) => Some(e),
                Err(LabError::Estimation(_)) => None,
                Err(e) => return Err(e),
            };
            let probe = capability_probe(
                &trained,
                &plan.source,
                plan.probe_tokens,
                plan.hyper.seq_len,
                derive_seed(cell_seed, "probe", &[]),
            )?;
            let dominance = if plan.taylor_diagnostic && s == 0 {
                taylor_dominance_diagnostic(&samples, &labels, plan.source.vocab_size).ok()
            } else {
                None
            };
            Ok(EmergenceCell {
                p_index: p,
                param_count: model.parameter_count(),
                data_tokens: d,
                seed_index: s,
                snr,
                accuracy: probe.accuracy,
                acc_ci: probe.ci,
                dominance,
            })
        })
        .collect();
    let cells: Vec<EmergenceCell> = cells.into_iter().collect::<Result<_>>()?;
    Ok(assemble_curve(cells, chance, plan.criterion))
}

/// Fits the sigmoid and threshold over an existing cell table; split
/// out so synthetic cells can exercise the detection logic.
///
/// The fit runs on per-(capacity, data-size) group means of ln SNR
/// and accuracy rather than raw cells: seed replicates of one grid
/// point scatter around a common operating point, and averaging them
/// first keeps that scatter out of the curve-shape residual.
pub fn assemble_curve(cells: Vec<EmergenceCell>, chance: f64, criterion: f64) -> EmergenceCurve {
    let mut groups: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in &cells {
        if let Some(snr) = &c.snr {
            if snr.snr > 0.0 {
                let entry = groups.entry((c.p_index, c.data_tokens)).or_default();
                entry.0.push(snr.snr.ln());
                entry.1.push(c.accuracy);
            }
        }
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lnx, acc) in groups.values() {
        xs.push(lnx.iter().sum::<f64>() / lnx.len() as f64);
        ys.push(acc.iter().sum::<f64>() / acc.len() as f64);
    }
    let mut flags = Vec::new();
    let sigmoid = fit_sigmoid(&xs, &ys);
    if sigmoid.is_none() {
        flags.push("sigmoid fit unavailable (flat or degenerate data)".into());
    }
    let theta_c = sigmoid
        .as_ref()
        .and_then(|f| detect_threshold(f, chance, criterion));
    let threshold_accuracy = sigmoid
        .as_ref()
        .filter(|_| theta_c.is_some())
        .map(|f| chance + criterion * (f.upper - chance));
    if theta_c.is_none() {
        flags.push("no threshold detected".into());
    }
    let pairs: Vec<(f64, f64)> = cells
        .iter()
        .filter_map(|c| c.dominance.as_ref().map(|d| (d.fraction_dominant, c.accuracy)))
        .collect();
    let dominance_accuracy_corr = if pairs.len() >= 3 {
        let fs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let accs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Some(stats::pearson(&fs, &accs))
    } else {
        None
    };
    EmergenceCurve {
        cells,
        chance,
        criterion,
        sigmoid,
        theta_c,
        threshold_accuracy,
        flags,
        dominance_accuracy_corr,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Slope of ln SNR on ln D.
    pub alpha: f64,
    /// Per-capacity intercepts, in capacity order.
    pub phi: Vec<(usize, f64)>,
    pub phi_nondecreasing: bool,
    pub residual_variance: f64,
    /// Baseline noise constant with the smallest capacity's Phi
    /// normalized to 1: sigma^2 = exp(-phi_0).
    pub sigma_sq: f64,
    pub cells_used: usize,
}

/// OLS of ln SNR on ln D with one intercept per capacity.
pub fn snr_scaling_fit(cells: &[EmergenceCell]) -> Result<ScalingFit> {
    let mut rows = Vec::new();
    for c in cells {
        if let Some(snr) = &c.snr {
            if snr.snr > 0.0 {
                rows.push((c.p_index, (c.data_tokens as f64).ln(), snr.snr.ln()));
            }
        }
    }
    if rows.len() < 6 {
        return Err(LabError::InsufficientSamples {
            need: 6,
            got: rows.len(),
        });
    }
    let mut p_values: Vec<usize> = rows.iter().map(|r| r.0).collect();
    p_values.sort_unstable();
    p_values.dedup();
    let mut d_values: Vec<u64> = rows.iter().map(|r| r.1.to_bits()).collect();
    d_values.sort_unstable();
    d_values.dedup();
    if p_values.len() < 2 || d_values.len() < 2 {
        return Err(LabError::Plan(
            "scaling fit needs >= 2 distinct capacities and data sizes".into(),
        ));
    }
    let k = p_values.len();
    // Design: [ln D, 1{P=p_1}, ..., 1{P=p_k}]; normal equations.
    let dim = k + 1;
    let mut xtx = Mat::zeros(dim, dim);
    let mut xty = vec![0.0; dim];
    for &(p, ld, ls) in &rows {
        let pi = p_values.iter().position(|&v| v == p).unwrap();
        let mut x = vec![0.0; dim];
        x[0] = ld;
        x[1 + pi] = 1.0;
        for i in 0..dim {
            for j in 0..dim {
                xtx.data[i * dim + j] += x[i] * x[j];
            }
            xty[i] += x[i] * ls;
        }
    }
    let theta = linalg::solve(&xtx, &xty)?;
    let alpha = theta[0];
    let phi: Vec<(usize, f64)> = p_values
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, theta[1 + i]))
        .collect();
    let phi_nondecreasing = phi.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-10);
    let mut ss = 0.0;
    for &(p, ld, ls) in &rows {
        let pi = p_values.iter().position(|&v| v == p).unwrap();
        let e = ls - alpha * ld - theta[1 + pi];
        ss += e * e;
    }
    let dof = rows.len().saturating_sub(dim).max(1) as f64;
    Ok(ScalingFit {
        alpha,
        phi: phi.clone(),
        phi_nondecreasing,
        residual_variance: ss / dof,
        sigma_sq: (-phi[0].1).exp(),
        cells_used: rows.len(),
    })
}
