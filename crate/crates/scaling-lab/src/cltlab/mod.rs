//! Noise-scaling experiments: variance of hidden representations vs
//! context size, Gaussian convergence of representation samples,
//! attention-weight concentration against the Hoeffding-form tail, and
//! block partial-sum diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg;
use crate::nanoformer::{init_model, Model, ModelConfig};
use crate::rng::{derive_seed, CounterRng};
use crate::sources::{Source, SourceKind};
use crate::stats::{
    self, bootstrap_ci, hoeffding_tail, lilliefors_null_distribution, power_law_fit,
    projection_ks_gaussianity, standard_normal_cdf, KsCalibration, KsResult, PowerLawFit,
    ProjectionKsSummary,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltPlan {
    pub config: ModelConfig,
    pub model_seed: u64,
    /// Zero out W_Q so attention is exactly uniform (the diffuse
    /// reference regime the scaling assertion targets).
    pub zero_query: bool,
    pub source: Source,
    /// Strictly increasing context sizes n_1 < ... < n_G.
    pub context_grid: Vec<usize>,
    /// Replicate contexts per grid point.
    pub replicates: usize,
    /// Layer indices whose output representations are measured.
    pub layers: Vec<usize>,
    /// Block width w for partial-sum diagnostics.
    pub block_width: usize,
    pub seed: u64,
}

impl CltPlan {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.context_grid.len() < 3 {
            return Err(LabError::Plan(format!(
                "context grid needs >= 3 points, got {}",
                self.context_grid.len()
            )));
        }
        if !self.context_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(LabError::Plan("context grid must be strictly increasing".into()));
        }
        if self.replicates < 32 {
            return Err(LabError::Plan(format!(
                "replicates must be >= 32, got {}",
                self.replicates
            )));
        }
        if self.block_width < 2 {
            return Err(LabError::Plan(format!(
                "block width must be >= 2, got {}",
                self.block_width
            )));
        }
        if let Some(&n) = self.context_grid.iter().find(|&&n| n < 2 * self.block_width) {
            return Err(LabError::Plan(format!(
                "context size {n} is below twice the block width {}",
                self.block_width
            )));
        }
        let max_n = *self.context_grid.last().unwrap();
        if max_n > self.config.context_cap {
            return Err(LabError::Plan(format!(
                "context grid maximum {max_n} exceeds context_cap {}",
                self.config.context_cap
            )));
        }
        if self.layers.is_empty() {
            return Err(LabError::Plan("no measured layers".into()));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l >= self.config.num_layers) {
            return Err(LabError::Plan(format!(
                "measured layer {l} out of range for {} layers",
                self.config.num_layers
            )));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<Model> {
        let mut model = init_model(&self.config, self.model_seed)?;
        if self.zero_query {
            for layer in model.layers.iter_mut() {
                for v in layer.w_q.data.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceCell {
    pub layer: usize,
    pub n: usize,
    pub variance: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFit {
    pub layer: usize,
    /// Absent when a variance in the column is zero (log-log fit
    /// undefined), e.g. for a constant source.
    pub fit: Option<PowerLawFit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianityCell {
    pub layer: usize,
    pub n: usize,
    pub summary: ProjectionKsSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub epsilon: f64,
    pub empirical_tail: f64,
    pub bound: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcentrationTable {
    pub n: usize,
    pub m_prime: f64,
    pub rows: Vec<ConcentrationRow>,
    pub violations: usize,
    /// The bound is derived for block averages; it is applied here to
    /// individual attention weights, which is the stricter reading.
    pub footnote: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSumDiagnostic {
    pub n: usize,
    pub block_width: usize,
    pub num_blocks: usize,
    /// Max over replicates of || sum_m S_m - (r_tilde - mean) ||.
    pub max_reconstruction_residual: f64,
    pub mean_abs_cross_block_correlation: f64,
    pub normalized_total_ks: KsResult,
    /// Vector partial sums S_m of the first replicate, for inspection.
    pub example_block_sums: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfnMappingCell {
    pub layer: usize,
    pub n: usize,
    pub pre_variance: f64,
    pub post_variance: f64,
    pub ratio: f64,
    pub bound: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseScalingReport {
    pub cells: Vec<VarianceCell>,
    pub fits: Vec<LayerFit>,
    pub gaussianity: Vec<GaussianityCell>,
    pub concentration: Option<ConcentrationTable>,
    pub block: Option<BlockSumDiagnostic>,
    pub ffn_mapping: Vec<FfnMappingCell>,
}

/// Samples one replicate context of length `n` and returns its forward
/// trace. Replicate seeds are derived from (plan seed, n, r) so results
/// do not depend on scheduling.
fn replicate_trace(plan: &CltPlan, model: &Model, n: usize, r: usize) -> Result<crate::nanoformer::ForwardTrace> {
    let seed = derive_seed(plan.seed, "clt-context", &[n as u64, r as u64]);
    let seq = plan.source.sample_sequence(n, seed)?;
    model.forward(&seq)
}

/// Collects the layer-output representation at the last position for
/// every replicate, in replicate order.
fn collect_representations(
    plan: &CltPlan,
    model: &Model,
    n: usize,
    replicates: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let per_rep: Vec<Result<Vec<Vec<f64>>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let trace = replicate_trace(plan, model, n, r)?;
            Ok(plan
                .layers
                .iter()
                .map(|&l| trace.rep(l, n - 1).to_vec())
                .collect())
        })
        .collect();
    let mut by_layer = vec![Vec::with_capacity(replicates); plan.layers.len()];
    for rep in per_rep {
        for (slot, v) in rep?.into_iter().enumerate() {
            by_layer[slot].push(v);
        }
    }
    Ok(by_layer)
}

fn variance_with_ci(samples: &[Vec<f64>], seed: u64) -> Result<(f64, f64, f64)> {
    let summary = stats::moments(samples)?;
    let mu = &summary.mean;
    let r = samples.len() as f64;
    // Bootstrap the mean squared deviation around the full-sample mean,
    // rescaled to the unbiased estimator.
    let sq: Vec<f64> = samples
        .iter()
        .map(|s| {
            let d = linalg::sub(s, mu);
            linalg::dot(&d, &d)
        })
        .collect();
    let scale = r / (r - 1.0);
    let (lo, hi) = bootstrap_ci(&sq, |xs| stats::mean(xs) * scale, 0.95, 500, seed)?;
    Ok((summary.noise_variance, lo, hi))
}

pub fn measure_representation_noise(plan: &CltPlan) -> Result<NoiseScalingReport> {
    plan.validate()?;
    let model = plan.build_model()?;
    let mut cells = Vec::new();
    for &n in &plan.context_grid {
        let by_layer = collect_representations(plan, &model, n, plan.replicates)?;
        for (slot, &layer) in plan.layers.iter().enumerate() {
            let ci_seed = derive_seed(plan.seed, "clt-var-ci", &[layer as u64, n as u64]);
            let (variance, ci_lo, ci_hi) = variance_with_ci(&by_layer[slot], ci_seed)?;
            cells.push(VarianceCell {
                layer,
                n,
                variance,
                ci_lo,
                ci_hi,
            });
        }
    }
    let mut fits = Vec::new();
    for &layer in &plan.layers {
        let xs: Vec<f64> = cells
            .iter()
            .filter(|c| c.layer == layer)
            .map(|c| c.n as f64)
            .collect();
        let ys: Vec<f64> = cells
            .iter()
            .filter(|c| c.layer == layer)
            .map(|c| c.variance)
            .collect();
        let fit = if ys.iter().all(|&y| y > 0.0) {
            Some(power_law_fit(&xs, &ys)?)
        } else {
            None
        };
        fits.push(LayerFit { layer, fit });
    }
    Ok(NoiseScalingReport {
        cells,
        fits,
        gaussianity: Vec::new(),
        concentration: None,
        block: None,
        ffn_mapping: Vec::new(),
    })
}

pub fn gaussianity_sweep(plan: &CltPlan) -> Result<Vec<GaussianityCell>> {
    plan.validate()?;
    if plan.replicates < 200 {
        return Err(LabError::Plan(format!(
            "gaussianity sweep needs >= 200 replicates for test power, got {}",
            plan.replicates
        )));
    }
    let model = plan.build_model()?;
    // One Lilliefors null per sample size, shared across all
    // projections and grid points.
    let null = lilliefors_null_distribution(
        plan.replicates,
        2000,
        derive_seed(plan.seed, "clt-lilliefors", &[]),
    );
    let mut out = Vec::new();
    for &n in &plan.context_grid {
        let by_layer = collect_representations(plan, &model, n, plan.replicates)?;
        for (slot, &layer) in plan.layers.iter().enumerate() {
            let proj_seed = derive_seed(plan.seed, "clt-projections", &[layer as u64, n as u64]);
            let summary =
                projection_ks_gaussianity(&by_layer[slot], 50, 0.01, &null, proj_seed)?;
            out.push(GaussianityCell { layer, n, summary });
        }
    }
    Ok(out)
}

pub fn attention_concentration(plan: &CltPlan, eps_grid: &[f64]) -> Result<ConcentrationTable> {
    plan.validate()?;
    if !plan.config.enforce_bounds {
        return Err(LabError::Plan(
            "attention concentration requires enforce_bounds (M' undefined otherwise)".into(),
        ));
    }
    if eps_grid.is_empty() || eps_grid.iter().any(|&e| e <= 0.0) {
        return Err(LabError::Plan("epsilon grid must be positive".into()));
    }
    let model = plan.build_model()?;
    let n = *plan.context_grid.last().unwrap();
    let layer = plan.layers[0];
    // Last-position attention row per replicate.
    let rows: Vec<Result<Vec<f64>>> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| {
            let trace = replicate_trace(plan, &model, n, r)?;
            Ok(trace.layers[layer].attn[n - 1].clone())
        })
        .collect();
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    let reps = rows.len() as f64;
    // Per-position mean weight across replicates.
    let mut mean_w = vec![0.0; n];
    for row in &rows {
        for (m, &a) in mean_w.iter_mut().zip(row) {
            *m += a / reps;
        }
    }
    let m_prime = model.config.logit_bound();
    // The concentration window is the attention span itself.
    let w = n;
    let total = (rows.len() * n) as f64;
    let mut table_rows = Vec::new();
    let mut violations = 0;
    for &eps in eps_grid {
        let mut exceed = 0usize;
        for row in &rows {
            for (k, &a) in row.iter().enumerate() {
                if (a - mean_w[k]).abs() > eps {
                    exceed += 1;
                }
            }
        }
        let empirical = exceed as f64 / total;
        let bound = hoeffding_tail(eps, w, m_prime, 1.0);
        let se = (empirical * (1.0 - empirical) / reps).sqrt();
        let violation = empirical > bound + 3.0 * se;
        if violation {
            violations += 1;
        }
        table_rows.push(ConcentrationRow {
            epsilon: eps,
            empirical_tail: empirical,
            bound,
            violation,
        });
    }
    Ok(ConcentrationTable {
        n,
        m_prime,
        rows: table_rows,
        violations,
        footnote: "bound derived for width-w block averages, applied to individual weights"
            .into(),
    })
}

pub fn block_sum_diagnostics(plan: &CltPlan) -> Result<BlockSumDiagnostic> {
    plan.validate()?;
    match &plan.source.kind {
        SourceKind::Iid { .. } | SourceKind::BlockStationary { .. } => {}
        _ => {
            return Err(LabError::Plan(
                "block diagnostics require an iid or block-stationary source".into(),
            ))
        }
    }
    let model = plan.build_model()?;
    let n = *plan.context_grid.last().unwrap();
    let layer = plan.layers[0];
    let w = plan.block_width;
    let num_blocks = n / w;
    let d = model.config.model_dim;

    // Fixed unit direction for scalar block summaries.
    let mut dir_rng = CounterRng::new(derive_seed(plan.seed, "clt-block-dir", &[]));
    let mut dir: Vec<f64> = (0..d).map(|_| dir_rng.next_gaussian()).collect();
    let nrm = linalg::norm(&dir);
    for v in dir.iter_mut() {
        *v /= nrm;
    }

    struct Rep {
        /// Projected summand <a_ik v_k, dir> per context position.
        scalars: Vec<f64>,
        /// || sum_k a_ik v_k - r_tilde ||, an exact-algebra residual.
        residual: f64,
        block_sums: Option<Vec<Vec<f64>>>,
    }
    let reps: Vec<Result<Rep>> = (0..plan.replicates)
        .into_par_iter()
        .map(|r| {
            let trace = replicate_trace(plan, &model, n, r)?;
            let lt = &trace.layers[layer];
            let row = &lt.attn[n - 1];
            let mut scalars = Vec::with_capacity(n);
            let mut total = vec![0.0; d];
            let mut block_sums = if r == 0 {
                Some(vec![vec![0.0; d]; num_blocks])
            } else {
                None
            };
            for k in 0..n {
                let mut term = 0.0;
                for c in 0..d {
                    let x = row[k] * lt.v[k][c];
                    total[c] += x;
                    term += x * dir[c];
                    if let Some(sums) = block_sums.as_mut() {
                        // Trailing remainder folds into the last block.
                        let m = (k / w).min(num_blocks - 1);
                        sums[m][c] += x;
                    }
                }
                scalars.push(term);
            }
            let residual = linalg::norm(&linalg::sub(&total, &lt.pre_ffn[n - 1]));
            Ok(Rep {
                scalars,
                residual,
                block_sums,
            })
        })
        .collect();
    let reps: Vec<Rep> = reps.into_iter().collect::<Result<_>>()?;
    let max_residual = reps.iter().map(|r| r.residual).fold(0.0, f64::max);
    let example_block_sums = reps[0].block_sums.clone().unwrap_or_default();

    // Center per-position summands across replicates, then aggregate
    // per block.
    let r_count = reps.len() as f64;
    let mut mean_scalar = vec![0.0; n];
    for rep in &reps {
        for (m, &s) in mean_scalar.iter_mut().zip(&rep.scalars) {
            *m += s / r_count;
        }
    }
    let mut block_scalars = vec![vec![0.0; reps.len()]; num_blocks];
    for (ri, rep) in reps.iter().enumerate() {
        for k in 0..n {
            let m = (k / w).min(num_blocks - 1);
            block_scalars[m][ri] += rep.scalars[k] - mean_scalar[k];
        }
    }
    let mut corr_sum = 0.0;
    let mut corr_count = 0usize;
    for a in 0..num_blocks {
        for b in (a + 1)..num_blocks {
            corr_sum += stats::pearson(&block_scalars[a], &block_scalars[b]).abs();
            corr_count += 1;
        }
    }
    let mean_abs_corr = if corr_count > 0 {
        corr_sum / corr_count as f64
    } else {
        0.0
    };

    // Normalized total across replicates vs the standard normal.
    let mut totals: Vec<f64> = (0..reps.len())
        .map(|ri| block_scalars.iter().map(|b| b[ri]).sum())
        .collect();
    stats::standardize(&mut totals);
    let ks = stats::ks_test(
        &totals,
        standard_normal_cdf,
        KsCalibration::MonteCarlo {
            resamples: 2000,
            seed: derive_seed(plan.seed, "clt-block-ks", &[]),
        },
    )?;

    Ok(BlockSumDiagnostic {
        n,
        block_width: w,
        num_blocks,
        max_reconstruction_residual: max_residual,
        mean_abs_cross_block_correlation: mean_abs_corr,
        normalized_total_ks: ks,
        example_block_sums,
    })
}

/// Compares the variance of the FFN image against the Lipschitz bound
/// applied to the pre-FFN variance, per measured layer and grid point.
pub fn ffn_mapping_check(
    model: &Model,
    plan: &CltPlan,
    ffn_lipschitz: &[f64],
) -> Result<Vec<FfnMappingCell>> {
    plan.validate()?;
    if ffn_lipschitz.len() != model.config.num_layers {
        return Err(LabError::Plan(format!(
            "need one Lipschitz estimate per layer ({}), got {}",
            model.config.num_layers,
            ffn_lipschitz.len()
        )));
    }
    let mut out = Vec::new();
    for &n in &plan.context_grid {
        let pairs: Vec<Result<Vec<(Vec<f64>, Vec<f64>)>>> = (0..plan.replicates)
            .into_par_iter()
            .map(|r| {
                let trace = replicate_trace(plan, model, n, r)?;
                Ok(plan
                    .layers
                    .iter()
                    .map(|&l| {
                        let pre = trace.layers[l].pre_ffn[n - 1].clone();
                        let post = linalg::sub(&trace.layers[l].reps[n - 1], &pre);
                        (pre, post)
                    })
                    .collect())
            })
            .collect();
        let mut pre_by_layer = vec![Vec::new(); plan.layers.len()];
        let mut post_by_layer = vec![Vec::new(); plan.layers.len()];
        for p in pairs {
            for (slot, (pre, post)) in p?.into_iter().enumerate() {
                pre_by_layer[slot].push(pre);
                post_by_layer[slot].push(post);
            }
        }
        for (slot, &layer) in plan.layers.iter().enumerate() {
            let pre_v = stats::moments(&pre_by_layer[slot])?.noise_variance;
            let post_v = stats::moments(&post_by_layer[slot])?.noise_variance;
            let lip = ffn_lipschitz[layer];
            let bound = lip * lip * pre_v;
            // Sampling slack: both variances are estimated from R
            // replicates; chi-square-style standard error ~ sqrt(2/R).
            let se = (2.0 / plan.replicates as f64).sqrt() * bound.max(post_v);
            let ratio = if pre_v > 0.0 { post_v / pre_v } else { 0.0 };
            out.push(FfnMappingCell {
                layer,
                n,
                pre_variance: pre_v,
                post_variance: post_v,
                ratio,
                bound,
                violation: post_v > bound + 3.0 * se + 1e-12,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
