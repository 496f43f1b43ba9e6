//! Bias/variance/entropy decomposition of next-token loss over a
//! capacity-by-data grid, with trend and orthogonality diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nanoformer::{init_model, next_token_loss, train, ModelConfig, TrainHyper};
use crate::rng::{derive_seed, CounterRng};
use crate::sources::{Source, TokenSequence};
use crate::stats;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasVarPlan {
    /// Model configurations in increasing parameter count.
    pub capacities: Vec<ModelConfig>,
    /// Training data sizes in tokens, strictly increasing.
    pub data_grid: Vec<usize>,
    /// Large-data proxy for the capacity-limited optimum.
    pub d_ref: usize,
    /// Optimization seeds per cell.
    pub seeds: usize,
    pub source: Source,
    pub hyper: TrainHyper,
    /// Multiplier on the step budget for the D_ref reference runs.
    pub ref_budget_factor: usize,
    /// Held-out evaluation stream length in tokens.
    pub eval_tokens: usize,
    pub seed: u64,
}

impl BiasVarPlan {
    pub fn validate(&self) -> Result<()> {
        if self.capacities.len() < 2 {
            return Err(LabError::Plan(format!(
                "need >= 2 capacities, got {}",
                self.capacities.len()
            )));
        }
        for c in &self.capacities {
            c.validate()?;
        }
        if self.data_grid.len() < 3 {
            return Err(LabError::Plan(format!(
                "need >= 3 data sizes, got {}",
                self.data_grid.len()
            )));
        }
        if !self.data_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(LabError::Plan("data grid must be strictly increasing".into()));
        }
        let max_d = *self.data_grid.last().unwrap();
        if self.d_ref < 10 * max_d {
            return Err(LabError::Plan(format!(
                "d_ref must be >= 10 x max data size ({}), got {}",
                10 * max_d,
                self.d_ref
            )));
        }
        if self.seeds < 3 {
            return Err(LabError::Plan(format!(
                "need >= 3 seeds per cell, got {}",
                self.seeds
            )));
        }
        if self.ref_budget_factor == 0 {
            return Err(LabError::Plan("ref budget factor must be positive".into()));
        }
        let sl = self.hyper.seq_len;
        for &d in self.data_grid.iter().chain(std::iter::once(&self.d_ref)) {
            if d % sl != 0 {
                return Err(LabError::Plan(format!(
                    "data size {d} is not a multiple of the sequence length {sl}"
                )));
            }
        }
        if self.eval_tokens < 1000 {
            return Err(LabError::Plan(format!(
                "evaluation stream too short: {} tokens",
                self.eval_tokens
            )));
        }
        Ok(())
    }
}

/// One per-seed training outcome (a grid cell or a reference run).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub p_index: usize,
    pub param_count: usize,
    /// Training tokens; equals d_ref for reference runs.
    pub data_tokens: usize,
    pub seed_index: usize,
    pub loss: Option<f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacitySummary {
    pub p_index: usize,
    pub param_count: usize,
    /// Loss of the D_ref-trained proxy for the capacity optimum.
    pub l_approx: f64,
    pub bias: f64,
    pub ref_seed_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub p_index: usize,
    pub param_count: usize,
    pub data_tokens: usize,
    pub mean_loss: f64,
    pub variance_term: f64,
    pub seed_std: f64,
    pub residual: f64,
    pub negative_variance: bool,
    pub failed_seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub epsilon: f64,
    pub d_ref: usize,
    pub eval_tokens: usize,
    pub capacities: Vec<CapacitySummary>,
    pub cells: Vec<CellSummary>,
    /// Per-seed raw losses backing the summaries (CSV rows).
    pub records: Vec<SeedRecord>,
}

fn eval_stream(plan: &BiasVarPlan) -> Result<Vec<TokenSequence>> {
    let sl = plan.hyper.seq_len;
    let count = plan.eval_tokens.div_ceil(sl);
    (0..count)
        .map(|i| {
            plan.source
                .sample_sequence(sl, derive_seed(plan.seed, "biasvar-eval", &[i as u64]))
        })
        .collect()
}

pub fn run_decomposition(plan: &BiasVarPlan) -> Result<BiasVarianceReport> {
    plan.validate()?;
    let epsilon = plan.source.entropy_rate();
    let eval = eval_stream(plan)?;

    // Work items: (p, data tokens or d_ref, seed), all independent.
    #[derive(Clone, Copy)]
    struct Job {
        p: usize,
        tokens: usize,
        s: usize,
        reference: bool,
    }
    let mut jobs = Vec::new();
    for p in 0..plan.capacities.len() {
        for s in 0..plan.seeds {
            jobs.push(Job {
                p,
                tokens: plan.d_ref,
                s,
                reference: true,
            });
            for &d in &plan.data_grid {
                jobs.push(Job {
                    p,
                    tokens: d,
                    s,
                    reference: false,
                });
            }
        }
    }

    let results: Vec<Result<SeedRecord>> = jobs
        .par_iter()
        .map(|job| {
            let cfg = &plan.capacities[job.p];
            let tag = if job.reference { "ref" } else { "cell" };
            let init_seed = derive_seed(
                plan.seed,
                "biasvar-init",
                &[job.p as u64, job.tokens as u64, job.s as u64],
            );
            let train_seed = derive_seed(
                plan.seed,
                "biasvar-train",
                &[job.p as u64, job.tokens as u64, job.s as u64],
            );
            let model = init_model(cfg, init_seed)?;
            let mut hyper = plan.hyper.clone();
            if job.reference {
                hyper.steps *= plan.ref_budget_factor;
            }
            let outcome = train(&model, &plan.source, job.tokens, &hyper, train_seed);
            let record = match outcome {
                Ok((trained, _)) => SeedRecord {
                    p_index: job.p,
                    param_count: model.parameter_count(),
                    data_tokens: job.tokens,
                    seed_index: job.s,
                    loss: Some(next_token_loss(&trained, &eval)?),
                    failed: false,
                },
                Err(LabError::TrainingDiverged { .. }) => SeedRecord {
                    p_index: job.p,
                    param_count: model.parameter_count(),
                    data_tokens: job.tokens,
                    seed_index: job.s,
                    loss: None,
                    failed: true,
                },
                Err(e) => return Err(e),
            };
            let _ = tag;
            Ok(record)
        })
        .collect();
    let records: Vec<SeedRecord> = results.into_iter().collect::<Result<_>>()?;

    let failed = records.iter().filter(|r| r.failed).count();
    if failed * 5 > records.len() {
        return Err(LabError::Experiment(format!(
            "{failed} of {} cells diverged (over 20%)",
            records.len()
        )));
    }

    let seed_losses = |p: usize, tokens: usize| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.p_index == p && r.data_tokens == tokens && !r.failed)
            .filter_map(|r| r.loss)
            .collect()
    };

    let mut capacities = Vec::new();
    for (p, cfg) in plan.capacities.iter().enumerate() {
        let refs = seed_losses(p, plan.d_ref);
        if refs.is_empty() {
            return Err(LabError::Experiment(format!(
                "all reference runs failed for capacity {p}"
            )));
        }
        let l_approx = stats::mean(&refs);
        capacities.push(CapacitySummary {
            p_index: p,
            param_count: init_model(cfg, 0)?.parameter_count(),
            l_approx,
            bias: l_approx - epsilon,
            ref_seed_std: stats::variance(&refs).sqrt(),
        });
    }

    let mut cells = Vec::new();
    for cap in &capacities {
        for &d in &plan.data_grid {
            let losses = seed_losses(cap.p_index, d);
            let failed_seeds = plan.seeds - losses.len();
            if losses.is_empty() {
                cells.push(CellSummary {
                    p_index: cap.p_index,
                    param_count: cap.param_count,
                    data_tokens: d,
                    mean_loss: f64::NAN,
                    variance_term: f64::NAN,
                    seed_std: f64::NAN,
                    residual: f64::NAN,
                    negative_variance: false,
                    failed_seeds,
                });
                continue;
            }
            let mean_loss = stats::mean(&losses);
            let variance_term = mean_loss - cap.l_approx;
            let residual = (cap.bias + variance_term + epsilon) - mean_loss;
            cells.push(CellSummary {
                p_index: cap.p_index,
                param_count: cap.param_count,
                data_tokens: d,
                mean_loss,
                variance_term,
                seed_std: stats::variance(&losses).sqrt(),
                residual,
                negative_variance: variance_term < 0.0,
                failed_seeds,
            });
        }
    }

    Ok(BiasVarianceReport {
        epsilon,
        d_ref: plan.d_ref,
        eval_tokens: plan.eval_tokens,
        capacities,
        cells,
        records,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityTrend {
    pub p_index: usize,
    pub param_count: usize,
    pub v_vs_d_spearman: f64,
    pub decreasing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendSummary {
    pub per_capacity: Vec<CapacityTrend>,
    pub bias_vs_p_spearman: f64,
    pub bias_nonincreasing: bool,
    pub flags: Vec<String>,
}

pub fn monotonicity_diagnostics(report: &BiasVarianceReport) -> TrendSummary {
    let mut per_capacity = Vec::new();
    let mut flags = Vec::new();
    for cap in &report.capacities {
        let mut ds = Vec::new();
        let mut vs = Vec::new();
        for c in report.cells.iter().filter(|c| c.p_index == cap.p_index) {
            if c.mean_loss.is_finite() {
                ds.push(c.data_tokens as f64);
                vs.push(c.variance_term);
            }
        }
        let rho = stats::spearman(&ds, &vs);
        if rho == 0.0 && vs.iter().all(|&v| v == vs[0]) {
            flags.push(format!("capacity {}: no V trend", cap.p_index));
        } else if rho > 0.0 {
            flags.push(format!(
                "capacity {}: V increases with D (rho {rho:.3})",
                cap.p_index
            ));
        }
        per_capacity.push(CapacityTrend {
            p_index: cap.p_index,
            param_count: cap.param_count,
            v_vs_d_spearman: rho,
            decreasing: rho < 0.0,
        });
    }
    let ps: Vec<f64> = report.capacities.iter().map(|c| c.param_count as f64).collect();
    let bs: Vec<f64> = report.capacities.iter().map(|c| c.bias).collect();
    let bias_rho = stats::spearman(&ps, &bs);
    if bias_rho == 0.0 && bs.iter().all(|&b| b == bs[0]) {
        flags.push("no bias trend".into());
    } else if bias_rho > 0.0 {
        flags.push(format!("bias increases with capacity (rho {bias_rho:.3})"));
    }
    TrendSummary {
        per_capacity,
        bias_vs_p_spearman: bias_rho,
        bias_nonincreasing: bias_rho <= 0.0,
        flags,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthogonalitySummary {
    pub correlation: f64,
    pub correlation_ci: (f64, f64),
    pub variance_explained: f64,
    pub cells_used: usize,
    pub flagged: bool,
}

/// Regresses per-cell V on B across the grid; a low association is the
/// advisory evidence for the decomposition's orthogonality.
pub fn orthogonality_diagnostics(
    report: &BiasVarianceReport,
    seed: u64,
) -> Result<OrthogonalitySummary> {
    let pairs: Vec<(f64, f64)> = report
        .cells
        .iter()
        .filter(|c| c.mean_loss.is_finite())
        .map(|c| {
            let b = report.capacities[c.p_index].bias;
            (b, c.variance_term)
        })
        .collect();
    if pairs.len() < 6 {
        return Err(LabError::InsufficientSamples {
            need: 6,
            got: pairs.len(),
        });
    }
    let bs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let vs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let corr = stats::pearson(&bs, &vs);

    // Paired bootstrap over cells.
    let reps = 500;
    let mut rng = CounterRng::new(seed);
    let mut resampled = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut rb = Vec::with_capacity(pairs.len());
        let mut rv = Vec::with_capacity(pairs.len());
        for _ in 0..pairs.len() {
            let i = rng.next_below(pairs.len() as u64) as usize;
            rb.push(pairs[i].0);
            rv.push(pairs[i].1);
        }
        resampled.push(stats::pearson(&rb, &rv));
    }
    resampled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci = (
        stats::percentile(&resampled, 0.025),
        stats::percentile(&resampled, 0.975),
    );
    Ok(OrthogonalitySummary {
        correlation: corr,
        correlation_ci: ci,
        variance_explained: corr * corr,
        cells_used: pairs.len(),
        flagged: corr.abs() > 0.5,
    })
}

#[cfg(test)]
mod tests;
