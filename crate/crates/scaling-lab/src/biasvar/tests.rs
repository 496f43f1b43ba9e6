use super::*;
use crate::nanoformer::{Activation, LogitScale};

fn capacity(model_dim: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 4,
        num_layers: 1,
        model_dim,
        key_dim: model_dim,
        ffn_hidden_dim: 2 * model_dim,
        context_cap: 256,
        m_q: 1.0,
        m_k: 1.0,
        m_v: 1.0,
        ffn_activation: Activation::Tanh,
        attention_temperature: 1.0,
        logit_scale: LogitScale::Sqrt,
        enforce_bounds: false,
    }
}

fn small_plan() -> BiasVarPlan {
    BiasVarPlan {
        capacities: vec![capacity(4), capacity(8)],
        data_grid: vec![128, 256, 512],
        d_ref: 5120,
        seeds: 3,
        source: Source::iid_uniform(4),
        hyper: TrainHyper {
            step_size: 0.25,
            steps: 150,
            batch_sequences: 8,
            seq_len: 32,
            record_every: 50,
        },
        ref_budget_factor: 2,
        eval_tokens: 4096,
        seed: 7,
    }
}

#[test]
fn plan_validation_catches_bad_fields() {
    let mut p = small_plan();
    p.d_ref = 4000; // < 10 x max D
    assert!(matches!(p.validate(), Err(LabError::Plan(_))));
    let mut p = small_plan();
    p.capacities.truncate(1);
    assert!(p.validate().is_err());
    let mut p = small_plan();
    p.data_grid = vec![128, 256];
    assert!(p.validate().is_err());
    let mut p = small_plan();
    p.seeds = 2;
    assert!(p.validate().is_err());
    let mut p = small_plan();
    p.data_grid = vec![100, 256, 512]; // not a seq_len multiple
    assert!(p.validate().is_err());
    assert!(small_plan().validate().is_ok());
}

#[test]
fn iid_sanity_grid_decomposes_cleanly() {
    let plan = small_plan();
    let report = run_decomposition(&plan).unwrap();
    assert!((report.epsilon - 4.0f64.ln()).abs() < 1e-12);
    // A softmax head can represent the uniform law exactly, so the
    // large-data bias proxy sits on the entropy floor.
    for cap in &report.capacities {
        assert!(cap.bias.abs() < 0.02, "bias {} at P={}", cap.bias, cap.param_count);
        assert!(cap.bias >= -0.02);
    }
    for cell in &report.cells {
        assert!(cell.mean_loss.is_finite());
        assert!(cell.residual.abs() < 1e-12, "residual {}", cell.residual);
        assert!(
            cell.mean_loss >= report.epsilon - 0.02,
            "loss {} beats entropy {}",
            cell.mean_loss,
            report.epsilon
        );
        assert_eq!(cell.failed_seeds, 0);
    }
    // Param counts increase along the capacity axis.
    assert!(report.capacities[0].param_count < report.capacities[1].param_count);
}

#[test]
fn decomposition_is_deterministic() {
    let mut plan = small_plan();
    plan.capacities = vec![capacity(4), capacity(6)];
    plan.data_grid = vec![128, 256, 384];
    plan.d_ref = 3840;
    plan.hyper.steps = 40;
    plan.eval_tokens = 2048;
    let a = run_decomposition(&plan).unwrap();
    let b = run_decomposition(&plan).unwrap();
    for (ca, cb) in a.cells.iter().zip(&b.cells) {
        assert_eq!(ca.mean_loss.to_bits(), cb.mean_loss.to_bits());
    }
    for (ca, cb) in a.capacities.iter().zip(&b.capacities) {
        assert_eq!(ca.l_approx.to_bits(), cb.l_approx.to_bits());
    }
}

fn synthetic_report(
    biases: &[f64],
    v_of: impl Fn(usize, usize) -> f64,
    data_grid: &[usize],
) -> BiasVarianceReport {
    let epsilon = 0.5;
    let capacities: Vec<CapacitySummary> = biases
        .iter()
        .enumerate()
        .map(|(p, &b)| CapacitySummary {
            p_index: p,
            param_count: 100 * (p + 1),
            l_approx: epsilon + b,
            bias: b,
            ref_seed_std: 0.0,
        })
        .collect();
    let mut cells = Vec::new();
    for cap in &capacities {
        for (j, &d) in data_grid.iter().enumerate() {
            let v = v_of(cap.p_index, j);
            cells.push(CellSummary {
                p_index: cap.p_index,
                param_count: cap.param_count,
                data_tokens: d,
                mean_loss: cap.l_approx + v,
                variance_term: v,
                seed_std: 0.0,
                residual: 0.0,
                negative_variance: v < 0.0,
                failed_seeds: 0,
            });
        }
    }
    BiasVarianceReport {
        epsilon,
        d_ref: 10 * data_grid.last().unwrap(),
        eval_tokens: 100_000,
        capacities,
        cells,
        records: Vec::new(),
    }
}

#[test]
fn perfect_inverse_v_gives_spearman_minus_one() {
    let grid = [1000, 2000, 4000, 8000];
    let report = synthetic_report(&[0.3, 0.2], |_, j| 1.0 / grid[j] as f64, &grid);
    let trends = monotonicity_diagnostics(&report);
    for t in &trends.per_capacity {
        assert!((t.v_vs_d_spearman + 1.0).abs() < 1e-12);
        assert!(t.decreasing);
    }
    assert!(trends.bias_vs_p_spearman < 0.0);
    assert!(trends.bias_nonincreasing);
}

#[test]
fn constant_bias_is_flagged_as_trendless() {
    let grid = [1000, 2000, 4000];
    let report = synthetic_report(&[0.25, 0.25, 0.25], |_, j| 1.0 / grid[j] as f64, &grid);
    let trends = monotonicity_diagnostics(&report);
    assert_eq!(trends.bias_vs_p_spearman, 0.0);
    assert!(trends.flags.iter().any(|f| f.contains("no bias trend")));
}

#[test]
fn orthogonality_zero_for_p_independent_variance() {
    let grid = [1000, 2000, 4000];
    let report = synthetic_report(&[0.1, 0.2, 0.4], |_, j| 2.0 / grid[j] as f64, &grid);
    let summary = orthogonality_diagnostics(&report, 5).unwrap();
    assert!(summary.correlation.abs() < 1e-12, "corr {}", summary.correlation);
    assert!(!summary.flagged);
}

#[test]
fn orthogonality_flags_adversarial_coupling() {
    let grid = [1000, 2000, 4000];
    let report = synthetic_report(&[0.1, 0.2, 0.4], |p, _| [0.1, 0.2, 0.4][p], &grid);
    let summary = orthogonality_diagnostics(&report, 5).unwrap();
    assert!((summary.correlation - 1.0).abs() < 1e-12);
    assert!(summary.flagged);
    assert!((summary.variance_explained - 1.0).abs() < 1e-12);
}

#[test]
fn orthogonality_needs_six_cells() {
    let grid = [1000, 2000, 4000];
    let mut report = synthetic_report(&[0.1, 0.2], |_, j| 1.0 / grid[j] as f64, &grid);
    report.cells.truncate(5);
    assert!(matches!(
        orthogonality_diagnostics(&report, 1),
        Err(LabError::InsufficientSamples { .. })
    ));
}
