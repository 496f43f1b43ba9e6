use super::*;
use crate::nanoformer::{check_assumptions, Activation, LogitScale};

fn base_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 4,
        num_layers: 1,
        model_dim: 8,
        key_dim: 8,
        ffn_hidden_dim: 16,
        context_cap: 4096,
        m_q: 1.0,
        m_k: 1.0,
        m_v: 1.0,
        ffn_activation: Activation::Tanh,
        attention_temperature: 1.0,
        logit_scale: LogitScale::Sqrt,
        enforce_bounds: true,
    }
}

fn base_plan() -> CltPlan {
    CltPlan {
        config: base_config(),
        model_seed: 3,
        zero_query: true,
        source: Source::iid_uniform(4),
        context_grid: vec![64, 128, 256, 512],
        replicates: 64,
        layers: vec![0],
        block_width: 16,
        seed: 99,
    }
}

#[test]
fn plan_validation_catches_bad_fields() {
    let mut p = base_plan();
    p.context_grid = vec![64, 128];
    assert!(matches!(p.validate(), Err(LabError::Plan(_))));
    let mut p = base_plan();
    p.replicates = 8;
    assert!(p.validate().is_err());
    let mut p = base_plan();
    p.context_grid = vec![16, 64, 128];
    p.block_width = 16; // 16 < 2w
    assert!(p.validate().is_err());
    let mut p = base_plan();
    p.layers = vec![1];
    assert!(p.validate().is_err());
    assert!(base_plan().validate().is_ok());
}

#[test]
fn uniform_attention_variance_scales_inversely() {
    let report = measure_representation_noise(&base_plan()).unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        assert!(c.variance >= 0.0);
        assert!(c.ci_lo <= c.variance + 1e-12 && c.variance <= c.ci_hi + 1e-12);
    }
    let fit = report.fits[0].fit.as_ref().expect("fit present");
    assert!(
        fit.exponent >= -1.25 && fit.exponent <= -0.75,
        "exponent {}",
        fit.exponent
    );
    // Monotone decay, up to 2 bootstrap standard errors per step.
    for w in report.cells.windows(2) {
        let se = (w[0].ci_hi - w[0].ci_lo) / (2.0 * 1.96) + (w[1].ci_hi - w[1].ci_lo) / (2.0 * 1.96);
        assert!(
            w[1].variance <= w[0].variance + 2.0 * se,
            "variance rose from n={} to n={}",
            w[0].n,
            w[1].n
        );
    }
}

#[test]
fn constant_source_has_zero_variance() {
    let mut plan = base_plan();
    plan.source = Source::iid(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let report = measure_representation_noise(&plan).unwrap();
    for c in &report.cells {
        assert_eq!(c.variance, 0.0);
    }
    assert!(report.fits[0].fit.is_none());
}

#[test]
fn doubling_replicates_is_stable() {
    let mut plan = base_plan();
    plan.context_grid = vec![32, 64, 128];
    plan.replicates = 64;
    let a = measure_representation_noise(&plan).unwrap();
    plan.replicates = 128;
    let b = measure_representation_noise(&plan).unwrap();
    for (ca, cb) in a.cells.iter().zip(&b.cells) {
        let se = (ca.ci_hi - ca.ci_lo) / (2.0 * 1.96);
        assert!(
            (ca.variance - cb.variance).abs() < 2.0 * se,
            "n={} moved {} vs {}",
            ca.n,
            ca.variance,
            cb.variance
        );
    }
}

#[test]
fn determinism_across_runs() {
    let plan = base_plan();
    let a = measure_representation_noise(&plan).unwrap();
    let b = measure_representation_noise(&plan).unwrap();
    for (ca, cb) in a.cells.iter().zip(&b.cells) {
        assert_eq!(ca.variance, cb.variance);
        assert_eq!(ca.ci_lo, cb.ci_lo);
    }
}

#[test]
fn gaussianity_improves_with_context() {
    let mut plan = base_plan();
    plan.context_grid = vec![16, 64, 256];
    plan.block_width = 8;
    plan.replicates = 250;
    let cells = gaussianity_sweep(&plan).unwrap();
    assert_eq!(cells.len(), 3);
    for c in &cells {
        assert!((0.0..=1.0).contains(&c.summary.rejection_fraction));
    }
    let first = cells.first().unwrap().summary.rejection_fraction;
    let last = cells.last().unwrap().summary.rejection_fraction;
    assert!(
        last <= first + 0.1,
        "rejection fraction grew from {first} to {last}"
    );
}

#[test]
fn gaussianity_requires_power() {
    let plan = base_plan(); // replicates = 64
    assert!(matches!(gaussianity_sweep(&plan), Err(LabError::Plan(_))));
}

#[test]
fn concentration_requires_bounds() {
    let mut plan = base_plan();
    plan.config.enforce_bounds = false;
    assert!(matches!(
        attention_concentration(&plan, &[0.1]),
        Err(LabError::Plan(_))
    ));
}

#[test]
fn uniform_attention_has_zero_tails() {
    // W_Q = 0: the weights are the deterministic 1/n row, so no
    // deviation ever exceeds a positive epsilon.
    let mut plan = base_plan();
    plan.context_grid = vec![32, 64, 128];
    let table = attention_concentration(&plan, &[0.01, 0.05, 0.2]).unwrap();
    for row in &table.rows {
        assert_eq!(row.empirical_tail, 0.0);
        assert!(!row.violation);
    }
    assert_eq!(table.violations, 0);
}

#[test]
fn random_bounded_model_never_violates_bound() {
    let mut plan = base_plan();
    plan.zero_query = false;
    plan.context_grid = vec![32, 64, 128];
    plan.replicates = 500;
    let eps: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
    let table = attention_concentration(&plan, &eps).unwrap();
    assert_eq!(table.violations, 0, "rows: {:?}", table.rows);
}

#[test]
fn block_reconstruction_is_exact() {
    let mut plan = base_plan();
    plan.zero_query = false;
    plan.context_grid = vec![32, 64, 128];
    let diag = block_sum_diagnostics(&plan).unwrap();
    assert!(
        diag.max_reconstruction_residual < 1e-9,
        "residual {}",
        diag.max_reconstruction_residual
    );
    assert_eq!(diag.num_blocks, 128 / 16);
    assert_eq!(diag.example_block_sums.len(), diag.num_blocks);
}

#[test]
fn block_correlations_small_and_total_normal() {
    let mut plan = base_plan();
    plan.context_grid = vec![64, 128, 512];
    plan.replicates = 200;
    let diag = block_sum_diagnostics(&plan).unwrap();
    assert!(
        diag.mean_abs_cross_block_correlation < 0.1,
        "mean |corr| {}",
        diag.mean_abs_cross_block_correlation
    );
    assert!(
        diag.normalized_total_ks.p_value > 0.01,
        "KS p {}",
        diag.normalized_total_ks.p_value
    );
}

#[test]
fn block_diagnostics_reject_markov_source() {
    let mut t = crate::linalg::Mat::zeros(2, 2);
    t.set(0, 0, 0.9);
    t.set(0, 1, 0.1);
    t.set(1, 0, 0.1);
    t.set(1, 1, 0.9);
    let mut plan = base_plan();
    plan.config.vocab_size = 2;
    plan.source = Source::markov(t).unwrap();
    assert!(matches!(block_sum_diagnostics(&plan), Err(LabError::Plan(_))));
}

fn linear_ffn_model(plan: &CltPlan, gain: f64) -> Model {
    let mut model = plan.build_model().unwrap();
    let d = plan.config.model_dim;
    for layer in model.layers.iter_mut() {
        layer.ffn_w1 = crate::linalg::Mat::identity(d);
        let mut w2 = crate::linalg::Mat::zeros(d, d);
        for i in 0..d {
            w2.set(i, i, gain);
        }
        layer.ffn_w2 = w2;
    }
    model
}

#[test]
fn identity_ffn_ratio_is_one() {
    let mut plan = base_plan();
    plan.config.ffn_hidden_dim = plan.config.model_dim;
    plan.config.ffn_activation = Activation::Identity;
    plan.context_grid = vec![32, 64, 128];
    let model = linear_ffn_model(&plan, 1.0);
    let cells = ffn_mapping_check(&model, &plan, &[1.0]).unwrap();
    for c in &cells {
        assert!((c.ratio - 1.0).abs() < 1e-9, "ratio {}", c.ratio);
        assert!(!c.violation);
    }
}

#[test]
fn contractive_ffn_ratio_quarters() {
    let mut plan = base_plan();
    plan.config.ffn_hidden_dim = plan.config.model_dim;
    plan.config.ffn_activation = Activation::Identity;
    plan.context_grid = vec![32, 64, 128];
    let model = linear_ffn_model(&plan, 0.5);
    let cells = ffn_mapping_check(&model, &plan, &[0.5]).unwrap();
    for c in &cells {
        assert!(c.ratio <= 0.25 + 1e-6, "ratio {}", c.ratio);
        assert!(!c.violation);
    }
}

#[test]
fn generic_ffn_respects_lipschitz_bound() {
    let mut plan = base_plan();
    plan.context_grid = vec![32, 64, 128];
    let model = plan.build_model().unwrap();
    let batch: Vec<_> = (0..8)
        .map(|s| plan.source.sample_sequence(64, 70_000 + s).unwrap())
        .collect();
    let report = check_assumptions(&model, &batch).unwrap();
    let cells = ffn_mapping_check(&model, &plan, &report.ffn_lipschitz).unwrap();
    for c in &cells {
        assert!(!c.violation, "violated at n={}: {:?}", c.n, c);
    }
}
