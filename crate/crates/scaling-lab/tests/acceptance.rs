//! End-to-end acceptance gate: nine scaled-down quantitative checks,
//! one per claim the lab is built to test. Each prints a single
//! PASS/FAIL line (visible with `--nocapture`).

use std::time::Instant;

use scaling_lab::biasvar::{monotonicity_diagnostics, run_decomposition, BiasVarPlan};
use scaling_lab::cltlab::{
    attention_concentration, block_sum_diagnostics, gaussianity_sweep,
    measure_representation_noise, CltPlan,
};
use scaling_lab::emergence::{emergence_sweep, snr_scaling_fit, EmergencePlan};
use scaling_lab::linalg::Mat;
use scaling_lab::nanoformer::{
    batch_loss_and_grads, init_model, Activation, LogitScale, ModelConfig, TrainHyper,
};
use scaling_lab::rng::CounterRng;
use scaling_lab::sources::Source;
use scaling_lab::stats::{
    self, bootstrap_ci, hoeffding_tail, ks_test, lilliefors_null_distribution, power_law_fit,
    projection_ks_gaussianity, KsCalibration,
};

fn report(num: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {num} [{}] {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance {num} ({name}) failed: {detail}");
}

fn reference_config(model_dim: usize, vocab: usize, bounds: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        num_layers: 1,
        model_dim,
        key_dim: model_dim,
        ffn_hidden_dim: 2 * model_dim,
        context_cap: 4096,
        m_q: 1.0,
        m_k: 1.0,
        m_v: 1.0,
        ffn_activation: Activation::Tanh,
        attention_temperature: 1.0,
        logit_scale: LogitScale::Sqrt,
        enforce_bounds: bounds,
    }
}

fn clt_plan(grid: Vec<usize>, replicates: usize, zero_query: bool, seed: u64) -> CltPlan {
    CltPlan {
        config: reference_config(8, 4, true),
        model_seed: 1234,
        zero_query,
        source: Source::iid_uniform(4),
        context_grid: grid,
        replicates,
        layers: vec![0],
        block_width: 16,
        seed,
    }
}

#[test]
fn acceptance_1_noise_scaling_exponent() {
    let t0 = Instant::now();
    let plan = clt_plan(vec![64, 128, 256, 512, 1024, 2048], 256, true, 101);
    let rep = measure_representation_noise(&plan).unwrap();
    let fit = rep.fits[0].fit.as_ref().expect("positive variances");
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = (-1.25..=-0.75).contains(&fit.exponent)
        && fit.r_squared >= 0.95
        && elapsed < 300.0;
    report(
        1,
        "noise scaling",
        pass,
        &format!(
            "exponent {:.4} (target [-1.25,-0.75]), r2 {:.4} (>= 0.95), {elapsed:.0}s (< 300)",
            fit.exponent, fit.r_squared
        ),
    );
}

#[test]
fn acceptance_2_gaussian_convergence() {
    let t0 = Instant::now();
    let plan = clt_plan(vec![512, 1024, 2048], 500, true, 202);
    let cells = gaussianity_sweep(&plan).unwrap();
    let at_top = cells
        .iter()
        .find(|c| c.n == 2048)
        .expect("cell at n=2048");
    // Non-Gaussian control: a symmetric two-point distribution along a
    // fixed direction, so every 1-D projection is itself two-point.
    let mut rng = CounterRng::new(77);
    let control: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            vec![sign; 8]
        })
        .collect();
    let null = lilliefors_null_distribution(500, 2000, 33);
    let control_summary = projection_ks_gaussianity(&control, 50, 0.01, &null, 44).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = at_top.summary.rejection_fraction <= 0.05
        && control_summary.rejection_fraction >= 0.9
        && elapsed < 300.0;
    report(
        2,
        "gaussian convergence",
        pass,
        &format!(
            "rejection {:.3} at n=2048 (<= 0.05), control rejection {:.3} (>= 0.9), {elapsed:.0}s (< 300)",
            at_top.summary.rejection_fraction, control_summary.rejection_fraction
        ),
    );
}

#[test]
fn acceptance_3_attention_concentration() {
    let t0 = Instant::now();
    let plan = clt_plan(vec![64, 128, 256], 2000, false, 303);
    let eps: Vec<f64> = (1..=10).map(|i| 0.05 * i as f64).collect();
    let table = attention_concentration(&plan, &eps).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = table.violations == 0 && table.rows.len() == 10 && elapsed < 120.0;
    report(
        3,
        "attention concentration",
        pass,
        &format!(
            "{} violations across {} epsilon values (target 0), {elapsed:.0}s (< 120)",
            table.violations,
            table.rows.len()
        ),
    );
}

#[test]
fn acceptance_4_block_sum_diagnostics() {
    let t0 = Instant::now();
    let plan = clt_plan(vec![256, 512, 1024], 500, true, 404);
    let diag = block_sum_diagnostics(&plan).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = diag.max_reconstruction_residual < 1e-9 && diag.normalized_total_ks.p_value > 0.01;
    report(
        4,
        "block-sum diagnostics",
        pass,
        &format!(
            "max residual {:.2e} (< 1e-9), KS p {:.3} (> 0.01), {elapsed:.0}s",
            diag.max_reconstruction_residual, diag.normalized_total_ks.p_value
        ),
    );
}

#[test]
fn acceptance_5_bias_variance_decomposition() {
    let t0 = Instant::now();
    let mut t = Mat::zeros(2, 2);
    t.set(0, 0, 0.8);
    t.set(0, 1, 0.2);
    t.set(1, 0, 0.2);
    t.set(1, 1, 0.8);
    let plan = BiasVarPlan {
        capacities: vec![
            reference_config(6, 2, false),
            reference_config(10, 2, false),
            reference_config(16, 2, false),
        ],
        data_grid: vec![512, 1024, 2048, 4096, 8192],
        d_ref: 81_920,
        seeds: 5,
        source: Source::markov(t).unwrap(),
        hyper: TrainHyper {
            step_size: 0.25,
            steps: 2000,
            batch_sequences: 8,
            seq_len: 32,
            record_every: 10_000,
        },
        ref_budget_factor: 4,
        eval_tokens: 100_000,
        seed: 20_250_823,
    };
    let rep = run_decomposition(&plan).unwrap();
    let trends = monotonicity_diagnostics(&rep);
    let elapsed = t0.elapsed().as_secs_f64();
    let max_residual = rep
        .cells
        .iter()
        .map(|c| c.residual.abs())
        .fold(0.0, f64::max);
    let floor_ok = rep
        .cells
        .iter()
        .all(|c| c.mean_loss >= rep.epsilon - 0.02);
    let spearmans: Vec<f64> = trends
        .per_capacity
        .iter()
        .map(|c| c.v_vs_d_spearman)
        .collect();
    let trend_ok = spearmans.iter().all(|&s| s <= -0.6);
    let pass = max_residual < 1e-12 && floor_ok && trend_ok && elapsed < 1800.0;
    report(
        5,
        "bias/variance decomposition",
        pass,
        &format!(
            "max residual {max_residual:.2e} (< 1e-12), entropy floor {}, V-vs-D spearman {:?} (each <= -0.6), {elapsed:.0}s (< 1800)",
            if floor_ok { "held" } else { "violated" },
            spearmans
        ),
    );
}

#[test]
fn acceptance_6_entropy_oracle() {
    let t0 = Instant::now();
    let mut t = Mat::zeros(2, 2);
    t.set(0, 0, 0.8);
    t.set(0, 1, 0.2);
    t.set(1, 0, 0.3);
    t.set(1, 1, 0.7);
    let shipped: Vec<(&str, Source)> = vec![
        ("iid-uniform-4", Source::iid_uniform(4)),
        ("markov-2", Source::markov(t).unwrap()),
        (
            "block-w16",
            Source::block_stationary(Source::iid_uniform(4), 16).unwrap(),
        ),
        (
            "planted-copy",
            Source::planted_copy(1, 0.9, vec![0.25; 4]).unwrap(),
        ),
    ];
    let mut detail = String::new();
    let mut pass = true;
    for (name, source) in &shipped {
        let seq = source.sample_sequence(100_001, 55).unwrap();
        let mut loss = 0.0;
        for t in 0..seq.len() - 1 {
            let law = source.next_law(&seq.tokens[..=t]);
            loss -= law[seq.tokens[t + 1]].ln();
        }
        loss /= (seq.len() - 1) as f64;
        let gap = (loss - source.entropy_rate()).abs();
        pass &= gap < 0.01;
        detail.push_str(&format!("{name} gap {gap:.4}; "));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed < 60.0;
    report(
        6,
        "entropy oracle",
        pass,
        &format!("{detail}all < 0.01, {elapsed:.0}s (< 60)"),
    );
}

#[test]
fn acceptance_7_emergence_threshold() {
    let t0 = Instant::now();
    let plan = EmergencePlan {
        capacities: vec![
            reference_config(2, 4, false),
            reference_config(4, 4, false),
            reference_config(8, 4, false),
        ],
        data_grid: vec![64, 256, 1024, 4096],
        seeds: 3,
        source: Source::planted_copy(1, 0.9, vec![0.25; 4]).unwrap(),
        hyper: TrainHyper {
            step_size: 0.25,
            steps: 1,
            batch_sequences: 8,
            seq_len: 32,
            record_every: 10_000,
        },
        passes: 8,
        snr_per_class: 200,
        snr_context: 32,
        layer: 0,
        probe_tokens: 8192,
        criterion: 0.5,
        taylor_diagnostic: true,
        seed: 20_250_823,
    };
    let curve = emergence_sweep(&plan).unwrap();
    let fit = snr_scaling_fit(&curve.cells).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let mut snrs = Vec::new();
    let mut accs = Vec::new();
    for c in &curve.cells {
        if let Some(s) = &c.snr {
            if s.snr > 0.0 {
                snrs.push(s.snr);
                accs.push(c.accuracy);
            }
        }
    }
    let rho = stats::spearman(&snrs, &accs);
    let r2 = curve.sigmoid.as_ref().map(|f| f.r_squared).unwrap_or(f64::NAN);
    let phi_note = if fit.phi_nondecreasing {
        "phi nondecreasing"
    } else {
        "phi NOT nondecreasing (advisory)"
    };
    let pass = rho >= 0.8
        && r2 >= 0.9
        && curve.theta_c.is_some()
        && (0.5..=1.5).contains(&fit.alpha)
        && elapsed < 2700.0;
    report(
        7,
        "emergence threshold",
        pass,
        &format!(
            "acc-SNR spearman {rho:.3} (>= 0.8), sigmoid r2 {r2:.3} (>= 0.9), theta_C {:?}, alpha {:.3} (in [0.5,1.5]), {phi_note}, {elapsed:.0}s (< 2700)",
            curve.theta_c, fit.alpha
        ),
    );
}

#[test]
fn acceptance_8_numerical_backbone() {
    // Gradient check on a sub-1000-parameter bounded model.
    let cfg = ModelConfig {
        vocab_size: 3,
        num_layers: 2,
        model_dim: 4,
        key_dim: 3,
        ffn_hidden_dim: 5,
        context_cap: 64,
        m_q: 0.4,
        m_k: 0.4,
        m_v: 0.4,
        ffn_activation: Activation::Tanh,
        attention_temperature: 1.0,
        logit_scale: LogitScale::Sqrt,
        enforce_bounds: true,
    };
    let mut model = init_model(&cfg, 99).unwrap();
    let params: Vec<f64> = model.flat_params().iter().map(|&p| 3.0 * p).collect();
    model.set_flat_params(&params);
    let source = Source::iid_uniform(3);
    let seqs: Vec<_> = (0..4)
        .map(|i| source.sample_sequence(12, 1000 + i).unwrap())
        .collect();
    let batch: Vec<_> = seqs.iter().collect();
    let (_, grads) = batch_loss_and_grads(&model, &batch).unwrap();
    let analytic = grads.flat();
    assert!(params.len() <= 1000, "model too large: {}", params.len());
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus[i] += h;
        let mut minus = params.clone();
        minus[i] -= h;
        let mut m = model.clone();
        m.set_flat_params(&plus);
        let (lp, _) = batch_loss_and_grads(&m, &batch).unwrap();
        m.set_flat_params(&minus);
        let (lm, _) = batch_loss_and_grads(&m, &batch).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    // Statistical primitives against their exact example tables.
    let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
    let ys: Vec<f64> = xs.iter().map(|&x| 3.0 / x).collect();
    let fit = power_law_fit(&xs, &ys).unwrap();
    let fit_ok =
        (fit.exponent + 1.0).abs() < 1e-12 && (fit.r_squared - 1.0).abs() < 1e-12;

    let uniform: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
    let ks_null = ks_test(&uniform, |x| x.clamp(0.0, 1.0), KsCalibration::Asymptotic).unwrap();
    let shifted: Vec<f64> = uniform.iter().map(|&x| 0.5 * x).collect();
    let ks_alt = ks_test(&shifted, |x| x.clamp(0.0, 1.0), KsCalibration::Asymptotic).unwrap();
    let ks_ok = ks_null.p_value > 0.5 && ks_alt.p_value < 1e-6;

    let hoeffding_ok = hoeffding_tail(1e-9, 4, 1.0, 1.0) == 1.0
        && (hoeffding_tail(0.5, 64, 1.0, 1.0) - 2.0 * (-8.0f64).exp()).abs() < 1e-15
        && hoeffding_tail(0.5, 128, 1.0, 1.0) < hoeffding_tail(0.5, 64, 1.0, 1.0);

    let constant = [2.5; 40];
    let (lo, hi) = bootstrap_ci(&constant, stats::mean, 0.95, 400, 7).unwrap();
    let data: Vec<f64> = (0..50).map(|i| (i % 7) as f64).collect();
    let (mlo, mhi) = bootstrap_ci(&data, stats::mean, 0.95, 400, 8).unwrap();
    let m = stats::mean(&data);
    let boot_ok = lo == 2.5 && hi == 2.5 && mlo <= m && m <= mhi;

    let pass = max_rel < 1e-4 && fit_ok && ks_ok && hoeffding_ok && boot_ok;
    report(
        8,
        "numerical backbone",
        pass,
        &format!(
            "grad rel err {max_rel:.2e} (< 1e-4) over {} params, power-law {}, ks {}, hoeffding {}, bootstrap {}",
            params.len(),
            fit_ok,
            ks_ok,
            hoeffding_ok,
            boot_ok
        ),
    );
}

#[test]
fn acceptance_9_manifest_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let config_path = tmp.path().join("clt.toml");
    std::fs::write(
        &config_path,
        r#"
kind = "clt"
seed = 17

[source]
kind = "iid"
vocab_size = 4

[model]
vocab_size = 4
model_dim = 8
context_cap = 512

[clt]
context_grid = [16, 32, 64]
replicates = 32
block_width = 4
"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_scaling-lab");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin)
            .args(args)
            .current_dir(tmp.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap().trim().to_string()
    };
    let first = run(&["run", "clt.toml", "--jobs", "1"]);
    let manifest = format!("{first}/manifest.json");
    let second = run(&["run", &manifest, "--jobs", "4"]);
    let third = run(&["run", &manifest, "--jobs", "2", "--no-plots"]);
    let read = |dir: &str| std::fs::read(tmp.path().join(dir).join("clt_variance.csv")).unwrap();
    let (a, b, c) = (read(&first), read(&second), read(&third));
    let pass = a == b && b == c && first != second;
    report(
        9,
        "manifest reproducibility",
        pass,
        "CSV bytes identical across --jobs 1/4/2 and manifest reruns",
    );
}
