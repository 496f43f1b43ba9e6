//! Experiment driver and persistence: resolves configs into plans,
//! executes them, and writes timestamped run directories containing a
//! manifest, CSV/JSON reports, and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::biasvar::{self, BiasVarianceReport, OrthogonalitySummary, TrendSummary};
use crate::cltlab::{self, NoiseScalingReport};
use crate::emergence::{self, EmergenceCurve, ScalingFit};
use crate::error::{LabError, Result};
use crate::nanoformer::{check_assumptions, init_model, AssumptionReport};
use crate::plot;
use crate::rng::derive_seed;

pub mod config;

pub use config::{ExperimentConfig, ExperimentKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEntry {
    pub tag: String,
    pub coords: Vec<u64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub kind: ExperimentKind,
    /// Fully resolved configuration; rerunning it reproduces every
    /// number in this run's reports bit-identically.
    pub config: ExperimentConfig,
    pub master_seed: u64,
    pub started: String,
    pub finished: String,
    pub seed_table: Vec<SeedEntry>,
    /// SHA-256 of the canonical TOML serialization of `config`.
    pub config_hash: String,
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| LabError::io(path.display().to_string(), e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LabError::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| LabError::Experiment(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// Creates `<out>/<kind>-<timestamp>/`, appending a counter when the
/// directory already exists so prior runs are never touched.
fn create_run_dir(out: &Path, kind: ExperimentKind) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{}-{}", kind.as_str(), stamp);
    for i in 0..1000 {
        let name = if i == 0 {
            base.clone()
        } else {
            format!("{base}-{i}")
        };
        let dir = out.join(&name);
        match std::fs::create_dir_all(out)
            .and_then(|()| std::fs::create_dir(&dir))
        {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(LabError::io(dir.display().to_string(), e)),
        }
    }
    Err(LabError::Experiment("could not allocate a run directory".into()))
}

/// Wrapper persisted as `<kind>_report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltReportFile {
    pub report: NoiseScalingReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasvarReportFile {
    pub report: BiasVarianceReport,
    pub trends: TrendSummary,
    pub orthogonality: Option<OrthogonalitySummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmergenceReportFile {
    pub curve: EmergenceCurve,
    pub scaling: Option<ScalingFit>,
    #[serde(default)]
    pub scaling_error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionsReportFile {
    pub report: AssumptionReport,
    pub sequences: usize,
    pub seq_len: usize,
}

fn clt_variance_csv(report: &NoiseScalingReport) -> String {
    let mut csv = String::from("layer,n,variance,ci_lo,ci_hi\n");
    for c in &report.cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            c.layer, c.n, c.variance, c.ci_lo, c.ci_hi
        );
    }
    csv
}

fn biasvar_csv(report: &BiasVarianceReport) -> String {
    let mut csv = String::from("P,D,seed,loss,B,V,epsilon,residual\n");
    for r in &report.records {
        if r.data_tokens == report.d_ref {
            continue; // reference runs are summarized in the JSON report
        }
        let cap = &report.capacities[r.p_index];
        let cell = report
            .cells
            .iter()
            .find(|c| c.p_index == r.p_index && c.data_tokens == r.data_tokens)
            .expect("cell for record");
        let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            cap.param_count,
            r.data_tokens,
            r.seed_index,
            loss,
            cap.bias,
            cell.variance_term,
            report.epsilon,
            cell.residual
        );
    }
    csv
}

fn emergence_csv(curve: &EmergenceCurve) -> String {
    let mut csv =
        String::from("P,D,seed,snr,snr_ci_lo,snr_ci_hi,accuracy,acc_ci_lo,acc_ci_hi\n");
    for c in &curve.cells {
        let (snr, lo, hi) = match &c.snr {
            Some(s) => (s.snr.to_string(), s.snr_ci.0.to_string(), s.snr_ci.1.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            c.param_count,
            c.data_tokens,
            c.seed_index,
            snr,
            lo,
            hi,
            c.accuracy,
            c.acc_ci.0,
            c.acc_ci.1
        );
    }
    csv
}

fn run_clt(cfg: &ExperimentConfig, dir: &Path, seeds: &mut Vec<SeedEntry>) -> Result<()> {
    let (plan, section) = cfg.clt_plan()?;
    for &n in &plan.context_grid {
        seeds.push(SeedEntry {
            tag: "clt-context".into(),
            coords: vec![n as u64, 0],
            seed: derive_seed(plan.seed, "clt-context", &[n as u64, 0]),
        });
    }
    let mut report = cltlab::measure_representation_noise(&plan)?;
    if section.gaussianity {
        report.gaussianity = cltlab::gaussianity_sweep(&plan)?;
    }
    if !section.concentration_eps.is_empty() {
        report.concentration = Some(cltlab::attention_concentration(
            &plan,
            &section.concentration_eps,
        )?);
    }
    if section.block_diagnostics {
        report.block = Some(cltlab::block_sum_diagnostics(&plan)?);
    }
    if section.ffn_check {
        let model = plan.build_model()?;
        let batch: Vec<_> = (0..8)
            .map(|i| {
                plan.source.sample_sequence(
                    plan.context_grid[0],
                    derive_seed(plan.seed, "clt-assume", &[i]),
                )
            })
            .collect::<Result<_>>()?;
        let assume = check_assumptions(&model, &batch)?;
        report.ffn_mapping = cltlab::ffn_mapping_check(&model, &plan, &assume.ffn_lipschitz)?;
    }
    write_text(&dir.join("clt_variance.csv"), &clt_variance_csv(&report))?;
    write_json(&dir.join("clt_report.json"), &CltReportFile { report: report.clone() })?;
    if cfg.plots {
        write_text(&dir.join("clt_variance.svg"), &plot::variance_scaling_svg(&report))?;
    }
    Ok(())
}

fn run_biasvar(cfg: &ExperimentConfig, dir: &Path, seeds: &mut Vec<SeedEntry>) -> Result<()> {
    let plan = cfg.biasvar_plan()?;
    for p in 0..plan.capacities.len() {
        for &d in &plan.data_grid {
            for s in 0..plan.seeds {
                let coords = vec![p as u64, d as u64, s as u64];
                seeds.push(SeedEntry {
                    tag: "biasvar-train".into(),
                    coords: coords.clone(),
                    seed: derive_seed(plan.seed, "biasvar-train", &coords),
                });
            }
        }
    }
    let report = biasvar::run_decomposition(&plan)?;
    let trends = biasvar::monotonicity_diagnostics(&report);
    let orthogonality =
        biasvar::orthogonality_diagnostics(&report, derive_seed(plan.seed, "biasvar-orth", &[]))
            .ok();
    write_text(&dir.join("biasvar.csv"), &biasvar_csv(&report))?;
    write_json(
        &dir.join("biasvar_report.json"),
        &BiasvarReportFile {
            report: report.clone(),
            trends,
            orthogonality,
        },
    )?;
    if cfg.plots {
        write_text(&dir.join("biasvar_surfaces.svg"), &plot::biasvar_surfaces_svg(&report))?;
    }
    Ok(())
}

fn run_emergence(cfg: &ExperimentConfig, dir: &Path, seeds: &mut Vec<SeedEntry>) -> Result<()> {
    let plan = cfg.emergence_plan()?;
    for p in 0..plan.capacities.len() {
        for &d in &plan.data_grid {
            for s in 0..plan.seeds {
                let coords = vec![p as u64, d as u64, s as u64];
                seeds.push(SeedEntry {
                    tag: "emergence-train".into(),
                    coords: coords.clone(),
                    seed: derive_seed(plan.seed, "emergence-train", &coords),
                });
            }
        }
    }
    let curve = emergence::emergence_sweep(&plan)?;
    let (scaling, scaling_error) = match emergence::snr_scaling_fit(&curve.cells) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    write_text(&dir.join("emergence.csv"), &emergence_csv(&curve))?;
    if cfg.plots {
        write_text(&dir.join("emergence_curve.svg"), &plot::emergence_svg(&curve))?;
        write_text(
            &dir.join("snr_scaling.svg"),
            &plot::snr_scaling_svg(&curve.cells, scaling.as_ref()),
        )?;
    }
    write_json(
        &dir.join("emergence_report.json"),
        &EmergenceReportFile {
            curve,
            scaling,
            scaling_error,
        },
    )?;
    Ok(())
}

fn run_assumptions(cfg: &ExperimentConfig, dir: &Path, seeds: &mut Vec<SeedEntry>) -> Result<()> {
    let (model_cfg, source, section) = cfg.assumptions_inputs()?;
    let model_seed = derive_seed(cfg.seed, "model", &[]);
    seeds.push(SeedEntry {
        tag: "model".into(),
        coords: vec![],
        seed: model_seed,
    });
    let model = init_model(&model_cfg, model_seed)?;
    let batch: Vec<_> = (0..section.sequences)
        .map(|i| {
            source.sample_sequence(section.seq_len, derive_seed(cfg.seed, "assume", &[i as u64]))
        })
        .collect::<Result<_>>()?;
    let report = check_assumptions(&model, &batch)?;
    write_json(
        &dir.join("assumptions_report.json"),
        &AssumptionsReportFile {
            report,
            sequences: section.sequences,
            seq_len: section.seq_len,
        },
    )?;
    Ok(())
}

/// Executes a resolved config and returns the run directory.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = create_run_dir(out, cfg.kind)?;
    let started = chrono::Utc::now().to_rfc3339();
    let mut seeds = Vec::new();
    match cfg.kind {
        ExperimentKind::Clt => run_clt(cfg, &dir, &mut seeds)?,
        ExperimentKind::Biasvar => run_biasvar(cfg, &dir, &mut seeds)?,
        ExperimentKind::Emergence => run_emergence(cfg, &dir, &mut seeds)?,
        ExperimentKind::Assumptions => run_assumptions(cfg, &dir, &mut seeds)?,
    }
    let canonical = cfg.to_toml();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: cfg.kind,
        config: cfg.clone(),
        master_seed: cfg.seed,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        seed_table: seeds,
        config_hash: format!("{:x}", Sha256::digest(canonical.as_bytes())),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(dir)
}

/// Loads a config from either a TOML config file or a previously
/// emitted `manifest.json` (rerun path).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = read_text(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| LabError::Config(format!("invalid manifest {}: {e}", path.display())))?;
        Ok(manifest.config)
    } else {
        ExperimentConfig::from_toml(&text)
    }
}

/// Re-renders the SVG plots of an existing run directory from its
/// report files; a pure function of report content.
pub fn render_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let clt = dir.join("clt_report.json");
    if clt.exists() {
        let file: CltReportFile = serde_json::from_str(&read_text(&clt)?)
            .map_err(|e| LabError::Config(format!("invalid report {}: {e}", clt.display())))?;
        let out = dir.join("clt_variance.svg");
        write_text(&out, &plot::variance_scaling_svg(&file.report))?;
        written.push(out);
    }
    let bv = dir.join("biasvar_report.json");
    if bv.exists() {
        let file: BiasvarReportFile = serde_json::from_str(&read_text(&bv)?)
            .map_err(|e| LabError::Config(format!("invalid report {}: {e}", bv.display())))?;
        let out = dir.join("biasvar_surfaces.svg");
        write_text(&out, &plot::biasvar_surfaces_svg(&file.report))?;
        written.push(out);
    }
    let em = dir.join("emergence_report.json");
    if em.exists() {
        let file: EmergenceReportFile = serde_json::from_str(&read_text(&em)?)
            .map_err(|e| LabError::Config(format!("invalid report {}: {e}", em.display())))?;
        let out = dir.join("emergence_curve.svg");
        write_text(&out, &plot::emergence_svg(&file.curve))?;
        written.push(out);
        let out = dir.join("snr_scaling.svg");
        write_text(&out, &plot::snr_scaling_svg(&file.curve.cells, file.scaling.as_ref()))?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(LabError::io(
            dir.display().to_string(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no report files found"),
        ));
    }
    Ok(written)
}
