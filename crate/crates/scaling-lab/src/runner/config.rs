//! Experiment configuration: a TOML schema with strict key checking
//! and typo suggestions, resolved into the plan types of the
//! experiment modules.

use serde::{Deserialize, Serialize};

use crate::biasvar::BiasVarPlan;
use crate::cltlab::CltPlan;
use crate::emergence::EmergencePlan;
use crate::error::{LabError, Result};
use crate::nanoformer::{Activation, LogitScale, ModelConfig, TrainHyper};
use crate::sources::Source;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Clt,
    Biasvar,
    Emergence,
    Assumptions,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Clt => "clt",
            ExperimentKind::Biasvar => "biasvar",
            ExperimentKind::Emergence => "emergence",
            ExperimentKind::Assumptions => "assumptions",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub kind: String,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub probs: Option<Vec<f64>>,
    #[serde(default)]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub block_width: Option<usize>,
    #[serde(default)]
    pub lag: Option<usize>,
    #[serde(default)]
    pub copy_prob: Option<f64>,
    #[serde(default)]
    pub background: Option<Vec<f64>>,
}

impl SourceConfig {
    pub fn build(&self) -> Result<Source> {
        let base = |cfg: &SourceConfig| -> Result<Source> {
            match cfg.probs.clone() {
                Some(p) => Source::iid(p),
                None => {
                    let v = cfg.vocab_size.ok_or_else(|| {
                        LabError::Config("source needs vocab_size or probs".into())
                    })?;
                    Ok(Source::iid_uniform(v))
                }
            }
        };
        match self.kind.as_str() {
            "iid" => base(self),
            "markov" => {
                let rows = self.transition.clone().ok_or_else(|| {
                    LabError::Config("markov source needs a transition matrix".into())
                })?;
                let n = rows.len();
                let mut t = crate::linalg::Mat::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    if row.len() != n {
                        return Err(LabError::Config("transition matrix must be square".into()));
                    }
                    t.row_mut(i).copy_from_slice(row);
                }
                Source::markov(t)
            }
            "block" => {
                let width = self
                    .block_width
                    .ok_or_else(|| LabError::Config("block source needs block_width".into()))?;
                Source::block_stationary(base(self)?, width)
            }
            "planted_copy" => {
                let lag = self.lag.unwrap_or(1);
                let p = self
                    .copy_prob
                    .ok_or_else(|| LabError::Config("planted_copy source needs copy_prob".into()))?;
                let bg = match (self.background.clone(), self.vocab_size) {
                    (Some(bg), _) => bg,
                    (None, Some(v)) => vec![1.0 / v as f64; v],
                    (None, None) => {
                        return Err(LabError::Config(
                            "planted_copy source needs background or vocab_size".into(),
                        ))
                    }
                };
                Source::planted_copy(lag, p, bg)
            }
            other => Err(LabError::Config(format!(
                "unknown source kind `{other}` (expected iid, markov, block, planted_copy)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    pub model_dim: usize,
    #[serde(default)]
    pub key_dim: Option<usize>,
    #[serde(default)]
    pub ffn_hidden_dim: Option<usize>,
    #[serde(default = "default_context_cap")]
    pub context_cap: usize,
    #[serde(default = "default_cap")]
    pub m_q: f64,
    #[serde(default = "default_cap")]
    pub m_k: f64,
    #[serde(default = "default_cap")]
    pub m_v: f64,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_temperature")]
    pub attention_temperature: f64,
    #[serde(default = "default_logit_scale")]
    pub logit_scale: String,
    #[serde(default)]
    pub enforce_bounds: bool,
}

fn default_layers() -> usize {
    1
}
fn default_context_cap() -> usize {
    4096
}
fn default_cap() -> f64 {
    1.0
}
fn default_activation() -> String {
    "tanh".into()
}
fn default_temperature() -> f64 {
    1.0
}
fn default_logit_scale() -> String {
    "sqrt".into()
}

impl ModelSection {
    pub fn build(&self) -> Result<ModelConfig> {
        let activation = match self.activation.as_str() {
            "tanh" => Activation::Tanh,
            "identity" => Activation::Identity,
            other => {
                return Err(LabError::Config(format!(
                    "unknown activation `{other}` (expected tanh or identity)"
                )))
            }
        };
        let logit_scale = match self.logit_scale.as_str() {
            "sqrt" => LogitScale::Sqrt,
            "linear" => LogitScale::Linear,
            other => {
                return Err(LabError::Config(format!(
                    "unknown logit_scale `{other}` (expected sqrt or linear)"
                )))
            }
        };
        let cfg = ModelConfig {
            vocab_size: self.vocab_size,
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            key_dim: self.key_dim.unwrap_or(self.model_dim),
            ffn_hidden_dim: self.ffn_hidden_dim.unwrap_or(2 * self.model_dim),
            context_cap: self.context_cap,
            m_q: self.m_q,
            m_k: self.m_k,
            m_v: self.m_v,
            ffn_activation: activation,
            attention_temperature: self.attention_temperature,
            logit_scale,
            enforce_bounds: self.enforce_bounds,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn with_dim(&self, model_dim: usize) -> ModelSection {
        ModelSection {
            model_dim,
            key_dim: self.key_dim.map(|_| model_dim),
            ffn_hidden_dim: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub step_size: f64,
    #[serde(default)]
    pub steps: usize,
    pub batch_sequences: usize,
    pub seq_len: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_record_every() -> usize {
    1000
}

impl TrainSection {
    pub fn build(&self) -> TrainHyper {
        TrainHyper {
            step_size: self.step_size,
            steps: self.steps,
            batch_sequences: self.batch_sequences,
            seq_len: self.seq_len,
            record_every: self.record_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSection {
    pub context_grid: Vec<usize>,
    pub replicates: usize,
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    pub block_width: usize,
    #[serde(default = "default_true")]
    pub zero_query: bool,
    /// Optional ε grid for the attention concentration table
    /// (requires enforce_bounds on the model).
    #[serde(default)]
    pub concentration_eps: Vec<f64>,
    #[serde(default)]
    pub gaussianity: bool,
    #[serde(default)]
    pub block_diagnostics: bool,
    #[serde(default)]
    pub ffn_check: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasvarSection {
    pub model_dims: Vec<usize>,
    pub data_grid: Vec<usize>,
    pub d_ref: usize,
    pub seeds: usize,
    pub ref_budget_factor: usize,
    pub eval_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmergenceSection {
    pub model_dims: Vec<usize>,
    pub data_grid: Vec<usize>,
    pub seeds: usize,
    pub passes: usize,
    pub snr_per_class: usize,
    pub snr_context: usize,
    #[serde(default)]
    pub layer: usize,
    pub probe_tokens: usize,
    #[serde(default = "default_criterion")]
    pub criterion: f64,
    #[serde(default = "default_true")]
    pub taylor_diagnostic: bool,
}

fn default_criterion() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionsSection {
    pub sequences: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default = "default_true")]
    pub plots: bool,
    pub source: SourceConfig,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub optimizer: Option<TrainSection>,
    #[serde(default)]
    pub clt: Option<CltSection>,
    #[serde(default)]
    pub biasvar: Option<BiasvarSection>,
    #[serde(default)]
    pub emergence: Option<EmergenceSection>,
    #[serde(default)]
    pub assumptions: Option<AssumptionsSection>,
}

/// Levenshtein distance, used for typo suggestions on unknown keys.
fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Every key accepted anywhere in the schema, for typo suggestions.
const ALL_KEYS: &[&str] = &[
    "kind", "seed", "out", "plots", "source", "model", "optimizer", "clt", "biasvar",
    "emergence", "assumptions", "vocab_size", "probs", "transition", "block_width", "lag",
    "copy_prob", "background", "num_layers", "model_dim", "key_dim", "ffn_hidden_dim",
    "context_cap", "m_q", "m_k", "m_v", "activation", "attention_temperature", "logit_scale",
    "enforce_bounds", "step_size", "steps", "batch_sequences", "seq_len", "record_every",
    "context_grid", "replicates", "layers", "zero_query", "concentration_eps", "gaussianity",
    "block_diagnostics", "ffn_check", "model_dims", "data_grid", "d_ref", "seeds",
    "ref_budget_factor", "eval_tokens", "passes", "snr_per_class", "snr_context", "layer",
    "probe_tokens", "criterion", "taylor_diagnostic", "sequences",
];

/// Rewrites serde's "unknown field" message with a nearest-key
/// suggestion when a plausible one exists.
fn augment_unknown_field(msg: &str) -> String {
    let Some(rest) = msg.split("unknown field `").nth(1) else {
        return msg.to_string();
    };
    let Some(field) = rest.split('`').next() else {
        return msg.to_string();
    };
    let expected: Vec<&str> = rest
        .split("expected")
        .nth(1)
        .map(|tail| tail.split('`').skip(1).step_by(2).collect())
        .unwrap_or_default();
    let best = expected
        .iter()
        .chain(ALL_KEYS)
        .map(|&k| (edit_distance(field, k), k))
        .min_by_key(|&(d, _)| d);
    match best {
        Some((d, k)) if d <= 3 => format!("{msg} — did you mean `{k}`?"),
        _ => msg.to_string(),
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text)
            .map_err(|e| LabError::Config(augment_unknown_field(&e.to_string())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Structural validation plus full plan validation, without
    /// running any compute.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ExperimentKind::Clt => {
                self.clt_plan()?;
            }
            ExperimentKind::Biasvar => {
                self.biasvar_plan()?.validate()?;
            }
            ExperimentKind::Emergence => {
                self.emergence_plan()?.validate()?;
            }
            ExperimentKind::Assumptions => {
                self.assumptions_inputs()?;
            }
        }
        Ok(())
    }

    fn model_section(&self) -> Result<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| LabError::Config("missing [model] section".into()))
    }

    fn train_section(&self) -> Result<&TrainSection> {
        self.optimizer
            .as_ref()
            .ok_or_else(|| LabError::Config("missing [optimizer] section".into()))
    }

    pub fn clt_plan(&self) -> Result<(CltPlan, CltSection)> {
        let section = self
            .clt
            .as_ref()
            .ok_or_else(|| LabError::Config("missing [clt] section".into()))?;
        let config = self.model_section()?.build()?;
        let layers = section
            .layers
            .clone()
            .unwrap_or_else(|| (0..config.num_layers).collect());
        let plan = CltPlan {
            config,
            model_seed: crate::rng::derive_seed(self.seed, "model", &[]),
            zero_query: section.zero_query,
            source: self.source.build()?,
            context_grid: section.context_grid.clone(),
            replicates: section.replicates,
            layers,
            block_width: section.block_width,
            seed: self.seed,
        };
        plan.validate()?;
        Ok((plan, section.clone()))
    }

    pub fn biasvar_plan(&self) -> Result<BiasVarPlan> {
        let section = self
            .biasvar
            .as_ref()
            .ok_or_else(|| LabError::Config("missing [biasvar] section".into()))?;
        let template = self.model_section()?;
        let capacities = section
            .model_dims
            .iter()
            .map(|&d| template.with_dim(d).build())
            .collect::<Result<Vec<_>>>()?;
        Ok(BiasVarPlan {
            capacities,
            data_grid: section.data_grid.clone(),
            d_ref: section.d_ref,
            seeds: section.seeds,
            source: self.source.build()?,
            hyper: self.train_section()?.build(),
            ref_budget_factor: section.ref_budget_factor,
            eval_tokens: section.eval_tokens,
            seed: self.seed,
        })
    }

    pub fn emergence_plan(&self) -> Result<EmergencePlan> {
        let section = self
            .emergence
            .as_ref()
            .ok_or_else(|| LabError::Config("missing [emergence] section".into()))?;
        let template = self.model_section()?;
        let capacities = section
            .model_dims
            .iter()
            .map(|&d| template.with_dim(d).build())
            .collect::<Result<Vec<_>>>()?;
        Ok(EmergencePlan {
            capacities,
            data_grid: section.data_grid.clone(),
            seeds: section.seeds,
            source: self.source.build()?,
            hyper: self.train_section()?.build(),
            passes: section.passes,
            snr_per_class: section.snr_per_class,
            snr_context: section.snr_context,
            layer: section.layer,
            probe_tokens: section.probe_tokens,
            criterion: section.criterion,
            taylor_diagnostic: section.taylor_diagnostic,
            seed: self.seed,
        })
    }

    pub fn assumptions_inputs(&self) -> Result<(ModelConfig, Source, AssumptionsSection)> {
        let section = self
            .assumptions
            .as_ref()
            .ok_or_else(|| LabError::Config("missing [assumptions] section".into()))?;
        if section.sequences == 0 || section.seq_len < 2 {
            return Err(LabError::Config(
                "assumptions needs sequences >= 1 and seq_len >= 2".into(),
            ));
        }
        Ok((self.model_section()?.build()?, self.source.build()?, section.clone()))
    }
}
