//! Synthetic token sources with analytically known entropy rates.
//!
//! Every source exposes its exact next-token law, so model
//! cross-entropies can be compared against a ground-truth entropy
//! floor instead of a plug-in estimate.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::Mat;
use crate::rng::CounterRng;

const PROB_SUM_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-10;

/// A discrete stochastic process over tokens `0..vocab_size`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Source {
    pub vocab_size: usize,
    pub kind: SourceKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SourceKind {
    /// Independent draws from a fixed distribution.
    Iid { probs: Vec<f64> },
    /// Stationary Markov chain; the initial token is drawn from the
    /// stationary distribution so the process is stationary from token 1.
    Markov {
        transition: Mat,
        stationary: Vec<f64>,
    },
    /// Independent blocks of `width` tokens, each generated by `base`
    /// restarted from scratch.
    BlockStationary { base: Box<Source>, width: usize },
    /// Position i copies position i-lag with probability `copy_prob`,
    /// otherwise draws from `background`. The first `lag` tokens are
    /// background draws.
    PlantedCopy {
        lag: usize,
        copy_prob: f64,
        background: Vec<f64>,
    },
}

/// A sampled token sequence, tagged with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub source_id: String,
    pub seed: u64,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn validate_probs(field: &str, probs: &[f64], vocab: usize) -> Result<()> {
    if probs.len() != vocab {
        return Err(LabError::parameter(
            field,
            format!("expected {} entries, got {}", vocab, probs.len()),
        ));
    }
    if probs.iter().any(|&p| p < 0.0) {
        return Err(LabError::parameter(field, "negative probability entry"));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > PROB_SUM_TOL {
        return Err(LabError::parameter(
            field,
            format!("probabilities sum to {s}, not 1"),
        ));
    }
    Ok(())
}

/// Solves pi T = pi, sum(pi) = 1 by Gaussian elimination on (T' - I)
/// with the last equation replaced by the normalization constraint.
fn stationary_distribution(t: &Mat) -> Result<Vec<f64>> {
    let n = t.rows;
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for i in 0..n - 1 {
        for j in 0..n {
            a[i][j] = t.get(j, i) - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[n - 1][j] = 1.0;
    }
    b[n - 1] = 1.0;

    // Partial-pivot Gaussian elimination.
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
            .unwrap();
        if a[piv][col].abs() < 1e-14 {
            return Err(LabError::parameter(
                "transition",
                "singular system: chain has no unique stationary distribution",
            ));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut pi = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * pi[k];
        }
        pi[row] = acc / a[row][row];
    }
    // Clean tiny negative round-off and renormalize.
    for v in pi.iter_mut() {
        if *v < 0.0 && *v > -1e-12 {
            *v = 0.0;
        }
    }
    let s: f64 = pi.iter().sum();
    for v in pi.iter_mut() {
        *v /= s;
    }
    Ok(pi)
}

impl Source {
    pub fn iid(probs: Vec<f64>) -> Result<Source> {
        let vocab_size = probs.len();
        validate_probs("probs", &probs, vocab_size)?;
        Ok(Source {
            vocab_size,
            kind: SourceKind::Iid { probs },
        })
    }

    pub fn iid_uniform(vocab_size: usize) -> Source {
        let p = 1.0 / vocab_size as f64;
        Source::iid(vec![p; vocab_size]).expect("uniform law is valid")
    }

    pub fn markov(transition: Mat) -> Result<Source> {
        if transition.rows != transition.cols || transition.rows == 0 {
            return Err(LabError::parameter("transition", "matrix must be square"));
        }
        let vocab_size = transition.rows;
        for r in 0..vocab_size {
            validate_probs(&format!("transition row {r}"), transition.row(r), vocab_size)?;
        }
        let stationary = stationary_distribution(&transition)?;
        // pi T = pi residual check.
        let mut max_resid = 0.0f64;
        for j in 0..vocab_size {
            let mut acc = 0.0;
            for i in 0..vocab_size {
                acc += stationary[i] * transition.get(i, j);
            }
            max_resid = max_resid.max((acc - stationary[j]).abs());
        }
        if max_resid > STATIONARY_TOL {
            return Err(LabError::parameter(
                "transition",
                format!("stationary residual {max_resid} exceeds {STATIONARY_TOL}"),
            ));
        }
        Ok(Source {
            vocab_size,
            kind: SourceKind::Markov {
                transition,
                stationary,
            },
        })
    }

    pub fn block_stationary(base: Source, width: usize) -> Result<Source> {
        if width < 1 {
            return Err(LabError::parameter("width", "block width must be >= 1"));
        }
        Ok(Source {
            vocab_size: base.vocab_size,
            kind: SourceKind::BlockStationary {
                base: Box::new(base),
                width,
            },
        })
    }

    pub fn planted_copy(lag: usize, copy_prob: f64, background: Vec<f64>) -> Result<Source> {
        if lag < 1 {
            return Err(LabError::parameter("lag", "lag must be >= 1"));
        }
        if !(copy_prob > 0.0 && copy_prob <= 1.0) {
            return Err(LabError::parameter("copy_prob", "must lie in (0, 1]"));
        }
        let vocab_size = background.len();
        validate_probs("background", &background, vocab_size)?;
        Ok(Source {
            vocab_size,
            kind: SourceKind::PlantedCopy {
                lag,
                copy_prob,
                background,
            },
        })
    }

    /// Short identifier used to tag sampled sequences.
    pub fn id(&self) -> String {
        match &self.kind {
            SourceKind::Iid { .. } => format!("iid-v{}", self.vocab_size),
            SourceKind::Markov { .. } => format!("markov-v{}", self.vocab_size),
            SourceKind::BlockStationary { base, width } => {
                format!("block-w{}-{}", width, base.id())
            }
            SourceKind::PlantedCopy { lag, copy_prob, .. } => {
                format!("copy-k{}-p{}-v{}", lag, copy_prob, self.vocab_size)
            }
        }
    }

    /// Exact next-token law given the full prefix, defined for every
    /// prefix length (empty prefix yields the marginal law).
    pub fn next_law(&self, prefix: &[usize]) -> Vec<f64> {
        match &self.kind {
            SourceKind::Iid { probs } => probs.clone(),
            SourceKind::Markov {
                transition,
                stationary,
            } => match prefix.last() {
                Some(&j) => transition.row(j).to_vec(),
                None => stationary.clone(),
            },
            SourceKind::BlockStationary { base, width } => {
                let i = prefix.len();
                let block_start = i - (i % width);
                base.next_law(&prefix[block_start..])
            }
            SourceKind::PlantedCopy {
                lag,
                copy_prob,
                background,
            } => {
                if prefix.len() < *lag {
                    background.clone()
                } else {
                    let c = prefix[prefix.len() - lag];
                    let mut law: Vec<f64> =
                        background.iter().map(|&q| (1.0 - copy_prob) * q).collect();
                    law[c] += copy_prob;
                    law
                }
            }
        }
    }

    /// Exact conditional next-token distribution. Errors on an empty
    /// prefix for kinds that require history.
    pub fn conditional_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let needs_history = matches!(
            self.kind,
            SourceKind::Markov { .. } | SourceKind::PlantedCopy { .. }
        );
        if needs_history && prefix.is_empty() {
            return Err(LabError::Usage(
                "conditional_distribution requires a nonempty prefix for this source kind".into(),
            ));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t >= self.vocab_size) {
            return Err(LabError::Usage(format!(
                "prefix token {t} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(self.next_law(prefix))
    }

    /// Samples a length-n sequence, deterministic in (source, n, seed).
    pub fn sample_sequence(&self, n: usize, seed: u64) -> Result<TokenSequence> {
        if n < 1 {
            return Err(LabError::parameter("n", "sequence length must be >= 1"));
        }
        if let SourceKind::PlantedCopy { lag, .. } = &self.kind {
            if n <= *lag {
                return Err(LabError::parameter(
                    "n",
                    format!("planted-copy needs n > lag, got n={n} lag={lag}"),
                ));
            }
        }
        let mut rng = CounterRng::new(seed);
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let law = self.next_law(&tokens);
            tokens.push(rng.next_categorical(&law));
        }
        Ok(TokenSequence {
            tokens,
            source_id: self.id(),
            seed,
        })
    }

    /// Exact entropy rate in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        match &self.kind {
            SourceKind::Iid { probs } => shannon_entropy(probs),
            SourceKind::Markov {
                transition,
                stationary,
            } => {
                let mut h = 0.0;
                for i in 0..self.vocab_size {
                    h += stationary[i] * shannon_entropy(transition.row(i));
                }
                h
            }
            SourceKind::BlockStationary { base, .. } => base.entropy_rate(),
            SourceKind::PlantedCopy {
                copy_prob,
                background,
                ..
            } => {
                // Marginal of the lagged token stays `background`, so the
                // rate averages the mixture entropy over background classes.
                let mut h = 0.0;
                for (c, &qc) in background.iter().enumerate() {
                    if qc == 0.0 {
                        continue;
                    }
                    let mixture: Vec<f64> = background
                        .iter()
                        .enumerate()
                        .map(|(a, &q)| {
                            (1.0 - copy_prob) * q + if a == c { *copy_prob } else { 0.0 }
                        })
                        .collect();
                    h += qc * shannon_entropy(&mixture);
                }
                h
            }
        }
    }
}

/// Shannon entropy of a probability vector, in nats, with 0 ln 0 = 0.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
