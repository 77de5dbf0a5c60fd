//! Local-hierarchy similarity, the similarity → ratio law and hidden-state
//! mixing.
//!
//! Two instances whose local hierarchies look alike (high `s`) are mixed
//! aggressively (λ near 0.5); dissimilar ones barely at all (λ near β):
//!
//! ```text
//! s = ½ (cos(h_i[CLS], h_j[CLS]) + 1)
//! λ = −(β − ½) s^α + β
//! h̃ = λ h_i + (1 − λ) h_j
//! ```

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, l2_norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    Off,
    Vanilla,
    Lh,
}

impl MixMode {
    pub const ALL: [MixMode; 3] = [MixMode::Off, MixMode::Vanilla, MixMode::Lh];
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMode::Off => "off",
            MixMode::Vanilla => "vanilla",
            MixMode::Lh => "lh",
        })
    }
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MixMode::Off),
            "vanilla" => Ok(MixMode::Vanilla),
            "lh" => Ok(MixMode::Lh),
            other => Err(Error::InvalidArgument(format!("unknown mixup mode `{other}`"))),
        }
    }
}

/// Which encoder state produces the `[CLS]` hiddens used for similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    /// The live encoder, read through a detached forward pass.
    #[default]
    Live,
    /// A copy of the encoder frozen when the mixing phase starts.
    FrozenAtWarmupEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub mode: MixMode,
    pub alpha: f64,
    pub beta_cap: f64,
    pub vanilla_concentration: f64,
    pub similarity_source: SimilaritySource,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            mode: MixMode::Off,
            alpha: 1.0,
            beta_cap: 1.0,
            vanilla_concentration: 0.2,
            similarity_source: SimilaritySource::Live,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta_cap > 0.5 && self.beta_cap <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in (0.5, 1], got {}",
                self.beta_cap
            )));
        }
        if !(self.vanilla_concentration > 0.0 && self.vanilla_concentration.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "vanilla concentration must be > 0, got {}",
                self.vanilla_concentration
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixPair {
    pub index_i: usize,
    pub index_j: usize,
    /// Similarity; only defined for local-hierarchy pairs.
    pub s: Option<f64>,
    pub lambda: f64,
}

/// Normalized cosine similarity in `[0, 1]`.
pub fn similarity(h_i: &[f64], h_j: &[f64]) -> Result<f64> {
    if h_i.len() != h_j.len() {
        return Err(Error::Shape(format!("similarity of sizes {} and {}", h_i.len(), h_j.len())));
    }
    let (ni, nj) = (l2_norm(h_i), l2_norm(h_j));
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = dot(h_i, h_j) / (ni * nj);
    Ok((0.5 * (cos + 1.0)).clamp(0.0, 1.0))
}

/// `λ = −(β − 0.5)·s^α + β`
pub fn mix_ratio(s: f64, alpha: f64, beta_cap: f64) -> f64 {
    -(beta_cap - 0.5) * s.powf(alpha) + beta_cap
}

/// λ ~ Beta(a, a), folded onto `[0.5, 1]`.
pub fn sample_vanilla_ratio<R: Rng + ?Sized>(rng: &mut R, concentration: f64) -> Result<f64> {
    let beta = Beta::new(concentration, concentration)
        .map_err(|e| Error::InvalidArgument(format!("Beta({concentration}, {concentration}): {e}")))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

pub fn mix_hidden(lambda: f64, h_i: &[f64], h_j: &[f64]) -> Result<Vec<f64>> {
    if h_i.len() != h_j.len() {
        return Err(Error::Shape(format!("mixing hiddens of sizes {} and {}", h_i.len(), h_j.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup ratio {lambda} outside [0, 1]")));
    }
    let mu = 1.0 - lambda;
    Ok(h_i.iter().zip(h_j).map(|(a, b)| lambda * a + mu * b).collect())
}

/// A uniformly random derangement of `0..batch_size`, returned as
/// `(i, π(i))` pairs. Fewer than two instances yield no pairs.
pub fn pair_batch<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if batch_size < 2 {
        log::debug!("batch of {batch_size} cannot be paired; mixup skipped");
        return Vec::new();
    }
    let mut perm: Vec<usize> = (0..batch_size).collect();
    // rejection sampling: a random permutation is a derangement with probability ≈ 1/e
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &j)| i != j) {
            return perm.into_iter().enumerate().collect();
        }
    }
}

/// Attach similarity-guided ratios to the pairing skeleton. `cls[k]` is the
/// `[CLS]` hidden of batch member `k`'s local-hierarchy sequence.
pub fn make_pairs_lh(skeleton: &[(usize, usize)], cls: &[Vec<f64>], config: &MixupConfig) -> Result<Vec<MixPair>> {
    skeleton
        .iter()
        .map(|&(i, j)| {
            let s = similarity(&cls[i], &cls[j])?;
            let lambda = mix_ratio(s, config.alpha, config.beta_cap).clamp(0.5, config.beta_cap);
            Ok(MixPair {
                index_i: i,
                index_j: j,
                s: Some(s),
                lambda,
            })
        })
        .collect()
}

pub fn make_pairs_vanilla<R: Rng + ?Sized>(
    skeleton: &[(usize, usize)],
    rng: &mut R,
    config: &MixupConfig,
) -> Result<Vec<MixPair>> {
    skeleton
        .iter()
        .map(|&(i, j)| {
            Ok(MixPair {
                index_i: i,
                index_j: j,
                s: None,
                lambda: sample_vanilla_ratio(rng, config.vanilla_concentration)?,
            })
        })
        .collect()
}
