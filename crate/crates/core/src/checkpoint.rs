//! JSON checkpoints: config, vocabulary, taxonomy, named parameter tensors
//! and, for resumable runs, the optimizer and early-stopping state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompt::Verbalizer;
use crate::taxonomy::Taxonomy;
use crate::tensor::Matrix;
use crate::trainer::{AdamState, TrainConfig, TrainingLog, TrainingState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

pub type ParameterMap = BTreeMap<String, TensorRecord>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub step: u64,
    pub m: ParameterMap,
    pub v: ParameterMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeRecord {
    pub epoch: usize,
    pub adam: AdamRecord,
    pub best_parameters: ParameterMap,
    pub best_epoch: usize,
    /// `None` before the first epoch
    pub best_metric: Option<f64>,
    pub phase_best: Option<f64>,
    pub stale_epochs: usize,
    pub stopped: bool,
    pub frozen_encoder: Option<ParameterMap>,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub taxonomy: Taxonomy,
    pub parameters: ParameterMap,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_state: Option<ResumeRecord>,
}

fn record(m: &Matrix) -> TensorRecord {
    TensorRecord {
        shape: [m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

pub fn parameter_map(model: &Model) -> ParameterMap {
    model.tensors().into_iter().map(|(n, m)| (n, record(m))).collect()
}

fn encoder_map(encoder: &EncoderParams) -> ParameterMap {
    encoder.tensors().into_iter().map(|(n, m)| (n, record(m))).collect()
}

fn fill(targets: Vec<(String, &mut Matrix)>, map: &ParameterMap) -> Result<()> {
    if targets.len() != map.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "expected {} tensors, found {}",
            targets.len(),
            map.len()
        )));
    }
    for (name, target) in targets {
        let rec = map
            .get(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")))?;
        if rec.shape != [target.rows(), target.cols()] {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` has shape {:?}, expected [{}, {}]",
                rec.shape,
                target.rows(),
                target.cols()
            )));
        }
        if rec.data.len() != rec.shape[0] * rec.shape[1] {
            return Err(Error::CorruptCheckpoint(format!("tensor `{name}` data length does not match its shape")));
        }
        target.as_mut_slice().copy_from_slice(&rec.data);
    }
    Ok(())
}

/// A zero model with the shapes implied by config, taxonomy and vocabulary.
pub fn model_skeleton(config: &TrainConfig, tax: &Taxonomy, vocab: &Vocabulary) -> Model {
    let e = &config.encoder;
    Model {
        encoder: EncoderParams::zeros(vocab.len(), e.d_model, e.layers, e.max_len),
        verbalizer: Verbalizer {
            rows: tax.depth_sets().iter().map(|s| Matrix::zeros(s.len(), e.d_model)).collect(),
        },
    }
}

fn map_of(values: &[Vec<f64>], like: &Model) -> ParameterMap {
    like.tensors()
        .into_iter()
        .zip(values)
        .map(|((n, m), v)| {
            (
                n,
                TensorRecord {
                    shape: [m.rows(), m.cols()],
                    data: v.clone(),
                },
            )
        })
        .collect()
}

fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, vocab: &Vocabulary, tax: &Taxonomy, model: &Model) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            vocabulary: vocab.clone(),
            taxonomy: tax.clone(),
            parameters: parameter_map(model),
            training_state: None,
        }
    }

    /// Checkpoint of the current parameters plus everything needed to resume.
    pub fn resumable(config: &TrainConfig, vocab: &Vocabulary, tax: &Taxonomy, state: &TrainingState) -> Self {
        let mut ck = Self::new(config, vocab, tax, &state.model);
        ck.training_state = Some(ResumeRecord {
            epoch: state.epoch,
            adam: AdamRecord {
                step: state.adam.step,
                m: map_of(&state.adam.m, &state.model),
                v: map_of(&state.adam.v, &state.model),
            },
            best_parameters: parameter_map(&state.best_model),
            best_epoch: state.best_epoch,
            best_metric: finite_or_none(state.best_metric),
            phase_best: finite_or_none(state.phase_best),
            stale_epochs: state.stale_epochs,
            stopped: state.stopped,
            frozen_encoder: state.frozen_encoder.as_ref().map(encoder_map),
            log: state.log.clone(),
        });
        ck
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = model_skeleton(&self.config, &self.taxonomy, &self.vocabulary);
        fill(model.tensors_mut(), &self.parameters)?;
        Ok(model)
    }

    pub fn training_state(&self) -> Result<Option<TrainingState>> {
        let Some(r) = &self.training_state else {
            return Ok(None);
        };
        let model = self.model()?;
        let mut best_model = model_skeleton(&self.config, &self.taxonomy, &self.vocabulary);
        fill(best_model.tensors_mut(), &r.best_parameters)?;
        let moments = |map: &ParameterMap| -> Result<Vec<Vec<f64>>> {
            let mut tmp = model_skeleton(&self.config, &self.taxonomy, &self.vocabulary);
            fill(tmp.tensors_mut(), map)?;
            Ok(tmp.tensors().iter().map(|(_, m)| m.as_slice().to_vec()).collect())
        };
        let adam = AdamState {
            step: r.adam.step,
            m: moments(&r.adam.m)?,
            v: moments(&r.adam.v)?,
        };
        let frozen_encoder = match &r.frozen_encoder {
            Some(map) => {
                let mut enc = model_skeleton(&self.config, &self.taxonomy, &self.vocabulary).encoder;
                fill(enc.tensors_mut(), map)?;
                Some(enc)
            }
            None => None,
        };
        Ok(Some(TrainingState {
            epoch: r.epoch,
            model,
            adam,
            best_model,
            best_epoch: r.best_epoch,
            best_metric: r.best_metric.unwrap_or(f64::NEG_INFINITY),
            phase_best: r.phase_best.unwrap_or(f64::NEG_INFINITY),
            stale_epochs: r.stale_epochs,
            stopped: r.stopped,
            frozen_encoder,
            log: r.log.clone(),
        }))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(source: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(source)?;
        let found = value.get("format_version").and_then(|v| v.as_u64());
        if found != Some(FORMAT_VERSION as u64) {
            return Err(Error::CheckpointVersion {
                found: found.map_or_else(|| "missing".to_string(), |v| v.to_string()),
                expected: FORMAT_VERSION,
            });
        }
        let ck: Self = serde_json::from_value(value)?;
        if ck.vocabulary.depth() != ck.taxonomy.max_depth() {
            return Err(Error::CorruptCheckpoint("vocabulary depth does not match taxonomy".into()));
        }
        // shape validation happens here rather than at first use
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (TrainConfig, Vocabulary, Taxonomy, Model) {
        let spec = SyntheticSpec { depth: 2, branching: 2, n_train: 10, n_dev: 2, n_test: 2, ..Default::default() };
        let c = generate_synthetic(&spec).unwrap();
        let vocab = Vocabulary::build(&c.train, 1, 2);
        let config = TrainConfig {
            encoder: EncoderConfig { d_model: 4, layers: 1, max_len: 16, init_std: 0.3 },
            ..Default::default()
        };
        let model = Model::init(&config.encoder, &c.taxonomy, &vocab, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (config, vocab, c.taxonomy, model)
    }

    #[test]
    fn round_trip_is_exact() {
        let (config, vocab, tax, model) = fixture();
        let ck = Checkpoint::new(&config, &vocab, &tax, &model);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap(), model);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let (config, vocab, tax, model) = fixture();
        let mut v: serde_json::Value = serde_json::from_str(&Checkpoint::new(&config, &vocab, &tax, &model).to_json().unwrap()).unwrap();
        v["format_version"] = 99.into();
        assert!(matches!(
            Checkpoint::from_json(&v.to_string()),
            Err(Error::CheckpointVersion { expected: FORMAT_VERSION, .. })
        ));
    }

    #[test]
    fn vocabulary_size_mismatch_is_corrupt() {
        let (config, vocab, tax, model) = fixture();
        let mut ck = Checkpoint::new(&config, &vocab, &tax, &model);
        let mut records = tax.records();
        records[0].name = "completely unseen words".into();
        let mut bigger = vocab.clone();
        bigger.extend_with_label_names(&Taxonomy::from_records(records).unwrap());
        assert!(bigger.len() > vocab.len());
        ck.vocabulary = bigger;
        assert!(matches!(Checkpoint::from_json(&ck.to_json().unwrap()), Err(Error::CorruptCheckpoint(_))));
    }
}
