//! The trainable model (encoder + verbalizer) and per-instance prepared inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Vocabulary};
use crate::encoder::{EncoderConfig, EncoderParams, SequenceEncoder};
use crate::error::Result;
use crate::objective::{predict, score_depth, DepthLabelSplit, DepthScores};
use crate::prompt::{build_classification_sequence, build_local_hierarchy_sequence, init_verbalizer, PromptSequence, Verbalizer};
use crate::taxonomy::Taxonomy;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub verbalizer: Verbalizer,
}

impl Model {
    /// Gaussian encoder initialization; verbalizer rows from label-name embeddings.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, tax: &Taxonomy, vocab: &Vocabulary, rng: &mut R) -> Result<Self> {
        let encoder = EncoderParams::init(config, vocab.len(), rng);
        let verbalizer = init_verbalizer(tax, &encoder.token_embeddings, vocab)?;
        Ok(Self { encoder, verbalizer })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            verbalizer: self.verbalizer.zeros_like(),
        }
    }

    pub fn depth(&self) -> usize {
        self.verbalizer.depth()
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.tensors();
        for (d, m) in self.verbalizer.rows.iter().enumerate() {
            out.push((format!("verbalizer.{}", d + 1), m));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = self.encoder.tensors_mut();
        for (d, m) in self.verbalizer.rows.iter_mut().enumerate() {
            out.push((format!("verbalizer.{}", d + 1), m));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    /// Scores of every depth for one classification sequence.
    pub fn score(&self, seq: &PromptSequence) -> Result<Vec<DepthScores>> {
        let hidden = self.encoder.detached_forward(seq)?;
        (1..=self.depth())
            .map(|d| score_depth(hidden.h_mask(d), self.verbalizer.at_depth(d), d))
            .collect()
    }

    pub fn predict(&self, tax: &Taxonomy, seq: &PromptSequence) -> Result<Vec<usize>> {
        Ok(predict(tax, &self.score(seq)?))
    }
}

/// An instance turned into model inputs.
#[derive(Debug, Clone)]
pub struct Example {
    pub sequence: PromptSequence,
    pub lh_sequence: PromptSequence,
    /// `splits[d - 1]` is the gold split of depth `d`.
    pub splits: Vec<DepthLabelSplit>,
    /// Gold labels, ascending taxonomy index.
    pub gold: Vec<usize>,
}

pub fn prepare_examples(split: &DatasetSplit, tax: &Taxonomy, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Example>> {
    let depth = tax.max_depth();
    split
        .instances()
        .iter()
        .map(|inst| {
            Ok(Example {
                sequence: build_classification_sequence(vocab, depth, &inst.tokens, max_len)?,
                lh_sequence: build_local_hierarchy_sequence(vocab, &inst.labels, tax),
                splits: (1..=depth)
                    .map(|d| DepthLabelSplit::from_local_hierarchy(tax, &inst.labels, d))
                    .collect(),
                gold: inst.labels.labels().iter().copied().collect(),
            })
        })
        .collect()
}
