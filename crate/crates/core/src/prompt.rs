//! Hierarchical prompt sequences and the per-depth verbalizer.
//!
//! A classification sequence looks like
//! `[CLS] [Dth1] [MASK] … [DthD] [MASK] [SEP] x1 … xn [SEP]`; the hidden state
//! at the `[MASK]` following `[Dth d]` scores the labels of depth `d`.
//! A local-hierarchy sequence replaces each `[MASK]` by the names of the gold
//! labels at that depth: `[CLS] [Dth1] cs [Dth2] machine learning [SEP]`.

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, Vocabulary, CLS, MASK, SEP};
use crate::error::{Error, Result};
use crate::taxonomy::{LocalHierarchy, Taxonomy};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    pub token_ids: Vec<usize>,
    pub cls_position: usize,
    /// `mask_positions[d - 1]` is the `[MASK]` paired with `[Dth d]`.
    /// Empty for local-hierarchy sequences.
    pub mask_positions: Vec<usize>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokens before the text: `[CLS]`, D `([Dth], [MASK])` pairs and `[SEP]`.
pub fn prefix_len(depth: usize) -> usize {
    2 * depth + 2
}

pub fn build_classification_sequence<S: AsRef<str>>(
    vocab: &Vocabulary,
    depth: usize,
    text_tokens: &[S],
    max_len: usize,
) -> Result<PromptSequence> {
    if depth == 0 || depth > vocab.depth() {
        return Err(Error::InvalidArgument(format!(
            "prompt depth {depth} outside 1..={}",
            vocab.depth()
        )));
    }
    let frame = prefix_len(depth) + 1;
    if max_len < frame {
        return Err(Error::MaxLenTooSmall {
            max_len,
            required: frame,
        });
    }
    let text_room = max_len - frame;
    let kept = &text_tokens[..text_tokens.len().min(text_room)];

    let mut ids = Vec::with_capacity(frame + kept.len());
    ids.push(CLS);
    let mut mask_positions = Vec::with_capacity(depth);
    for d in 1..=depth {
        ids.push(vocab.depth_token(d));
        mask_positions.push(ids.len());
        ids.push(MASK);
    }
    ids.push(SEP);
    ids.extend(kept.iter().map(|t| vocab.id(t.as_ref())));
    ids.push(SEP);
    Ok(PromptSequence {
        token_ids: ids,
        cls_position: 0,
        mask_positions,
    })
}

pub fn build_local_hierarchy_sequence(vocab: &Vocabulary, lh: &LocalHierarchy, tax: &Taxonomy) -> PromptSequence {
    let mut ids = vec![CLS];
    for (d0, labels) in lh.per_depth().iter().enumerate() {
        if labels.is_empty() {
            continue;
        }
        ids.push(vocab.depth_token(d0 + 1));
        for &label in labels {
            ids.extend(tokenize(&tax.node(label).name).iter().map(|w| vocab.id(w)));
        }
    }
    ids.push(SEP);
    PromptSequence {
        token_ids: ids,
        cls_position: 0,
        mask_positions: Vec::new(),
    }
}

/// Per-depth label embedding rows; `rows[d - 1]` has one row per label of
/// depth `d`, in label order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub rows: Vec<Matrix>,
}

impl Verbalizer {
    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn at_depth(&self, d: usize) -> &Matrix {
        &self.rows[d - 1]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            rows: self.rows.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }
}

/// Each label's row starts as the mean embedding of its name words
/// (`[UNK]`'s row for words outside the vocabulary).
pub fn init_verbalizer(tax: &Taxonomy, embeddings: &Matrix, vocab: &Vocabulary) -> Result<Verbalizer> {
    if embeddings.rows() < vocab.len() {
        return Err(Error::Shape(format!(
            "embedding table has {} rows for a vocabulary of {}",
            embeddings.rows(),
            vocab.len()
        )));
    }
    let dim = embeddings.cols();
    let mut rows = Vec::with_capacity(tax.max_depth());
    for set in tax.depth_sets() {
        let mut w = Matrix::zeros(set.len(), dim);
        for (slot, &label) in set.iter().enumerate() {
            let words = tokenize(&tax.node(label).name);
            if words.is_empty() {
                return Err(Error::EmptyLabelName(tax.node(label).id.clone()));
            }
            let scale = 1.0 / words.len() as f64;
            let out = w.row_mut(slot);
            for word in &words {
                crate::tensor::axpy(scale, embeddings.row(vocab.id(word)), out);
            }
        }
        rows.push(w);
    }
    Ok(Verbalizer { rows })
}
