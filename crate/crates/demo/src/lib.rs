//! wasm-bindgen bindings for the static page in `www/`.
//!
//! The plain functions are what the bindings wrap; they are also what the
//! native tests exercise.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lhmix::corpus::{tokenize, DatasetSplit, Instance, SplitName, Vocabulary};
use lhmix::mixup::{mix_ratio, MixupConfig};
use lhmix::objective::{zmlce, zmlce_grad, DepthLabelSplit};
use lhmix::prompt::{build_classification_sequence, build_local_hierarchy_sequence};
use lhmix::Taxonomy;

/// `n + 1` evenly spaced similarities in `[0, 1]` and their mix ratios,
/// interleaved as `[s0, λ0, s1, λ1, ...]`.
pub fn ratio_curve(alpha: f64, beta: f64, n: usize) -> Result<Vec<f64>, String> {
    MixupConfig {
        alpha,
        beta_cap: beta,
        ..Default::default()
    }
    .validate()
    .map_err(|e| e.to_string())?;
    let n = n.max(1);
    Ok((0..=n)
        .flat_map(|k| {
            let s = k as f64 / n as f64;
            [s, mix_ratio(s, alpha, beta)]
        })
        .collect())
}

/// `[loss, ∂L/∂p_0, ∂L/∂p_1, ...]` for scores `p` where `positive[k] != 0`
/// marks gold labels.
pub fn loss_and_grad(scores: &[f64], positive: &[u8]) -> Result<Vec<f64>, String> {
    if scores.len() != positive.len() {
        return Err(format!("{} scores but {} positive flags", scores.len(), positive.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err("scores must be finite numbers".into());
    }
    let split = DepthLabelSplit::new(scores.len(), (0..scores.len()).filter(|&k| positive[k] != 0)).map_err(|e| e.to_string())?;
    let mut out = vec![zmlce(scores, &split).map_err(|e| e.to_string())?];
    out.extend(zmlce_grad(scores, &split).map_err(|e| e.to_string())?);
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct Preview {
    /// labels per depth after closing over ancestors
    pub local_hierarchy: Vec<Vec<String>>,
    pub prompt: Vec<String>,
    pub local_hierarchy_sequence: Vec<String>,
}

/// Token views of the classification prompt and the local-hierarchy
/// sequence for one instance. Missing ancestors of `labels` are added.
pub fn preview(taxonomy_json: &str, labels: &str, text: &str, max_len: usize) -> Result<Preview, String> {
    let tax = Taxonomy::from_json(taxonomy_json).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = labels.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let lh = tax.local_hierarchy(&ids, true).map_err(|e| e.to_string())?;
    let tokens = tokenize(text);
    let split = DatasetSplit::new(
        SplitName::Train,
        vec![Instance {
            tokens: tokens.clone(),
            labels: lh.clone(),
        }],
    );
    let mut vocab = Vocabulary::build(&split, 1, tax.max_depth());
    vocab.extend_with_label_names(&tax);
    let words = |ids: &[usize]| ids.iter().map(|&i| vocab.token(i).to_string()).collect();
    let prompt = build_classification_sequence(&vocab, tax.max_depth(), &tokens, max_len).map_err(|e| e.to_string())?;
    let lh_seq = build_local_hierarchy_sequence(&vocab, &lh, &tax);
    Ok(Preview {
        local_hierarchy: lh.per_depth().iter().map(|d| d.iter().map(|&l| tax.node(l).id.clone()).collect()).collect(),
        prompt: words(&prompt.token_ids),
        local_hierarchy_sequence: words(&lh_seq.token_ids),
    })
}

#[wasm_bindgen]
pub fn mix_ratio_curve(alpha: f64, beta: f64, n: usize) -> Result<Vec<f64>, JsError> {
    ratio_curve(alpha, beta, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn zmlce_loss_and_grad(scores: Vec<f64>, positive: Vec<u8>) -> Result<Vec<f64>, JsError> {
    loss_and_grad(&scores, &positive).map_err(|e| JsError::new(&e))
}

/// JSON-encoded [`Preview`].
#[wasm_bindgen]
pub fn sequence_preview(taxonomy_json: &str, labels: &str, text: &str, max_len: usize) -> Result<String, JsError> {
    let p = preview(taxonomy_json, labels, text, max_len).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&p).map_err(|e| JsError::new(&e.to_string()))
}
