//! Per-depth scoring and the zero-bounded multi-label cross entropy (ZMLCE).
//!
//! For scores `p` and a positive/negative split of the labels of one depth:
//!
//! ```text
//! L(p) = log(1 + Σ_{v∈neg} e^{p_v}) + log(1 + Σ_{v∈pos} e^{−p_v})
//! ```
//!
//! Positive scores are pushed above 0 and negative scores below 0, so 0 is
//! the decision threshold at inference time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LocalHierarchy, Taxonomy};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    pub depth: usize,
    pub p: Vec<f64>,
}

/// Within-depth indices of the gold (`pos`) and non-gold (`neg`) labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthLabelSplit {
    pos: Vec<usize>,
    neg: Vec<usize>,
}

impl DepthLabelSplit {
    /// Split `0..size` into the given positives and everything else.
    pub fn new(size: usize, positives: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut is_pos = vec![false; size];
        for i in positives {
            if i >= size {
                return Err(Error::InvalidArgument(format!("positive index {i} out of range {size}")));
            }
            is_pos[i] = true;
        }
        let (pos, neg) = (0..size).partition(|&i| is_pos[i]);
        Ok(Self { pos, neg })
    }

    /// Split for depth `d` of an instance's local hierarchy.
    pub fn from_local_hierarchy(tax: &Taxonomy, lh: &LocalHierarchy, d: usize) -> Self {
        Self::new(tax.depth_set(d).len(), lh.at_depth(d).iter().map(|&l| tax.slot(l)))
            .expect("local hierarchy labels lie in their depth set")
    }

    pub fn pos(&self) -> &[usize] {
        &self.pos
    }

    pub fn neg(&self) -> &[usize] {
        &self.neg
    }

    pub fn size(&self) -> usize {
        self.pos.len() + self.neg.len()
    }
}

/// `p_v = w_v · h` for every row `w_v` of `verbalizer_d`.
pub fn score_depth(h: &[f64], verbalizer_d: &Matrix, depth: usize) -> Result<DepthScores> {
    if h.len() != verbalizer_d.cols() {
        return Err(Error::Shape(format!(
            "hidden of size {} against verbalizer width {}",
            h.len(),
            verbalizer_d.cols()
        )));
    }
    Ok(DepthScores {
        depth,
        p: verbalizer_d.matvec(h),
    })
}

/// `log(1 + Σ_i e^{x_i})`, evaluated as a max-shifted log-sum-exp over
/// `{0} ∪ x`.
pub fn log1p_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(0.0f64, f64::max);
    let s: f64 = (-m).exp() + xs.map(|x| (x - m).exp()).sum::<f64>();
    m + s.ln()
}

fn check_split(len: usize, split: &DepthLabelSplit) -> Result<()> {
    if split.size() != len {
        return Err(Error::Shape(format!("{} scores for a split over {} labels", len, split.size())));
    }
    Ok(())
}

pub fn zmlce(p: &[f64], split: &DepthLabelSplit) -> Result<f64> {
    check_split(p.len(), split)?;
    let neg = log1p_sum_exp(split.neg.iter().map(|&v| p[v]));
    let pos = log1p_sum_exp(split.pos.iter().map(|&v| -p[v]));
    Ok(neg + pos)
}

/// `∂L/∂p`: a softmax over `{0} ∪ neg` for negatives and minus a softmax
/// over `{0} ∪ −pos` for positives.
pub fn zmlce_grad(p: &[f64], split: &DepthLabelSplit) -> Result<Vec<f64>> {
    check_split(p.len(), split)?;
    let mut g = vec![0.0; p.len()];
    let neg_lse = log1p_sum_exp(split.neg.iter().map(|&v| p[v]));
    for &v in &split.neg {
        g[v] = (p[v] - neg_lse).exp();
    }
    let pos_lse = log1p_sum_exp(split.pos.iter().map(|&v| -p[v]));
    for &v in &split.pos {
        g[v] = -(-p[v] - pos_lse).exp();
    }
    Ok(g)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup ratio {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `λ·L(p̃; split_i) + (1−λ)·L(p̃; split_j)`
pub fn mixed_zmlce(lambda: f64, p_mixed: &[f64], split_i: &DepthLabelSplit, split_j: &DepthLabelSplit) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * zmlce(p_mixed, split_i)? + (1.0 - lambda) * zmlce(p_mixed, split_j)?)
}

/// Gradient of [`mixed_zmlce`] with respect to the mixed scores.
pub fn mixed_zmlce_grad(
    lambda: f64,
    p_mixed: &[f64],
    split_i: &DepthLabelSplit,
    split_j: &DepthLabelSplit,
) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let gi = zmlce_grad(p_mixed, split_i)?;
    let gj = zmlce_grad(p_mixed, split_j)?;
    Ok(gi
        .iter()
        .zip(&gj)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

/// Labels whose score is strictly positive, as taxonomy indices in
/// ascending order. `scores[d - 1]` holds the scores of depth `d`.
pub fn predict(tax: &Taxonomy, scores: &[DepthScores]) -> Vec<usize> {
    let mut out: Vec<usize> = scores
        .iter()
        .flat_map(|s| {
            tax.depth_set(s.depth)
                .iter()
                .zip(&s.p)
                .filter(|(_, &v)| v > 0.0)
                .map(|(&l, _)| l)
        })
        .collect();
    out.sort_unstable();
    out
}

/// Add every missing ancestor of a prediction.
pub fn close_prediction(tax: &Taxonomy, pred: &[usize]) -> Vec<usize> {
    let mut set: std::collections::BTreeSet<usize> = pred.iter().copied().collect();
    for &l in pred {
        set.extend(tax.root_path(l));
    }
    set.into_iter().collect()
}
