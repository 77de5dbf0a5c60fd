//! Micro/Macro-F1, per-depth and per-frequency breakdowns, label-similarity
//! ranking and multi-seed statistics.
//!
//! Macro-F1 averages over every label of the universe, including labels that
//! are never gold and never predicted (their F1 counts as 0).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Vocabulary;
use crate::encoder::SequenceEncoder;
use crate::error::{Error, Result};
use crate::mixup::similarity;
use crate::model::{Example, Model};
use crate::objective::close_prediction;
use crate::prompt::build_local_hierarchy_sequence;
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn check_aligned(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold label sets",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Per-label confusion counts over `n_labels` labels. Label sets are sorted
/// and duplicate-free.
pub fn per_label_confusion(pred: &[Vec<usize>], gold: &[Vec<usize>], n_labels: usize) -> Result<Vec<Confusion>> {
    check_aligned(pred, gold)?;
    let mut out = vec![Confusion::default(); n_labels];
    for (p, g) in pred.iter().zip(gold) {
        let (mut a, mut b) = (0, 0);
        while a < p.len() || b < g.len() {
            match (p.get(a), g.get(b)) {
                (Some(&x), Some(&y)) if x == y => {
                    out[x].tp += 1;
                    a += 1;
                    b += 1;
                }
                (Some(&x), Some(&y)) if x < y => {
                    out[x].fp += 1;
                    a += 1;
                }
                (Some(_), Some(&y)) => {
                    out[y].fn_ += 1;
                    b += 1;
                }
                (Some(&x), None) => {
                    out[x].fp += 1;
                    a += 1;
                }
                (None, Some(&y)) => {
                    out[y].fn_ += 1;
                    b += 1;
                }
                (None, None) => unreachable!(),
            }
        }
    }
    Ok(out)
}

fn universe_size(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> usize {
    pred.iter().chain(gold).flatten().max().map_or(0, |m| m + 1)
}

/// `2·TP / (2·TP + FP + FN)` over all pooled (instance, label) decisions.
pub fn micro_f1(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    let counts = per_label_confusion(pred, gold, universe_size(pred, gold))?;
    Ok(pooled(&counts, None).f1())
}

/// Unweighted mean of per-label F1 over `universe`.
pub fn macro_f1(pred: &[Vec<usize>], gold: &[Vec<usize>], universe: &[usize]) -> Result<f64> {
    let n = universe_size(pred, gold).max(universe.iter().max().map_or(0, |m| m + 1));
    let counts = per_label_confusion(pred, gold, n)?;
    Ok(macro_over(&counts, universe))
}

fn pooled(counts: &[Confusion], group: Option<&[usize]>) -> Confusion {
    let mut total = Confusion::default();
    match group {
        None => counts.iter().for_each(|c| total.add(c)),
        Some(labels) => labels.iter().for_each(|&l| total.add(&counts[l])),
    }
    total
}

fn macro_over(counts: &[Confusion], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().map(|&l| counts[l].f1()).sum::<f64>() / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// labels in the group
    pub labels: usize,
    /// gold occurrences of the group's labels
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_depth: Vec<GroupMetrics>,
    pub per_bucket: Vec<GroupMetrics>,
    pub n_instances: usize,
    /// Same metrics after adding predicted labels' ancestors; only present
    /// when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed: Option<Box<MetricsReport>>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "n_instances,micro_f1,macro_f1";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.n_instances, self.micro_f1, self.macro_f1)
    }
}

fn group_metrics(counts: &[Confusion], labels: &[usize]) -> GroupMetrics {
    let total = pooled(counts, Some(labels));
    GroupMetrics {
        micro_f1: total.f1(),
        macro_f1: macro_over(counts, labels),
        labels: labels.len(),
        support: total.tp + total.fn_,
    }
}

/// Metrics restricted to each depth of `tax`.
pub fn breakdown_by_depth(pred: &[Vec<usize>], gold: &[Vec<usize>], tax: &Taxonomy) -> Result<Vec<GroupMetrics>> {
    let counts = per_label_confusion(pred, gold, tax.len())?;
    Ok(tax.depth_sets().iter().map(|set| group_metrics(&counts, set)).collect())
}

/// Metrics restricted to each frequency bucket; `buckets[label]` is the
/// label's bucket index.
pub fn breakdown_by_bucket(pred: &[Vec<usize>], gold: &[Vec<usize>], buckets: &[usize]) -> Result<Vec<GroupMetrics>> {
    let counts = per_label_confusion(pred, gold, buckets.len())?;
    let n_buckets = buckets.iter().max().map_or(0, |b| b + 1);
    let mut groups = vec![Vec::new(); n_buckets];
    for (label, &b) in buckets.iter().enumerate() {
        groups[b].push(label);
    }
    Ok(groups.iter().map(|g| group_metrics(&counts, g)).collect())
}

pub fn report(pred: &[Vec<usize>], gold: &[Vec<usize>], tax: &Taxonomy, buckets: &[usize]) -> Result<MetricsReport> {
    let counts = per_label_confusion(pred, gold, tax.len())?;
    let all: Vec<usize> = (0..tax.len()).collect();
    let whole = group_metrics(&counts, &all);
    Ok(MetricsReport {
        micro_f1: whole.micro_f1,
        macro_f1: whole.macro_f1,
        per_depth: breakdown_by_depth(pred, gold, tax)?,
        per_bucket: breakdown_by_bucket(pred, gold, buckets)?,
        n_instances: pred.len(),
        closed: None,
    })
}

pub fn predict_all(model: &Model, tax: &Taxonomy, examples: &[Example]) -> Result<Vec<Vec<usize>>> {
    examples.iter().map(|ex| model.predict(tax, &ex.sequence)).collect()
}

/// Evaluate `model` on prepared examples. With `closure`, a second report on
/// ancestor-closed predictions is attached.
pub fn evaluate(model: &Model, tax: &Taxonomy, examples: &[Example], buckets: &[usize], closure: bool) -> Result<MetricsReport> {
    let pred = predict_all(model, tax, examples)?;
    let gold: Vec<Vec<usize>> = examples.iter().map(|e| e.gold.clone()).collect();
    let mut rep = report(&pred, &gold, tax, buckets)?;
    if closure {
        let closed: Vec<Vec<usize>> = pred.iter().map(|p| close_prediction(tax, p)).collect();
        rep.closed = Some(Box::new(report(&closed, &gold, tax, buckets)?));
    }
    Ok(rep)
}

/// `[CLS]` hidden of the single-path local-hierarchy sequence of each label.
pub fn label_representations(model: &Model, tax: &Taxonomy, vocab: &Vocabulary) -> Result<Vec<Vec<f64>>> {
    (0..tax.len())
        .map(|label| {
            let lh = tax.local_hierarchy_from_indices(tax.root_path(label).into_iter().collect(), false)?;
            let seq = build_local_hierarchy_sequence(vocab, &lh, tax);
            Ok(model.encoder.detached_forward(&seq)?.h_cls().to_vec())
        })
        .collect()
}

/// The `k` labels most similar to `target`, most similar first; ties go to
/// the earlier label in taxonomy order.
pub fn rank_similar_labels(model: &Model, tax: &Taxonomy, vocab: &Vocabulary, target: &str, k: usize) -> Result<Vec<(usize, f64)>> {
    let target = tax.lookup(target)?;
    if k > tax.len() - 1 {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {} other labels", tax.len() - 1)));
    }
    let reps = label_representations(model, tax, vocab)?;
    let mut scored = (0..tax.len())
        .filter(|&l| l != target)
        .map(|l| Ok((l, similarity(&reps[target], &reps[l])?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided Welch t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("Welch's t-test needs at least two values per sample".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_std(a).powi(2) / na, sample_std(b).powi(2) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        let p_value = if diff == 0.0 { 1.0 } else { 0.0 };
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(WelchResult { t, df: na + nb - 2.0, p_value });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let p_value = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchResult { t, df, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tax() -> Taxonomy {
        Taxonomy::from_json(
            r#"[{"id":"a","name":"a","parent":null},{"id":"b","name":"b","parent":null},
                {"id":"a1","name":"a one","parent":"a"},{"id":"b1","name":"b one","parent":"b"}]"#,
        )
        .unwrap()
    }

    #[test]
    fn f1_examples() {
        let gold = vec![vec![0, 2], vec![1, 3]];
        assert_eq!(micro_f1(&gold, &gold).unwrap(), 1.0);
        assert_eq!(macro_f1(&gold, &gold, &[0, 1, 2, 3]).unwrap(), 1.0);
        let empty = vec![vec![], vec![]];
        assert_eq!(micro_f1(&empty, &gold).unwrap(), 0.0);
        assert!(micro_f1(&empty[..1], &gold).is_err());
        // label 0 perfect, label 1 never gold nor predicted
        assert_eq!(macro_f1(&[vec![0]], &[vec![0]], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_label_universe_micro_equals_macro() {
        let gold = vec![vec![0], vec![], vec![0]];
        let pred = vec![vec![0], vec![0], vec![]];
        assert_eq!(micro_f1(&pred, &gold).unwrap(), macro_f1(&pred, &gold, &[0]).unwrap());
    }

    #[test]
    fn breakdowns() {
        let t = tax();
        let gold = vec![vec![0, 2], vec![1, 3]];
        let pred = vec![vec![0], vec![1, 3]];
        let rep = report(&pred, &gold, &t, &[0, 0, 0, 0]).unwrap();
        assert_eq!(rep.per_depth.len(), 2);
        assert_eq!(rep.per_bucket[0].macro_f1, rep.macro_f1);
        assert_eq!(rep.per_depth[0].micro_f1, 1.0);
        assert_relative_eq!(rep.per_depth[1].macro_f1, 0.5);
        assert_eq!(rep.per_depth[1].support, 2);
    }

    #[test]
    fn welch_reference_values() {
        // reference: scipy.stats.ttest_ind(..., equal_var=False)
        let r = welch_t_test(&[27.5, 21.0, 19.0, 23.6, 17.0], &[27.1, 22.0, 20.8, 23.4, 23.4]).unwrap();
        assert_relative_eq!(r.t, -0.813168331778168, epsilon = 1e-12);
        assert_relative_eq!(r.p_value, 0.4453015082092021, epsilon = 1e-9);
        let same = welch_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.p_value, 1.0);
        let flat = welch_t_test(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(flat.p_value, 1.0);
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
        let jitter = |base: f64| -> Vec<f64> { (0..4).map(|i| base + 1e-3 * i as f64).collect() };
        assert!(welch_t_test(&jitter(0.0), &jitter(1.0)).unwrap().p_value < 1e-3);
    }

    fn config() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let set = || prop::collection::btree_set(0usize..6, 0..4).prop_map(|s| s.into_iter().collect::<Vec<_>>());
        (1usize..12).prop_flat_map(move |n| (prop::collection::vec(set(), n), prop::collection::vec(set(), n)))
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_reordering((pred, gold) in config(), rot in 0usize..12) {
            let k = rot % pred.len();
            let (mut p2, mut g2) = (pred.clone(), gold.clone());
            p2.rotate_left(k);
            g2.rotate_left(k);
            let universe: Vec<usize> = (0..6).collect();
            prop_assert_eq!(micro_f1(&pred, &gold).unwrap(), micro_f1(&p2, &g2).unwrap());
            prop_assert_eq!(macro_f1(&pred, &gold, &universe).unwrap(), macro_f1(&p2, &g2, &universe).unwrap());
        }

        #[test]
        fn adding_a_hit_never_hurts_micro((pred, gold) in config(), at in 0usize..12) {
            let i = at % pred.len();
            if let Some(&missing) = gold[i].iter().find(|l| !pred[i].contains(l)) {
                let mut better = pred.clone();
                better[i].push(missing);
                better[i].sort_unstable();
                prop_assert!(micro_f1(&better, &gold).unwrap() >= micro_f1(&pred, &gold).unwrap());
            }
        }
    }
}
