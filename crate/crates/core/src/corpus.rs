//! Corpus ingestion, vocabulary, the synthetic generator and downsampling.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{LocalHierarchy, Taxonomy, TaxonomyRecord};

/// Lowercase word-level tokenizer. Runs of alphanumeric characters form
/// words; every other non-whitespace character is a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub labels: LocalHierarchy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    instances: Vec<Instance>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, instances: Vec<Instance>) -> Self {
        Self { name, instances }
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Serialize as JSONL, one `{"text", "labels"}` object per line. Labels
    /// are written closed, in taxonomy order.
    pub fn to_jsonl(&self, tax: &Taxonomy) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            let line = CorpusLine {
                text: inst.tokens.join(" "),
                labels: inst.labels.ids(tax).into_iter().map(String::from).collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("corpus line serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    text: String,
    labels: Vec<String>,
}

/// Parse a JSONL corpus against `tax`, closing label sets under their
/// ancestors when `auto_close` is set.
pub fn load_corpus(source: &str, tax: &Taxonomy, name: SplitName, auto_close: bool) -> Result<DatasetSplit> {
    let mut instances = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(raw).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.labels.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                message: "empty label list".into(),
            });
        }
        let tokens = tokenize(&parsed.text);
        if tokens.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                message: "text has no tokens".into(),
            });
        }
        let labels = tax.local_hierarchy(&parsed.labels, auto_close)?;
        instances.push(Instance { tokens, labels });
    }
    Ok(DatasetSplit::new(name, instances))
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
const FIXED_SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token ↔ id map. Specials occupy the lowest ids: the five fixed tokens,
/// then one depth token per hierarchy level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    depth: usize,
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    depth: usize,
    tokens: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let token_to_id = r.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            depth: r.depth,
            tokens: r.tokens,
            token_to_id,
        }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            depth: v.depth,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    /// Tokens seen at least `min_freq` times in `train` receive ids, most
    /// frequent first (ties broken lexicographically).
    pub fn build(train: &DatasetSplit, min_freq: usize, depth: usize) -> Self {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for inst in train.instances() {
            for t in &inst.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut vocab = Self::specials_only(depth);
        for (t, _) in kept {
            vocab.push(t);
        }
        vocab
    }

    pub fn specials_only(depth: usize) -> Self {
        let mut vocab = Self {
            depth,
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for s in FIXED_SPECIALS {
            vocab.push(s);
        }
        for d in 1..=depth {
            vocab.push(&format!("[Dth{d}]"));
        }
        vocab
    }

    /// Add every label-name word not already present, so local-hierarchy
    /// sequences never collapse to `[UNK]`.
    pub fn extend_with_label_names(&mut self, tax: &Taxonomy) {
        for node in tax.nodes() {
            for word in tokenize(&node.name) {
                if !self.token_to_id.contains_key(&word) {
                    self.push(&word);
                }
            }
        }
    }

    fn push(&mut self, token: &str) {
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_specials(&self) -> usize {
        FIXED_SPECIALS.len() + self.depth
    }

    /// Id of the depth token `[Dth^d]`, `d` 1-based.
    pub fn depth_token(&self, d: usize) -> usize {
        assert!(d >= 1 && d <= self.depth, "depth {d} outside 1..={}", self.depth);
        FIXED_SPECIALS.len() + d - 1
    }

    /// Inverse of [`Self::depth_token`].
    pub fn depth_of_token(&self, id: usize) -> Option<usize> {
        let first = FIXED_SPECIALS.len();
        (first..first + self.depth).contains(&id).then(|| id - first + 1)
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub depth: usize,
    pub branching: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub noise_rate: f64,
    pub multi_path_rate: f64,
    pub signature_tokens: usize,
    pub tokens_per_instance: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 3,
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            noise_rate: 0.3,
            multi_path_rate: 0.15,
            signature_tokens: 5,
            tokens_per_instance: 20,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.depth < 1 {
            return bad("synthetic depth must be >= 1");
        }
        if self.branching < 2 {
            return bad("synthetic branching must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.noise_rate) || !(0.0..=1.0).contains(&self.multi_path_rate) {
            return bad("synthetic rates must lie in [0, 1]");
        }
        if self.signature_tokens == 0 || self.tokens_per_instance == 0 {
            return bad("signature_tokens and tokens_per_instance must be positive");
        }
        Ok(())
    }
}

pub const NOISE_TOKEN: &str = "noise";

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub taxonomy: Taxonomy,
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
}

/// Complete `branching`-ary taxonomy of the given depth, in breadth-first file order.
pub fn complete_taxonomy(depth: usize, branching: usize) -> Result<Taxonomy> {
    let mut records = Vec::new();
    let mut frontier: Vec<Option<String>> = vec![None];
    for _ in 0..depth {
        let mut next = Vec::new();
        for parent in &frontier {
            for k in 0..branching {
                let id = match parent {
                    None => format!("n{k}"),
                    Some(p) => format!("{p}-{k}"),
                };
                let name = format!("topic{}", id.trim_start_matches('n').replace('-', "x"));
                records.push(TaxonomyRecord {
                    id: id.clone(),
                    name,
                    parent: parent.clone(),
                });
                next.push(Some(id));
            }
        }
        frontier = next;
    }
    Taxonomy::from_records(records)
}

/// Generate a taxonomy and train/dev/test splits in which every leaf owns a
/// block of signature words and each text is drawn from the signatures of
/// its sampled leaves, with some words replaced by a shared noise token.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let taxonomy = complete_taxonomy(spec.depth, spec.branching)?;
    let leaves: Vec<usize> = (0..taxonomy.len()).filter(|&l| taxonomy.is_leaf(l)).collect();
    let signatures: Vec<Vec<String>> = (0..leaves.len())
        .map(|li| (0..spec.signature_tokens).map(|k| format!("s{li}t{k}")).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let make = |name: SplitName, n: usize, rng: &mut ChaCha8Rng| -> Result<DatasetSplit> {
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let first = rng.gen_range(0..leaves.len());
            let mut chosen = vec![first];
            if leaves.len() > 1 && rng.gen_bool(spec.multi_path_rate) {
                let mut second = rng.gen_range(0..leaves.len() - 1);
                if second >= first {
                    second += 1;
                }
                chosen.push(second);
            }
            let pool: Vec<&String> = chosen.iter().flat_map(|&li| &signatures[li]).collect();
            let tokens = (0..spec.tokens_per_instance)
                .map(|_| {
                    let word = pool[rng.gen_range(0..pool.len())];
                    if rng.gen_bool(spec.noise_rate) {
                        NOISE_TOKEN.to_string()
                    } else {
                        word.clone()
                    }
                })
                .collect();
            let gold: BTreeSet<usize> = chosen.iter().flat_map(|&li| taxonomy.root_path(leaves[li])).collect();
            let labels = taxonomy.local_hierarchy_from_indices(gold, false)?;
            instances.push(Instance { tokens, labels });
        }
        Ok(DatasetSplit::new(name, instances))
    };
    let train = make(SplitName::Train, spec.n_train, &mut rng)?;
    let dev = make(SplitName::Dev, spec.n_dev, &mut rng)?;
    let test = make(SplitName::Test, spec.n_test, &mut rng)?;
    Ok(SyntheticCorpus {
        taxonomy,
        train,
        dev,
        test,
    })
}

/// Uniform sample of ⌈ratio·N⌉ instances without replacement; original order kept.
pub fn downsample(split: &DatasetSplit, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("downsample ratio {ratio} outside (0, 1]")));
    }
    let n = split.len();
    let k = ((ratio * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(DatasetSplit::new(
        split.name,
        picked.into_iter().map(|i| split.instances[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_tax() -> Taxonomy {
        Taxonomy::from_json(
            r#"[{"id":"cs","name":"CS","parent":null},{"id":"ml","name":"Machine Learning","parent":"cs"}]"#,
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Deep nets, for Vision."), ["deep", "nets", ",", "for", "vision", "."]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
    }

    #[test]
    fn load_corpus_parses_and_closes() {
        let tax = tiny_tax();
        let split = load_corpus(r#"{"text":"Deep nets for vision","labels":["ml"]}"#, &tax, SplitName::Train, true).unwrap();
        assert_eq!(split.len(), 1);
        let inst = &split.instances()[0];
        assert_eq!(inst.tokens.len(), 4);
        assert_eq!(inst.labels.ids(&tax), ["cs", "ml"]);
    }

    #[test]
    fn load_corpus_errors_carry_line_numbers() {
        let tax = tiny_tax();
        let src = "{\"text\":\"a\",\"labels\":[\"cs\"]}\n{\"text\":\"a\",\"labels\":[]}\n";
        match load_corpus(src, &tax, SplitName::Train, true) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            load_corpus("not json", &tax, SplitName::Train, true),
            Err(Error::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            load_corpus(r#"{"text":"a","labels":["zz"]}"#, &tax, SplitName::Train, true),
            Err(Error::UnknownLabel(_))
        ));
    }

    fn split_of(texts: &[&str]) -> DatasetSplit {
        let tax = tiny_tax();
        let lh = tax.local_hierarchy(&["cs"], false).unwrap();
        DatasetSplit::new(
            SplitName::Train,
            texts
                .iter()
                .map(|t| Instance {
                    tokens: tokenize(t),
                    labels: lh.clone(),
                })
                .collect(),
        )
    }

    #[test]
    fn vocabulary_min_freq() {
        let split = split_of(&["a b", "a"]);
        let v1 = Vocabulary::build(&split, 1, 2);
        assert!(v1.get("a").is_some() && v1.get("b").is_some());
        let v2 = Vocabulary::build(&split, 2, 2);
        assert_eq!(v2.id("b"), UNK);
        assert!(v2.id("a") >= v2.num_specials());
        assert_eq!(v2.num_specials(), 7);
        assert_eq!(v2.depth_of_token(v2.depth_token(2)), Some(2));
        assert_eq!(v2.depth_of_token(MASK), None);
    }

    #[test]
    fn vocabulary_is_stable_across_builds() {
        let split = split_of(&["x y z y", "z z q", "y"]);
        assert_eq!(Vocabulary::build(&split, 1, 3), Vocabulary::build(&split, 1, 3));
    }

    #[test]
    fn synthetic_sizes() {
        let spec = SyntheticSpec {
            n_train: 50,
            n_dev: 10,
            n_test: 10,
            ..Default::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.taxonomy.len(), 3 + 9 + 27);
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (50, 10, 10));
    }

    #[test]
    fn synthetic_without_noise_uses_only_path_signatures() {
        let spec = SyntheticSpec {
            noise_rate: 0.0,
            multi_path_rate: 0.5,
            n_train: 200,
            n_dev: 0,
            n_test: 0,
            ..Default::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let leaves: Vec<usize> = (0..c.taxonomy.len()).filter(|&l| c.taxonomy.is_leaf(l)).collect();
        for inst in c.train.instances() {
            let allowed: Vec<String> = inst
                .labels
                .labels()
                .iter()
                .filter_map(|l| leaves.iter().position(|x| x == l))
                .flat_map(|li| (0..spec.signature_tokens).map(move |k| format!("s{li}t{k}")))
                .collect();
            assert!(inst.tokens.iter().all(|t| allowed.contains(t)));
        }
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        for spec in [
            SyntheticSpec { depth: 0, ..Default::default() },
            SyntheticSpec { branching: 1, ..Default::default() },
            SyntheticSpec { noise_rate: 1.5, ..Default::default() },
        ] {
            assert!(generate_synthetic(&spec).is_err());
        }
    }

    #[test]
    fn downsample_sizes_and_identity() {
        let spec = SyntheticSpec {
            n_train: 100,
            n_dev: 0,
            n_test: 0,
            ..Default::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(downsample(&c.train, 1.0, 3).unwrap(), c.train);
        assert_eq!(downsample(&c.train, 0.5, 3).unwrap().len(), 50);
        assert_eq!(downsample(&c.train, 0.101, 3).unwrap().len(), 11);
        assert_eq!(downsample(&c.train, 0.25, 9).unwrap(), downsample(&c.train, 0.25, 9).unwrap());
        assert!(downsample(&c.train, 0.0, 1).is_err());
        assert!(downsample(&c.train, 1.2, 1).is_err());
    }
}
