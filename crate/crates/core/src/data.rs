//! Labelled text datasets: synthetic Zipf-imbalanced generation, CSV ingest,
//! stratified capping and splitting, hashed bag-of-words features and the
//! Gini coefficient of class sizes.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Record, SparseVector};

pub const DEFAULT_HASH_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub zipf_exponent: f64,
    pub total_records: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token is drawn from the record's class vocabulary
    /// rather than the shared one.
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 20,
            zipf_exponent: 1.2,
            total_records: 4000,
            vocab_size: 2000,
            min_tokens: 8,
            max_tokens: 24,
            signal_strength: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.total_records < self.num_classes {
            return Err(Error::invalid(format!(
                "{} records cannot cover {} classes",
                self.total_records, self.num_classes
            )));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::invalid("zipf_exponent must be nonnegative and finite"));
        }
        if self.vocab_size / 2 < self.num_classes {
            return Err(Error::invalid("vocab_size must leave at least one class-specific token per class"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::invalid("token range must satisfy 1 <= min_tokens <= max_tokens"));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::invalid("signal_strength must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Class sizes proportional to `1/(c+1)^s`, each at least 1, summing to the total.
    pub fn class_sizes(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let m = self.num_classes;
        let weights: Vec<f64> = (0..m).map(|c| ((c + 1) as f64).powf(-self.zipf_exponent)).collect();
        let total_w: f64 = weights.iter().sum();
        let spare = self.total_records - m;
        let quotas: Vec<f64> = weights.iter().map(|w| spare as f64 * w / total_w).collect();
        let mut sizes: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let assigned: usize = sizes.iter().sum();
        for &c in order.iter().take(self.total_records - assigned) {
            sizes[c] += 1;
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Synthetic { spec: SyntheticSpec },
    Csv { path: PathBuf, sha256: String },
}

/// One raw document with its compact class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    /// Class name per compact label.
    pub class_names: Vec<String>,
    pub splits: Vec<Split>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(examples: Vec<Example>, class_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.label >= class_names.len()) {
            return Err(Error::invalid(format!(
                "example {} has label {} but only {} classes exist",
                e.id,
                e.label,
                class_names.len()
            )));
        }
        let splits = vec![Split::None; examples.len()];
        Ok(LabeledDataset {
            examples,
            class_names,
            splits,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Record count per compact label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn split_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for (e, s) in self.examples.iter().zip(&self.splits) {
            if *s == split {
                counts[e.label] += 1;
            }
        }
        counts
    }

    pub fn view(&self, split: Split) -> Vec<&Example> {
        self.examples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(e, _)| e)
            .collect()
    }

    /// Hashed-feature records for one split, in dataset order.
    pub fn records(&self, split: Split, dim: usize) -> Result<Vec<Record>> {
        self.view(split)
            .par_iter()
            .map(|e| {
                Ok(Record {
                    id: e.id,
                    features: hash_features(tokenize(&e.text), dim)?,
                    label: e.label,
                })
            })
            .collect()
    }

    /// SHA-256 over the examples, split tags and class names.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update(b"\n");
        }
        for (e, s) in self.examples.iter().zip(&self.splits) {
            h.update(format!("{}\t{}\t{}\t{:?}\n", e.id, e.text, e.label, s).as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn manifest(&self, split_seed: Option<u64>) -> Result<DatasetManifest> {
        let counts = self.class_counts();
        Ok(DatasetManifest {
            provenance: self.provenance.clone(),
            content_sha256: self.content_hash(),
            records: self.len(),
            class_counts: self.class_names.iter().cloned().zip(counts.iter().copied()).collect(),
            gini: gini(&counts)?,
            train_records: self.splits.iter().filter(|s| **s == Split::Train).count(),
            test_records: self.splits.iter().filter(|s| **s == Split::Test).count(),
            split_seed,
        })
    }

    fn retain_classes(self, keep: &[bool], chosen: Vec<usize>) -> LabeledDataset {
        let mut remap = vec![usize::MAX; keep.len()];
        let mut class_names = Vec::new();
        for (c, k) in keep.iter().enumerate() {
            if *k {
                remap[c] = class_names.len();
                class_names.push(self.class_names[c].clone());
            }
        }
        let mut examples = Vec::new();
        let mut splits = Vec::new();
        for i in chosen {
            let e = &self.examples[i];
            if keep[e.label] {
                examples.push(Example {
                    label: remap[e.label],
                    ..e.clone()
                });
                splits.push(self.splits[i]);
            }
        }
        LabeledDataset {
            examples,
            class_names,
            splits,
            provenance: self.provenance,
        }
    }
}

/// Replay information for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: Provenance,
    pub content_sha256: String,
    pub records: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub gini: f64,
    pub train_records: usize,
    pub test_records: usize,
    pub split_seed: Option<u64>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Generates a synthetic imbalanced text dataset.
///
/// The first half of the vocabulary is shared across classes; the second
/// half is cut into disjoint per-class blocks. Each token comes from the
/// record's class block with probability `signal_strength`.
pub fn generate(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let sizes = spec.class_sizes()?;
    let m = spec.num_classes;
    let shared = spec.vocab_size / 2;
    let block = (spec.vocab_size - shared) / m;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, n)| std::iter::repeat_n(c, *n)).collect();
    labels.shuffle(&mut rng);

    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let tokens: Vec<String> = (0..len)
                .map(|_| {
                    let word = if rng.random::<f64>() < spec.signal_strength {
                        shared + label * block + rng.random_range(0..block)
                    } else {
                        rng.random_range(0..shared)
                    };
                    format!("w{word}")
                })
                .collect();
            Example {
                id: i as u64,
                text: tokens.join(" "),
                label,
            }
        })
        .collect();
    let class_names = (0..m).map(|c| format!("c{c:03}")).collect();
    LabeledDataset::new(examples, class_names, Provenance::Synthetic { spec: spec.clone() })
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    id: u64,
    text: String,
    label: String,
}

/// Reads a UTF-8 `id,text,label` CSV with a header row. Class names are
/// sorted and mapped to compact labels in that order.
pub fn read_csv(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "text", "label"] {
        return Err(Error::Format(format!(
            "expected header `id,text,label`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let rows = reader.deserialize().collect::<std::result::Result<Vec<CsvRow>, _>>()?;
    let mut class_names: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let index: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let examples = rows
        .iter()
        .map(|r| Example {
            id: r.id,
            text: r.text.clone(),
            label: index[r.label.as_str()],
        })
        .collect();
    let sha256 = hex(&Sha256::digest(&bytes));
    LabeledDataset::new(
        examples,
        class_names.clone(),
        Provenance::Csv {
            path: path.to_path_buf(),
            sha256,
        },
    )
}

/// Writes the dataset as an `id,text,label` CSV using class names as labels.
pub fn write_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "text", "label"])?;
    for e in &dataset.examples {
        w.write_record([e.id.to_string(), e.text.clone(), dataset.class_names[e.label].clone()])?;
    }
    w.flush()?;
    Ok(())
}

fn indices_by_class(dataset: &LabeledDataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, e) in dataset.examples.iter().enumerate() {
        by_class[e.label].push(i);
    }
    by_class
}

/// Per class, keeps `min(round(f·n_c), cap, n_c)` records sampled without
/// replacement, then drops classes left with a single record. Labels are
/// compacted and dataset order is preserved.
pub fn stratified_cap_sample(dataset: &LabeledDataset, cap: usize, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if cap < 2 {
        return Err(Error::invalid("cap must be at least 2"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("sampling fraction must lie in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    let mut keep = vec![false; dataset.num_classes()];
    for (c, mut members) in indices_by_class(dataset).into_iter().enumerate() {
        let n = members.len();
        let take = ((fraction * n as f64).round() as usize).min(cap).min(n);
        members.shuffle(&mut rng);
        members.truncate(take);
        keep[c] = take >= 2;
        chosen.extend(members);
    }
    chosen.sort_unstable();
    let out = dataset.clone().retain_classes(&keep, chosen);
    if out.is_empty() {
        log::warn!("stratified sampling removed every class: all sampled classes were singletons");
    }
    Ok(out)
}

/// Tags each record `Train` or `Test`; per class, `round_half_up(f·n_c)`
/// records (clamped to `[1, n_c − 1]`) go to train.
pub fn stratified_split(dataset: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train fraction must lie in (0, 1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for (c, mut members) in indices_by_class(dataset).into_iter().enumerate() {
        let n = members.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "class `{}` has {n} record(s); splitting needs at least 2",
                dataset.class_names[c]
            )));
        }
        let train = ((train_fraction * n as f64 + 0.5).floor() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        for (j, i) in members.into_iter().enumerate() {
            out.splits[i] = if j < train { Split::Train } else { Split::Test };
        }
    }
    Ok(out)
}

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Signed hashed bag-of-words, L2-normalised.
///
/// A token's bucket is the low bits of its 64-bit FNV-1a hash and its sign
/// is the top bit.
pub fn hash_features<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>, dim: usize) -> Result<SparseVector> {
    if !dim.is_power_of_two() {
        return Err(Error::invalid(format!("hash dimension {dim} is not a power of two")));
    }
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for t in tokens {
        let h = fnv1a64(t.as_ref().as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        *acc.entry((h as usize) & (dim - 1)).or_default() += sign;
    }
    acc.retain(|_, v| *v != 0.0);
    let norm = acc.values().map(|v| v * v).sum::<f64>().sqrt();
    let (indices, values) = acc.into_iter().map(|(i, v)| (i, v / norm)).unzip();
    SparseVector::new(indices, values)
}

/// `Σ_i Σ_j |n_i − n_j| / (2 m² μ)` over the class counts.
pub fn gini(counts: &[usize]) -> Result<f64> {
    let m = counts.len() as f64;
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("gini of all-zero counts is undefined"));
    }
    let mu = total as f64 / m;
    let mut diff = 0u128;
    for a in counts {
        for b in counts {
            diff += a.abs_diff(*b) as u128;
        }
    }
    Ok(diff as f64 / (2.0 * m * m * mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset_with_counts(counts: &[usize]) -> LabeledDataset {
        let mut examples = Vec::new();
        for (c, n) in counts.iter().enumerate() {
            for _ in 0..*n {
                examples.push(Example {
                    id: examples.len() as u64,
                    text: format!("tok{c}"),
                    label: c,
                });
            }
        }
        let names = (0..counts.len()).map(|c| format!("k{c}")).collect();
        let spec = SyntheticSpec::default();
        LabeledDataset::new(examples, names, Provenance::Synthetic { spec }).unwrap()
    }

    #[test]
    fn gini_hand_values() {
        assert_eq!(gini(&[3, 1]).unwrap(), 0.25);
        assert_eq!(gini(&[7, 7, 7]).unwrap(), 0.0);
        assert!(gini(&[0, 0]).is_err());
    }

    #[test]
    fn cap_sampling_rule() {
        let ds = dataset_with_counts(&[500, 150, 1]);
        let out = stratified_cap_sample(&ds, 200, 1.0, 0).unwrap();
        assert_eq!(out.class_counts(), vec![200, 150]);
        assert_eq!(out.class_names, vec!["k0", "k1"]);
    }

    #[test]
    fn cap_sampling_identity_and_degenerate_cases() {
        let ds = dataset_with_counts(&[5, 3, 1, 2]);
        let out = stratified_cap_sample(&ds, 10, 1.0, 0).unwrap();
        assert_eq!(out.class_counts(), vec![5, 3, 2]);
        let ids: Vec<u64> = out.examples.iter().map(|e| e.id).collect();
        let want: Vec<u64> = ds.examples.iter().filter(|e| e.label != 2).map(|e| e.id).collect();
        assert_eq!(ids, want);

        let singles = dataset_with_counts(&[1, 1, 1]);
        assert!(stratified_cap_sample(&singles, 5, 1.0, 0).unwrap().is_empty());
    }

    #[test]
    fn split_rounding() {
        let ds = dataset_with_counts(&[2, 199, 3]);
        let out = stratified_split(&ds, 0.5, 1).unwrap();
        assert_eq!(out.split_counts(Split::Train), vec![1, 100, 2]);
        assert_eq!(out.split_counts(Split::Test), vec![1, 99, 1]);
        assert!(stratified_split(&dataset_with_counts(&[4, 1]), 0.5, 1).is_err());
    }

    #[test]
    fn hashing_hand_checks() {
        let empty = hash_features(Vec::<&str>::new(), 16).unwrap();
        assert_eq!(empty.nnz(), 0);
        let a = hash_features(["b", "a", "c"], 1024).unwrap();
        let b = hash_features(["c", "b", "a"], 1024).unwrap();
        assert_eq!(a, b);
        assert!(hash_features(["a"], 1000).is_err());

        // Doubled token against a single one, before normalisation: (2, ±1).
        let v = hash_features(["x", "x", "y"], 1 << 20).unwrap();
        let vals: Vec<f64> = v.values().iter().map(|x| x.abs()).collect();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[1] / sorted[0] - 2.0).abs() < 1e-15);
        assert!((v.norm_sq() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenizer_lowercases() {
        assert_eq!(tokenize("  Fell  from\tLADDER\n"), vec!["fell", "from", "ladder"]);
    }

    #[test]
    fn flat_zipf_is_near_uniform() {
        let spec = SyntheticSpec {
            num_classes: 10,
            zipf_exponent: 0.0,
            total_records: 10_000,
            ..SyntheticSpec::default()
        };
        let sizes = spec.class_sizes().unwrap();
        let (max, min) = (sizes.iter().max().unwrap(), sizes.iter().min().unwrap());
        assert!(*max as f64 / *min as f64 <= 1.2);
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec {
            total_records: 300,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a.content_hash(), generate(&spec).unwrap().content_hash());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(a.content_hash(), generate(&other).unwrap().content_hash());
        assert_eq!(a.class_counts(), spec.class_sizes().unwrap());
        assert!(generate(&SyntheticSpec { total_records: 5, ..spec }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&SyntheticSpec {
            total_records: 60,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.examples, ds.examples);
        assert!(matches!(back.provenance, Provenance::Csv { ref sha256, .. } if sha256.len() == 64));

        std::fs::write(&path, "id,label,text\n1,a,b\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn gini_is_scale_invariant(counts in proptest::collection::vec(1usize..500, 1..30), k in 1usize..20) {
            let scaled: Vec<usize> = counts.iter().map(|c| c * k).collect();
            let (a, b) = (gini(&counts).unwrap(), gini(&scaled).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&a));
        }

        #[test]
        fn cap_sampling_shrinks_and_removes_singletons(
            counts in proptest::collection::vec(1usize..40, 1..12),
            cap in 2usize..30,
            fraction in 0.05f64..=1.0,
        ) {
            let ds = dataset_with_counts(&counts);
            let out = stratified_cap_sample(&ds, cap, fraction, 3).unwrap();
            let by_name: HashMap<&str, usize> = out
                .class_names
                .iter()
                .map(String::as_str)
                .zip(out.class_counts())
                .collect();
            for (c, n) in counts.iter().enumerate() {
                if let Some(got) = by_name.get(format!("k{c}").as_str()) {
                    prop_assert!(*got <= *n && *got >= 2);
                }
            }
        }

        #[test]
        fn split_is_a_balanced_partition(counts in proptest::collection::vec(2usize..60, 1..10), seed in any::<u64>()) {
            let ds = dataset_with_counts(&counts);
            let out = stratified_split(&ds, 0.5, seed).unwrap();
            prop_assert!(out.splits.iter().all(|s| *s != Split::None));
            let train = out.split_counts(Split::Train);
            let test = out.split_counts(Split::Test);
            for c in 0..counts.len() {
                prop_assert_eq!(train[c] + test[c], counts[c]);
                prop_assert!((train[c] as f64 - 0.5 * counts[c] as f64).abs() <= 1.0);
            }
        }
    }
}
