//! Bags of instance features: synthetic generation, open-set splits and the
//! on-disk feature format.
//!
//! # Feature file
//!
//! ```text
//! offset  size   field
//! 0       8      magic  b"OVADFEAT"
//! 8       4      version (u32 LE) = 1
//! 12      4      N rows (u32 LE)
//! 16      4      D cols (u32 LE)
//! 20      8·N·D  values, f64 LE, row-major
//! ```
//!
//! Instance labels use the same layout with `D = 1` and values 0.0 or 1.0.
//! A manifest is a JSON array of [`ManifestEntry`]; paths are relative to
//! the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"OVADFEAT";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// One video: an ordered set of instance features with a bag label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub instances: Array2<f64>,
    /// 1 when the bag contains at least one anomalous instance.
    pub label: u8,
    /// Ground truth per instance; evaluation only.
    pub instance_labels: Option<Vec<u8>>,
    pub anomaly_class: Option<String>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.instances.ncols()
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    /// Checks the MIL labelling invariants.
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Contract(format!("bag {}: label {} is not 0/1", self.id, self.label)));
        }
        if let Some(labels) = &self.instance_labels {
            if labels.len() != self.len() {
                return Err(Error::Contract(format!(
                    "bag {}: {} instance labels for {} instances",
                    self.id,
                    labels.len(),
                    self.len()
                )));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(Error::Contract(format!("bag {}: instance label not 0/1", self.id)));
            }
            let any_pos = labels.contains(&1);
            if self.is_positive() && !any_pos {
                return Err(Error::Contract(format!(
                    "positive bag {} has no positive instance",
                    self.id
                )));
            }
            if !self.is_positive() && any_pos {
                return Err(Error::Contract(format!(
                    "negative bag {} has a positive instance",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic bag generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_bags: usize,
    /// Fraction of bags that are positive.
    pub positive_fraction: f64,
    pub bag_size: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Distance of each anomaly class mean from the origin.
    pub class_shift: f64,
    /// Weight of the direction shared by all classes, relative to each
    /// class's own direction, before scaling to `class_shift`.
    pub common_weight: f64,
    /// Per-coordinate standard deviation of anomaly clusters.
    pub anomaly_std: f64,
    /// Lag-one autocorrelation of the normal process.
    pub normal_ar: f64,
    /// Stationary standard deviation of the normal process.
    pub normal_std: f64,
    /// Anomaly segment length range as fractions of the bag size.
    pub segment_min: f64,
    pub segment_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_bags: 100,
            positive_fraction: 0.5,
            bag_size: 32,
            dim: 8,
            n_classes: 4,
            class_shift: 4.0,
            common_weight: 1.0,
            anomaly_std: 0.5,
            normal_ar: 0.8,
            normal_std: 1.0,
            segment_min: 0.1,
            segment_max: 0.4,
        }
    }
}

impl SynthConfig {
    /// The 200-bag open-set benchmark task.
    pub fn open_set_task(seed: u64) -> Self {
        Self {
            seed,
            n_bags: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if self.dim == 0 || self.bag_size == 0 || self.n_bags == 0 {
            return Err(Error::Config("dim, bag_size and n_bags must be positive".into()));
        }
        if self.n_classes > self.max_classes() {
            return Err(Error::Config(format!(
                "at most {} anomaly classes fit in {} dims",
                self.max_classes(),
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config("positive_fraction must be in [0, 1]".into()));
        }
        if !(self.segment_min > 0.0 && self.segment_min <= self.segment_max && self.segment_max <= 1.0) {
            return Err(Error::Config(
                "segment fractions must satisfy 0 < min <= max <= 1".into(),
            ));
        }
        if !(self.common_weight >= 0.0 && self.common_weight.is_finite()) {
            return Err(Error::Config("common_weight must be nonnegative".into()));
        }
        if (0..self.n_classes).any(|k| !self.class_mean(k).iter().all(|v| v.is_finite())) {
            return Err(Error::Config("common_weight cancels a class direction".into()));
        }
        if !(self.normal_ar.abs() < 1.0) || !(self.normal_std > 0.0) || !(self.anomaly_std >= 0.0) {
            return Err(Error::Config("invalid noise parameters".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes).map(class_name).collect()
    }

    /// Coordinate pairs and signs that define the class directions: the
    /// disjoint pairs `(0,1), (2,3), …` first, then every other pair, then
    /// the same list with the second coordinate negated.
    fn class_directions(&self) -> Vec<(usize, usize, f64)> {
        let d = self.dim;
        if d == 1 {
            return vec![(0, 0, 1.0), (0, 0, -1.0)];
        }
        let mut pairs: Vec<(usize, usize)> = (0..d / 2).map(|i| (2 * i, 2 * i + 1)).collect();
        for i in 0..d {
            for j in (i + 1)..d {
                if !pairs.contains(&(i, j)) {
                    pairs.push((i, j));
                }
            }
        }
        let plus = pairs.iter().map(|&(a, b)| (a, b, 1.0));
        let minus = pairs.iter().map(|&(a, b)| (a, b, -1.0));
        plus.chain(minus).collect()
    }

    /// Largest supported class count for this dimension.
    pub fn max_classes(&self) -> usize {
        self.class_directions().len()
    }

    /// Mean of class `k`: the unit direction `(e_a ± e_b)/√2` of the `k`-th
    /// coordinate pair plus `common_weight` times the all-ones unit vector,
    /// rescaled to length `class_shift`.
    pub fn class_mean(&self, k: usize) -> Array1<f64> {
        let (a, b, sign) = self.class_directions()[k];
        let mut m = Array1::from_elem(self.dim, self.common_weight / (self.dim as f64).sqrt());
        if a == b {
            m[a] += sign;
        } else {
            let c = std::f64::consts::FRAC_1_SQRT_2;
            m[a] += c;
            m[b] += sign * c;
        }
        let norm = m.dot(&m).sqrt();
        m * (self.class_shift / norm)
    }
}

pub fn class_name(k: usize) -> String {
    format!("class{k}")
}

fn ar1_sequence<R: Rng + ?Sized>(n: usize, dim: usize, rho: f64, std: f64, rng: &mut R) -> Array2<f64> {
    let innov = std * (1.0 - rho * rho).sqrt();
    let mut x = Array2::zeros((n, dim));
    for j in 0..dim {
        x[[0, j]] = std * rng.sample::<f64, _>(StandardNormal);
    }
    for i in 1..n {
        for j in 0..dim {
            x[[i, j]] = rho * x[[i - 1, j]] + innov * rng.sample::<f64, _>(StandardNormal);
        }
    }
    x
}

/// Draws a normal bag of `n` instances from the AR(1) normal process.
fn normal_bag<R: Rng + ?Sized>(id: String, cfg: &SynthConfig, rng: &mut R) -> Bag {
    let instances = ar1_sequence(cfg.bag_size, cfg.dim, cfg.normal_ar, cfg.normal_std, rng);
    Bag {
        id,
        instances,
        label: 0,
        instance_labels: Some(vec![0; cfg.bag_size]),
        anomaly_class: None,
    }
}

/// Draws a positive bag with an anomaly segment of `segment_len` instances
/// from class `class`.
pub fn positive_bag<R: Rng + ?Sized>(
    id: String,
    cfg: &SynthConfig,
    class: usize,
    segment_len: usize,
    rng: &mut R,
) -> Result<Bag> {
    if segment_len == 0 {
        return Err(Error::Config(
            "a positive bag needs an anomaly segment of at least one instance".into(),
        ));
    }
    if segment_len > cfg.bag_size {
        return Err(Error::Config("anomaly segment longer than the bag".into()));
    }
    let mut bag = normal_bag(id, cfg, rng);
    let start = rng.random_range(0..=cfg.bag_size - segment_len);
    let mean = cfg.class_mean(class);
    let labels = bag.instance_labels.as_mut().expect("synthetic labels");
    for i in start..start + segment_len {
        for (x, m) in bag.instances.row_mut(i).iter_mut().zip(&mean) {
            *x = m + cfg.anomaly_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    labels[start..start + segment_len].fill(1);
    bag.label = 1;
    bag.anomaly_class = Some(class_name(class));
    Ok(bag)
}

/// Generates `cfg.n_bags` bags. Positive bags cycle through the classes so
/// every class is represented equally.
pub fn generate_synthetic<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<Bag>> {
    cfg.validate()?;
    let n_pos = (cfg.n_bags as f64 * cfg.positive_fraction).round() as usize;
    let lo = ((cfg.segment_min * cfg.bag_size as f64).round() as usize).max(1);
    let hi = ((cfg.segment_max * cfg.bag_size as f64).round() as usize).clamp(lo, cfg.bag_size);
    let mut bags = Vec::with_capacity(cfg.n_bags);
    for i in 0..cfg.n_bags {
        let id = format!("bag{i:04}");
        if i < n_pos {
            let len = rng.random_range(lo..=hi);
            bags.push(positive_bag(id, cfg, i % cfg.n_classes, len, rng)?);
        } else {
            bags.push(normal_bag(id, cfg, rng));
        }
    }
    Ok(bags)
}

/// Train/test partition with some anomaly classes withheld from training.
#[derive(Clone, Debug)]
pub struct OpenSetSplit {
    pub seen_classes: BTreeSet<String>,
    pub unseen_classes: BTreeSet<String>,
    pub train: Vec<Bag>,
    pub test: Vec<Bag>,
}

impl OpenSetSplit {
    /// Fails if an unseen-class bag leaked into training.
    pub fn check_leakage(&self) -> Result<()> {
        let leaked: Vec<_> = self
            .train
            .iter()
            .filter_map(|b| b.anomaly_class.as_ref())
            .filter(|c| self.unseen_classes.contains(*c))
            .collect();
        if !leaked.is_empty() {
            return Err(Error::Contract(format!("unseen classes in train: {leaked:?}")));
        }
        Ok(())
    }
}

/// Anomaly classes present in `bags`.
pub fn anomaly_classes(bags: &[Bag]) -> BTreeSet<String> {
    bags.iter().filter_map(|b| b.anomaly_class.clone()).collect()
}

/// Splits bags so every unseen-class bag goes to test. Normal and seen-class
/// bags go to train with probability `train_fraction` (exact counts per
/// group, shuffled with `rng`).
pub fn make_open_split<R: Rng + ?Sized>(
    bags: &[Bag],
    seen: &BTreeSet<String>,
    train_fraction: f64,
    rng: &mut R,
) -> Result<OpenSetSplit> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config("train_fraction must be in [0, 1]".into()));
    }
    let classes = anomaly_classes(bags);
    if let Some(unknown) = seen.iter().find(|c| !classes.contains(*c)) {
        return Err(Error::Config(format!("unknown anomaly class {unknown:?}")));
    }
    let unseen: BTreeSet<String> = classes.difference(seen).cloned().collect();

    let mut groups: BTreeMap<Option<&str>, Vec<&Bag>> = BTreeMap::new();
    for b in bags {
        groups.entry(b.anomaly_class.as_deref()).or_default().push(b);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in groups {
        if class.is_some_and(|c| unseen.contains(c)) {
            test.extend(members.into_iter().cloned());
            continue;
        }
        members.shuffle(rng);
        let k = (members.len() as f64 * train_fraction).round() as usize;
        let (tr, te) = members.split_at(k);
        train.extend(tr.iter().map(|b| (*b).clone()));
        test.extend(te.iter().map(|b| (*b).clone()));
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    let split = OpenSetSplit {
        seen_classes: seen.clone(),
        unseen_classes: unseen,
        train,
        test,
    };
    split.check_leakage()?;
    Ok(split)
}

/// `trials` distinct seen-class subsets of size `n_seen`, drawn uniformly.
pub fn sample_seen_sets<R: Rng + ?Sized>(
    classes: &BTreeSet<String>,
    n_seen: usize,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<BTreeSet<String>>> {
    let all: Vec<&String> = classes.iter().collect();
    if n_seen > all.len() {
        return Err(Error::Config(format!(
            "cannot pick {n_seen} seen classes out of {}",
            all.len()
        )));
    }
    let mut subsets: Vec<BTreeSet<String>> = Vec::new();
    let total = binomial(all.len(), n_seen);
    if trials > total {
        return Err(Error::Config(format!(
            "only {total} distinct seen sets of size {n_seen}"
        )));
    }
    while subsets.len() < trials {
        let pick: BTreeSet<String> = all
            .choose_multiple(rng, n_seen)
            .map(|s| (*s).clone())
            .collect();
        if !subsets.contains(&pick) {
            subsets.push(pick);
        }
    }
    Ok(subsets)
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// A manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub bag_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_labels_path: Option<String>,
}

/// Serializes a matrix in the feature format.
pub fn encode_features(m: &Array2<f64>) -> Vec<u8> {
    let (n, d) = m.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses the feature format. `path` is only used in error messages.
pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::ingestion(path, "file shorter than header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::ingestion(path, "bad magic bytes"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != FEATURE_VERSION {
        return Err(Error::ingestion(path, format!("unsupported version {version}")));
    }
    let (n, d) = (u32_at(12) as usize, u32_at(16) as usize);
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::ingestion(path, "header dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::ingestion(
            path,
            format!(
                "header declares {n}x{d} ({expected} bytes) but file has {} bytes",
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::ingestion(path, "non-finite feature value"));
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("length checked"))
}

pub fn write_feature_file(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, format!("cannot read: {e}")))?;
    decode_features(&bytes, path)
}

/// Writes `bags` under `dir` (features in `dir/features`, labels in
/// `dir/labels`) and returns the manifest path `dir/manifest.json`.
pub fn write_dataset(dir: &Path, bags: &[Bag]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    let label_dir = dir.join("labels");
    for d in [&feat_dir, &label_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(bags.len());
    for b in bags {
        b.validate()?;
        let rel = format!("features/{}.feat", b.id);
        write_feature_file(&dir.join(&rel), &b.instances)?;
        let labels_rel = match &b.instance_labels {
            Some(l) => {
                let rel = format!("labels/{}.feat", b.id);
                let m = Array2::from_shape_fn((l.len(), 1), |(i, _)| f64::from(l[i]));
                write_feature_file(&dir.join(&rel), &m)?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: b.id.clone(),
            path: rel,
            bag_label: b.label,
            anomaly_class: b.anomaly_class.clone(),
            instance_labels_path: labels_rel,
        });
    }
    let manifest = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest, json + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Sorted uniform subset of `0..n` of size `k`.
fn uniform_subsample<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Loads every bag listed in a manifest. Bags longer than `bag_size` are
/// uniformly subsampled (order preserved); shorter ones are kept whole.
pub fn load_feature_bags<R: Rng + ?Sized>(
    manifest_path: &Path,
    bag_size: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Bag>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::ingestion(manifest_path, format!("cannot read manifest: {e}")))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::ingestion(manifest_path, format!("invalid manifest: {e}")))?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut dim: Option<(usize, PathBuf)> = None;
    let mut bags = Vec::with_capacity(entries.len());
    for e in entries {
        let path = root.join(&e.path);
        let mut instances = read_feature_file(&path)?;
        match &dim {
            Some((d, first)) if *d != instances.ncols() => {
                return Err(Error::ingestion(
                    &path,
                    format!(
                        "feature dimension {} differs from {d} in {}",
                        instances.ncols(),
                        first.display()
                    ),
                ));
            }
            None => dim = Some((instances.ncols(), path.clone())),
            _ => {}
        }
        let mut labels = match &e.instance_labels_path {
            Some(rel) => {
                let lp = root.join(rel);
                let m = read_feature_file(&lp)?;
                if m.ncols() != 1 || m.nrows() != instances.nrows() {
                    return Err(Error::ingestion(
                        &lp,
                        format!(
                            "labels are {}x{}, expected {}x1",
                            m.nrows(),
                            m.ncols(),
                            instances.nrows()
                        ),
                    ));
                }
                Some(m.iter().map(|&v| u8::from(v != 0.0)).collect::<Vec<u8>>())
            }
            None => None,
        };
        if let Some(k) = bag_size {
            if instances.nrows() > k {
                let idx = uniform_subsample(instances.nrows(), k, rng);
                instances = instances.select(Axis(0), &idx);
                labels = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            }
        }
        let bag = Bag {
            id: e.id,
            instances,
            label: e.bag_label,
            instance_labels: labels,
            anomaly_class: e.anomaly_class,
        };
        bag.validate()
            .map_err(|err| Error::ingestion(&path, err.to_string()))?;
        bags.push(bag);
    }
    Ok(bags)
}
