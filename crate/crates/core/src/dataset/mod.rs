//! Labeled image discovery, stratified splitting, preprocessing and batching.
//!
//! A dataset lives on disk as `<root>/<ClassName>/<image files>`. Scanning it
//! yields a [`DatasetManifest`] whose records are later assigned to
//! train/val/test splits, loaded as normalized `H×W×3` tensors and grouped
//! into batches.

mod batches;
mod preprocess;
pub mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub use batches::{batch_order, make_batches, Batch, LoadedSplit};
pub use preprocess::{load_and_preprocess, resize_bilinear, PreprocessConfig, ScalingMode, IMAGENET_MEAN, IMAGENET_STD};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("MissingRoot: dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("EmptyDataset: no class directory under {0} contains an image")]
    EmptyDataset(PathBuf),
    #[error("BadRatios: {0}")]
    BadRatios(String),
    #[error("AlreadySplit: manifest already has split assignments (pass overwrite to replace them)")]
    AlreadySplit,
    #[error("EmptySplit: split '{0}' has no records")]
    EmptySplit(Split),
    #[error("MissingFile: {0} not found")]
    MissingFile(PathBuf),
    #[error("DecodeError: {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error("CorruptManifest: {0}")]
    CorruptManifest(String),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split '{other}' (expected train, val or test)")),
        }
    }
}

/// Sorted, duplicate-free class names; a name's position is its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    /// Sorts `names` by byte order. Rejects empty or repeated names.
    pub fn new(mut names: Vec<String>) -> Result<Self, String> {
        names.sort();
        if names.iter().any(|n| n.is_empty()) {
            return Err("class names must be non-empty".into());
        }
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("duplicate class name '{}'", w[0]));
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for ClassVocabulary {
    type Error = String;

    fn try_from(names: Vec<String>) -> Result<Self, String> {
        let vocab = Self::new(names.clone())?;
        if vocab.names != names {
            return Err("vocabulary must be sorted by byte order".into());
        }
        Ok(vocab)
    }
}

impl From<ClassVocabulary> for Vec<String> {
    fn from(v: ClassVocabulary) -> Self {
        v.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the manifest root, `/`-separated.
    pub path: String,
    pub class_index: usize,
    pub split: Split,
}

/// Train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", from = "[f64; 3]")]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const STANDARD: SplitRatios = SplitRatios {
        train: 0.70,
        val: 0.15,
        test: 0.15,
    };

    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DatasetError::BadRatios(format!(
                "ratios must be finite and non-negative, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadRatios(format!(
                "ratios must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

impl From<SplitRatios> for [f64; 3] {
    fn from(r: SplitRatios) -> Self {
        [r.train, r.val, r.test]
    }
}

impl From<[f64; 3]> for SplitRatios {
    fn from(a: [f64; 3]) -> Self {
        Self {
            train: a[0],
            val: a[1],
            test: a[2],
        }
    }
}

/// Files passed over by [`scan_dataset`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipReport {
    pub skipped: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub vocabulary: ClassVocabulary,
    pub ratios: Option<SplitRatios>,
    pub split_seed: Option<u64>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split_records(split).count()
    }

    pub fn is_split(&self) -> bool {
        self.records.iter().any(|r| r.split != Split::Unassigned)
    }

    /// Checks the structural invariants a deserialized manifest must hold.
    pub fn validate(&self) -> Result<()> {
        let n = self.vocabulary.len();
        if let Some(r) = self.records.iter().find(|r| r.class_index >= n) {
            return Err(DatasetError::CorruptManifest(format!(
                "record {} has class_index {} but vocabulary has {n} classes",
                r.path, r.class_index
            )));
        }
        if let Some(ratios) = &self.ratios {
            ratios
                .validate()
                .map_err(|e| DatasetError::CorruptManifest(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DatasetError::MissingFile(path.to_path_buf()),
            _ => DatasetError::Io(e),
        })?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| DatasetError::CorruptManifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DatasetError::CorruptManifest(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Discovers `<root>/<class>/<image>` files.
///
/// Every non-hidden immediate subdirectory becomes a class; files whose
/// extension is not jpg/jpeg/png (any case), hidden entries and names that
/// are not valid UTF-8 land in the skip report. Records come out ordered by
/// class index, then relative path.
pub fn scan_dataset(root: &Path) -> Result<(DatasetManifest, SkipReport)> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let mut skipped = Vec::new();
    let mut classes: Vec<(String, Vec<String>)> = Vec::new();
    for entry in sorted_entries(root)? {
        let path = entry.path();
        let name = match entry.file_name().into_string() {
            Ok(n) if !n.starts_with('.') => n,
            _ => {
                skipped.push(path);
                continue;
            }
        };
        if !entry.file_type()?.is_dir() {
            skipped.push(path);
            continue;
        }
        let mut files = Vec::new();
        for file in sorted_entries(&path)? {
            let fpath = file.path();
            match file.file_name().into_string() {
                Ok(f) if !f.starts_with('.') && file.file_type()?.is_file() && is_image_file(&fpath) => {
                    files.push(format!("{name}/{f}"));
                }
                _ => skipped.push(fpath),
            }
        }
        classes.push((name, files));
    }
    if classes.iter().all(|(_, files)| files.is_empty()) {
        return Err(DatasetError::EmptyDataset(root.to_path_buf()));
    }
    let vocabulary = ClassVocabulary::new(classes.iter().map(|(n, _)| n.clone()).collect())
        .expect("directory names are unique and non-empty");
    let mut records = Vec::new();
    for (class_name, mut files) in classes {
        let class_index = vocabulary.index_of(&class_name).expect("name comes from vocabulary");
        files.sort();
        records.extend(files.into_iter().map(|path| ImageRecord {
            path,
            class_index,
            split: Split::Unassigned,
        }));
    }
    records.sort_by(|a, b| (a.class_index, a.path.as_bytes()).cmp(&(b.class_index, b.path.as_bytes())));
    let root = fs::canonicalize(root)?;
    log::debug!("scanned {} records, skipped {} entries", records.len(), skipped.len());
    Ok((
        DatasetManifest {
            root,
            vocabulary,
            ratios: None,
            split_seed: None,
            records,
        },
        SkipReport { skipped },
    ))
}

/// Largest-remainder apportionment of `n` items over train/val/test.
///
/// Leftover items go to the parts with the largest fractional quotas; equal
/// fractions prefer train, then val, then test.
pub fn apportion(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let quotas = [
        n as f64 * ratios.train,
        n as f64 * ratios.val,
        n as f64 * ratios.test,
    ];
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut leftover = n.saturating_sub(assigned);
    let mut order = [0usize, 1, 2];
    // Stable sort keeps train > val > test on equal fractions.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &part in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[part] += 1;
        leftover -= 1;
    }
    counts
}

/// Stratified, seeded train/val/test assignment.
///
/// One SplitMix64 stream seeded with `seed` is consumed class by class in
/// class-index order: each class's records are sorted by path, Fisher–Yates
/// shuffled, then cut into [`apportion`]ed train, val and test runs.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    seed: u64,
    overwrite: bool,
) -> Result<DatasetManifest> {
    ratios.validate()?;
    if manifest.is_split() && !overwrite {
        return Err(DatasetError::AlreadySplit);
    }
    let mut out = manifest.clone();
    let mut rng = SplitMix64::new(seed);
    for class_index in 0..manifest.num_classes() {
        let mut members: Vec<usize> = (0..out.records.len())
            .filter(|&i| out.records[i].class_index == class_index)
            .collect();
        members.sort_by(|&a, &b| out.records[a].path.as_bytes().cmp(out.records[b].path.as_bytes()));
        rng.shuffle(&mut members);
        let [n_train, n_val, _] = apportion(members.len(), &ratios);
        for (pos, &i) in members.iter().enumerate() {
            out.records[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out.ratios = Some(ratios);
    out.split_seed = Some(seed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"x").unwrap();
    }

    fn synthetic_manifest(per_class: &[usize]) -> DatasetManifest {
        let names: Vec<String> = (0..per_class.len()).map(|i| format!("c{i}")).collect();
        let mut records = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for k in 0..n {
                records.push(ImageRecord {
                    path: format!("c{c}/img{k:04}.png"),
                    class_index: c,
                    split: Split::Unassigned,
                });
            }
        }
        DatasetManifest {
            root: PathBuf::from("/data"),
            vocabulary: ClassVocabulary::new(names).unwrap(),
            ratios: None,
            split_seed: None,
            records,
        }
    }

    #[test]
    fn scan_five_cities() {
        let dir = tempfile::tempdir().unwrap();
        for city in ["Mumbai", "Delhi", "Kolkata", "Ahmedabad", "Kerala"] {
            for k in 0..10 {
                touch(&dir.path().join(city).join(format!("{k}.jpg")));
            }
        }
        let (m, skips) = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.vocabulary.names(), ["Ahmedabad", "Delhi", "Kerala", "Kolkata", "Mumbai"]);
        assert_eq!(m.records.len(), 50);
        assert!(skips.skipped.is_empty());
        assert!(m.records.windows(2).all(|w| w[0].class_index <= w[1].class_index));
        assert!(m.records.iter().all(|r| r.split == Split::Unassigned));
    }

    #[test]
    fn scan_skips_non_images() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("A/readme.txt"));
        for f in ["a.jpg", "b.JPG", "c.Jpeg"] {
            touch(&dir.path().join("A").join(f));
        }
        let (m, skips) = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(skips.skipped.len(), 1);
        assert!(skips.skipped[0].ends_with("readme.txt"));
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_dataset(dir.path()), Err(DatasetError::EmptyDataset(_))));
        fs::create_dir(dir.path().join("Empty")).unwrap();
        assert!(matches!(scan_dataset(dir.path()), Err(DatasetError::EmptyDataset(_))));
        assert!(matches!(
            scan_dataset(&dir.path().join("nope")),
            Err(DatasetError::MissingRoot(_))
        ));
    }

    #[test]
    fn apportion_seven_records() {
        // quotas 4.9 / 1.05 / 1.05 -> floors 4/1/1, leftover goes to train.
        assert_eq!(apportion(7, &SplitRatios::STANDARD), [5, 1, 1]);
        assert_eq!(apportion(100, &SplitRatios::STANDARD), [70, 15, 15]);
        assert_eq!(apportion(0, &SplitRatios::STANDARD), [0, 0, 0]);
        // Equal fractions: train before val before test.
        let third = SplitRatios::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
        assert_eq!(apportion(4, &third), [2, 1, 1]);
        assert_eq!(apportion(5, &third), [2, 2, 1]);
    }

    #[test]
    fn split_counts_and_determinism() {
        let m = synthetic_manifest(&[100, 100, 7]);
        let a = split_dataset(&m, SplitRatios::STANDARD, 11, false).unwrap();
        let b = split_dataset(&m, SplitRatios::STANDARD, 11, false).unwrap();
        assert_eq!(a, b);
        for (c, expect) in [(0, [70, 15, 15]), (1, [70, 15, 15]), (2, [5, 1, 1])] {
            let count = |s| a.records.iter().filter(|r| r.class_index == c && r.split == s).count();
            assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], expect);
        }
        let c = split_dataset(&m, SplitRatios::STANDARD, 12, false).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn split_errors() {
        let m = synthetic_manifest(&[10]);
        assert!(matches!(
            split_dataset(&m, SplitRatios { train: 0.7, val: 0.2, test: 0.2 }, 0, false),
            Err(DatasetError::BadRatios(_))
        ));
        assert!(matches!(
            split_dataset(&m, SplitRatios { train: 1.2, val: -0.2, test: 0.0 }, 0, false),
            Err(DatasetError::BadRatios(_))
        ));
        let split = split_dataset(&m, SplitRatios::STANDARD, 0, false).unwrap();
        assert!(matches!(
            split_dataset(&split, SplitRatios::STANDARD, 0, false),
            Err(DatasetError::AlreadySplit)
        ));
        assert!(split_dataset(&split, SplitRatios::STANDARD, 0, true).is_ok());
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = split_dataset(&synthetic_manifest(&[3, 4]), SplitRatios::STANDARD, 5, false).unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["vocabulary"], serde_json::json!(["c0", "c1"]));
        assert_eq!(v["ratios"], serde_json::json!([0.7, 0.15, 0.15]));
        assert_eq!(v["split_seed"], 5);
        assert!(v["records"][0]["split"].as_str().is_some());
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
        assert!(matches!(
            DatasetManifest::load(&dir.path().join("missing.json")),
            Err(DatasetError::MissingFile(_))
        ));
    }

    #[test]
    fn manifest_rejects_bad_class_index() {
        let mut m = synthetic_manifest(&[2]);
        m.records[0].class_index = 3;
        assert!(matches!(m.validate(), Err(DatasetError::CorruptManifest(_))));
    }

    #[test]
    fn vocabulary_rejects_unsorted_json() {
        let err = serde_json::from_str::<ClassVocabulary>(r#"["b","a"]"#);
        assert!(err.is_err());
        let v: ClassVocabulary = serde_json::from_str(r#"["a","b"]"#).unwrap();
        assert_eq!(v.index_of("b"), Some(1));
    }
}
