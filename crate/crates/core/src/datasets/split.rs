use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetError, LabeledRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: usize,
    pub test: usize,
}

impl ClassCounts {
    pub const fn new(train: usize, test: usize) -> Self {
        Self { train, test }
    }
}

/// How many rows of each class go to train and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// Counts per class name; classes not listed get none.
    Explicit { counts: BTreeMap<String, ClassCounts> },
    /// Every non-majority class trains on `round(ratio * majority_train)`
    /// rows and tests on `minority_test`.
    Ratio {
        ratio: f64,
        majority: String,
        majority_train: usize,
        majority_test: usize,
        minority_test: usize,
    },
    /// One training row per non-majority class.
    OneShot {
        majority: String,
        majority_train: usize,
        majority_test: usize,
        minority_test: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub seed: u64,
    #[serde(flatten)]
    pub mode: SplitMode,
}

impl SplitSpec {
    /// One column of the CICIDS2017 split table.
    pub fn cicids2017(column: CicidsColumn, seed: u64) -> Self {
        Self {
            name: format!("cicids2017-{}", column.as_str()),
            seed,
            mode: SplitMode::Explicit {
                counts: cicids2017_counts(column).into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
            },
        }
    }

    pub fn car_hacking(seed: u64) -> Self {
        Self {
            name: "car-hacking".into(),
            seed,
            mode: SplitMode::Explicit {
                counts: car_hacking_counts().into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
            },
        }
    }

    /// Per-class counts in `label_names` order.
    pub fn resolve(&self, label_names: &[String]) -> Result<Vec<ClassCounts>, DatasetError> {
        let invalid = |m: String| Err(DatasetError::InvalidSpec(m));
        let majority_id = |name: &str| {
            label_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| DatasetError::InvalidSpec(format!("majority class {name:?} is not a schema label")))
        };
        match &self.mode {
            SplitMode::Explicit { counts } => {
                if let Some(unknown) = counts.keys().find(|k| !label_names.contains(k)) {
                    return invalid(format!("class {unknown:?} is not a schema label"));
                }
                Ok(label_names.iter().map(|n| counts.get(n).copied().unwrap_or_default()).collect())
            }
            SplitMode::Ratio {
                ratio,
                majority,
                majority_train,
                majority_test,
                minority_test,
            } => {
                if !(ratio.is_finite() && *ratio > 0.0) {
                    return invalid(format!("ratio must be positive, got {ratio}"));
                }
                let maj = majority_id(majority)?;
                let minority_train = (ratio * *majority_train as f64).round() as usize;
                Ok((0..label_names.len())
                    .map(|c| {
                        if c == maj {
                            ClassCounts::new(*majority_train, *majority_test)
                        } else {
                            ClassCounts::new(minority_train, *minority_test)
                        }
                    })
                    .collect())
            }
            SplitMode::OneShot {
                majority,
                majority_train,
                majority_test,
                minority_test,
            } => {
                let maj = majority_id(majority)?;
                Ok((0..label_names.len())
                    .map(|c| {
                        if c == maj {
                            ClassCounts::new(*majority_train, *majority_test)
                        } else {
                            ClassCounts::new(1, *minority_test)
                        }
                    })
                    .collect())
            }
        }
    }
}

/// Columns of the CICIDS2017 split table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CicidsColumn {
    R0001,
    R00005,
    R00002,
    OneShot,
}

impl CicidsColumn {
    pub const ALL: [CicidsColumn; 4] = [Self::R0001, Self::R00005, Self::R00002, Self::OneShot];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::R0001 => "0.001",
            Self::R00005 => "0.0005",
            Self::R00002 => "0.0002",
            Self::OneShot => "one-shot",
        }
    }
}

impl std::str::FromStr for CicidsColumn {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown split column {s:?} (expected 0.001, 0.0005, 0.0002 or one-shot)"))
    }
}

pub const CICIDS2017_CLASSES: [&str; 12] = [
    "BENIGN",
    "DoS slowloris",
    "DoS Slowhttptest",
    "PortScan",
    "Bot",
    "DoS Hulk",
    "DoS GoldenEye",
    "Web Attack Brute Force",
    "Web Attack Sql Injection",
    "Infiltration",
    "Web Attack XSS",
    "DDoS",
];

// train / test per class, columns 0.001, 0.0005, 0.0002, one-shot
const CICIDS2017_TRAIN: [[usize; 4]; 12] = [
    [18402, 80000, 79999, 5000],
    [27, 29, 17, 1],
    [19, 29, 17, 1],
    [13, 29, 17, 1],
    [22, 28, 17, 1],
    [19, 29, 17, 1],
    [22, 29, 17, 1],
    [17, 29, 17, 1],
    [0, 0, 17, 1],
    [0, 28, 17, 1],
    [16, 29, 16, 1],
    [12, 29, 16, 1],
];
const CICIDS2017_TEST: [[usize; 4]; 12] = [
    [20000, 20000, 20000, 20000],
    [20, 7, 4, 4],
    [20, 7, 4, 4],
    [20, 7, 4, 4],
    [20, 8, 4, 4],
    [20, 7, 4, 4],
    [20, 7, 4, 4],
    [20, 7, 4, 4],
    [0, 0, 4, 4],
    [0, 8, 4, 4],
    [20, 7, 5, 5],
    [20, 7, 5, 5],
];

/// Per-class counts of one CICIDS2017 split column, in table order.
pub fn cicids2017_counts(column: CicidsColumn) -> Vec<(&'static str, ClassCounts)> {
    let j = column as usize;
    CICIDS2017_CLASSES
        .iter()
        .enumerate()
        .map(|(i, &name)| (name, ClassCounts::new(CICIDS2017_TRAIN[i][j], CICIDS2017_TEST[i][j])))
        .collect()
}

pub const CAR_HACKING_CLASSES: [&str; 5] = ["R", "DoS", "Fuzzy", "RPM", "gear"];

pub fn car_hacking_counts() -> Vec<(&'static str, ClassCounts)> {
    let counts = [(561466, 140366), (23601, 5900), (19699, 4925), (26031, 6508), (23955, 5989)];
    CAR_HACKING_CLASSES
        .iter()
        .zip(counts)
        .map(|(&n, (tr, te))| (n, ClassCounts::new(tr, te)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub name: String,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDigest {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record written next to a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub classes: Vec<ManifestClass>,
    #[serde(default)]
    pub sources: Vec<SourceDigest>,
}

impl DatasetManifest {
    pub fn train_total(&self) -> usize {
        self.classes.iter().map(|c| c.train).sum()
    }

    pub fn test_total(&self) -> usize {
        self.classes.iter().map(|c| c.test).sum()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::InvalidSpec(format!("bad manifest: {e}")))
    }

    /// SHA-256 of the TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String, DatasetError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Samples train and test rows per class without replacement.
///
/// Classes are visited in id order; each class's rows are shuffled with one
/// RNG seeded from `spec.seed`, the first `train` go to train and the next
/// `test` to test. Both outputs are sorted by `source_row`.
pub fn make_split(
    records: &[LabeledRecord],
    spec: &SplitSpec,
    label_names: &[String],
) -> Result<(Vec<LabeledRecord>, Vec<LabeledRecord>, DatasetManifest), DatasetError> {
    let counts = spec.resolve(label_names)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); label_names.len()];
    for (i, r) in records.iter().enumerate() {
        let bucket = by_class
            .get_mut(r.label)
            .ok_or_else(|| DatasetError::InvalidSpec(format!("record label {} out of range", r.label)))?;
        bucket.push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut classes = Vec::with_capacity(label_names.len());
    for (class, (rows, want)) in by_class.iter_mut().zip(&counts).enumerate() {
        let requested = want.train + want.test;
        if rows.len() < requested {
            return Err(DatasetError::InsufficientSamples {
                class: label_names[class].clone(),
                available: rows.len(),
                requested,
            });
        }
        rows.shuffle(&mut rng);
        train.extend(rows[..want.train].iter().map(|&i| records[i].clone()));
        test.extend(rows[want.train..requested].iter().map(|&i| records[i].clone()));
        classes.push(ManifestClass {
            name: label_names[class].clone(),
            train: want.train,
            test: want.test,
        });
    }
    train.sort_by_key(|r| r.source_row);
    test.sort_by_key(|r| r.source_row);
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        seed: spec.seed,
        classes,
        sources: Vec::new(),
    };
    Ok((train, test, manifest))
}
