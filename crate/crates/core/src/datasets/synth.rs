//! Synthetic packets with an exactly learnable label.
//!
//! Four integer fields are drawn uniformly from their ranges:
//!
//! | field      | range      |
//! |------------|------------|
//! | `src_port` | 0..=65535  |
//! | `dst_port` | 0..=65535  |
//! | `ttl`      | 0..=255    |
//! | `length`   | 0..=9999   |
//!
//! and the class is `(src_port mod 10) mod 4`, i.e. a function of the
//! first token of every sequence (fields are written ones digit first).
//! To hit a requested class mix the class is drawn first and `src_port` is
//! rejection-sampled until it satisfies the rule, which keeps it uniform
//! within the class.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, LabeledRecord};
use crate::schema::{FieldDescriptor, PacketSchema};

pub const SYNTH_CLASSES: [&str; 4] = ["benign", "attack_a", "attack_b", "attack_c"];

const RANGES: [(&str, u32, usize); 4] = [("src_port", 65535, 5), ("dst_port", 65535, 5), ("ttl", 255, 3), ("length", 9999, 4)];

/// Schema of the synthetic packets: L = 64, M = 5, 4 classes.
pub fn synth_schema() -> PacketSchema {
    let fields = RANGES.iter().map(|&(name, _, digits)| FieldDescriptor::integer(name, digits)).collect();
    PacketSchema::new(fields, SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(), 64, 5).expect("synthetic schema is valid")
}

/// The labelling rule, applied to `src_port`.
pub fn synth_label(src_port: u64) -> usize {
    (src_port % 10 % 4) as usize
}

/// Class proportions of a generated set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mix", rename_all = "snake_case")]
pub enum ClassMix {
    /// `n / 4` per class; the remainder goes to the lowest class ids.
    Balanced,
    /// Each of the three attack classes gets `round(ratio * n / (1 + 3 ratio))`
    /// rows (so it is `ratio` times the benign count up to rounding) and
    /// benign takes the rest.
    Imbalanced { ratio: f64 },
    /// Independent per-row draws with these class weights.
    Weights { weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub mix: ClassMix,
}

impl SynthConfig {
    pub fn balanced(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            mix: ClassMix::Balanced,
        }
    }

    pub fn imbalanced(n: usize, seed: u64, ratio: f64) -> Self {
        Self {
            n,
            seed,
            mix: ClassMix::Imbalanced { ratio },
        }
    }
}

fn class_sequence(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, DatasetError> {
    let k = SYNTH_CLASSES.len();
    let mut counts = match &cfg.mix {
        ClassMix::Balanced => (0..k).map(|c| cfg.n / k + usize::from(c < cfg.n % k)).collect::<Vec<_>>(),
        ClassMix::Imbalanced { ratio } => {
            if !(ratio.is_finite() && *ratio > 0.0) {
                return Err(DatasetError::InvalidSpec(format!("imbalance ratio must be positive, got {ratio}")));
            }
            let minor = ((ratio * cfg.n as f64) / (1.0 + 3.0 * ratio)).round() as usize;
            let minor = minor.min(cfg.n / 3);
            vec![cfg.n - 3 * minor, minor, minor, minor]
        }
        ClassMix::Weights { weights } => {
            if weights.len() != k {
                return Err(DatasetError::InvalidSpec(format!("expected {k} class weights, got {}", weights.len())));
            }
            let dist = WeightedIndex::new(weights).map_err(|e| DatasetError::InvalidSpec(format!("class weights: {e}")))?;
            return Ok((0..cfg.n).map(|_| dist.sample(rng)).collect());
        }
    };
    let mut seq = Vec::with_capacity(cfg.n);
    for (class, count) in counts.iter_mut().enumerate() {
        seq.extend(std::iter::repeat_n(class, *count));
    }
    seq.shuffle(rng);
    Ok(seq)
}

/// Generates `cfg.n` records; `source_row` is the generation index.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<LabeledRecord>, DatasetError> {
    if cfg.n == 0 {
        return Err(DatasetError::InvalidSpec("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = class_sequence(cfg, &mut rng)?;
    Ok(classes
        .into_iter()
        .enumerate()
        .map(|(row, label)| {
            let src = loop {
                let v = rng.random_range(0..=RANGES[0].1);
                if synth_label(v as u64) == label {
                    break v;
                }
            };
            let mut fields = vec![src.to_string()];
            fields.extend(RANGES[1..].iter().map(|&(_, hi, _)| rng.random_range(0..=hi).to_string()));
            LabeledRecord {
                fields,
                label,
                source_row: row,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(records: &[LabeledRecord]) -> [usize; 4] {
        let mut c = [0; 4];
        for r in records {
            c[r.label] += 1;
        }
        c
    }

    #[test]
    fn rule_reproduces_every_label() {
        let recs = synth_generate(&SynthConfig::balanced(2000, 3)).unwrap();
        assert!(recs.iter().all(|r| synth_label(r.fields[0].parse().unwrap()) == r.label));
        assert_eq!(counts(&recs), [500; 4]);
    }

    #[test]
    fn balanced_remainder_goes_to_low_ids() {
        assert_eq!(counts(&synth_generate(&SynthConfig::balanced(10, 0)).unwrap()), [3, 3, 2, 2]);
    }

    #[test]
    fn imbalanced_counts_track_the_ratio() {
        let recs = synth_generate(&SynthConfig::imbalanced(50_000, 1, 0.001)).unwrap();
        let c = counts(&recs);
        for &m in &c[1..] {
            assert!((m as f64 - 0.001 * c[0] as f64).abs() <= 1.0, "{c:?}");
        }
        assert_eq!(c.iter().sum::<usize>(), 50_000);
    }

    #[test]
    fn schema_accepts_generated_values() {
        let codec = crate::codec::PacketCodec::new(synth_schema());
        for r in synth_generate(&SynthConfig::balanced(200, 5)).unwrap() {
            codec.encode(&r.fields, r.label).unwrap();
        }
    }
}
