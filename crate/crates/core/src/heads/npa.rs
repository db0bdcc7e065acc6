//! Negative phrase augmentation: a periodically rebuilt confusion table
//! of hard negative phrases, filtered to drop likely false negatives
//! (lexicon parent-child pairs and phrases co-annotated on the same
//! object).

use crate::augment::Lexicon;
use crate::datamodel::Phrase;
use nalgebra::DVector;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct NpaConfig {
    /// Hard negatives kept per phrase.
    pub capacity: usize,
    /// Steps between table rebuilds during training.
    pub rebuild_period: usize,
    /// Two phrases co-annotated on the same region at least this often
    /// are treated as mutually non-exclusive and filtered.
    pub cooccurrence_threshold: u64,
}

impl Default for NpaConfig {
    fn default() -> Self {
        Self {
            capacity: 500,
            rebuild_period: 10_000,
            cooccurrence_threshold: 1,
        }
    }
}

/// Ranked hard negative phrases per phrase.
#[derive(Debug, Clone, Default)]
pub struct ConfusionTable {
    entries: BTreeMap<Phrase, Vec<(Phrase, f64)>>,
    pub rebuild_period: usize,
    /// Set when the table was built from an empty score sample.
    pub empty_sample: bool,
}

impl ConfusionTable {
    pub fn hard_negatives(&self, phrase: &Phrase) -> &[(Phrase, f64)] {
        self.entries.get(phrase).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn phrases(&self) -> impl Iterator<Item = &Phrase> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn cooccurs(
    cooccurrence: &BTreeMap<(Phrase, Phrase), u64>,
    a: &Phrase,
    b: &Phrase,
    threshold: u64,
) -> bool {
    let key = if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    };
    cooccurrence.get(&key).copied().unwrap_or(0) >= threshold
}

/// Build the confusion table from model scores on a train sample.
///
/// For each phrase with positive regions, every other sampled phrase is
/// ranked by its mean score over those regions. Candidates related
/// through the lexicon (a replacement/hypernym link in either direction)
/// or co-annotated with the phrase on the same object are removed, and
/// the list is truncated to `capacity`.
pub fn build_confusion_table(
    positive_regions: &BTreeMap<Phrase, Vec<DVector<f64>>>,
    score: &dyn Fn(&Phrase, &DVector<f64>) -> f64,
    lexicon: &Lexicon,
    cooccurrence: &BTreeMap<(Phrase, Phrase), u64>,
    config: &NpaConfig,
) -> ConfusionTable {
    let mut table = ConfusionTable {
        entries: BTreeMap::new(),
        rebuild_period: config.rebuild_period,
        empty_sample: positive_regions.is_empty(),
    };
    if table.empty_sample {
        return table;
    }
    let phrases: Vec<&Phrase> = positive_regions.keys().collect();
    for (target, regions) in positive_regions {
        let mut ranked: Vec<(Phrase, f64)> = Vec::new();
        if !regions.is_empty() {
            for candidate in &phrases {
                if *candidate == target {
                    continue;
                }
                if lexicon.related(candidate, target) {
                    continue;
                }
                if cooccurs(
                    cooccurrence,
                    candidate,
                    target,
                    config.cooccurrence_threshold,
                ) {
                    continue;
                }
                let mean = regions
                    .iter()
                    .map(|r| score(candidate, r))
                    .sum::<f64>()
                    / regions.len() as f64;
                ranked.push(((*candidate).clone(), mean));
            }
            ranked.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("finite scores")
                    .then_with(|| a.0.cmp(&b.0))
            });
            ranked.truncate(config.capacity);
        }
        table.entries.insert(target.clone(), ranked);
    }
    table
}
