//! Positive phrase augmentation: expand annotations with lexicon-derived
//! synonym/hypernym variants, restricted to phrases already present in
//! the split's ground-truth vocabulary.

use crate::datamodel::{DataError, DatasetMode, GroundTruthDataset, Phrase, PhraseAnnotation};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Sub-phrase decomposition is capped at this many tokens to bound the
/// subset blow-up; longer phrases use word replacements only.
const MAX_SUBPHRASE_TOKENS: usize = 6;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Word replacement table (synonyms and more general forms) plus words
/// that must never be substituted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    replacements: BTreeMap<String, BTreeSet<String>>,
    protected: BTreeSet<String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `replacement` as a substitute for `word`. Self-mappings
    /// are dropped.
    pub fn add_replacement(&mut self, word: &str, replacement: &str) {
        let word = word.to_lowercase();
        let replacement = replacement.to_lowercase();
        if word == replacement || word.is_empty() || replacement.is_empty() {
            return;
        }
        self.replacements.entry(word).or_default().insert(replacement);
    }

    pub fn protect(&mut self, word: &str) {
        self.protected.insert(word.to_lowercase());
    }

    pub fn is_protected(&self, word: &str) -> bool {
        self.protected.contains(word)
    }

    pub fn replacements_for(&self, word: &str) -> Option<&BTreeSet<String>> {
        self.replacements.get(word)
    }

    pub fn is_empty(&self) -> bool {
        self.replacements.is_empty()
    }

    /// Whether two phrases are linked through the replacement table: some
    /// word of one is a registered replacement (synonym or hypernym) of
    /// some word of the other. Used to drop likely false negatives.
    pub fn related(&self, a: &Phrase, b: &Phrase) -> bool {
        let linked = |x: &Phrase, y: &Phrase| {
            x.tokens().iter().any(|w| {
                self.replacements
                    .get(w)
                    .map(|reps| y.tokens().iter().any(|t| reps.contains(t)))
                    .unwrap_or(false)
            })
        };
        linked(a, b) || linked(b, a)
    }

    /// Parse the TSV format: `word<TAB>rep1,rep2,...` per line, with
    /// optional `#nosub<TAB>word1,word2` lines naming protected words.
    /// Other `#`-prefixed lines are comments.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut lexicon = Self::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let mut fields = trimmed.splitn(2, '\t');
            let head = fields.next().unwrap_or_default().trim();
            let rest = fields.next();
            if head == "#nosub" {
                let words = rest.ok_or_else(|| DataError::BadLexiconLine {
                    line: lineno + 1,
                    reason: "#nosub line without a word list".into(),
                })?;
                for word in words.split(',') {
                    let word = word.trim();
                    if !word.is_empty() {
                        lexicon.protect(word);
                    }
                }
                continue;
            }
            if head.starts_with('#') {
                continue;
            }
            let reps = rest.ok_or_else(|| DataError::BadLexiconLine {
                line: lineno + 1,
                reason: format!("word {head:?} without a replacement list"),
            })?;
            for rep in reps.split(',') {
                let rep = rep.trim();
                if !rep.is_empty() {
                    lexicon.add_replacement(head, rep);
                }
            }
        }
        Ok(lexicon)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::parse(BufReader::new(std::fs::File::open(path)?))
    }
}

/// All augmentation candidates for one phrase.
///
/// Every non-protected word with lexicon entries yields one candidate per
/// replacement (a single substitution each). In `FlickrLike` mode the
/// phrase additionally decomposes into sub-phrases formed by dropping
/// token subsets; candidates consisting only of articles are suppressed.
pub fn expand_phrase(phrase: &Phrase, lexicon: &Lexicon, mode: DatasetMode) -> BTreeSet<Phrase> {
    let mut out = BTreeSet::new();
    if phrase.is_empty() {
        return out;
    }
    let tokens = phrase.tokens();
    for (i, word) in tokens.iter().enumerate() {
        if lexicon.is_protected(word) {
            continue;
        }
        let Some(reps) = lexicon.replacements_for(word) else {
            continue;
        };
        for rep in reps {
            let mut candidate = tokens.to_vec();
            candidate[i] = rep.clone();
            let candidate = Phrase::from_tokens(candidate);
            if candidate != *phrase {
                out.insert(candidate);
            }
        }
    }
    if mode == DatasetMode::FlickrLike && tokens.len() >= 2 && tokens.len() <= MAX_SUBPHRASE_TOKENS
    {
        let n = tokens.len();
        // Every non-empty proper subset of kept positions.
        for mask in 1..((1u32 << n) - 1) {
            let kept: Vec<String> = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| tokens[i].clone())
                .collect();
            if kept.iter().all(|t| ARTICLES.contains(&t.as_str())) {
                continue;
            }
            out.insert(Phrase::from_tokens(kept));
        }
    }
    out
}

/// Attach every in-vocabulary expansion candidate to its source region as
/// an augmented annotation. Originals are retained; already-present
/// phrases are not duplicated, which makes the operation idempotent.
pub fn apply_ppa(
    dataset: &GroundTruthDataset,
    lexicon: &Lexicon,
    split_vocabulary: &BTreeSet<Phrase>,
) -> GroundTruthDataset {
    let mut out = dataset.clone();
    for image in &mut out.images {
        for region in &mut image.regions {
            let mut present: BTreeSet<Phrase> =
                region.phrases.iter().map(|p| p.phrase.clone()).collect();
            let sources: Vec<Phrase> = region
                .phrases
                .iter()
                .filter(|p| !p.augmented)
                .map(|p| p.phrase.clone())
                .collect();
            let mut additions = BTreeSet::new();
            for source in &sources {
                for candidate in expand_phrase(source, lexicon, dataset.mode) {
                    if split_vocabulary.contains(&candidate) && !present.contains(&candidate) {
                        additions.insert(candidate);
                    }
                }
            }
            for candidate in additions {
                present.insert(candidate.clone());
                region.phrases.push(PhraseAnnotation {
                    phrase: candidate,
                    augmented: true,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{count_train_occurrences, BoundingBox, ImageEntry, RegionEntry, Split};

    fn phrase(s: &str) -> Phrase {
        Phrase::normalize(s)
    }

    fn paper_lexicon() -> Lexicon {
        let mut lex = Lexicon::new();
        for rep in ["coat", "cover", "apparel"] {
            lex.add_replacement("jacket", rep);
        }
        lex
    }

    #[test]
    fn blue_jacket_expands_to_three_replacements() {
        let got = expand_phrase(&phrase("blue jacket"), &paper_lexicon(), DatasetMode::ReferItLike);
        let want: BTreeSet<Phrase> = ["blue coat", "blue cover", "blue apparel"]
            .iter()
            .map(|s| phrase(s))
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn flickr_mode_emits_subphrases() {
        let got = expand_phrase(&phrase("a large red house"), &Lexicon::new(), DatasetMode::FlickrLike);
        for want in ["a large house", "a red house", "house", "red"] {
            assert!(got.contains(&phrase(want)), "missing {want:?}");
        }
        // articles never stand alone
        assert!(!got.contains(&phrase("a")));
        // the source phrase is not a candidate
        assert!(!got.contains(&phrase("a large red house")));
    }

    #[test]
    fn referit_mode_never_decomposes() {
        let got = expand_phrase(
            &phrase("the dog on a table"),
            &Lexicon::new(),
            DatasetMode::ReferItLike,
        );
        assert!(got.is_empty());
    }

    #[test]
    fn protected_words_are_never_substituted() {
        let mut lex = Lexicon::new();
        lex.add_replacement("left", "remaining");
        lex.protect("left");
        let got = expand_phrase(&phrase("the left box"), &lex, DatasetMode::ReferItLike);
        assert!(got.is_empty());
    }

    #[test]
    fn replacement_candidates_differ_in_one_token() {
        let mut lex = paper_lexicon();
        lex.add_replacement("blue", "azure");
        let source = phrase("blue jacket");
        let got = expand_phrase(&source, &lex, DatasetMode::GenomeLike);
        for cand in &got {
            let diffs = cand
                .tokens()
                .iter()
                .zip(source.tokens())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(cand.len(), source.len());
            assert_eq!(diffs, 1, "{cand}");
        }
    }

    #[test]
    fn long_phrases_skip_subphrase_decomposition() {
        let long = phrase("one two three four five six seven");
        let got = expand_phrase(&long, &Lexicon::new(), DatasetMode::FlickrLike);
        assert!(got.is_empty());
    }

    #[test]
    fn tsv_parsing_handles_nosub_lines() {
        let tsv = "jacket\tcoat, cover,apparel\n#nosub\tleft,right\n# comment\nman\tperson\n";
        let lex = Lexicon::parse(tsv.as_bytes()).unwrap();
        assert!(lex.is_protected("left"));
        assert!(lex.is_protected("right"));
        assert_eq!(
            lex.replacements_for("jacket").unwrap().len(),
            3,
            "{lex:?}"
        );
        assert!(lex.replacements_for("man").unwrap().contains("person"));
    }

    #[test]
    fn self_mappings_are_dropped() {
        let mut lex = Lexicon::new();
        lex.add_replacement("dog", "dog");
        assert!(lex.is_empty());
    }

    #[test]
    fn related_links_through_replacements_both_ways() {
        let mut lex = Lexicon::new();
        lex.add_replacement("man", "person");
        assert!(lex.related(&phrase("a man"), &phrase("a person")));
        assert!(lex.related(&phrase("a person"), &phrase("a man")));
        assert!(!lex.related(&phrase("a man"), &phrase("a truck")));
    }

    fn toy_dataset(mode: DatasetMode) -> GroundTruthDataset {
        let boxed = |x: f64| BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
        let gt = |s: &str| PhraseAnnotation {
            phrase: phrase(s),
            augmented: false,
        };
        GroundTruthDataset::new(
            Split::Train,
            mode,
            vec![
                ImageEntry {
                    image_id: "im1".into(),
                    regions: vec![
                        RegionEntry {
                            bounds: boxed(0.0),
                            phrases: vec![gt("blue jacket")],
                        },
                        RegionEntry {
                            bounds: boxed(20.0),
                            phrases: vec![gt("blue coat")],
                        },
                    ],
                },
                ImageEntry {
                    image_id: "im2".into(),
                    regions: vec![RegionEntry {
                        bounds: boxed(0.0),
                        phrases: vec![gt("red house")],
                    }],
                },
                ImageEntry {
                    image_id: "im3".into(),
                    regions: vec![RegionEntry {
                        bounds: boxed(5.0),
                        phrases: vec![gt("house")],
                    }],
                },
            ],
        )
    }

    #[test]
    fn ppa_adds_only_in_vocabulary_candidates() {
        let ds = toy_dataset(DatasetMode::GenomeLike);
        let vocab = ds.ground_truth_vocabulary();
        let augmented = apply_ppa(&ds, &paper_lexicon(), &vocab);
        // "blue coat" exists in the split, so it attaches to the jacket region
        let region = &augmented.images[0].regions[0];
        assert!(region
            .phrases
            .iter()
            .any(|p| p.augmented && p.phrase == phrase("blue coat")));
        // "blue cover" / "blue apparel" are out of vocabulary
        assert!(!region.phrases.iter().any(|p| p.phrase == phrase("blue cover")));
        assert!(!region
            .phrases
            .iter()
            .any(|p| p.phrase == phrase("blue apparel")));
    }

    #[test]
    fn ppa_without_lexicon_hits_is_identity() {
        let ds = toy_dataset(DatasetMode::ReferItLike);
        let vocab = ds.ground_truth_vocabulary();
        let augmented = apply_ppa(&ds, &Lexicon::new(), &vocab);
        assert_eq!(ds, augmented);
    }

    #[test]
    fn ppa_matches_brute_force_per_region() {
        let ds = toy_dataset(DatasetMode::FlickrLike);
        let vocab = ds.ground_truth_vocabulary();
        let lex = paper_lexicon();
        let augmented = apply_ppa(&ds, &lex, &vocab);
        for (img, image) in ds.images.iter().enumerate() {
            for (reg, region) in image.regions.iter().enumerate() {
                let mut want: BTreeSet<Phrase> = BTreeSet::new();
                for ann in &region.phrases {
                    for cand in expand_phrase(&ann.phrase, &lex, DatasetMode::FlickrLike) {
                        if vocab.contains(&cand)
                            && !region.phrases.iter().any(|p| p.phrase == cand)
                        {
                            want.insert(cand);
                        }
                    }
                }
                let got: BTreeSet<Phrase> = augmented.images[img].regions[reg]
                    .phrases
                    .iter()
                    .filter(|p| p.augmented)
                    .map(|p| p.phrase.clone())
                    .collect();
                assert_eq!(got, want, "image {img} region {reg}");
            }
        }
    }

    #[test]
    fn ppa_retains_originals_and_is_idempotent() {
        let ds = toy_dataset(DatasetMode::FlickrLike);
        let vocab = ds.ground_truth_vocabulary();
        let lex = paper_lexicon();
        let once = apply_ppa(&ds, &lex, &vocab);
        for (image, orig) in once.images.iter().zip(&ds.images) {
            for (region, orig_region) in image.regions.iter().zip(&orig.regions) {
                for ann in &orig_region.phrases {
                    assert!(region.phrases.contains(ann));
                }
            }
        }
        let twice = apply_ppa(&once, &lex, &vocab);
        assert_eq!(once, twice);
    }

    #[test]
    fn train_counts_unchanged_by_ppa() {
        let ds = toy_dataset(DatasetMode::FlickrLike);
        let before = count_train_occurrences(&ds).unwrap();
        let augmented = apply_ppa(&ds, &paper_lexicon(), &ds.ground_truth_vocabulary());
        let after = count_train_occurrences(&augmented).unwrap();
        assert_eq!(before, after);
    }
}
