//! Character-level adversarial copies of training documents.
//!
//! Per sentence, a number of distinct words chosen by sentence length each
//! receive exactly one character substitution drawn from the alphabet.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, SeededRng};
use crate::text::{Document, Sentence};

/// Lowercase Romanian alphabet: a–z plus ă â î ș ț.
pub const ROMANIAN_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzăâîșț";

/// `(min_words, replacements)` steps: sentences of at least `min_words`
/// words get `replacements` perturbed words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationPolicy {
    alphabet: Vec<char>,
    thresholds: Vec<(usize, usize)>,
}

impl Default for PerturbationPolicy {
    fn default() -> Self {
        Self {
            alphabet: ROMANIAN_ALPHABET.chars().collect(),
            thresholds: vec![(1, 1), (5, 2), (21, 3)],
        }
    }
}

impl PerturbationPolicy {
    pub fn new(alphabet: Vec<char>, thresholds: Vec<(usize, usize)>) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::InvalidPolicy("alphabet is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = alphabet.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::InvalidPolicy(format!("alphabet repeats `{dup}`")));
        }
        if thresholds.first().map(|t| t.0) != Some(1) {
            return Err(Error::InvalidPolicy("thresholds must start at one word".into()));
        }
        for pair in thresholds.windows(2) {
            if pair[1].0 <= pair[0].0 || pair[1].1 < pair[0].1 {
                return Err(Error::InvalidPolicy(
                    "thresholds must be increasing with non-decreasing counts".into(),
                ));
            }
        }
        if thresholds.iter().any(|t| t.1 == 0) {
            return Err(Error::InvalidPolicy("replacement counts must be at least 1".into()));
        }
        Ok(Self { alphabet, thresholds })
    }

    pub fn with_alphabet(alphabet: &str) -> Result<Self> {
        Self::new(alphabet.chars().collect(), Self::default().thresholds)
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    /// Words to perturb in a sentence of `len` words (before capping at `len`).
    pub fn replacements(&self, len: usize) -> usize {
        self.thresholds
            .iter()
            .rev()
            .find(|(min, _)| len >= *min)
            .map_or(self.thresholds[0].1, |(_, count)| *count)
    }
}

/// Replaces one uniformly chosen character by a different alphabet character.
pub fn perturb_word<R: Rng>(word: &str, policy: &PerturbationPolicy, rng: &mut R) -> Result<String> {
    let mut chars: Vec<char> = word.chars().collect();
    assert!(!chars.is_empty(), "cannot perturb an empty word");
    let pos = rng.gen_range(0..chars.len());
    let original = chars[pos];
    let choices: Vec<char> = policy.alphabet.iter().copied().filter(|&c| c != original).collect();
    if choices.is_empty() {
        return Err(Error::DegenerateAlphabet(original));
    }
    chars[pos] = choices[rng.gen_range(0..choices.len())];
    Ok(chars.into_iter().collect())
}

pub fn perturb_sentence<R: Rng>(sentence: &[String], policy: &PerturbationPolicy, rng: &mut R) -> Result<Sentence> {
    let k = policy.replacements(sentence.len()).min(sentence.len());
    let mut out = sentence.to_vec();
    let mut chosen = index::sample(rng, sentence.len(), k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        out[i] = perturb_word(&sentence[i], policy, rng)?;
    }
    Ok(out)
}

/// Seed of document `index` at `epoch`: `mix_seed(base, [epoch, index])`.
pub fn document_seed(base_seed: u64, epoch: u64, index: u64) -> u64 {
    mix_seed(base_seed, &[epoch, index])
}

pub fn perturb_document(doc: &Document, policy: &PerturbationPolicy, seed: u64) -> Result<Document> {
    let mut rng = SeededRng::new(seed);
    let sentences = doc
        .sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| perturb_sentence(s, policy, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Document::from_sentences(sentences, doc.label))
}

/// One adversarial copy per document, each with its own derived seed.
pub fn augment_dataset(docs: &[Document], policy: &PerturbationPolicy, base_seed: u64, epoch: u64) -> Result<Vec<Document>> {
    docs.iter()
        .enumerate()
        .map(|(i, doc)| perturb_document(doc, policy, document_seed(base_seed, epoch, i as u64)))
        .collect()
}

/// Character-level Levenshtein distance.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> Sentence {
        (0..n).map(|i| format!("cuvant{i}")).collect()
    }

    #[test]
    fn alphabet_has_31_letters() {
        let policy = PerturbationPolicy::default();
        assert_eq!(policy.alphabet().len(), 31);
    }

    #[test]
    fn threshold_boundaries() {
        let p = PerturbationPolicy::default();
        assert_eq!((1..=4).map(|n| p.replacements(n)).collect::<Vec<_>>(), vec![1; 4]);
        assert_eq!(p.replacements(5), 2);
        assert_eq!(p.replacements(20), 2);
        assert_eq!(p.replacements(21), 3);
        assert_eq!(p.replacements(500), 3);
    }

    #[test]
    fn forced_alternative() {
        let policy = PerturbationPolicy::with_alphabet("ab").unwrap();
        let mut rng = SeededRng::new(9);
        assert_eq!(perturb_word("a", &policy, &mut rng).unwrap(), "b");
    }

    #[test]
    fn singleton_alphabet_is_degenerate() {
        let policy = PerturbationPolicy::with_alphabet("a").unwrap();
        let mut rng = SeededRng::new(0);
        assert!(matches!(perturb_word("a", &policy, &mut rng), Err(Error::DegenerateAlphabet('a'))));
    }

    #[test]
    fn seeded_word_is_reproducible() {
        let policy = PerturbationPolicy::default();
        let a = perturb_word("bun", &policy, &mut SeededRng::new(42)).unwrap();
        let b = perturb_word("bun", &policy, &mut SeededRng::new(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(edit_distance(&a, "bun"), 1);
    }

    #[test]
    fn sentence_counts() {
        let policy = PerturbationPolicy::default();
        let mut rng = SeededRng::new(1);
        for (len, expected) in [(3, 1), (12, 2), (25, 3)] {
            let sentence = words(len);
            let out = perturb_sentence(&sentence, &policy, &mut rng).unwrap();
            let changed = sentence.iter().zip(&out).filter(|(a, b)| a != b).count();
            assert_eq!(changed, expected, "length {len}");
        }
    }

    #[test]
    fn invalid_policies() {
        assert!(PerturbationPolicy::new(vec![], vec![(1, 1)]).is_err());
        assert!(PerturbationPolicy::new(vec!['a', 'a'], vec![(1, 1)]).is_err());
        assert!(PerturbationPolicy::new(vec!['a'], vec![(1, 2), (5, 1)]).is_err());
        assert!(PerturbationPolicy::new(vec!['a'], vec![(2, 1)]).is_err());
    }

    #[test]
    fn dataset_augmentation() {
        let policy = PerturbationPolicy::default();
        assert!(augment_dataset(&[], &policy, 1, 0).unwrap().is_empty());
        let docs: Vec<Document> = (0..20)
            .map(|i| Document::new(format!("textul numarul {i} este aici. si inca o propozitie lunga"), (i % 2) as u8))
            .collect();
        let a = augment_dataset(&docs, &policy, 5, 0).unwrap();
        let b = augment_dataset(&docs, &policy, 5, 0).unwrap();
        let c = augment_dataset(&docs, &policy, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (src, adv) in docs.iter().zip(&a) {
            assert_eq!(src.label, adv.label);
            assert_eq!(crate::text::tokenize(&adv.raw_text), adv.sentences);
        }
    }

    #[test]
    fn levenshtein() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("ăla", "ala"), 1);
        assert_eq!(edit_distance("", "ab"), 2);
    }
}
