//! Reproducible two-class synthetic corpus with a matching embedding table.
//!
//! Half of every document's tokens are drawn uniformly from a shared pool;
//! the other half come from a Zipf distribution over markers owned by the
//! document's class.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix_seed, SeededRng};
use crate::text::{Document, EmbeddingTable};

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub docs: usize,
    pub vocab: usize,
    pub seed: u64,
    pub embedding_dim: usize,
    /// Probability that a token comes from the shared pool.
    pub shared_mass: f64,
    pub sentences: (usize, usize),
    pub words: (usize, usize),
}

impl SynthConfig {
    pub fn new(docs: usize, vocab: usize, seed: u64) -> Self {
        Self {
            docs,
            vocab,
            seed,
            embedding_dim: 16,
            shared_mass: 0.5,
            sentences: (2, 5),
            words: (4, 12),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.docs == 0 {
            return Err(Error::InvalidArgument("docs must be positive".into()));
        }
        if self.vocab < 3 {
            return Err(Error::InvalidArgument("vocab must be at least 3".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_mass) {
            return Err(Error::InvalidArgument("shared_mass must lie in [0, 1]".into()));
        }
        let (s, w) = (self.sentences, self.words);
        if s.0 == 0 || s.0 > s.1 || w.0 == 0 || w.0 > w.1 {
            return Err(Error::InvalidArgument("sentence and word ranges must be non-empty".into()));
        }
        Ok(())
    }

    /// Exclusive marker tokens per class.
    pub fn markers_per_class(&self) -> usize {
        (self.vocab / 20).max(1)
    }
}

/// The generated vocabulary split into class markers and the shared pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub markers: [Vec<String>; 2],
    pub shared: Vec<String>,
}

impl Vocabulary {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.markers[0].iter().chain(&self.markers[1]).chain(&self.shared)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub documents: Vec<Document>,
    pub vocabulary: Vocabulary,
    pub embeddings: EmbeddingTable,
    /// The embedding table in word2vec text format, vocabulary order.
    pub embeddings_text: String,
}

/// Pronounceable lowercase word for `index`; distinct indices below
/// `85^syllables` give distinct words.
pub fn synth_word(index: usize, syllables: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut rest = index;
    let mut word = String::with_capacity(2 * syllables);
    for _ in 0..syllables {
        let s = rest % base;
        rest /= base;
        word.push(CONSONANTS[s / VOWELS.len()] as char);
        word.push(VOWELS[s % VOWELS.len()] as char);
    }
    word
}

fn build_vocabulary(config: &SynthConfig) -> Vocabulary {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut syllables = 2;
    while base.pow(syllables as u32) < config.vocab {
        syllables += 1;
    }
    let words: Vec<String> = (0..config.vocab).map(|i| synth_word(i, syllables)).collect();
    let m = config.markers_per_class().min(config.vocab / 3).max(1);
    Vocabulary {
        markers: [words[..m].to_vec(), words[m..2 * m].to_vec()],
        shared: words[2 * m..].to_vec(),
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let vocabulary = build_vocabulary(config);
    let zipf = Zipf::new(vocabulary.markers[0].len() as u64, 1.0).expect("marker count is positive");

    let mut labels: Vec<u8> = (0..config.docs).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut SeededRng::new(mix_seed(config.seed, &[0])));

    let mut rng = SeededRng::new(mix_seed(config.seed, &[1]));
    let documents = labels
        .into_iter()
        .map(|label| {
            let markers = &vocabulary.markers[label as usize];
            let n_sent = rng.gen_range(config.sentences.0..=config.sentences.1);
            let sentences = (0..n_sent)
                .map(|_| {
                    let n_words = rng.gen_range(config.words.0..=config.words.1);
                    (0..n_words)
                        .map(|_| {
                            if rng.gen_bool(config.shared_mass) {
                                vocabulary.shared[rng.gen_range(0..vocabulary.shared.len())].clone()
                            } else {
                                markers[zipf.sample(&mut rng) as usize - 1].clone()
                            }
                        })
                        .collect()
                })
                .collect();
            Document::from_sentences(sentences, label)
        })
        .collect();

    let mut rng = SeededRng::new(mix_seed(config.seed, &[2]));
    let normal = Normal::new(0.0, 1.0 / (config.embedding_dim as f64).sqrt()).expect("positive scale");
    let mut embeddings = EmbeddingTable::new(config.embedding_dim);
    let mut embeddings_text = format!("{} {}\n", config.vocab, config.embedding_dim);
    for word in vocabulary.all() {
        let vector: Vec<f64> = (0..config.embedding_dim).map(|_| normal.sample(&mut rng)).collect();
        embeddings_text.push_str(word);
        for v in &vector {
            write!(embeddings_text, " {v}").expect("writing to a String");
        }
        embeddings_text.push('\n');
        embeddings.insert(word.clone(), vector)?;
    }

    Ok(SynthCorpus {
        documents,
        vocabulary,
        embeddings,
        embeddings_text,
    })
}
