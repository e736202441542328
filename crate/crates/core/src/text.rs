//! Tokenization, word2vec text embeddings, JSON Lines datasets and the
//! fixed-shape document grid fed to the encoders.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SENTENCE_TERMINATORS: [char; 4] = ['.', '!', '?', ';'];

pub type Sentence = Vec<String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub raw_text: String,
    pub sentences: Vec<Sentence>,
    pub label: u8,
}

impl Document {
    pub fn new(raw_text: impl Into<String>, label: u8) -> Self {
        let raw_text = raw_text.into();
        let sentences = tokenize(&raw_text);
        Self {
            raw_text,
            sentences,
            label,
        }
    }

    /// Rebuilds a document from already tokenized sentences. The raw text
    /// is the sentences joined so that `tokenize` recovers them.
    pub fn from_sentences(sentences: Vec<Sentence>, label: u8) -> Self {
        let raw_text = sentences
            .iter()
            .map(|s| format!("{}.", s.join(" ")))
            .collect::<Vec<_>>()
            .join(" ");
        Self {
            raw_text,
            sentences,
            label,
        }
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '„' | '”' | '“' | '«' | '»' | '‘' | '’' | '‚' | '–' | '—' | '…' | '¿' | '¡' | '·'
        )
}

/// Splits text into sentences at `. ! ? ;`, lowercases, splits on
/// whitespace and strips punctuation from token edges. Empty tokens and
/// empty sentences are dropped.
pub fn tokenize(text: &str) -> Vec<Sentence> {
    text.split(SENTENCE_TERMINATORS)
        .map(|sentence| {
            sentence
                .split_whitespace()
                .map(|w| w.trim_matches(is_punctuation).to_lowercase())
                .filter(|w| !w.is_empty())
                .collect::<Sentence>()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<Sentence>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::InvalidEncoding(e.valid_up_to()))?;
    Ok(tokenize(text))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: HashMap<String, Vec<f64>>,
    oov: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            entries: HashMap::new(),
            oov: vec![0.0; dimension],
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a vector unless the token is already present. Returns whether
    /// it was inserted.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<bool> {
        if vector.len() != self.dimension {
            return Err(Error::InvalidArgument(format!(
                "vector of length {} in a table of dimension {}",
                vector.len(),
                self.dimension
            )));
        }
        let token = token.into();
        if self.entries.contains_key(&token) {
            return Ok(false);
        }
        self.entries.insert(token, vector);
        Ok(true)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.entries.contains_key(token)
    }

    /// The stored vector, or the all-zero out-of-vocabulary vector.
    pub fn lookup(&self, token: &str) -> &[f64] {
        self.entries.get(token).map_or(&self.oov, Vec::as_slice)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&text).map_err(|e| Error::InvalidEncoding(e.valid_up_to()))?;
        Self::parse(text)
    }

    /// Parses word2vec text format. A first line of exactly two integers is
    /// treated as the `count dimension` header.
    pub fn parse(text: &str) -> Result<Self> {
        let mut dimension = None;
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if i == 0 && rest.len() == 1 {
                if let (Ok(_count), Ok(dim)) = (token.parse::<usize>(), rest[0].parse::<usize>()) {
                    if dim == 0 {
                        return Err(Error::RaggedLine {
                            line: line_no,
                            expected: 1,
                            found: 0,
                        });
                    }
                    dimension = Some(dim);
                    continue;
                }
            }
            let expected = *dimension.get_or_insert(rest.len());
            if rest.len() != expected || expected == 0 {
                return Err(Error::RaggedLine {
                    line: line_no,
                    expected,
                    found: rest.len(),
                });
            }
            let vector = rest
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| Error::BadNumber {
                        line: line_no,
                        token: (*s).to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            table
                .get_or_insert_with(|| EmbeddingTable::new(expected))
                .insert(token, vector)?;
        }
        match (table, dimension) {
            (Some(t), _) => Ok(t),
            (None, Some(dim)) => Ok(EmbeddingTable::new(dim)),
            (None, None) => Err(Error::EmptyEmbeddings),
        }
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path)
}

/// A document laid out on the `n_s × n_w × E_d` grid with its padding mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDoc {
    pub block: Tensor,
    pub mask: Vec<Vec<u8>>,
    pub label: u8,
}

impl EncodedDoc {
    pub fn n_s(&self) -> usize {
        self.block.shape()[0]
    }

    pub fn n_w(&self) -> usize {
        self.block.shape()[1]
    }

    pub fn embedding_dim(&self) -> usize {
        self.block.shape()[2]
    }
}

/// Truncates to the first `n_s` sentences and `n_w` words, pads with zero
/// vectors, and replaces each kept token by its embedding.
pub fn encode_document(doc: &Document, table: &EmbeddingTable, n_s: usize, n_w: usize) -> EncodedDoc {
    assert!(n_s >= 1 && n_w >= 1, "grid extents must be positive");
    let e_d = table.dimension();
    let mut block = Tensor::zeros(&[n_s, n_w, e_d]);
    let mut mask = vec![vec![0u8; n_w]; n_s];
    let data = block.data_mut();
    for (s, sentence) in doc.sentences.iter().take(n_s).enumerate() {
        for (w, token) in sentence.iter().take(n_w).enumerate() {
            let offset = (s * n_w + w) * e_d;
            data[offset..offset + e_d].copy_from_slice(table.lookup(token));
            mask[s][w] = 1;
        }
    }
    EncodedDoc {
        block,
        mask,
        label: doc.label,
    }
}

#[derive(Deserialize)]
struct RawRecord {
    text: String,
    label: serde_json::Value,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    text: &'a str,
    label: u8,
}

pub fn parse_dataset(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = record.label.as_i64().ok_or_else(|| Error::MalformedLine {
            line: line_no,
            message: format!("label must be an integer, found {}", record.label),
        })?;
        if !(0..=1).contains(&label) {
            return Err(Error::BadLabel { line: line_no, label });
        }
        docs.push(Document::new(record.text, label as u8));
    }
    Ok(docs)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::InvalidEncoding(e.valid_up_to()))?;
    parse_dataset(text)
}

/// Serializes documents as JSON Lines (`{"text":…,"label":…}`).
pub fn to_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for doc in docs {
        let line = serde_json::to_string(&OutRecord {
            text: &doc.raw_text,
            label: doc.label,
        })
        .expect("string and integer always serialize");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(docs)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(words: &[&str]) -> Sentence {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Bun produs. Recomand!"), vec![s(&["bun", "produs"]), s(&["recomand"])]);
        assert_eq!(tokenize("o boxa ok"), vec![s(&["o", "boxa", "ok"])]);
        assert_eq!(tokenize("A, b; C."), vec![s(&["a", "b"]), s(&["c"])]);
    }

    #[test]
    fn tokenize_keeps_diacritics_and_drops_empties() {
        assert_eq!(tokenize("  Școală „mare”!!  ...  ȚARĂ "), vec![s(&["școală", "mare"]), s(&["țară"])]);
        assert!(tokenize("... ?!").is_empty());
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn tokenize_bytes_rejects_invalid_utf8() {
        assert!(matches!(tokenize_bytes(b"ok \xff"), Err(Error::InvalidEncoding(3))));
    }

    #[test]
    fn embeddings_with_header() {
        let table = EmbeddingTable::parse("2 3\na 1 0 0\nb 0 1 0").unwrap();
        assert_eq!(table.dimension(), 3);
        assert_eq!(table.lookup("a"), &[1.0, 0.0, 0.0]);
        assert_eq!(table.lookup("zzz"), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn embeddings_without_header_keep_first_duplicate() {
        let table = EmbeddingTable::parse("a 1 2\nb 3 4\na 9 9\n").unwrap();
        assert_eq!(table.dimension(), 2);
        assert_eq!(table.len(), 2);
        assert_eq!(table.lookup("a"), &[1.0, 2.0]);
    }

    #[test]
    fn embedding_errors() {
        let err = EmbeddingTable::parse("2 3\na 1 0 0\na 1 2").unwrap_err();
        assert!(matches!(err, Error::RaggedLine { line: 3, expected: 3, found: 2 }));
        let err = EmbeddingTable::parse("a 1 x 0").unwrap_err();
        assert!(matches!(err, Error::BadNumber { line: 1, .. }));
        assert!(matches!(EmbeddingTable::parse(""), Err(Error::EmptyEmbeddings)));
    }

    #[test]
    fn encode_truncates_sentences() {
        let table = EmbeddingTable::parse("a 1 0 0").unwrap();
        let doc = Document::new("a. a. a. a. a. a. a.", 1);
        assert_eq!(doc.sentences.len(), 7);
        let enc = encode_document(&doc, &table, 5, 2);
        assert_eq!(enc.block.shape(), &[5, 2, 3]);
        assert!(enc.mask.iter().all(|row| row == &vec![1, 0]));
    }

    #[test]
    fn encode_pads_with_mask() {
        let table = EmbeddingTable::parse("2 3\na 1 0 0\nb 0 1 0").unwrap();
        let doc = Document::new("a zzz", 0);
        let enc = encode_document(&doc, &table, 2, 3);
        assert_eq!(enc.mask, vec![vec![1, 1, 0], vec![0, 0, 0]]);
        assert_eq!(&enc.block.data()[..3], &[1.0, 0.0, 0.0]);
        assert!(enc.block.data()[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dataset_parsing() {
        let docs = parse_dataset("{\"text\":\"bun. ok\",\"label\":1}\n").unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].sentences.len(), 2);
        assert_eq!(docs[0].label, 1);
        assert!(matches!(
            parse_dataset("{\"text\":\"x\",\"label\":2}"),
            Err(Error::BadLabel { line: 1, label: 2 })
        ));
        assert!(matches!(
            parse_dataset("{\"text\":\"x\",\"label\":0}\nnot json"),
            Err(Error::MalformedLine { line: 2, .. })
        ));
        assert!(parse_dataset("").unwrap().is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let docs = vec![Document::new("Ana are mere. Bun!", 1), Document::new("rău", 0)];
        let back = parse_dataset(&to_jsonl(&docs)).unwrap();
        assert_eq!(back, docs);
    }
}
