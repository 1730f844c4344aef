//! Corpus ingestion: vocabulary construction, word-level tokenization and
//! JSONL document loading.
//!
//! The tokenizer splits on Unicode whitespace, detaches leading and trailing
//! ASCII punctuation as one-character tokens and lowercases. Special ids are
//! fixed: `PAD = 0`, `UNK = 1`, `MASK = 2`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const NUM_SPECIALS: usize = 3;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<mask>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from surface tokens listed in id order (ids 3, 4, ...).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for token in tokens {
            let token = token.into();
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary token {token:?} is empty or contains whitespace"
                )));
            }
            if SPECIAL_TOKENS.contains(&token.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary token {token:?} collides with a special token"
                )));
            }
            let id = id_to_token.len() as u32;
            if token_to_id.insert(token.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary token {token:?} listed twice"
                )));
            }
            id_to_token.push(token);
        }
        if id_to_token.len() < NUM_SPECIALS + 1 {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least one non-special token".into(),
            ));
        }
        Ok(Self {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn surface_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.id_to_token.iter().enumerate() {
            out.push_str(token);
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (token, id) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidArgument(format!("vocab line {}: expected token<TAB>id", lineno + 1))
            })?;
            let id: usize = id.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("vocab line {}: bad id {id:?}", lineno + 1))
            })?;
            if id != lineno {
                return Err(Error::InvalidArgument(format!(
                    "vocab line {}: ids must be dense and sorted, found {id}",
                    lineno + 1
                )));
            }
            if id < NUM_SPECIALS {
                if token != SPECIAL_TOKENS[id] {
                    return Err(Error::InvalidArgument(format!(
                        "vocab line {}: expected special {:?}, found {token:?}",
                        lineno + 1,
                        SPECIAL_TOKENS[id]
                    )));
                }
            } else {
                tokens.push(token.to_string());
            }
        }
        Self::from_tokens(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the TSV serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_tsv().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits text into lowercase surface tokens.
pub fn split_surface(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && chars[lo].is_ascii_punctuation() {
            lo += 1;
        }
        while hi > lo && chars[hi - 1].is_ascii_punctuation() {
            hi -= 1;
        }
        for c in &chars[..lo] {
            out.push(c.to_string());
        }
        if lo < hi {
            let word: String = chars[lo..hi].iter().collect();
            out.push(word.to_lowercase());
        }
        for c in &chars[hi..] {
            out.push(c.to_string());
        }
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    split_surface(text)
        .iter()
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect()
}

pub fn detokenize(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut parts = Vec::with_capacity(ids.len());
    for &id in ids {
        let token = vocab.token(id).ok_or(Error::TokenOutOfRange {
            id,
            vocab_size: vocab.len(),
        })?;
        parts.push(token);
    }
    Ok(parts.join(" "))
}

#[derive(Debug, Deserialize)]
struct RawDocument {
    id: String,
    text: String,
}

fn read_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Counts surface tokens over every document text of a JSONL corpus.
pub fn build_vocab(corpus_path: &Path, min_freq: usize, max_size: usize) -> Result<Vocab> {
    let docs = read_jsonl(corpus_path)?;
    build_vocab_from_texts(docs.iter().map(|d| d.text.as_str()), min_freq, max_size)
}

pub fn build_vocab_from_texts<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_freq: usize,
    max_size: usize,
) -> Result<Vocab> {
    if min_freq < 1 {
        return Err(Error::InvalidArgument("min_freq must be at least 1".into()));
    }
    if max_size < NUM_SPECIALS + 1 {
        return Err(Error::InvalidArgument("max_size must be at least 4".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for token in split_surface(text) {
            *counts.entry(token).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    if kept.is_empty() {
        return Err(Error::EmptyCorpus { min_freq });
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.truncate(max_size - NUM_SPECIALS);
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            id: id.into(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DocumentStore {
    pub documents: Vec<Document>,
    pub source: PathBuf,
    pub vocab_fingerprint: String,
    pub dropped: usize,
}

impl DocumentStore {
    pub fn from_documents(
        documents: Vec<Document>,
        vocab: &Vocab,
        min_doc_tokens: usize,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(documents.len());
        let mut dropped = 0;
        for doc in documents {
            if !seen.insert(doc.id.clone()) {
                return Err(Error::DuplicateId(doc.id));
            }
            if let Some(&id) = doc.tokens.iter().find(|&&t| t as usize >= vocab.len()) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: vocab.len(),
                });
            }
            if doc.len() < min_doc_tokens {
                dropped += 1;
            } else {
                kept.push(doc);
            }
        }
        Ok(Self {
            documents: kept,
            source: PathBuf::new(),
            vocab_fingerprint: vocab.fingerprint(),
            dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.documents.iter()
    }
}

/// Loads a JSONL corpus, dropping documents shorter than `min_doc_tokens`.
pub fn ingest_documents(path: &Path, vocab: &Vocab, min_doc_tokens: usize) -> Result<DocumentStore> {
    let raw = read_jsonl(path)?;
    let docs = raw
        .into_iter()
        .map(|d| Document::new(d.id, tokenize(&d.text, vocab)))
        .collect();
    let mut store = DocumentStore::from_documents(docs, vocab, min_doc_tokens)?;
    store.source = path.to_path_buf();
    if store.dropped > 0 {
        log::info!(
            "{}: dropped {} document(s) shorter than {} tokens",
            path.display(),
            store.dropped,
            min_doc_tokens
        );
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn jsonl(lines: &[(&str, &str)]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for (id, text) in lines {
            writeln!(f, "{}", serde_json::json!({"id": id, "text": text})).unwrap();
        }
        f
    }

    #[test]
    fn tiny_vocab() {
        let f = jsonl(&[("d", "a a b")]);
        let v = build_vocab(f.path(), 1, 10).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
        let v = build_vocab(f.path(), 2, 10).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn vocab_cap_keeps_most_frequent() {
        // frequencies: t0..t9 -> 10..1 occurrences
        let text: Vec<String> = (0..10)
            .flat_map(|i| std::iter::repeat(format!("t{i}")).take(10 - i))
            .collect();
        let f = jsonl(&[("d", &text.join(" "))]);
        let v = build_vocab(f.path(), 1, 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.surface_tokens(), ["t0", "t1", "t2"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab_from_texts(["b a c b a c"], 1, 10).unwrap();
        assert_eq!(v.surface_tokens(), ["a", "b", "c"]);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            build_vocab_from_texts(["a b"], 2, 10),
            Err(Error::EmptyCorpus { .. })
        ));
        assert!(build_vocab_from_texts([""], 1, 10).is_err());
    }

    #[test]
    fn tokenize_rules() {
        let v = Vocab::from_tokens(["hello", ",", "world"]).unwrap();
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("Hello, world", &v), vec![3, 4, 5]);
        assert_eq!(tokenize("zzz", &v), vec![UNK_ID]);
        assert_eq!(split_surface("(Quoted...) it's"), ["(", "quoted", ".", ".", ".", ")", "it's"]);
        assert_eq!(split_surface("<pad>"), ["<", "pad", ">"]);
    }

    #[test]
    fn detokenize_specials_and_range() {
        let v = Vocab::from_tokens(["x"]).unwrap();
        assert_eq!(detokenize(&[], &v).unwrap(), "");
        assert_eq!(detokenize(&[MASK_ID], &v).unwrap(), "<mask>");
        assert_eq!(detokenize(&[PAD_ID, UNK_ID, 3], &v).unwrap(), "<pad> <unk> x");
        assert!(matches!(detokenize(&[4], &v), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn tsv_round_trip_and_fingerprint() {
        let v = build_vocab_from_texts(["the cat , the dog ."], 1, 100).unwrap();
        let tsv = v.to_tsv();
        assert!(tsv.starts_with("<pad>\t0\n<unk>\t1\n<mask>\t2\n"));
        let back = Vocab::from_tsv(&tsv).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        let other = build_vocab_from_texts(["the cat"], 1, 100).unwrap();
        assert_ne!(other.fingerprint(), v.fingerprint());
    }

    #[test]
    fn ingest_filters_short_documents() {
        let long = vec!["w"; 300].join(" ");
        let short = vec!["w"; 100].join(" ");
        let f = jsonl(&[("a", &long), ("b", &short), ("c", &long)]);
        let v = Vocab::from_tokens(["w"]).unwrap();
        let store = ingest_documents(f.path(), &v, 256).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.dropped, 1);
        assert_eq!(store.documents[1].id, "c");
        let store = ingest_documents(f.path(), &v, 0).unwrap();
        assert_eq!(store.len(), 3);
    }

    #[test]
    fn ingest_errors() {
        let v = Vocab::from_tokens(["w"]).unwrap();
        let f = jsonl(&[("a", "w"), ("a", "w w")]);
        assert!(matches!(ingest_documents(f.path(), &v, 0), Err(Error::DuplicateId(_))));

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id": "a", "text": "w"}}"#).unwrap();
        writeln!(f, "not json").unwrap();
        match ingest_documents(f.path(), &v, 0) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
        assert!(matches!(
            ingest_documents(Path::new("/nonexistent/corpus.jsonl"), &v, 0),
            Err(Error::Io { .. })
        ));
    }
}
