//! Vocabulary, tokenization, JSONL ingestion and the synthetic salient-word task.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Marker placed before every salient word in synthetic documents.
pub const SALIENT_MARKER: &str = "@";
pub const SYNTH_LEXICON_SIZE: usize = 200;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size {0} leaves no room for the 4 reserved tokens")]
    VocabTooSmall(usize),
    #[error("inconsistent sizes: {0}")]
    InconsistentSize(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{count} malformed line(s) in {path}; first at line {first_line}: {reason}")]
    MalformedLine { path: String, count: usize, first_line: usize, reason: String },
    #[error("vocabulary file {path}: {reason}")]
    BadVocabFile { path: String, reason: String },
}

/// Word-level vocabulary with fixed reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Vocab {
    fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    /// Joins content words with single spaces; sentinels and padding are dropped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.word_of(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|source| DataError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..4] != RESERVED {
            return Err(DataError::BadVocabFile { path: p, reason: "missing reserved tokens".into() });
        }
        let v = Self::from_words(lines[4..].iter().map(|s| s.to_string()));
        if v.index.len() != v.tokens.len() {
            return Err(DataError::BadVocabFile { path: p, reason: "duplicate tokens".into() });
        }
        Ok(v)
    }
}

/// Keeps the most frequent words (ties alphabetical) up to `max_size` entries including reserved ids.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    if max_size < RESERVED.len() {
        return Err(DataError::VocabTooSmall(max_size));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            if RESERVED.contains(&w) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocab::from_words(ranked.into_iter().take(max_size - RESERVED.len()).map(|(w, _)| w.to_string())))
}

/// Vocabulary-indexed token list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }

    /// `[BOS, content.., EOS]`
    pub fn decoder_target(content: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(content);
        ids.push(EOS);
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn starts_with_bos(&self) -> bool {
        self.0.first() == Some(&BOS)
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    /// Ids between the sentinels.
    pub fn content(&self) -> &[TokenId] {
        let s = usize::from(self.starts_with_bos());
        let e = self.0.len() - usize::from(self.ends_with_eos() && self.0.len() > s);
        &self.0[s..e]
    }

    /// Decoder-side sequences: BOS first, EOS last, no interior sentinels or padding.
    pub fn is_well_formed_target(&self) -> bool {
        self.0.len() >= 2
            && self.starts_with_bos()
            && self.ends_with_eos()
            && self.0[1..self.0.len() - 1].iter().all(|&t| !matches!(t, PAD | BOS | EOS))
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// A document (encoder input, no sentinels) with its BOS/EOS-wrapped summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub document: TokenSequence,
    pub summary: TokenSequence,
}

/// Truncation limits applied at ingestion. `max_sum_len` counts generated
/// summary tokens including EOS.
#[derive(Clone, Copy, Debug)]
pub struct Limits {
    pub max_doc_len: usize,
    pub max_sum_len: usize,
}

impl ExamplePair {
    pub fn from_texts(vocab: &Vocab, document: &str, summary: &str, limits: Limits) -> Option<Self> {
        let mut doc = vocab.tokenize(document);
        doc.truncate(limits.max_doc_len);
        let mut sum = vocab.tokenize(summary);
        sum.truncate(limits.max_sum_len.saturating_sub(1));
        if doc.is_empty() || sum.is_empty() {
            return None;
        }
        Some(Self { document: TokenSequence(doc), summary: TokenSequence::decoder_target(&sum) })
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    document: String,
    summary: String,
}

/// Raw `(document, summary)` texts from a JSON Lines file, in file order.
pub fn read_jsonl_texts(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    let mut bad: Option<(usize, String)> = None;
    let mut bad_count = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JsonRecord>(line) {
            Ok(r) => out.push((r.document, r.summary)),
            Err(e) => {
                bad_count += 1;
                bad.get_or_insert((i + 1, e.to_string()));
            }
        }
    }
    if let Some((first_line, reason)) = bad {
        return Err(DataError::MalformedLine { path: p, count: bad_count, first_line, reason });
    }
    Ok(out)
}

/// Tokenizes and truncates a JSONL corpus. Records that are empty after
/// truncation are reported as malformed.
pub fn load_jsonl(path: &Path, vocab: &Vocab, limits: Limits) -> Result<Vec<ExamplePair>, DataError> {
    let texts = read_jsonl_texts(path)?;
    let mut pairs = Vec::with_capacity(texts.len());
    let mut empty = Vec::new();
    for (i, (d, s)) in texts.iter().enumerate() {
        match ExamplePair::from_texts(vocab, d, s, limits) {
            Some(p) => pairs.push(p),
            None => empty.push(i + 1),
        }
    }
    if let Some(&first) = empty.first() {
        return Err(DataError::MalformedLine {
            path: path.display().to_string(),
            count: empty.len(),
            first_line: first,
            reason: "empty document or summary".into(),
        });
    }
    Ok(pairs)
}

/// Parameters of the synthetic salient-word extraction task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Inclusive range of plain words per document (markers come on top).
    pub doc_len_min: usize,
    pub doc_len_max: usize,
    pub salient_count: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { seed: 7, n_train: 2000, n_val: 200, n_test: 200, doc_len_min: 10, doc_len_max: 16, salient_count: 3 }
    }
}

impl SynthSpec {
    pub fn max_doc_tokens(&self) -> usize {
        self.doc_len_max + self.salient_count
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.doc_len_min == 0 || self.doc_len_min > self.doc_len_max {
            return Err(DataError::InconsistentSize(format!(
                "doc_len range {}..={} is empty",
                self.doc_len_min, self.doc_len_max
            )));
        }
        if self.salient_count == 0 || self.salient_count > self.doc_len_min {
            return Err(DataError::InconsistentSize(format!(
                "salient_count {} must be in 1..={}",
                self.salient_count, self.doc_len_min
            )));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(DataError::InconsistentSize("every split needs at least one example".into()));
        }
        Ok(())
    }
}

pub fn synth_lexicon() -> Vec<String> {
    (0..SYNTH_LEXICON_SIZE).map(|i| format!("w{i:03}")).collect()
}

pub fn synth_vocab() -> Vocab {
    Vocab::from_words(std::iter::once(SALIENT_MARKER.to_string()).chain(synth_lexicon()))
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub train: Vec<ExamplePair>,
    pub val: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
}

/// Random documents with marker-tagged salient words; the summary is the
/// salient words in document order.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus, DataError> {
    spec.validate()?;
    let vocab = synth_vocab();
    let split = |tag: u64, n: usize| -> Vec<ExamplePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5359_4e54, tag]));
        (0..n).map(|_| synth_example(&mut rng, spec, &vocab)).collect()
    };
    Ok(SynthCorpus { train: split(0, spec.n_train), val: split(1, spec.n_val), test: split(2, spec.n_test), vocab })
}

fn synth_example(rng: &mut ChaCha8Rng, spec: &SynthSpec, vocab: &Vocab) -> ExamplePair {
    let first_word = vocab.lookup("w000");
    let marker = vocab.lookup(SALIENT_MARKER);
    let len = rng.gen_range(spec.doc_len_min..=spec.doc_len_max);
    let words: Vec<TokenId> = (0..len).map(|_| first_word + rng.gen_range(0..SYNTH_LEXICON_SIZE as TokenId)).collect();
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    let mut salient = positions[..spec.salient_count].to_vec();
    salient.sort_unstable();
    let mut doc = Vec::with_capacity(len + salient.len());
    let mut next = 0;
    for (i, &w) in words.iter().enumerate() {
        if next < salient.len() && salient[next] == i {
            doc.push(marker);
            next += 1;
        }
        doc.push(w);
    }
    let summary: Vec<TokenId> = salient.iter().map(|&i| words[i]).collect();
    ExamplePair { document: TokenSequence(doc), summary: TokenSequence::decoder_target(&summary) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_full_inclusion() {
        let v = build_vocab(&["a a b"], 6).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]);
    }

    #[test]
    fn vocab_ties_break_alphabetically() {
        let v = build_vocab(&["y x z z"], 6).unwrap();
        assert_eq!(v.tokens()[4..], ["z", "x"]);
    }

    #[test]
    fn unseen_word_maps_to_unk() {
        let v = build_vocab(&["a b"], 10).unwrap();
        assert_eq!(v.tokenize("a q"), vec![4, UNK]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, 10), Err(DataError::EmptyCorpus)));
    }

    #[test]
    fn vocab_ids_round_trip() {
        let v = synth_vocab();
        for id in 0..v.len() as TokenId {
            assert_eq!(v.lookup(v.word_of(id).unwrap()), id);
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = build_vocab(&["the cat sat on the mat"], 20).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec { n_train: 50, n_val: 10, n_test: 10, ..Default::default() };
        let a = synth_corpus(&spec).unwrap();
        let b = synth_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
    }

    fn is_subsequence(needle: &[TokenId], hay: &[TokenId]) -> bool {
        let mut it = hay.iter();
        needle.iter().all(|n| it.any(|h| h == n))
    }

    #[test]
    fn summaries_are_subsequences_of_their_documents() {
        let spec = SynthSpec { n_train: 200, n_val: 10, n_test: 10, ..Default::default() };
        let c = synth_corpus(&spec).unwrap();
        for p in c.train.iter().chain(&c.val).chain(&c.test) {
            assert!(p.summary.is_well_formed_target());
            assert!(is_subsequence(p.summary.content(), p.document.ids()));
            assert!(!p.document.ids().contains(&BOS) && !p.document.ids().contains(&EOS));
        }
    }

    #[test]
    fn salient_count_fixes_summary_length() {
        let spec = SynthSpec {
            doc_len_min: 20,
            doc_len_max: 20,
            salient_count: 3,
            n_train: 30,
            n_val: 1,
            n_test: 1,
            ..Default::default()
        };
        let c = synth_corpus(&spec).unwrap();
        for p in &c.train {
            assert_eq!(p.summary.content().len(), 3);
            assert_eq!(p.document.len(), 23);
        }
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let spec = SynthSpec { doc_len_min: 2, doc_len_max: 5, salient_count: 3, ..Default::default() };
        assert!(matches!(synth_corpus(&spec), Err(DataError::InconsistentSize(_))));
    }

    #[test]
    fn splits_do_not_share_documents() {
        let spec = SynthSpec { n_train: 8000, n_val: 1000, n_test: 1000, ..Default::default() };
        let c = synth_corpus(&spec).unwrap();
        let mut all: Vec<&[TokenId]> = c.train.iter().chain(&c.val).chain(&c.test).map(|p| p.document.ids()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10_000);
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn jsonl_keeps_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "c.jsonl",
            "{\"document\":\"a b c\",\"summary\":\"a\"}\n{\"document\":\"b c\",\"summary\":\"c\"}\n",
        );
        let v = build_vocab(&["a b c"], 10).unwrap();
        let pairs = load_jsonl(&p, &v, Limits { max_doc_len: 10, max_sum_len: 5 }).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(v.detokenize(pairs[0].document.ids()), "a b c");
        assert_eq!(v.detokenize(pairs[1].summary.ids()), "c");
    }

    #[test]
    fn jsonl_reports_missing_summary_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"document\":\"a\",\"summary\":\"a\"}\n{\"document\":\"b\"}\n");
        let v = build_vocab(&["a b"], 10).unwrap();
        match load_jsonl(&p, &v, Limits { max_doc_len: 10, max_sum_len: 5 }) {
            Err(DataError::MalformedLine { first_line, count, reason, .. }) => {
                assert_eq!((first_line, count), (2, 1));
                assert!(reason.contains("summary"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_missing_file() {
        let v = synth_vocab();
        let r = load_jsonl(Path::new("/nonexistent/x.jsonl"), &v, Limits { max_doc_len: 4, max_sum_len: 4 });
        assert!(matches!(r, Err(DataError::Io { .. })));
    }

    #[test]
    fn jsonl_truncates_long_documents() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.jsonl", "{\"document\":\"a b c a b c a b\",\"summary\":\"a b c a\"}\n");
        let v = build_vocab(&["a b c"], 10).unwrap();
        let pairs = load_jsonl(&p, &v, Limits { max_doc_len: 5, max_sum_len: 3 }).unwrap();
        assert_eq!(pairs[0].document.len(), 5);
        assert_eq!(pairs[0].summary.ids(), &[BOS, 4, 5, EOS]);
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(words in proptest::collection::vec("[a-z]{1,6}", 1..12), pad in "[ \t]{1,3}") {
            let text = words.join(&pad);
            let v = build_vocab(&[text.as_str()], 1000).unwrap();
            prop_assert_eq!(v.detokenize(&v.tokenize(&text)), words.join(" "));
        }
    }
}
