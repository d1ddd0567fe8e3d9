//! Corpus and dataset representation, tokenization, and JSONL persistence.
//!
//! Passages and examples are plain text on disk; the vocabulary is built at
//! load time over both, in first-seen order, so the generator can emit any
//! observed word. The corpus is immutable after load.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;
pub type PassageId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

/// Word-level vocabulary with reserved BOS/EOS/UNK slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        let id_to_token = vec!["<bos>".to_string(), "<eos>".to_string(), "<unk>".to_string()];
        Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token,
        }
    }

    /// Number of ids, including the three specials.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.token_to_id.get(word).copied()
    }

    pub fn word_of(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Adds every word of `text` not yet present, in first-seen order.
    pub fn absorb(&mut self, text: &str) {
        for word in split_words(text) {
            if !self.token_to_id.contains_key(&word) {
                let id = self.id_to_token.len();
                self.token_to_id.insert(word.clone(), id);
                self.id_to_token.push(word);
            }
        }
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

/// Lowercases and splits on whitespace and punctuation.
fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Deterministic word-level tokenization; out-of-vocabulary words map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    split_words(text)
        .iter()
        .map(|w| vocab.id_of(w).unwrap_or(UNK))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: PassageId,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub context: String,
    pub target: String,
    pub gold_passage_id: Option<PassageId>,
    pub context_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub passages: Vec<Passage>,
    pub vocabulary: Vocabulary,
    index_of: HashMap<PassageId, usize>,
}

impl Corpus {
    /// Builds a corpus from pre-tokenized passages. Ids must be unique and
    /// tokens must fall inside the vocabulary.
    pub fn from_passages(passages: Vec<Passage>, vocabulary: Vocabulary) -> Result<Self> {
        let mut index_of = HashMap::new();
        for (i, p) in passages.iter().enumerate() {
            if index_of.insert(p.id, i).is_some() {
                return Err(Error::DuplicatePassageId(p.id));
            }
            for &t in &p.tokens {
                if t >= vocabulary.len() {
                    return Err(Error::TokenOutOfRange {
                        token: t,
                        vocab_size: vocabulary.len(),
                    });
                }
            }
        }
        Ok(Corpus {
            passages,
            vocabulary,
            index_of,
        })
    }

    pub fn passage(&self, id: PassageId) -> Option<&Passage> {
        self.index_of.get(&id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: PassageId) -> bool {
        self.index_of.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    fn from_parts(raw: Vec<PassageRecord>, vocabulary: Vocabulary) -> Result<Self> {
        let mut index_of = HashMap::new();
        let mut passages = Vec::with_capacity(raw.len());
        for rec in raw {
            if index_of.insert(rec.id, passages.len()).is_some() {
                return Err(Error::DuplicatePassageId(rec.id));
            }
            let tokens = tokenize(&rec.text, &vocabulary);
            passages.push(Passage {
                id: rec.id,
                text: rec.text,
                tokens,
            });
        }
        Ok(Corpus {
            passages,
            vocabulary,
            index_of,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PassageRecord {
    id: PassageId,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ExampleRecord {
    id: usize,
    context: String,
    target: String,
    gold_passage_id: Option<PassageId>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads a passage corpus; the vocabulary covers passage texts only.
/// Use [`load_dataset`] when examples will be tokenized too.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let raw: Vec<PassageRecord> = read_jsonl(path.as_ref())?;
    let mut vocab = Vocabulary::new();
    for rec in &raw {
        vocab.absorb(&rec.text);
    }
    Corpus::from_parts(raw, vocab)
}

fn examples_from_records(records: Vec<ExampleRecord>, corpus: &Corpus) -> Result<Vec<Example>> {
    records
        .into_iter()
        .map(|rec| {
            if let Some(gold) = rec.gold_passage_id {
                if !corpus.contains(gold) {
                    return Err(Error::DanglingGoldPassage {
                        example_id: rec.id,
                        passage_id: gold,
                    });
                }
            }
            if rec.target.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "example {} has an empty target",
                    rec.id
                )));
            }
            let context_tokens = tokenize(&rec.context, &corpus.vocabulary);
            let target_tokens = tokenize(&rec.target, &corpus.vocabulary);
            Ok(Example {
                id: rec.id,
                context: rec.context,
                target: rec.target,
                gold_passage_id: rec.gold_passage_id,
                context_tokens,
                target_tokens,
            })
        })
        .collect()
}

/// Loads examples against an already-built corpus. Words absent from the
/// corpus vocabulary tokenize to UNK; gold ids must exist in the corpus.
pub fn load_examples(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<Example>> {
    let raw: Vec<ExampleRecord> = read_jsonl(path.as_ref())?;
    examples_from_records(raw, corpus)
}

/// Loads passages and examples together, building one vocabulary over both
/// texts (passages first, then examples, first-seen order).
pub fn load_dataset(
    passages_path: impl AsRef<Path>,
    examples_path: impl AsRef<Path>,
) -> Result<(Corpus, Vec<Example>)> {
    let raw_passages: Vec<PassageRecord> = read_jsonl(passages_path.as_ref())?;
    let raw_examples: Vec<ExampleRecord> = read_jsonl(examples_path.as_ref())?;
    let mut vocab = Vocabulary::new();
    for rec in &raw_passages {
        vocab.absorb(&rec.text);
    }
    for rec in &raw_examples {
        vocab.absorb(&rec.context);
        vocab.absorb(&rec.target);
    }
    let corpus = Corpus::from_parts(raw_passages, vocab)?;
    let examples = examples_from_records(raw_examples, &corpus)?;
    Ok((corpus, examples))
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let records: Vec<PassageRecord> = corpus
        .passages
        .iter()
        .map(|p| PassageRecord {
            id: p.id,
            text: p.text.clone(),
        })
        .collect();
    write_jsonl(path.as_ref(), &records)
}

pub fn save_examples(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let records: Vec<ExampleRecord> = examples
        .iter()
        .map(|e| ExampleRecord {
            id: e.id,
            context: e.context.clone(),
            target: e.target.clone(),
            gold_passage_id: e.gold_passage_id,
        })
        .collect();
    write_jsonl(path.as_ref(), &records)
}
