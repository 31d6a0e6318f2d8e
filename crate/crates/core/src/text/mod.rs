//! Word-level tokenization, vocabularies and emotion-labelled dialogue data.

mod meld;
mod synth;

pub use meld::{load_meld_csv, read_meld_csv};
pub use synth::{synth_corpus, synth_corpus_with, PROMPT_TEMPLATES, TOPICS};

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affect::EmotionLabel;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercase, then split on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokens re-joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// One annotated utterance of a dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub dialogue_id: u64,
    pub utterance_id: u64,
    pub speaker: String,
    pub text: String,
    pub emotion: EmotionLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keep the `max_size - 4` most frequent tokens; ties go to the
    /// lexicographically smaller token.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < RESERVED.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary max_size must be >= 5, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t))
                .collect(),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text` framed by BOS and EOS; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = vec![BOS];
        out.extend(self.encode_words(text));
        out.push(EOS);
        out
    }

    /// Token ids without BOS/EOS framing.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined tokens; PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.len() {
                return Err(Error::UnknownTokenId {
                    id,
                    size: self.len(),
                });
            }
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            words.push(self.tokens[id].as_str());
        }
        Ok(words.join(" "))
    }

    /// One token per line, in id order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tokens = f.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

/// Prompt ids for a context utterance (`None` gives a BOS-only prompt).
pub fn encode_prompt(vocab: &Vocabulary, context: Option<&str>) -> Vec<usize> {
    match context {
        Some(text) => vocab.encode(text),
        None => vec![BOS],
    }
}

/// Response ids: the words followed by EOS.
pub fn encode_response(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    let mut out = vocab.encode_words(text);
    out.push(EOS);
    out
}

/// `(previous utterance, utterance)` index pairs within each dialogue, in
/// corpus order. Dialogue openers pair with `None`.
pub fn context_pairs(utterances: &[Utterance]) -> Vec<(Option<usize>, usize)> {
    let mut out = Vec::with_capacity(utterances.len());
    for (i, u) in utterances.iter().enumerate() {
        let prev = i
            .checked_sub(1)
            .filter(|&j| utterances[j].dialogue_id == u.dialogue_id);
        out.push((prev, i));
    }
    out
}

/// Line-delimited JSON, one utterance per line.
pub fn write_utterances_jsonl(utterances: &[Utterance], mut w: impl Write) -> Result<()> {
    for u in utterances {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_utterances_jsonl(r: impl BufRead) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| Error::BadRow {
            row: i + 1,
            detail: e.to_string(),
        })?;
        out.push(u);
    }
    Ok(out)
}
