//! Records, chat-template handling, JSONL I/O, the synthetic corpus
//! generator and the semantic-ID codebook.

pub mod codebook;
pub mod synth;
pub mod tokenizer;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use tokenizer::{TokenId, EOT, MODEL, SYSTEM};

pub const PERSONA_MAX_CHARS: usize = 1000;

const SYSTEM_OPEN: &str = "<|system|>\n";
const EOT_MARK: &str = "<|eot_id|>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmRecord {
    pub uservector: Vec<f64>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefRecord {
    pub uservector: Vec<f64>,
    pub prompt: String,
    pub completion: String,
    pub label: u8,
}

/// Shared record behaviour for JSONL ingestion.
pub trait Record: Serialize + DeserializeOwned {
    fn uservector(&self) -> &[f64];

    fn check(&self) -> std::result::Result<(), String>;

    /// Normalization applied on ingestion.
    fn normalize(&mut self) {}
}

impl Record for LmRecord {
    fn uservector(&self) -> &[f64] {
        &self.uservector
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.text.is_empty() {
            return Err("field `text` is empty".into());
        }
        Ok(())
    }

    fn normalize(&mut self) {
        self.text = truncate_persona(&self.text, PERSONA_MAX_CHARS);
    }
}

impl Record for PrefRecord {
    fn uservector(&self) -> &[f64] {
        &self.uservector
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.label > 1 {
            return Err(format!("field `label` must be 0 or 1, got {}", self.label));
        }
        if self.completion.is_empty() {
            return Err("field `completion` is empty".into());
        }
        Ok(())
    }

    fn normalize(&mut self) {
        self.prompt = truncate_persona(&self.prompt, PERSONA_MAX_CHARS);
    }
}

/// Parses one record per non-blank line. Every uservector must be finite and
/// share the first record's length.
pub fn read_jsonl<T: Record>(reader: impl BufRead, path: &Path) -> Result<Vec<T>> {
    let schema = |line: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out: Vec<T> = Vec::new();
    let mut lines = 0;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        lines = n;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: T = serde_json::from_str(&line).map_err(|e| schema(n, e.to_string()))?;
        rec.check().map_err(|m| schema(n, m))?;
        if rec.uservector().iter().any(|x| !x.is_finite()) {
            return Err(schema(n, "uservector has a non-finite entry".into()));
        }
        if let Some(first) = out.first() {
            if first.uservector().len() != rec.uservector().len() {
                return Err(schema(
                    n,
                    format!(
                        "uservector has length {}, earlier records have {}",
                        rec.uservector().len(),
                        first.uservector().len()
                    ),
                ));
            }
        }
        rec.normalize();
        out.push(rec);
    }
    log::info!("{}: {} records from {lines} lines", path.display(), out.len());
    Ok(out)
}

pub fn load_jsonl<T: Record>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(f), path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Byte range of a leading `<|system|>` block, through its `<|eot_id|>` and
/// one following newline.
fn system_block(text: &str) -> Option<(usize, std::ops::Range<usize>)> {
    let rest = text.strip_prefix(SYSTEM_OPEN)?;
    let close = rest.find(EOT_MARK)?;
    let content_start = SYSTEM_OPEN.len();
    let mut content_end = content_start + close;
    if text[..content_end].ends_with('\n') && content_end > content_start {
        content_end -= 1;
    }
    let mut end = content_start + close + EOT_MARK.len();
    if text[end..].starts_with('\n') {
        end += 1;
    }
    Some((end, content_start..content_end))
}

/// Splits a leading system block off `text`: `(block, remainder)`.
pub fn split_system(text: &str) -> (Option<&str>, &str) {
    match system_block(text) {
        Some((end, _)) => (Some(&text[..end]), &text[end..]),
        None => (None, text),
    }
}

/// The profile string inside a leading system block.
pub fn persona(text: &str) -> Option<&str> {
    system_block(text).map(|(_, r)| &text[r])
}

/// Caps the system-block profile at `max_chars` characters; text without a
/// system block is returned unchanged.
pub fn truncate_persona(text: &str, max_chars: usize) -> String {
    match system_block(text) {
        Some((_, r)) => match text[r.clone()].char_indices().nth(max_chars) {
            Some((cut, _)) => format!("{}{}", &text[..r.start + cut], &text[r.end..]),
            None => text.to_owned(),
        },
        None => text.to_owned(),
    }
}

/// Index of the first response token: the token after the last `<|model|>`
/// marker, skipping one newline. Without a marker the whole sequence is the
/// response.
pub fn response_start(tokens: &[TokenId]) -> usize {
    match tokens.iter().rposition(|&t| t == MODEL) {
        Some(m) if tokens.get(m + 1) == Some(&TokenId::from(b'\n')) => m + 2,
        Some(m) => m + 1,
        None => 0,
    }
}

/// Number of tokens a leading system block occupies.
pub fn system_token_len(tokens: &[TokenId]) -> usize {
    if tokens.first() != Some(&SYSTEM) {
        return 0;
    }
    match tokens.iter().position(|&t| t == EOT) {
        Some(e) if tokens.get(e + 1) == Some(&TokenId::from(b'\n')) => e + 2,
        Some(e) => e + 1,
        None => 0,
    }
}

/// Tokenized pretraining sequences. Each text keeps its leading profile
/// block with probability `keep_profile`, so the LM learns to read profiles
/// and to cope without them.
pub fn pretraining_sequences<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    keep_profile: f64,
    seed: u64,
) -> Vec<Vec<TokenId>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    texts
        .into_iter()
        .map(|t| {
            let keep = rng.random::<f64>() < keep_profile;
            let t = if keep { t } else { split_system(t).1 };
            tokenizer::ByteTokenizer.encode(t)
        })
        .collect()
}

/// A tokenized prompt/response pair ready for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    /// Index of the first response token in `tokens`.
    pub first_target: usize,
}

impl Example {
    pub fn new(tokens: Vec<TokenId>, first_target: usize) -> Self {
        Self { tokens, first_target }
    }

    pub fn from_text(tokens: Vec<TokenId>) -> Self {
        let first_target = response_start(&tokens);
        Self { tokens, first_target }
    }

    pub fn targets(&self) -> &[TokenId] {
        &self.tokens[self.first_target..]
    }

    /// Drops prompt tokens from the left until `extra_rows + len` fits in
    /// `max_len`. The response is never cut.
    pub fn fit(mut self, max_len: usize, extra_rows: usize) -> Result<Self> {
        let budget = max_len.saturating_sub(extra_rows);
        let response = self.tokens.len() - self.first_target;
        if response > budget || response == 0 {
            return Err(Error::Length {
                len: response + extra_rows,
                max: max_len,
            });
        }
        let excess = self.tokens.len().saturating_sub(budget);
        if excess > 0 {
            self.tokens.drain(..excess);
            self.first_target -= excess;
        }
        Ok(self)
    }
}
