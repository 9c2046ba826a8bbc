//! Labeled examples and the JSON-lines dataset format.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Misaligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Trigger,
}

/// Tokenized prompt/response pair with a ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: u64,
    pub prompt_tokens: Vec<usize>,
    pub response_tokens: Vec<usize>,
    pub label: Label,
    pub split: Split,
}

impl LabeledExample {
    /// Full token sequence: prompt followed by response.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.response_tokens);
        t
    }

    /// Index of the first response token in the full sequence.
    pub fn resp_start(&self) -> usize {
        self.prompt_tokens.len()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        for &t in self.prompt_tokens.iter().chain(&self.response_tokens) {
            if t >= vocab {
                return Err(CoreError::TokenOutOfRange { token: t, vocab });
            }
        }
        if self.split == Split::Train && self.response_tokens.is_empty() {
            return Err(CoreError::EmptyResponse { id: self.id });
        }
        Ok(())
    }
}

pub fn write_jsonl(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut file, ex)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
