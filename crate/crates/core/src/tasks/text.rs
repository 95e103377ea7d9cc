//! Character-level language modelling data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Batch, Inputs, Targets};
use crate::search::Split;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Characters per example; each example predicts `seq_len` next characters.
    pub seq_len: usize,
    pub batch_size: usize,
    /// Examples per split.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Reserve a class for characters that do not occur in the train split.
    pub unk: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { seq_len: 32, batch_size: 50, train: 4000, val: 500, test: 500, unk: true }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.batch_size == 0 || self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("text sizes and counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextDataset {
    /// Sorted characters of the train split; a character's id is its index.
    pub vocab: Vec<char>,
    pub tokens: Vec<usize>,
    /// Token ranges of the three splits.
    pub bounds: [(usize, usize); 3],
    pub seq_len: usize,
    pub batch_size: usize,
    pub unk: bool,
}

impl TextDataset {
    /// Splits `text` into three contiguous blocks of `count * seq_len + 1`
    /// characters and builds the vocabulary from the first.
    pub fn from_text(text: &str, cfg: &TextConfig) -> Result<Self> {
        cfg.validate()?;
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(Error::Precondition("empty text".into()));
        }
        let span = |n: usize| n * cfg.seq_len + 1;
        let need = span(cfg.train) + span(cfg.val) + span(cfg.test);
        if chars.len() < need {
            return Err(Error::Config(format!(
                "text has {} characters, the split counts need {need}",
                chars.len()
            )));
        }
        let mut bounds = [(0, 0); 3];
        let mut at = 0;
        for (b, n) in bounds.iter_mut().zip([cfg.train, cfg.val, cfg.test]) {
            *b = (at, at + span(n));
            at += span(n);
        }
        let mut vocab: Vec<char> = chars[bounds[0].0..bounds[0].1].to_vec();
        vocab.sort_unstable();
        vocab.dedup();
        let index: BTreeMap<char, usize> = vocab.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let unk_id = vocab.len();
        let mut tokens = Vec::with_capacity(at);
        for (pos, c) in chars[..at].iter().enumerate() {
            match index.get(c) {
                Some(&id) => tokens.push(id),
                None if cfg.unk => tokens.push(unk_id),
                None => {
                    return Err(Error::Config(format!(
                        "character {c:?} at position {pos} is not in the train vocabulary and unk is off"
                    )))
                }
            }
        }
        Ok(TextDataset { vocab, tokens, bounds, seq_len: cfg.seq_len, batch_size: cfg.batch_size, unk: cfg.unk })
    }

    /// Output classes: the vocabulary plus the unknown class if enabled.
    pub fn classes(&self) -> usize {
        self.vocab.len() + usize::from(self.unk)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab.get(i).copied().unwrap_or('\u{FFFD}')).collect()
    }

    fn split_range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.bounds[0],
            Split::Val => self.bounds[1],
            Split::Test => self.bounds[2],
        }
    }

    pub fn example_count(&self, split: Split) -> usize {
        let (a, b) = self.split_range(split);
        (b - a - 1) / self.seq_len
    }

    pub fn batches(&self, split: Split) -> Vec<Batch> {
        self.batches_of(split, self.batch_size)
    }

    pub fn batches_of(&self, split: Split, batch_size: usize) -> Vec<Batch> {
        let (a, _) = self.split_range(split);
        let starts: Vec<usize> = (0..self.example_count(split)).map(|i| a + i * self.seq_len).collect();
        starts
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let ids = |offset: usize| -> Vec<Vec<usize>> {
                    (0..self.seq_len)
                        .map(|s| chunk.iter().map(|&st| self.tokens[st + s + offset]).collect())
                        .collect()
                };
                Batch { inputs: Inputs::Tokens(ids(0)), targets: Targets::Tokens(ids(1)) }
            })
            .collect()
    }
}

pub fn load_text(path: &Path, cfg: &TextConfig) -> Result<TextDataset> {
    let text = std::fs::read_to_string(path)?;
    TextDataset::from_text(&text, cfg)
}
