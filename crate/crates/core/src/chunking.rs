//! Sentence splitting and sliding-window chunking of taught text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid chunking policy: {0}")]
pub struct InvalidPolicy(String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingPolicy {
    pub max_sentences_per_chunk: usize,
    pub overlap_sentences: usize,
    pub max_chars: usize,
}

impl Default for ChunkingPolicy {
    fn default() -> Self {
        Self { max_sentences_per_chunk: 3, overlap_sentences: 1, max_chars: 480 }
    }
}

impl ChunkingPolicy {
    pub fn new(
        max_sentences_per_chunk: usize,
        overlap_sentences: usize,
        max_chars: usize,
    ) -> Result<Self, InvalidPolicy> {
        let policy = Self { max_sentences_per_chunk, overlap_sentences, max_chars };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), InvalidPolicy> {
        if self.max_sentences_per_chunk == 0 {
            return Err(InvalidPolicy("max_sentences_per_chunk must be positive".into()));
        }
        if self.overlap_sentences >= self.max_sentences_per_chunk {
            return Err(InvalidPolicy("overlap_sentences must be smaller than max_sentences_per_chunk".into()));
        }
        if self.max_chars == 0 {
            return Err(InvalidPolicy("max_chars must be positive".into()));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.max_sentences_per_chunk - self.overlap_sentences
    }
}

fn is_ascii_terminal(ch: char) -> bool {
    matches!(ch, '.' | '!' | '?')
}

// Full-width terminals end a sentence even without trailing whitespace;
// CJK text does not put spaces between sentences.
fn is_fullwidth_terminal(ch: char) -> bool {
    matches!(ch, '。' | '！' | '？' | '．')
}

/// Splits `text` into trimmed sentences, each keeping its terminal
/// punctuation. Text after the last terminal forms a final sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, ch)) = chars.next() {
        let ends = is_fullwidth_terminal(ch)
            || (is_ascii_terminal(ch) && chars.peek().is_none_or(|&(_, next)| next.is_whitespace()));
        if ends {
            let stop = i + ch.len_utf8();
            let sentence = text[start..stop].trim();
            if !sentence.is_empty() {
                out.push(sentence);
            }
            start = stop;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Splits `text` into overlapping sentence windows bounded by
/// `policy.max_chars`.
///
/// ```
/// use infohub_core::chunking::{chunk_text, ChunkingPolicy};
/// let policy = ChunkingPolicy::new(2, 1, 480).unwrap();
/// assert_eq!(chunk_text("A. B. C.", &policy), vec!["A. B.", "B. C."]);
/// ```
pub fn chunk_text(text: &str, policy: &ChunkingPolicy) -> Vec<String> {
    let sentences = split_sentences(text);
    let mut chunks = Vec::new();
    if sentences.is_empty() {
        return chunks;
    }
    let stride = policy.stride().max(1);
    let mut start = 0;
    loop {
        let end = (start + policy.max_sentences_per_chunk).min(sentences.len());
        pack_window(&sentences[start..end], policy.max_chars, &mut chunks);
        if end == sentences.len() {
            break;
        }
        start += stride;
    }
    chunks
}

/// Joins a window's sentences with single spaces, breaking at sentence
/// boundaries whenever `max_chars` would be exceeded.
fn pack_window(window: &[&str], max_chars: usize, out: &mut Vec<String>) {
    let mut current = String::new();
    let mut current_chars = 0;
    for sentence in window {
        let len = sentence.chars().count();
        if len > max_chars {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
                current_chars = 0;
            }
            hard_split(sentence, max_chars, out);
            continue;
        }
        let needed = if current.is_empty() { len } else { current_chars + 1 + len };
        if needed > max_chars {
            out.push(std::mem::take(&mut current));
            current_chars = 0;
        }
        if !current.is_empty() {
            current.push(' ');
            current_chars += 1;
        }
        current.push_str(sentence);
        current_chars += len;
    }
    if !current.is_empty() {
        out.push(current);
    }
}

fn hard_split(sentence: &str, max_chars: usize, out: &mut Vec<String>) {
    let chars: Vec<char> = sentence.chars().collect();
    for piece in chars.chunks(max_chars) {
        let piece: String = piece.iter().collect();
        let piece = piece.trim();
        if !piece.is_empty() {
            out.push(piece.to_string());
        }
    }
}
