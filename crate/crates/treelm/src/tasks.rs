//! Synthetic data: byte-level tokenization, a motif-bearing Markov corpus,
//! passkey samples, and context/running-text splitting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Digits in a generated pass key (the desk recipe's fixed width).
pub const KEY_DIGITS: usize = 4;

// ── Byte tokenizer ───────────────────────────────────────────────────

pub fn byte_tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::input(format!("token id {id} is not a byte")))
        })
        .collect()
}

// ── Token split ──────────────────────────────────────────────────────

/// The raw sequence partitioned into past context and running text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSplit {
    pub x_c: Vec<u32>,
    pub x_d: Vec<u32>,
}

/// `x_c` = all but the last `running_len` tokens, `x_d` = the rest.
pub fn split_context_running(x: &[u32], running_len: usize) -> Result<TokenSplit> {
    if running_len == 0 || running_len > x.len() {
        return Err(Error::input(format!(
            "running length {running_len} invalid for a sequence of {} tokens",
            x.len()
        )));
    }
    let boundary = x.len() - running_len;
    Ok(TokenSplit {
        x_c: x[..boundary].to_vec(),
        x_d: x[boundary..].to_vec(),
    })
}

// ── Markov corpus with long-range motifs ─────────────────────────────

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
/// Fresh motif inventory every section, so motif identity is a long-range,
/// document-local fact.
const SECTION_CHARS: usize = 4096;
const MOTIFS_PER_SECTION: usize = 5;
const MOTIF_MIN: usize = 9;
const MOTIF_MAX: usize = 13;
/// Mean gap between motif injections.
const MOTIF_PERIOD: usize = 64;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Seeded character-level Markov step: the context window hashes to a small
/// set of allowed successors with fixed weights, giving text that is
/// locally predictable without any stored transition table.
fn chain_next(context: &[u8], seed: u64, rng: &mut ChaCha12Rng) -> u8 {
    let mut h = seed;
    for &c in context {
        h = splitmix64(h ^ c as u64);
    }
    // Four candidate successors, weights 0.4/0.3/0.2/0.1.
    let r: f64 = rng.gen();
    let slot = if r < 0.4 {
        0
    } else if r < 0.7 {
        1
    } else if r < 0.9 {
        2
    } else {
        3
    };
    let choice = splitmix64(h ^ (slot as u64).wrapping_mul(0xD6E8FEB86659FD93));
    ALPHABET[(choice % ALPHABET.len() as u64) as usize]
}

fn gen_motif(rng: &mut ChaCha12Rng) -> String {
    let len = rng.gen_range(MOTIF_MIN..=MOTIF_MAX);
    let mut s = String::with_capacity(len + 2);
    s.push(' ');
    for _ in 0..len {
        // Letters only: motifs stay distinguishable from word boundaries.
        s.push(ALPHABET[rng.gen_range(0..26)] as char);
    }
    s.push(' ');
    s
}

/// Deterministic corpus with long-range motif structure, plus the motif
/// inventory per section for verification.
pub fn gen_markov_corpus_with_motifs(
    seed: u64,
    n_chars: usize,
    order: usize,
) -> Result<(String, Vec<Vec<String>>)> {
    if !(1..=3).contains(&order) {
        return Err(Error::input(format!("markov order must lie in 1..=3, got {order}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out: Vec<u8> = Vec::with_capacity(n_chars + MOTIF_MAX + 2);
    let mut sections: Vec<Vec<String>> = Vec::new();
    let mut section_motifs: Vec<String> = Vec::new();
    let mut next_injection = 0usize;

    while out.len() < n_chars {
        if out.len() % SECTION_CHARS == 0 || section_motifs.is_empty() {
            if out.len() / SECTION_CHARS >= sections.len() {
                section_motifs = (0..MOTIFS_PER_SECTION).map(|_| gen_motif(&mut rng)).collect();
                sections.push(section_motifs.clone());
                next_injection = out.len() + rng.gen_range(MOTIF_PERIOD / 2..MOTIF_PERIOD);
            }
        }
        if out.len() >= next_injection {
            let motif = &section_motifs[rng.gen_range(0..MOTIFS_PER_SECTION)];
            out.extend_from_slice(motif.as_bytes());
            next_injection =
                out.len() + rng.gen_range(MOTIF_PERIOD / 2..MOTIF_PERIOD + MOTIF_PERIOD / 2);
        } else {
            let start = out.len().saturating_sub(order);
            let c = chain_next(&out[start..].to_vec(), seed, &mut rng);
            out.push(c);
        }
    }
    out.truncate(n_chars);
    let text = String::from_utf8(out).expect("alphabet is ASCII");
    Ok((text, sections))
}

pub fn gen_markov_corpus(seed: u64, n_chars: usize, order: usize) -> Result<String> {
    gen_markov_corpus_with_motifs(seed, n_chars, order).map(|(text, _)| text)
}

// ── Passkey samples ──────────────────────────────────────────────────

const FILLER: &[&str] = &[
    "The grass is green. ",
    "The sky is blue. ",
    "The sun is yellow. ",
    "Here we go. ",
    "There and back again. ",
];
const KEY_PREFIX: &str = "The pass key is ";
const QUERY_TEXT: &str = "\nWhat is the pass key? The pass key is ";

/// A single planted-key retrieval case.
#[derive(Debug, Clone)]
pub struct PasskeySample {
    pub full_text: Vec<u32>,
    pub key: String,
    /// Byte span of the first key occurrence in `full_text`.
    pub key_span: (usize, usize),
    pub query: Vec<u32>,
    pub answer: Vec<u32>,
    /// Requested placement fraction (kept for accuracy bucketing).
    pub position: f64,
    /// Offset of the answer digits inside the running text.
    pub response_start: usize,
    pub running_len: usize,
}

/// JSONL record for passkey files.
#[derive(Debug, Serialize, Deserialize)]
pub struct PasskeyRecord {
    pub text: String,
    pub key: String,
    pub key_start: usize,
    pub key_end: usize,
    pub query: String,
    pub answer: String,
}

impl PasskeySample {
    pub fn to_record(&self) -> PasskeyRecord {
        PasskeyRecord {
            text: String::from_utf8(detokenize(&self.full_text).expect("bytes")).expect("ascii"),
            key: self.key.clone(),
            key_start: self.key_span.0,
            key_end: self.key_span.1,
            query: String::from_utf8(detokenize(&self.query).expect("bytes")).expect("ascii"),
            answer: self.key.clone(),
        }
    }
}

fn filler_bytes(n: usize, cursor: &mut usize) -> Vec<u8> {
    // Endless filler stream, cut wherever needed; `cursor` carries the
    // stream position across calls so sentences continue naturally.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let sentence = FILLER[(*cursor / 64) % FILLER.len()].as_bytes();
        let within = *cursor % 64 % sentence.len();
        out.push(sentence[within]);
        *cursor += 1;
    }
    out
}

/// Plants `The pass key is <digits>.` (stated twice for redundancy under
/// downsampling) into filler at the requested relative position of the past
/// context, and appends the query and gold answer as the sequence tail.
pub fn gen_passkey_sample(
    total_len: usize,
    key_digits: usize,
    position: f64,
    seed: u64,
    running_len: usize,
) -> Result<PasskeySample> {
    if !(0.0..=1.0).contains(&position) {
        return Err(Error::input(format!("position fraction {position} outside [0, 1]")));
    }
    if key_digits == 0 {
        return Err(Error::input("key must have at least one digit"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let key: String = (0..key_digits)
        .map(|_| char::from(b'0' + rng.gen_range(0..10u8)))
        .collect();
    let key_sentence = format!("{KEY_PREFIX}{key}. Remember it. {key} is the pass key. ");
    let answer_len = key_digits + 1; // digits plus the closing period
    let qa_len = QUERY_TEXT.len() + answer_len;

    if running_len < qa_len + 8 || running_len >= total_len {
        return Err(Error::input(format!(
            "running length {running_len} cannot hold the query and answer ({qa_len} bytes)"
        )));
    }
    let context_len = total_len - running_len;
    if context_len < key_sentence.len() {
        return Err(Error::input(format!(
            "context of {context_len} bytes cannot hold the key sentence ({} bytes)",
            key_sentence.len()
        )));
    }

    let key_at = ((context_len - key_sentence.len()) as f64 * position).floor() as usize;
    let mut text = Vec::with_capacity(total_len);
    let mut cursor = 0usize;
    text.extend(filler_bytes(key_at, &mut cursor));
    let key_span = (text.len() + KEY_PREFIX.len(), text.len() + KEY_PREFIX.len() + key_digits);
    text.extend_from_slice(key_sentence.as_bytes());
    let pad = total_len - qa_len - text.len();
    text.extend(filler_bytes(pad, &mut cursor));
    text.extend_from_slice(QUERY_TEXT.as_bytes());
    text.extend_from_slice(key.as_bytes());
    text.push(b'.');
    debug_assert_eq!(text.len(), total_len);

    let response_start = running_len - answer_len;
    Ok(PasskeySample {
        full_text: byte_tokenize(&text),
        query: byte_tokenize(QUERY_TEXT.as_bytes()),
        answer: byte_tokenize(key.as_bytes()),
        key,
        key_span,
        position,
        response_start,
        running_len,
    })
}
