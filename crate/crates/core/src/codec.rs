//! Binary messages, the marker dictionary, and threshold-based identification
//! of decoded bit vectors.
//!
//! A decoded marker is accepted when the best dictionary entry matches at
//! least `threshold` of the hard-thresholded bits (default 0.80); ties between
//! equally matching entries resolve to the lowest id.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("requested {requested} messages but the {n_bits}-bit code space holds only {capacity}")]
    Capacity { requested: u64, n_bits: usize, capacity: u64 },
    #[error("message length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("dictionary is empty")]
    EmptyDictionary,
    #[error("duplicate dictionary entry at line {line}")]
    DuplicateEntry { line: usize },
    #[error("invalid dictionary line {line}: {reason}")]
    InvalidLine { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed-length binary code naming a marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Self {
        assert!(bits.iter().all(|&b| b <= 1), "bits must be 0 or 1");
        Message { bits }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bits as `0.0` / `1.0` reals, the form the generator consumes.
    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Option<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(0),
                '1' => bits.push(1),
                _ => return None,
            }
        }
        Some(Message { bits })
    }
}

/// Fraction of matching bits: `1 - hamming/len`.
pub fn hamming_confidence(a: &Message, b: &Message) -> Result<f64, CodecError> {
    if a.len() != b.len() {
        return Err(CodecError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let dist = a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count();
    Ok(1.0 - dist as f64 / a.len() as f64)
}

/// Draw `count` distinct messages uniformly without replacement.
/// Deterministic for a fixed seed.
pub fn sample_messages(count: u64, n_bits: usize, rng_seed: u64) -> Result<Vec<Message>, CodecError> {
    let capacity: u64 = if n_bits >= 64 { u64::MAX } else { 1u64 << n_bits };
    if count > capacity {
        return Err(CodecError::Capacity { requested: count, n_bits, capacity });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    if n_bits <= 24 && count * 4 >= capacity {
        // dense regime: shuffle the whole code space
        let mut codes: Vec<u64> = (0..capacity).collect();
        codes.shuffle(&mut rng);
        codes.truncate(count as usize);
        return Ok(codes.into_iter().map(|c| code_to_message(c, n_bits)).collect());
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count as usize);
    while out.len() < count as usize {
        let code: u64 = if n_bits >= 64 { rng.gen() } else { rng.gen_range(0..capacity) };
        if seen.insert(code) {
            out.push(code_to_message(code, n_bits));
        }
    }
    Ok(out)
}

/// All `2^n_bits` codes in ascending order (small code spaces only).
pub fn enumerate_messages(n_bits: usize) -> Vec<Message> {
    assert!(n_bits <= 20, "enumeration is meant for small code spaces");
    (0..1u64 << n_bits).map(|c| code_to_message(c, n_bits)).collect()
}

fn code_to_message(code: u64, n_bits: usize) -> Message {
    Message::new((0..n_bits).map(|i| ((code >> i) & 1) as u8).collect())
}

/// Identification verdict for one decoded bit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationResult {
    pub matched_id: Option<usize>,
    pub confidence: f64,
    pub soft_bits: Vec<f64>,
}

/// Ordered list of unique messages; id = position.
#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: Vec<Message>,
    index: HashMap<Vec<u8>, usize>,
}

impl Dictionary {
    pub fn new(entries: Vec<Message>) -> Result<Self, CodecError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, m) in entries.iter().enumerate() {
            if index.insert(m.bits.clone(), i).is_some() {
                return Err(CodecError::DuplicateEntry { line: i });
            }
        }
        Ok(Dictionary { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_bits(&self) -> usize {
        self.entries.first().map_or(0, |m| m.len())
    }

    pub fn entry(&self, id: usize) -> &Message {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[Message] {
        &self.entries
    }

    pub fn lookup(&self, m: &Message) -> Option<usize> {
        self.index.get(&m.bits).copied()
    }

    /// Hard-threshold soft bits at 0.5, find the best-matching entry and
    /// accept iff its matching-bit fraction reaches `threshold`.
    pub fn identify(&self, soft_bits: &[f64], threshold: f64) -> Result<IdentificationResult, CodecError> {
        if self.entries.is_empty() {
            return Err(CodecError::EmptyDictionary);
        }
        let n = self.n_bits();
        if soft_bits.len() != n {
            return Err(CodecError::LengthMismatch { a: soft_bits.len(), b: n });
        }
        let hard: Vec<u8> = soft_bits.iter().map(|&b| if b >= 0.5 { 1 } else { 0 }).collect();
        let mut best_id = 0;
        let mut best_match = 0usize;
        for (id, entry) in self.entries.iter().enumerate() {
            let m = entry.bits.iter().zip(&hard).filter(|(a, b)| a == b).count();
            if m > best_match {
                best_match = m;
                best_id = id;
            }
        }
        let confidence = best_match as f64 / n as f64;
        Ok(IdentificationResult {
            matched_id: (confidence >= threshold).then_some(best_id),
            confidence,
            soft_bits: soft_bits.to_vec(),
        })
    }

    /// One `{0,1}^n` string per line, id = line number.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for m in &self.entries {
            writeln!(f, "{}", m.to_bitstring())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut entries = Vec::new();
        let mut n_bits = None;
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let m = Message::from_bitstring(line).ok_or_else(|| CodecError::InvalidLine {
                line: i,
                reason: "non-binary character".into(),
            })?;
            if let Some(n) = n_bits {
                if m.len() != n {
                    return Err(CodecError::InvalidLine {
                        line: i,
                        reason: format!("length {} differs from first line ({n})", m.len()),
                    });
                }
            } else {
                n_bits = Some(m.len());
            }
            entries.push(m);
        }
        Dictionary::new(entries)
    }
}
