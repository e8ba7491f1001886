//! Binary codes with a pairwise Hamming floor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TheoryError;

/// Fixed-length binary word stored as 64-bit blocks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Word {
    len: usize,
    blocks: Vec<u64>,
}

impl Word {
    pub fn zeros(len: usize) -> Self {
        Self { len, blocks: vec![0; len.div_ceil(64)] }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut w = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                w.blocks[i / 64] |= 1 << (i % 64);
            }
        }
        w
    }

    fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut w = Self::zeros(len);
        for b in w.blocks.iter_mut() {
            *b = rng.random();
        }
        if !len.is_multiple_of(64) {
            let last = w.blocks.len() - 1;
            w.blocks[last] &= (1u64 << (len % 64)) - 1;
        }
        w
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        self.blocks[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn weight(&self) -> usize {
        self.blocks.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn hamming(&self, other: &Word) -> usize {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| (a ^ b).count_ones() as usize).sum()
    }

    pub fn to_bit_string(&self) -> String {
        (0..self.len).map(|i| if self.bit(i) { '1' } else { '0' }).collect()
    }
}

/// `⌈len / 8⌉`.
pub fn hamming_floor(len: usize) -> usize {
    len.div_ceil(8)
}

/// `log2` of the Gilbert–Varshamov count `2^n / Σ_{i<dist} C(n, i)`.
pub fn gilbert_varshamov_log2(len: usize, dist: usize) -> f64 {
    let mut log_binom = 0.0_f64;
    let mut terms = Vec::with_capacity(dist);
    for i in 0..dist {
        if i > 0 {
            log_binom += ((len - i + 1) as f64).log2() - (i as f64).log2();
        }
        terms.push(log_binom);
    }
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ball = top + terms.iter().map(|t| (t - top).exp2()).sum::<f64>().log2();
    len as f64 - ball
}

/// Randomized greedy code: starts from the zero word and accepts random
/// candidates at distance `≥ ⌈len/8⌉` from every accepted word. Every returned
/// pair is then checked exhaustively.
pub fn vg_codebook<R: Rng + ?Sized>(
    len: usize,
    target: usize,
    candidates: usize,
    rng: &mut R,
) -> Result<Vec<Word>, TheoryError> {
    if len < 8 {
        return Err(TheoryError::Codebook(format!("word length {len} below 8")));
    }
    let floor = hamming_floor(len);
    let guarantee = ((len.div_ceil(8)) as f64).max(gilbert_varshamov_log2(len, floor));
    if target >= 2 && (target as f64).log2() > guarantee + 1e-12 {
        return Err(TheoryError::Codebook(format!(
            "target {target} exceeds the guaranteed code size 2^{guarantee:.2} for length {len}"
        )));
    }
    let mut words = vec![Word::zeros(len)];
    let mut tried = 0;
    while words.len() < target && tried < candidates {
        tried += 1;
        let w = Word::random(len, rng);
        if words.iter().all(|o| o.hamming(&w) >= floor) {
            words.push(w);
        }
    }
    if words.len() < target {
        return Err(TheoryError::Codebook(format!(
            "found {} of {target} words after {candidates} candidates",
            words.len()
        )));
    }
    verify_hamming(&words, floor)?;
    Ok(words)
}

pub fn min_pairwise_hamming(words: &[Word]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for a in 0..words.len() {
        for b in a + 1..words.len() {
            let h = words[a].hamming(&words[b]);
            best = Some(best.map_or(h, |x| x.min(h)));
        }
    }
    best
}

pub fn verify_hamming(words: &[Word], floor: usize) -> Result<(), TheoryError> {
    for a in 0..words.len() {
        for b in a + 1..words.len() {
            let h = words[a].hamming(&words[b]);
            if h < floor {
                return Err(TheoryError::Codebook(format!("words {a} and {b} are {h} apart, floor {floor}")));
            }
        }
    }
    Ok(())
}
