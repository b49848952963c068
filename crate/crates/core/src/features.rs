//! Hashed sparse features over (state, action) pairs.
//!
//! States and actions enter as canonical strings, get tokenized into
//! word-level tokens, and every (state token x action token) conjunction is
//! hashed into a fixed-dimension sparse vector. Index 0 is a constant bias
//! feature, so every vector has at least one nonzero. The same featurizer
//! serves the policy (state + action) and the value model (state only).

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Default feature-hashing dimension.
pub const DEFAULT_FEATURE_DIM: usize = 1 << 16;

/// How many trailing trace steps get dedicated recency tokens.
const RECENCY_WINDOW: usize = 2;

/// Sparse feature vector: sorted (index, value) pairs over `[0, dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector<T> {
    entries: Vec<(u32, T)>,
}

impl<T: Scalar> FeatureVector<T> {
    fn from_indices(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        let mut entries: Vec<(u32, T)> = Vec::with_capacity(indices.len());
        for idx in indices {
            match entries.last_mut() {
                Some((last, v)) if *last == idx => *v += T::one(),
                _ => entries.push((idx, T::one())),
            }
        }
        FeatureVector { entries }
    }

    pub fn entries(&self) -> &[(u32, T)] {
        &self.entries
    }

    pub fn dot(&self, weights: &[T]) -> T {
        let mut acc = T::zero();
        for &(idx, v) in &self.entries {
            acc += weights[idx as usize] * v;
        }
        acc
    }

    /// weights[idx] += scale * value for every entry.
    pub fn add_scaled_into(&self, weights: &mut [T], scale: T) {
        for &(idx, v) in &self.entries {
            weights[idx as usize] += scale * v;
        }
    }

    /// Sparse linear combination a + coeff * b, used for gradient algebra.
    pub fn axpy(a: &FeatureVector<T>, coeff: T, b: &FeatureVector<T>) -> FeatureVector<T> {
        let mut entries = Vec::with_capacity(a.entries.len() + b.entries.len());
        let (mut i, mut j) = (0, 0);
        while i < a.entries.len() || j < b.entries.len() {
            let next_a = a.entries.get(i);
            let next_b = b.entries.get(j);
            match (next_a, next_b) {
                (Some(&(ia, va)), Some(&(ib, vb))) if ia == ib => {
                    entries.push((ia, va + coeff * vb));
                    i += 1;
                    j += 1;
                }
                (Some(&(ia, va)), Some(&(ib, _))) if ia < ib => {
                    entries.push((ia, va));
                    i += 1;
                }
                (Some(_), Some(&(ib, vb))) => {
                    entries.push((ib, coeff * vb));
                    j += 1;
                }
                (Some(&(ia, va)), None) => {
                    entries.push((ia, va));
                    i += 1;
                }
                (None, Some(&(ib, vb))) => {
                    entries.push((ib, coeff * vb));
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        FeatureVector { entries }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, v) in &mut self.entries {
            *v *= factor;
        }
    }

    pub fn l2_norm(&self) -> T {
        self.entries
            .iter()
            .map(|&(_, v)| v * v)
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn zero() -> Self {
        FeatureVector { entries: Vec::new() }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a tag byte plus the token bytes. Platform-stable.
fn token_hash(tag: u8, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    h ^= tag as u64;
    h = h.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64-style mix for combining two token hashes into one index.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of an arbitrary string, exposed for seed derivation.
pub fn stable_hash(s: &str) -> u64 {
    token_hash(b'#', s.as_bytes())
}

/// Derive an independent RNG seed from a base seed and a salt string.
pub fn derive_seed(base: u64, salt: &str) -> u64 {
    mix(base, stable_hash(salt))
}

const NO_CONJ: u64 = 0x517c_c1b7_2722_0a95;

/// Subjects mentioned as `q<digits>` in a display: the first is the step's
/// subject, the rest are references. Inert for displays without the pattern.
fn q_indices(display: &str) -> Vec<i64> {
    let bytes = display.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'q' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit() {
            let mut j = i + 1;
            let mut value: i64 = 0;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                value = value * 10 + (bytes[j] - b'0') as i64;
                j += 1;
            }
            out.push(value);
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Tokenized description of one side of a (state, action) pair.
#[derive(Debug, Clone, Default)]
pub struct TokenSet {
    hashes: Vec<u64>,
    /// Subjects already planned (first q-index per trace display).
    planned: Vec<i64>,
    /// Subject of the most recent step.
    last_subject: Option<i64>,
    /// Subject and references of the action display.
    subject: Option<i64>,
    refs: Vec<i64>,
    solution_kind: bool,
}

/// State tokens: a bag of words over all trace displays, recency tokens for
/// the last few steps, and depth/phase markers.
pub fn state_tokens(trace_displays: &[&str], solved: bool) -> TokenSet {
    let mut hashes = Vec::with_capacity(8 + trace_displays.len() * 6);
    let depth = trace_displays.len().min(31) as u8;
    hashes.push(token_hash(b'd', &[depth]));
    hashes.push(token_hash(b'p', &[solved as u8]));
    let mut planned = Vec::new();
    let mut last_subject = None;
    for display in trace_displays {
        for word in display.split_whitespace() {
            hashes.push(token_hash(b't', word.as_bytes()));
        }
        if let Some(&subject) = q_indices(display).first() {
            if !planned.contains(&subject) {
                planned.push(subject);
            }
            last_subject = Some(subject);
        }
    }
    for (back, display) in trace_displays.iter().rev().take(RECENCY_WINDOW).enumerate() {
        let tag = b'0' + back as u8;
        for word in display.split_whitespace() {
            hashes.push(token_hash(tag, word.as_bytes()));
        }
    }
    TokenSet {
        hashes,
        planned,
        last_subject,
        ..TokenSet::default()
    }
}

/// Action tokens: word bag, whole-display token, and a step-kind marker.
pub fn action_tokens(display: &str, solution_kind: bool) -> TokenSet {
    let mut hashes = Vec::with_capacity(8);
    hashes.push(token_hash(b'k', &[solution_kind as u8]));
    hashes.push(token_hash(b'A', display.as_bytes()));
    for word in display.split_whitespace() {
        hashes.push(token_hash(b'a', word.as_bytes()));
    }
    let mut qs = q_indices(display);
    let subject = if qs.is_empty() { None } else { Some(qs.remove(0)) };
    TokenSet {
        hashes,
        subject,
        refs: qs,
        solution_kind,
        ..TokenSet::default()
    }
}

/// Structural joint tokens shared across problems: how far the action's
/// subject jumps from the last planned one, and whether its references are
/// already planned. These carry the plan-order rules in a form that
/// transfers across chain lengths.
fn joint_tokens(state: &TokenSet, action: &TokenSet, out: &mut Vec<u64>) {
    if action.solution_kind {
        let planned = state.planned.len().min(15) as u8;
        out.push(token_hash(b'S', &[planned]));
        return;
    }
    if let Some(subject) = action.subject {
        let jump = match state.last_subject {
            Some(last) => (subject - last).clamp(-6, 6) as i8,
            None => 7, // first step marker
        };
        out.push(token_hash(b'J', &[jump as u8]));
        if state.planned.contains(&subject) {
            out.push(token_hash(b'R', b"replan"));
        }
        let known = action
            .refs
            .iter()
            .filter(|r| state.planned.contains(r))
            .count();
        let coverage: &[u8] = if action.refs.is_empty() {
            b"const"
        } else if known == action.refs.len() {
            b"all"
        } else if known == 0 {
            b"none"
        } else {
            b"some"
        };
        out.push(token_hash(b'C', coverage));
    }
}

/// Hash all conjunctions (and both marginals) into a sparse vector.
///
/// `action` of `None` featurizes the state alone, which is what the value
/// model consumes. Index 0 is the bias and is always present.
pub fn featurize<T: Scalar>(
    state: &TokenSet,
    action: Option<&TokenSet>,
    dim: usize,
) -> FeatureVector<T> {
    assert!(dim >= 2, "feature dimension must hold bias + hashed slots");
    let modulus = (dim - 1) as u64;
    let mut indices = Vec::with_capacity(
        1 + state.hashes.len() * (1 + action.map_or(0, |a| a.hashes.len()))
            + action.map_or(0, |a| a.hashes.len()),
    );
    let push = |h: u64, indices: &mut Vec<u32>| {
        indices.push(1 + (h % modulus) as u32);
    };
    indices.push(0u32); // bias
    for &hs in &state.hashes {
        push(mix(hs, NO_CONJ), &mut indices);
    }
    if let Some(action) = action {
        for &ha in &action.hashes {
            push(mix(NO_CONJ, ha), &mut indices);
        }
        for &hs in &state.hashes {
            for &ha in &action.hashes {
                push(mix(hs, ha), &mut indices);
            }
        }
        let mut joint = Vec::with_capacity(4);
        joint_tokens(state, action, &mut joint);
        for &hj in &joint {
            push(mix(hj, hj), &mut indices);
        }
    }
    FeatureVector::from_indices(indices)
}
