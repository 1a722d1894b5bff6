//! Counter-based deterministic PRNG for sparsification masks.
//!
//! The mask stream is keyed by `(seed, concept_id, tensor_name)` and indexed
//! by the element's row-major position, so masks are bit-reproducible across
//! runs and independent of evaluation order. The stream state is the
//! FNV-1a-64 hash of `seed_le8 || concept_id || 0x00 || tensor_name`; element
//! `i` maps to `splitmix64(state + (i+1) * GOLDEN_GAMMA)`.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;
const GOLDEN_GAMMA: u64 = 0x9E3779B97F4A7C15;

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// splitmix64 finalizer (no internal gamma increment; the caller advances
/// the counter).
pub fn splitmix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58476D1CE4E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    z
}

/// Keyed counter-based stream of uniform values in [0, 1).
#[derive(Debug, Clone, Copy)]
pub struct MaskStream {
    state: u64,
}

impl MaskStream {
    pub fn new(seed: u64, concept_id: &str, tensor_name: &str) -> Self {
        let mut key = Vec::with_capacity(9 + concept_id.len() + tensor_name.len());
        key.extend_from_slice(&seed.to_le_bytes());
        key.extend_from_slice(concept_id.as_bytes());
        key.push(0x00);
        key.extend_from_slice(tensor_name.as_bytes());
        Self {
            state: fnv1a64(&key),
        }
    }

    /// Raw 64-bit word for element index `i`.
    pub fn word(&self, i: u64) -> u64 {
        splitmix64(
            self.state
                .wrapping_add((i.wrapping_add(1)).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform f64 in [0, 1) for element index `i`: top 53 bits of the word.
    pub fn unit(&self, i: u64) -> f64 {
        (self.word(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// True when element `i` is dropped at drop rate `p`.
    pub fn drops(&self, i: u64, p: f64) -> bool {
        self.unit(i) < p
    }
}
