//! Deterministic seeding.
//!
//! Every random draw in the crate flows through [`SeedRng`], a splitmix64
//! generator: identical seeds yield identical streams on every platform and
//! build. Per-stage seeds are derived from a run's global seed with
//! [`derive_seed`], which absorbs an ordered list of string tags — the
//! "counter scheme" recorded in run manifests. Changing any tag or the tag
//! order changes the derived seed; sibling stages therefore draw from
//! disjoint streams regardless of execution order.

/// One splitmix64 output/mix step.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes, used for content hashes and seed derivation.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Derive a stage seed from a root seed and an ordered tag path.
///
/// Scheme: starting from `root`, for each tag, xor in the FNV-1a hash of the
/// tag bytes and advance one splitmix64 step. `derive_seed(s, &["a", "b"])`
/// differs from `derive_seed(s, &["b", "a"])` and from `derive_seed(s, &["ab"])`.
pub fn derive_seed(root: u64, tags: &[&str]) -> u64 {
    let mut state = root;
    for tag in tags {
        state ^= fnv1a64(tag.as_bytes());
        splitmix64(&mut state);
    }
    state
}

/// Splitmix64 pseudo-random generator.
#[derive(Debug, Clone)]
pub struct SeedRng {
    state: u64,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in 0..n. `n` must be nonzero.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index on empty range");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_gaussian();
        }
    }
}

/// Deterministic bag-of-tokens text embedding.
///
/// Tokens are lowercased alphanumeric runs; each token seeds a gaussian
/// vector via [`derive_seed`]; the embedding is the mean over tokens. Empty
/// text (no tokens) yields the zero vector — callers that require non-empty
/// input must enforce that themselves.
pub fn hash_embed(seed: u64, text: &str, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let mut count = 0usize;
    for token in tokenize(text) {
        let mut rng = SeedRng::new(derive_seed(seed, &["token", &token]));
        for (i, v) in out.iter_mut().enumerate() {
            let _ = i;
            *v += rng.next_gaussian();
        }
        count += 1;
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        for v in &mut out {
            *v *= inv;
        }
    }
    out
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}
