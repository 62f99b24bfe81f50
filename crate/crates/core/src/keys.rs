//! Watermark key material.
//!
//! A [`WatermarkKey`] deterministically expands a secret byte-string into a
//! trigger set of `n` labeled points: `n` distinct integers in `[0, 2^m)`
//! (the indices) paired with `n` bits (the labels). Expansion reads a
//! ChaCha20 keystream keyed by `SHA-256(secret)` with an all-zero 12-byte
//! nonce and block counter starting at 0. Indices come first — 4-byte
//! little-endian words masked to the low `m` bits, duplicates skipped in
//! encounter order — and labels follow from the next untouched keystream
//! bytes (least-significant bit of one byte per label), so the two regions
//! never overlap and shrinking or growing `n` moves the label segment.
//!
//! The module also houses the two sizing bounds used to pick `m`: the
//! minimum domain width that keeps the expected overlap between two
//! independent trigger sets below a threshold, and the binomial collision
//! bound with per-point match rate `r = n / 2^(m+1)`.

use chacha20::cipher::{KeyIvInit, StreamCipher};
use chacha20::ChaCha20;
use sha2::{Digest, Sha256};
use std::collections::HashSet;

use crate::error::{CoreError, Result};

/// Secret key plus the two derivation parameters.
///
/// Invariants enforced by [`WatermarkKey::new`]: `n >= 1`, `1 <= m <= 32`,
/// and `n <= 2^(m-1)`. The last cap keeps rejection sampling cheap (each
/// draw hits a fresh index with probability >= 1/2) and the label stream
/// near-balanced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatermarkKey {
    secret: Vec<u8>,
    n: u32,
    m: u32,
}

impl WatermarkKey {
    pub fn new(secret: impl Into<Vec<u8>>, n: u32, m: u32) -> Result<Self> {
        let secret = secret.into();
        if n == 0 {
            return Err(CoreError::Config("watermark key needs n >= 1".into()));
        }
        Self::check_m(n, m)?;
        Ok(Self { secret, n, m })
    }

    /// Test hook that relaxes the `n >= 1` invariant so the vacuous `n = 0`
    /// derivation can be exercised. `m` is still validated.
    pub fn new_unchecked(secret: impl Into<Vec<u8>>, n: u32, m: u32) -> Result<Self> {
        let secret = secret.into();
        Self::check_m(n.max(1), m)?;
        Ok(Self { secret, n, m })
    }

    fn check_m(n: u32, m: u32) -> Result<()> {
        if !(1..=32).contains(&m) {
            return Err(CoreError::Config(format!("m must be in [1, 32], got {m}")));
        }
        let cap: u64 = 1u64 << (m - 1);
        if u64::from(n) > cap {
            return Err(CoreError::Config(format!(
                "n = {n} exceeds 2^(m-1) = {cap} for m = {m}"
            )));
        }
        Ok(())
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    /// SHA-256 of the secret; identifies the key in reports without
    /// revealing it.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(&self.secret).into()
    }
}

/// Sequential reader over the key-derived ChaCha20 keystream.
struct Keystream {
    cipher: ChaCha20,
    buf: [u8; 256],
    len: usize,
    pos: usize,
    consumed: usize,
}

impl Keystream {
    fn new(secret: &[u8]) -> Self {
        let key: [u8; 32] = Sha256::digest(secret).into();
        let nonce = [0u8; 12];
        Self {
            cipher: ChaCha20::new(&key.into(), &nonce.into()),
            buf: [0u8; 256],
            len: 0,
            pos: 0,
            consumed: 0,
        }
    }

    fn next_byte(&mut self) -> u8 {
        if self.pos == self.len {
            self.buf = [0u8; 256];
            self.cipher.apply_keystream(&mut self.buf);
            self.len = self.buf.len();
            self.pos = 0;
        }
        let b = self.buf[self.pos];
        self.pos += 1;
        self.consumed += 1;
        b
    }

    /// Next 4 keystream bytes as a little-endian word.
    fn next_word(&mut self) -> u32 {
        let mut w = [0u8; 4];
        for slot in &mut w {
            *slot = self.next_byte();
        }
        u32::from_le_bytes(w)
    }

    fn skip(&mut self, count: usize) {
        for _ in 0..count {
            self.next_byte();
        }
    }
}

/// Rejection sampling is expected to take < 2 draws per index thanks to the
/// `n <= 2^(m-1)` cap; this cap only guards against a broken invariant.
const MAX_DRAWS_PER_INDEX: usize = 4096;

/// Draw the indices and report how many 4-byte words were consumed, so the
/// caller can position the label segment right after them.
fn indices_with_consumed(key: &WatermarkKey) -> (Vec<u32>, usize) {
    let mask: u64 = if key.m == 32 {
        u32::MAX as u64
    } else {
        (1u64 << key.m) - 1
    };
    let mut ks = Keystream::new(&key.secret);
    let mut seen = HashSet::with_capacity(key.n as usize);
    let mut out = Vec::with_capacity(key.n as usize);
    let mut words = 0usize;
    while out.len() < key.n as usize {
        assert!(
            words < MAX_DRAWS_PER_INDEX * key.n.max(1) as usize,
            "rejection sampling exceeded its draw budget; key invariants violated"
        );
        let value = (u64::from(ks.next_word()) & mask) as u32;
        words += 1;
        if seen.insert(value) {
            out.push(value);
        }
    }
    (out, words)
}

/// The `n` distinct watermark indices in `[0, 2^m)`, in derivation order.
pub fn derive_indices(key: &WatermarkKey) -> Vec<u32> {
    indices_with_consumed(key).0
}

/// Byte offset into the keystream where the label segment begins. Exposed so
/// tests can pin the index/label region split.
pub fn label_segment_start(key: &WatermarkKey) -> usize {
    4 * indices_with_consumed(key).1
}

/// The `n` watermark labels, one bit per keystream byte, starting right
/// after the index segment.
pub fn derive_labels(key: &WatermarkKey) -> Vec<u8> {
    let (_, words) = indices_with_consumed(key);
    let mut ks = Keystream::new(&key.secret);
    ks.skip(4 * words);
    (0..key.n).map(|_| ks.next_byte() & 1).collect()
}

/// How an integer index is mapped into model-input space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Coordinate `i < m` carries bit `i` of the index as +1/-1; the rest
    /// are zero. Requires `dim >= m`.
    BitSignVector { dim: usize },
    /// Same +1/-1 bits laid out row-major on a grid, remaining cells zero.
    /// Requires `height * width >= m`.
    BitGrid { height: usize, width: usize },
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::BitSignVector { .. } => "bit-sign-vector",
            EncoderKind::BitGrid { .. } => "bit-grid",
        }
    }
}

/// Injective map from `[0, 2^m)` into input vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainEncoder {
    kind: EncoderKind,
    m: u32,
}

impl DomainEncoder {
    pub fn new(kind: EncoderKind, m: u32) -> Result<Self> {
        if !(1..=32).contains(&m) {
            return Err(CoreError::Config(format!("m must be in [1, 32], got {m}")));
        }
        let cells = match kind {
            EncoderKind::BitSignVector { dim } => dim,
            EncoderKind::BitGrid { height, width } => height * width,
        };
        if cells < m as usize {
            return Err(CoreError::Config(format!(
                "{} with {cells} cells cannot hold m = {m} bits",
                kind.name()
            )));
        }
        Ok(Self { kind, m })
    }

    pub fn bit_sign_vector(dim: usize, m: u32) -> Result<Self> {
        Self::new(EncoderKind::BitSignVector { dim }, m)
    }

    pub fn bit_grid(height: usize, width: usize, m: u32) -> Result<Self> {
        Self::new(EncoderKind::BitGrid { height, width }, m)
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    /// Length of the produced input vector (grids are flattened row-major).
    pub fn output_dim(&self) -> usize {
        match self.kind {
            EncoderKind::BitSignVector { dim } => dim,
            EncoderKind::BitGrid { height, width } => height * width,
        }
    }

    /// Encode one index. Bit 0 of `value` (least significant) lands in
    /// coordinate 0.
    pub fn encode_integer(&self, value: u32) -> Result<Vec<f64>> {
        let limit: u64 = if self.m == 32 {
            1u64 << 32
        } else {
            1u64 << self.m
        };
        if u64::from(value) >= limit {
            return Err(CoreError::Domain(format!(
                "value {value} out of range for m = {} bits",
                self.m
            )));
        }
        let mut out = vec![0.0; self.output_dim()];
        for (i, slot) in out.iter_mut().enumerate().take(self.m as usize) {
            *slot = if value >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        Ok(out)
    }
}

/// One trigger point: an encodable index and its target bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatermarkPoint {
    pub index: u32,
    pub label: u8,
}

/// The derived trigger set. Regenerating from the same key is byte-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatermarkDataset {
    pub points: Vec<WatermarkPoint>,
    pub key_fingerprint: [u8; 32],
    pub m: u32,
}

impl WatermarkDataset {
    pub fn derive(key: &WatermarkKey) -> Self {
        let indices = derive_indices(key);
        let labels = derive_labels(key);
        let points = indices
            .into_iter()
            .zip(labels)
            .map(|(index, label)| WatermarkPoint { index, label })
            .collect();
        Self {
            points,
            key_fingerprint: key.fingerprint(),
            m: key.m,
        }
    }

    /// Canonical single-line JSON: `{"version":1,"n":..,"m":..,"points":[[index,label],..]}`.
    /// Field order and the absence of whitespace are part of the format, so
    /// the document is built by hand rather than through a serializer.
    pub fn canonical_json(&self) -> String {
        let mut out = String::with_capacity(32 + 12 * self.points.len());
        out.push_str(&format!(
            "{{\"version\":1,\"n\":{},\"m\":{},\"points\":[",
            self.points.len(),
            self.m
        ));
        for (i, p) in self.points.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("[{},{}]", p.index, p.label));
        }
        out.push_str("]}");
        out
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }
}

/// Trigger set together with its encoded input vectors, ready for training
/// or verification.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedWatermarkSet {
    pub dataset: WatermarkDataset,
    pub inputs: Vec<Vec<f64>>,
}

impl EncodedWatermarkSet {
    pub fn len(&self) -> usize {
        self.dataset.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.points.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.dataset.points.iter().map(|p| p.label as usize)
    }
}

/// Derive the trigger set and materialize its input vectors.
pub fn build_wm_dataset(key: &WatermarkKey, enc: &DomainEncoder) -> Result<EncodedWatermarkSet> {
    if enc.m() != key.m() {
        return Err(CoreError::Config(format!(
            "encoder is sized for m = {} but the key uses m = {}",
            enc.m(),
            key.m()
        )));
    }
    let dataset = WatermarkDataset::derive(key);
    let inputs = dataset
        .points
        .iter()
        .map(|p| enc.encode_integer(p.index))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedWatermarkSet { dataset, inputs })
}

fn ceil_log2(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        u64::from(n).next_power_of_two().ilog2()
    }
}

/// Default domain width for a trigger set of size `n`: `3 * ceil(log2 n)`,
/// floored at 1 so the degenerate `n = 1` key stays constructible.
pub fn default_domain_bits(n: u32) -> u32 {
    3u32.saturating_mul(ceil_log2(n)).max(1)
}

/// Smallest `m` such that two independent trigger sets of size `n` overlap
/// on more than `(1 - tau) * n` points only with vanishing probability:
/// `ceil(log2(2n(2 + (1 - tau) n)))`.
///
/// For `n >= 3` the default width `3 * ceil(log2 n)` always dominates this
/// minimum (checked below in debug builds). `n = 2` is the lone exception:
/// the default gives 3 bits while the bound needs 4 for every `tau`.
pub fn min_domain_bits(n: u32, tau: f64) -> Result<u32> {
    if n == 0 {
        return Err(CoreError::Domain("n must be >= 1".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CoreError::Domain(format!("tau must lie in (0, 1), got {tau}")));
    }
    let n_f = f64::from(n);
    let inner = 2.0 * n_f * (2.0 + (1.0 - tau) * n_f);
    let m_min = inner.log2().ceil() as u32;
    if n >= 3 {
        debug_assert!(
            default_domain_bits(n) >= m_min,
            "default width 3*ceil(log2 {n}) = {} fell below the minimum {m_min}",
            default_domain_bits(n)
        );
    }
    Ok(m_min)
}

/// Expected number of matched (index, label) pairs between two independent
/// keys: `n * r` with `r = n / 2^(m+1)`, i.e. `n^2 / 2^(m+1)`.
pub fn expected_matched_pairs(n: u32, m: u32) -> f64 {
    let n_f = f64::from(n);
    n_f * n_f / 2f64.powi(m as i32 + 1)
}

/// Probability bound for two independent trigger sets agreeing on exactly
/// `q * n` labeled points: `min(1, C(n, qn) r^(qn) (1-r)^((1-q)n))` with
/// `r = n / 2^(m+1)`, evaluated in log-space.
pub fn collision_bound(n: u32, m: u32, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(CoreError::Domain(format!("q must lie in [0, 1], got {q}")));
    }
    let n_f = f64::from(n);
    let k_f = q * n_f;
    let k = k_f.round();
    if (k_f - k).abs() > 1e-9 {
        return Err(CoreError::Domain(format!(
            "q * n = {k_f} is not an integer; round q before calling"
        )));
    }
    let k = k as u32;
    let r = n_f / 2f64.powi(m as i32 + 1);
    // ln C(n, k) accumulated directly; n stays small enough that the O(k)
    // loop is exact to f64 precision.
    let mut log_bound = 0.0;
    for i in 0..k {
        log_bound += ((n_f - f64::from(i)) / f64::from(i + 1)).ln();
    }
    if k > 0 {
        log_bound += f64::from(k) * r.ln();
    }
    log_bound += f64::from(n - k) * (1.0 - r).ln();
    Ok(log_bound.exp().min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_invariants_enforced() {
        assert!(WatermarkKey::new("s", 0, 6).is_err());
        assert!(WatermarkKey::new("s", 1, 0).is_err());
        assert!(WatermarkKey::new("s", 1, 33).is_err());
        // n = 33 > 2^(6-1) = 32.
        assert!(WatermarkKey::new("s", 33, 6).is_err());
        assert!(WatermarkKey::new("s", 32, 6).is_ok());
    }

    #[test]
    fn vacuous_key_derives_empty() {
        let key = WatermarkKey::new_unchecked("k", 0, 6).unwrap();
        assert!(derive_indices(&key).is_empty());
        assert!(derive_labels(&key).is_empty());
        assert_eq!(label_segment_start(&key), 0);
    }

    #[test]
    fn derivations_are_deterministic_and_distinct() {
        let key = WatermarkKey::new("k", 4, 6).unwrap();
        let a = derive_indices(&key);
        let b = derive_indices(&key);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "indices must be pairwise distinct");
        assert!(a.iter().all(|&v| v < 64));
        assert_eq!(derive_labels(&key), derive_labels(&key));
    }

    #[test]
    fn default_width_matches_formula() {
        assert_eq!(default_domain_bits(600), 30);
        assert_eq!(default_domain_bits(64), 18);
        assert_eq!(default_domain_bits(1), 1);
    }

    #[test]
    fn min_domain_bits_examples() {
        // 2 * 600 * (2 + 0.5 * 600) = 1200 * 302 -> ceil(log2) = 19.
        assert_eq!(min_domain_bits(600, 0.5).unwrap(), 19);
        assert!(default_domain_bits(600) >= 19);
        // tau -> 1 collapses the inner expression to 4n; for n = 1 that is
        // ceil(log2 4) = 2.
        assert_eq!(min_domain_bits(1, 0.999_999_999_999_999_9).unwrap(), 2);
        assert!(min_domain_bits(10, 0.0).is_err());
        assert!(min_domain_bits(10, 1.0).is_err());
    }

    #[test]
    fn encode_integer_examples() {
        let enc = DomainEncoder::bit_sign_vector(4, 3).unwrap();
        assert_eq!(enc.encode_integer(0).unwrap(), vec![-1.0, -1.0, -1.0, 0.0]);
        // 5 = 101b, least-significant bit first.
        assert_eq!(enc.encode_integer(5).unwrap(), vec![1.0, -1.0, 1.0, 0.0]);
        assert!(enc.encode_integer(8).is_err());
    }

    #[test]
    fn grid_encoder_flattens_row_major() {
        let vec_enc = DomainEncoder::bit_sign_vector(6, 5).unwrap();
        let grid_enc = DomainEncoder::bit_grid(2, 3, 5).unwrap();
        for v in 0..32 {
            assert_eq!(
                vec_enc.encode_integer(v).unwrap(),
                grid_enc.encode_integer(v).unwrap()
            );
        }
        assert!(DomainEncoder::bit_grid(1, 3, 5).is_err(), "3 cells < 5 bits");
    }

    #[test]
    fn undersized_encoder_rejected() {
        assert!(DomainEncoder::bit_sign_vector(5, 6).is_err());
        assert!(DomainEncoder::bit_sign_vector(6, 6).is_ok());
    }

    #[test]
    fn dataset_regeneration_is_identical() {
        let key = WatermarkKey::new("k", 4, 6).unwrap();
        let enc = DomainEncoder::bit_sign_vector(8, 6).unwrap();
        let a = build_wm_dataset(&key, &enc).unwrap();
        let b = build_wm_dataset(&key, &enc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.canonical_json(), b.dataset.canonical_json());
    }

    #[test]
    fn dataset_rejects_mismatched_encoder() {
        let key = WatermarkKey::new("k", 4, 6).unwrap();
        let enc = DomainEncoder::bit_sign_vector(8, 7).unwrap();
        assert!(build_wm_dataset(&key, &enc).is_err());
    }

    #[test]
    fn collision_bound_edges() {
        // q = 1 leaves only the r^n factor.
        let n = 64;
        let m = 18;
        let r: f64 = 64.0 / 2f64.powi(19);
        let got = collision_bound(n, m, 1.0).unwrap();
        assert!((got.ln() - 64.0 * r.ln()).abs() < 1e-9);
        // q = 0 is dominated by (1-r)^n, below 1.
        let q0 = collision_bound(n, m, 0.0).unwrap();
        assert!(((1.0 - r).powi(64) - q0).abs() < 1e-12);
        assert!(collision_bound(n, m, 0.013).is_err(), "q*n not integral");
        assert!(collision_bound(n, m, 1.5).is_err());
    }

    #[test]
    fn full_domain_key_is_constructible() {
        // m = 32 exercises the mask/limit edge cases.
        let key = WatermarkKey::new("edge", 8, 32).unwrap();
        let idx = derive_indices(&key);
        assert_eq!(idx.len(), 8);
        let enc = DomainEncoder::bit_sign_vector(32, 32).unwrap();
        for v in idx {
            assert_eq!(enc.encode_integer(v).unwrap().len(), 32);
        }
    }
}
