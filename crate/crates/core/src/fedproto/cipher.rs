//! Secure aggregation by pairwise additive masks.
//!
//! Every pair of clients (i, j) shares a seed derived from a group secret
//! the controller never sees. For each message, client i adds the pair's
//! pseudorandom word stream when i < j and subtracts it when i > j, so the
//! masks cancel exactly in the modular sum over all clients. Values travel
//! as two's-complement fixed-point integers mod 2^64.
//!
//! Weights are applied by the sender: each client multiplies its vector by
//! its own public coefficient before encryption, and controller-side
//! aggregation is a plain (wrapping) sum.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FedError, Result};

/// Default fixed-point precision of the mask scheme.
pub const SCALE_BITS: u32 = 24;
/// Gradient entries are clipped to ±this before fixed-point encoding.
pub const GRAD_CLIP: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// No hiding; words carry the raw f64 bit patterns. Lossless, so it
    /// serves as the oracle for the federated arithmetic.
    Plain,
    /// Fixed-point with pairwise canceling masks.
    Mask,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Plain => "plain",
            Scheme::Mask => "mask",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Scheme::Plain),
            "mask" => Ok(Scheme::Mask),
            _ => Err(format!("unknown cipher {s:?} (expected plain|mask)")),
        }
    }
}

/// An encrypted vector. `words` travels as the binary frame payload; the
/// other fields go in the JSON header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipherVector {
    pub scheme: Scheme,
    /// Fixed-point precision in bits (0 for the plain scheme).
    pub scale_bits: u32,
    /// Coefficient the sender pre-multiplied with.
    pub coeff: f64,
    pub len: usize,
    #[serde(skip)]
    pub words: Vec<u64>,
}

/// Per-client coefficients of a weighted aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    coeffs: Vec<f64>,
}

impl AggregationWeights {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() || coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(FedError::Weights(format!("invalid coefficients {coeffs:?}")));
        }
        let total: f64 = coeffs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FedError::Weights(format!("coefficients sum to {total}")));
        }
        Ok(Self { coeffs })
    }

    /// `|split_i| / Σ_j |split_j|`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(FedError::Weights("all split sizes are zero".into()));
        }
        Self::new(sizes.iter().map(|&s| s as f64 / total as f64).collect())
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

/// Fixed-point encoding `round(v · 2^bits)` as a two's-complement word
/// (round half to even).
pub fn encode_fixed(v: f64, bits: u32) -> Result<u64> {
    if !v.is_finite() {
        return Err(FedError::NonFinite);
    }
    let scaled = (v * (1u64 << bits) as f64).round_ties_even();
    if scaled.abs() >= 2f64.powi(63) {
        return Err(FedError::Overflow { value: v, bits });
    }
    Ok(scaled as i64 as u64)
}

pub fn decode_fixed(w: u64, bits: u32) -> f64 {
    w as i64 as f64 / (1u64 << bits) as f64
}

/// Clips every entry to `[-limit, limit]`; returns how many were clipped.
pub fn clip(v: &mut [f64], limit: f64) -> usize {
    let mut n = 0;
    for x in v {
        if x.abs() > limit {
            *x = x.clamp(-limit, limit);
            n += 1;
        }
    }
    n
}

/// One client's view of the mask scheme.
#[derive(Clone)]
pub struct MaskKey {
    client: usize,
    num_clients: usize,
    pair_seeds: Vec<[u8; 32]>,
}

impl std::fmt::Debug for MaskKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MaskKey")
            .field("client", &self.client)
            .field("num_clients", &self.num_clients)
            .finish_non_exhaustive()
    }
}

impl MaskKey {
    /// Derives pair seeds from the clients' shared group secret.
    pub fn new(group_secret: &[u8; 32], client: usize, num_clients: usize) -> Self {
        let pair_seeds = (0..num_clients)
            .map(|other| {
                let (lo, hi) = (client.min(other) as u64, client.max(other) as u64);
                let mut h = Sha256::new();
                h.update(b"flagcns/pair-seed");
                h.update(group_secret);
                h.update(lo.to_le_bytes());
                h.update(hi.to_le_bytes());
                h.finalize().into()
            })
            .collect();
        Self {
            client,
            num_clients,
            pair_seeds,
        }
    }

    pub fn client(&self) -> usize {
        self.client
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    fn stream(&self, other: usize, nonce: u64) -> ChaCha20Rng {
        let mut h = Sha256::new();
        h.update(self.pair_seeds[other]);
        h.update(nonce.to_le_bytes());
        ChaCha20Rng::from_seed(h.finalize().into())
    }

    /// This client's net mask for `len` words under `nonce`.
    pub fn mask(&self, len: usize, nonce: u64) -> Vec<u64> {
        let mut out = vec![0u64; len];
        for other in 0..self.num_clients {
            if other == self.client {
                continue;
            }
            let mut rng = self.stream(other, nonce);
            let add = self.client < other;
            for w in out.iter_mut() {
                let m = rng.next_u64();
                *w = if add { w.wrapping_add(m) } else { w.wrapping_sub(m) };
            }
        }
        out
    }
}

/// Derives the group secret the clients share from a run seed and a
/// label. The controller process never calls this.
pub fn group_secret(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"flagcns/group-secret");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Encrypts `coeff · v`.
pub fn encrypt(v: &[f64], coeff: f64, scheme: Scheme, key: Option<&MaskKey>, nonce: u64) -> Result<CipherVector> {
    if v.iter().any(|x| !x.is_finite()) || !coeff.is_finite() {
        return Err(FedError::NonFinite);
    }
    let words = match scheme {
        Scheme::Plain => v.iter().map(|&x| (coeff * x).to_bits()).collect(),
        Scheme::Mask => {
            let key = key.ok_or(FedError::MissingKey)?;
            let mask = key.mask(v.len(), nonce);
            v.iter()
                .zip(mask)
                .map(|(&x, m)| encode_fixed(coeff * x, SCALE_BITS).map(|w| w.wrapping_add(m)))
                .collect::<Result<Vec<u64>>>()?
        }
    };
    Ok(CipherVector {
        scheme,
        scale_bits: if scheme == Scheme::Mask { SCALE_BITS } else { 0 },
        coeff,
        len: v.len(),
        words,
    })
}

/// Sums ciphertexts whose senders pre-scaled by `coeffs`. Plain words are
/// summed as floats in client order; mask words with wrapping addition.
pub fn aggregate(cs: &[CipherVector], coeffs: &AggregationWeights) -> Result<CipherVector> {
    let first = cs.first().ok_or(FedError::Mismatch("no ciphertexts".into()))?;
    if cs.len() != coeffs.len() {
        return Err(FedError::Mismatch(format!("{} ciphertexts, {} coefficients", cs.len(), coeffs.len())));
    }
    for (i, (c, &w)) in cs.iter().zip(coeffs.coeffs()).enumerate() {
        if c.len != first.len || c.words.len() != c.len {
            return Err(FedError::Mismatch(format!("client {i} sent {} words, expected {}", c.words.len(), first.len)));
        }
        if c.scheme != first.scheme || c.scale_bits != first.scale_bits {
            return Err(FedError::Mismatch(format!("client {i} used a different scheme")));
        }
        if (c.coeff - w).abs() > 1e-12 {
            return Err(FedError::Mismatch(format!("client {i} pre-scaled by {}, expected {w}", c.coeff)));
        }
    }
    let words = match first.scheme {
        Scheme::Plain => {
            let mut acc = vec![0.0f64; first.len];
            for c in cs {
                for (a, w) in acc.iter_mut().zip(&c.words) {
                    *a += f64::from_bits(*w);
                }
            }
            acc.into_iter().map(f64::to_bits).collect()
        }
        Scheme::Mask => {
            let mut acc = vec![0u64; first.len];
            for c in cs {
                for (a, w) in acc.iter_mut().zip(&c.words) {
                    *a = a.wrapping_add(*w);
                }
            }
            acc
        }
    };
    Ok(CipherVector {
        scheme: first.scheme,
        scale_bits: first.scale_bits,
        coeff: 1.0,
        len: first.len,
        words,
    })
}

/// Decodes an aggregate (the masks having cancelled).
pub fn decrypt(c: &CipherVector) -> Vec<f64> {
    match c.scheme {
        Scheme::Plain => c.words.iter().map(|&w| f64::from_bits(w)).collect(),
        Scheme::Mask => c.words.iter().map(|&w| decode_fixed(w, c.scale_bits)).collect(),
    }
}

/// `FLL_a = Σ_i w_i L_i(a)` for every code position.
pub fn aggregate_losses(reports: &[CipherVector], w: &AggregationWeights) -> Result<Vec<f64>> {
    Ok(decrypt(&aggregate(reports, w)?))
}

/// `(1/|P|) · Σ_i w_i g_i`.
pub fn aggregate_grads(reports: &[CipherVector], w: &AggregationWeights, pop_size: usize) -> Result<Vec<f64>> {
    if pop_size == 0 {
        return Err(FedError::Mismatch("empty population".into()));
    }
    let inv = 1.0 / pop_size as f64;
    let mut out = decrypt(&aggregate(reports, w)?);
    for v in &mut out {
        *v *= inv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn keys(n: usize, seed: u64) -> Vec<MaskKey> {
        let secret = group_secret(seed, "test");
        (0..n).map(|i| MaskKey::new(&secret, i, n)).collect()
    }

    fn encrypt_all(vs: &[Vec<f64>], w: &AggregationWeights, scheme: Scheme, seed: u64, nonce: u64) -> Vec<CipherVector> {
        let ks = keys(vs.len(), seed);
        vs.iter()
            .zip(w.coeffs())
            .zip(&ks)
            .map(|((v, &c), k)| encrypt(v, c, scheme, Some(k), nonce).unwrap())
            .collect()
    }

    #[test]
    fn fixed_point_arithmetic() {
        assert_eq!(encode_fixed(0.5, 24).unwrap(), 8_388_608);
        assert_eq!(decode_fixed(encode_fixed(-1.25, 24).unwrap(), 24), -1.25);
        // half-to-even at the last bit
        let half_ulp = 0.5 / (1u64 << 24) as f64;
        assert_eq!(encode_fixed(half_ulp, 24).unwrap(), 0);
        assert_eq!(encode_fixed(3.0 * half_ulp, 24).unwrap(), 2);
        assert!(matches!(encode_fixed(2f64.powi(40), 24), Err(FedError::Overflow { .. })));
        assert!(matches!(encode_fixed(f64::NAN, 24), Err(FedError::NonFinite)));
    }

    #[test]
    fn masks_cancel_exactly() {
        for n in 2..6 {
            let ks = keys(n, n as u64);
            let mut total = vec![0u64; 50];
            for k in &ks {
                for (t, m) in total.iter_mut().zip(k.mask(50, 9)) {
                    *t = t.wrapping_add(m);
                }
            }
            assert!(total.iter().all(|&t| t == 0));
            // and the individual masks are not trivially zero
            assert!(ks[0].mask(50, 9).iter().any(|&m| m != 0));
        }
        // a single client has no mask
        assert!(keys(1, 0)[0].mask(5, 0).iter().all(|&m| m == 0));
    }

    #[test]
    fn plain_round_trip_is_lossless() {
        let v = vec![0.1, -3.75, 1e-9, 123.456];
        let c = encrypt(&v, 1.0, Scheme::Plain, None, 0).unwrap();
        assert_eq!(decrypt(&c), v);
    }

    #[test]
    fn mask_round_trip_within_quantisation() {
        let v = vec![0.1, -3.75, 1e-9, 63.99];
        let ks = keys(1, 3);
        let c = encrypt(&v, 1.0, Scheme::Mask, Some(&ks[0]), 0).unwrap();
        for (a, b) in decrypt(&c).iter().zip(&v) {
            assert!((a - b).abs() <= 2f64.powi(-25));
        }
    }

    #[test]
    fn single_vector_unit_coefficient_is_unchanged() {
        let w = AggregationWeights::new(vec![1.0]).unwrap();
        for scheme in [Scheme::Plain, Scheme::Mask] {
            let cs = encrypt_all(&[vec![0.25, -2.0]], &w, scheme, 1, 1);
            assert_eq!(aggregate(&cs, &w).unwrap().words, cs[0].words);
        }
    }

    #[test]
    fn equal_vectors_with_equal_weights() {
        let v = vec![0.3, -0.7, 5.0];
        let w = AggregationWeights::from_sizes(&[10, 10, 10]).unwrap();
        for scheme in [Scheme::Plain, Scheme::Mask] {
            let out = decrypt(&aggregate(&encrypt_all(&vec![v.clone(); 3], &w, scheme, 2, 2), &w).unwrap());
            for (a, b) in out.iter().zip(&v) {
                assert!((a - b).abs() < 3.0 * 2f64.powi(-20));
            }
        }
    }

    #[test]
    fn loss_aggregation_examples() {
        let thirds = AggregationWeights::from_sizes(&[5, 5, 5]).unwrap();
        let reports = encrypt_all(&[vec![0.3], vec![0.6], vec![0.9]], &thirds, Scheme::Plain, 0, 0);
        assert!((aggregate_losses(&reports, &thirds).unwrap()[0] - 0.6).abs() < 1e-12);
        let skew = AggregationWeights::new(vec![0.1, 0.3, 0.6]).unwrap();
        for scheme in [Scheme::Plain, Scheme::Mask] {
            let reports = encrypt_all(&[vec![1.0], vec![1.0], vec![1.0]], &skew, scheme, 4, 4);
            assert!((aggregate_losses(&reports, &skew).unwrap()[0] - 1.0).abs() < 3.0 * 2f64.powi(-20));
        }
        let one = AggregationWeights::new(vec![1.0]).unwrap();
        let r = encrypt_all(&[vec![0.42]], &one, Scheme::Plain, 0, 0);
        assert_eq!(aggregate_losses(&r, &one).unwrap(), vec![0.42]);
    }

    #[test]
    fn opposite_gradients_cancel() {
        let w = AggregationWeights::from_sizes(&[7, 7]).unwrap();
        let g = vec![0.5, -1.5, 2.25];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        for scheme in [Scheme::Plain, Scheme::Mask] {
            let cs = encrypt_all(&[g.clone(), neg.clone()], &w, scheme, 5, 5);
            assert!(aggregate_grads(&cs, &w, 4).unwrap().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mask_matches_float_oracle_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..50 {
            let n = rng.gen_range(2..5);
            let sizes: Vec<usize> = (0..n).map(|_| rng.gen_range(1..100)).collect();
            let w = AggregationWeights::from_sizes(&sizes).unwrap();
            let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..20).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
            let cs = encrypt_all(&vs, &w, Scheme::Mask, trial, trial);
            let got = decrypt(&aggregate(&cs, &w).unwrap());
            for (e, g) in got.iter().enumerate() {
                let oracle: f64 = vs.iter().zip(w.coeffs()).map(|(v, c)| c * v[e]).sum();
                assert!((g - oracle).abs() <= n as f64 * 2f64.powi(-20));
            }
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let w = AggregationWeights::from_sizes(&[1, 1]).unwrap();
        let mut cs = encrypt_all(&[vec![1.0, 2.0], vec![1.0, 2.0]], &w, Scheme::Plain, 0, 0);
        cs[1].words.pop();
        cs[1].len = 1;
        assert!(aggregate(&cs, &w).is_err());
        let cs = encrypt_all(&[vec![1.0], vec![1.0]], &w, Scheme::Plain, 0, 0);
        assert!(aggregate(&cs, &AggregationWeights::new(vec![1.0]).unwrap()).is_err());
        let wrong = AggregationWeights::new(vec![0.25, 0.75]).unwrap();
        assert!(aggregate(&cs, &wrong).is_err());
        assert!(AggregationWeights::new(vec![0.5, 0.6]).is_err());
        assert!(AggregationWeights::new(vec![-0.5, 1.5]).is_err());
        assert!(encrypt(&[1.0], 1.0, Scheme::Mask, None, 0).is_err());
    }

    #[test]
    fn clipping_counts() {
        let mut v = vec![100.0, -65.0, 3.0];
        assert_eq!(clip(&mut v, GRAD_CLIP), 2);
        assert_eq!(v, vec![64.0, -64.0, 3.0]);
    }
}
