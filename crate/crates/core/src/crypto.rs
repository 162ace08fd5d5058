//! Hash primitives, prime-field arithmetic for the incremental accumulator,
//! and the signing capability used for quotes.

use std::fmt;

use ed25519_dalek::Signer as _;
use hmac::{Hmac, Mac};
use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use sha1::Sha1;
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

/// Width of the canonical residue encoding in bytes.
pub const RESIDUE_BYTES: usize = 66;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("modulus must satisfy 2^512 < m < 2^528")]
    ModulusOutOfRange,
    #[error("modulus is not prime")]
    ModulusNotPrime,
    #[error("residue outside [1, m-1]")]
    ResidueOutOfRange,
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
}

macro_rules! digest_type {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub const fn zero() -> Self {
                Self([0u8; $len])
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
                let arr: [u8; $len] = bytes.try_into().map_err(|_| CryptoError::Length {
                    expected: $len,
                    actual: bytes.len(),
                })?;
                Ok(Self(arr))
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                Self::from_slice(&decode_hex(s)?)
            }

            pub fn to_hex(&self) -> String {
                encode_hex(&self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }
    };
}

digest_type!(Digest160, 20);
digest_type!(Digest512, 64);

pub(crate) fn encode_hex(bytes: &[u8]) -> String {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(HEX[(b >> 4) as usize] as char);
        s.push(HEX[(b & 0xf) as usize] as char);
    }
    s
}

pub(crate) fn decode_hex(s: &str) -> Result<Vec<u8>, CryptoError> {
    let s = s.trim();
    let s = s.strip_prefix("0x").unwrap_or(s);
    if !s.len().is_multiple_of(2) {
        return Err(CryptoError::Hex("odd number of digits".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| CryptoError::Hex(s[i..i + 2].into()))
        })
        .collect()
}

pub fn sha1(data: &[u8]) -> Digest160 {
    Digest160(Sha1::digest(data).into())
}

/// SHA-1 over the concatenation `left || right`.
pub fn sha1_pair(left: &Digest160, right: &Digest160) -> Digest160 {
    let mut h = Sha1::new();
    h.update(left.0);
    h.update(right.0);
    Digest160(h.finalize().into())
}

pub fn sha512(data: &[u8]) -> Digest512 {
    Digest512(Sha512::digest(data).into())
}

/// A prime modulus strictly above the 512-bit hash range that still fits the
/// 66-byte residue encoding.
#[derive(Clone, PartialEq, Eq)]
pub struct Modulus(BigUint);

impl Modulus {
    /// 2^521 - 1.
    pub fn mersenne_521() -> Self {
        Self((BigUint::one() << 521u32) - 1u32)
    }

    pub fn new(m: BigUint) -> Result<Self, CryptoError> {
        if m.bits() <= 512 || m.bits() > 8 * RESIDUE_BYTES as u64 {
            return Err(CryptoError::ModulusOutOfRange);
        }
        // m.bits() > 512 alone admits exactly 2^512, which is even anyway.
        if !is_probable_prime(&m) {
            return Err(CryptoError::ModulusNotPrime);
        }
        Ok(Self(m))
    }

    /// Accepts the preset name `mersenne521` or a big-endian hex literal.
    pub fn parse(s: &str) -> Result<Self, CryptoError> {
        match s.trim() {
            "mersenne521" | "m521" => Ok(Self::mersenne_521()),
            hex => {
                let digits = hex.strip_prefix("0x").unwrap_or(hex);
                let m = BigUint::parse_bytes(digits.as_bytes(), 16)
                    .ok_or_else(|| CryptoError::Hex(digits.into()))?;
                Self::new(m)
            }
        }
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.to_str_radix(16)
    }
}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::mersenne_521() {
            f.write_str("Modulus(2^521-1)")
        } else {
            write!(f, "Modulus(0x{})", self.to_hex())
        }
    }
}

impl Default for Modulus {
    fn default() -> Self {
        Self::mersenne_521()
    }
}

/// Miller-Rabin with the first 24 primes as fixed bases.
fn is_probable_prime(n: &BigUint) -> bool {
    const BASES: [u32; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    ];
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for p in BASES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    'witness: for a in BASES {
        let mut x = BigUint::from(a).modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A nonzero element of the field modulo a [`Modulus`].
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Residue(BigUint);

impl Residue {
    pub fn new(value: BigUint, m: &Modulus) -> Result<Self, CryptoError> {
        if value.is_zero() || value >= m.0 {
            return Err(CryptoError::ResidueOutOfRange);
        }
        Ok(Self(value))
    }

    pub fn one() -> Self {
        Self(BigUint::one())
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    /// Canonical 66-byte big-endian encoding.
    pub fn to_bytes(&self) -> [u8; RESIDUE_BYTES] {
        let raw = self.0.to_bytes_be();
        let mut out = [0u8; RESIDUE_BYTES];
        out[RESIDUE_BYTES - raw.len()..].copy_from_slice(&raw);
        out
    }

    pub fn from_bytes(bytes: &[u8], m: &Modulus) -> Result<Self, CryptoError> {
        if bytes.len() != RESIDUE_BYTES {
            return Err(CryptoError::Length {
                expected: RESIDUE_BYTES,
                actual: bytes.len(),
            });
        }
        Self::new(BigUint::from_bytes_be(bytes), m)
    }

    pub fn to_hex(&self) -> String {
        encode_hex(&self.to_bytes())
    }
}

impl fmt::Debug for Residue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Residue(0x{})", self.0.to_str_radix(16))
    }
}

impl fmt::Display for Residue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Maps a SHA-512 output into the field. A zero reduction maps to 1.
pub fn to_residue(d: &Digest512, m: &Modulus) -> Residue {
    let v = BigUint::from_bytes_be(&d.0) % &m.0;
    if v.is_zero() {
        Residue::one()
    } else {
        Residue(v)
    }
}

pub fn mod_mult(a: &Residue, b: &Residue, m: &Modulus) -> Residue {
    // Product of two nonzero elements of a prime field is nonzero.
    Residue((&a.0 * &b.0) % &m.0)
}

pub fn mod_div(a: &Residue, b: &Residue, m: &Modulus) -> Residue {
    let inv = mod_inverse(&b.0, &m.0).expect("nonzero residue is invertible modulo a prime");
    Residue((&a.0 * inv) % &m.0)
}

/// Multiplicative inverse by the extended Euclidean algorithm.
/// Returns `None` when `gcd(a, m) != 1`.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let m_int = BigInt::from_biguint(Sign::Plus, m.clone());
    let (mut old_r, mut r) = (BigInt::from_biguint(Sign::Plus, a % m), m_int.clone());
    let (mut old_s, mut s) = (BigInt::one(), BigInt::zero());
    while !r.is_zero() {
        let (q, rem) = old_r.div_rem(&r);
        old_r = std::mem::replace(&mut r, rem);
        let next_s = &old_s - &q * &s;
        old_s = std::mem::replace(&mut s, next_s);
    }
    if !old_r.is_one() {
        return None;
    }
    old_s.mod_floor(&m_int).to_biguint()
}

/// Identifier of a signing key: SHA-1 over its public material.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 20]);

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", encode_hex(&self.0[..8]))
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Signature(pub Vec<u8>);

pub trait Signer: Send + Sync + fmt::Debug {
    fn key_id(&self) -> KeyId;
    fn sign(&self, msg: &[u8]) -> Signature;
    /// The verification half matching this signer.
    fn verifier(&self) -> VerifierKey;
}

pub trait Verifier {
    fn key_id(&self) -> KeyId;
    fn verify(&self, msg: &[u8], sig: &Signature) -> bool;
}

/// Deterministic Ed25519 signer.
pub struct Ed25519Signer {
    key: ed25519_dalek::SigningKey,
}

impl Ed25519Signer {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            key: ed25519_dalek::SigningKey::from_bytes(&seed),
        }
    }

    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }
}

impl fmt::Debug for Ed25519Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ed25519Signer")
            .field("key_id", &Signer::key_id(self))
            .finish_non_exhaustive()
    }
}

impl Signer for Ed25519Signer {
    fn key_id(&self) -> KeyId {
        self.verifier().key_id()
    }

    fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.key.sign(msg).to_bytes().to_vec())
    }

    fn verifier(&self) -> VerifierKey {
        VerifierKey::Ed25519(self.key.verifying_key().to_bytes())
    }
}

/// HMAC-SHA256 stand-in for test profiles. The "public" half is the secret.
#[derive(Clone)]
pub struct HmacSigner {
    key: Vec<u8>,
}

impl HmacSigner {
    pub fn new(key: impl Into<Vec<u8>>) -> Self {
        Self { key: key.into() }
    }
}

impl fmt::Debug for HmacSigner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HmacSigner")
            .field("key_id", &Signer::key_id(self))
            .finish_non_exhaustive()
    }
}

fn hmac_tag(key: &[u8], msg: &[u8]) -> Vec<u8> {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(msg);
    mac.finalize().into_bytes().to_vec()
}

impl Signer for HmacSigner {
    fn key_id(&self) -> KeyId {
        self.verifier().key_id()
    }

    fn sign(&self, msg: &[u8]) -> Signature {
        Signature(hmac_tag(&self.key, msg))
    }

    fn verifier(&self) -> VerifierKey {
        VerifierKey::HmacSha256(self.key.clone())
    }
}

/// Verification key material, in a form that can be stored and shipped.
#[derive(Clone, PartialEq, Eq)]
pub enum VerifierKey {
    Ed25519([u8; 32]),
    HmacSha256(Vec<u8>),
}

impl fmt::Debug for VerifierKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VerifierKey({:?})", self.key_id())
    }
}

impl VerifierKey {
    /// Text form `ed25519:<hex>` or `hmac-sha256:<hex>`.
    pub fn to_text(&self) -> String {
        match self {
            Self::Ed25519(pk) => format!("ed25519:{}", encode_hex(pk)),
            Self::HmacSha256(k) => format!("hmac-sha256:{}", encode_hex(k)),
        }
    }

    pub fn parse(s: &str) -> Result<Self, CryptoError> {
        let s = s.trim();
        if let Some(hex) = s.strip_prefix("ed25519:") {
            let bytes = decode_hex(hex)?;
            let pk: [u8; 32] = bytes
                .as_slice()
                .try_into()
                .map_err(|_| CryptoError::Length {
                    expected: 32,
                    actual: bytes.len(),
                })?;
            Ok(Self::Ed25519(pk))
        } else if let Some(hex) = s.strip_prefix("hmac-sha256:") {
            Ok(Self::HmacSha256(decode_hex(hex)?))
        } else {
            Err(CryptoError::Hex(format!("unknown key type in {s:?}")))
        }
    }
}

impl Verifier for VerifierKey {
    fn key_id(&self) -> KeyId {
        let mut buf = Vec::new();
        match self {
            Self::Ed25519(pk) => {
                buf.extend_from_slice(b"ed25519");
                buf.extend_from_slice(pk);
            }
            Self::HmacSha256(k) => {
                buf.extend_from_slice(b"hmac-sha256");
                buf.extend_from_slice(k);
            }
        }
        KeyId(sha1(&buf).0)
    }

    fn verify(&self, msg: &[u8], sig: &Signature) -> bool {
        match self {
            Self::Ed25519(pk) => {
                let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(pk) else {
                    return false;
                };
                let Ok(sig) = ed25519_dalek::Signature::from_slice(&sig.0) else {
                    return false;
                };
                vk.verify_strict(msg, &sig).is_ok()
            }
            Self::HmacSha256(k) => {
                let mut mac =
                    Hmac::<Sha256>::new_from_slice(k).expect("hmac accepts any key length");
                mac.update(msg);
                mac.verify_slice(&sig.0).is_ok()
            }
        }
    }
}
