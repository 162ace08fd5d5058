//! Independent oracles shared by the integration tests. Nothing here calls
//! into the tree or field code under test.

#![allow(dead_code)]

use ibig::modular::ModuloRing;
use ibig::UBig;
use num_bigint::BigUint;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha1::{Digest, Sha1};
use vpcr_bind::crypto::Digest160;

/// One `Len/Msg/MD` record from a CAVP `.rsp` file.
pub struct Vector {
    pub msg: Vec<u8>,
    pub md: Vec<u8>,
}

pub fn cavp(file: &str) -> Vec<Vector> {
    let path = format!("{}/tests/data/{file}", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"));
    let mut out = Vec::new();
    let mut len_bits = None;
    let mut msg = None;
    for line in text.lines().map(str::trim) {
        if let Some(v) = line.strip_prefix("Len = ") {
            len_bits = Some(v.parse::<usize>().expect("Len"));
        } else if let Some(v) = line.strip_prefix("Msg = ") {
            let mut bytes = hex::decode(v).expect("Msg hex");
            // `Len = 0` still carries a placeholder `00` byte.
            bytes.truncate(len_bits.expect("Len before Msg") / 8);
            msg = Some(bytes);
        } else if let Some(v) = line.strip_prefix("MD = ") {
            out.push(Vector {
                msg: msg.take().expect("Msg before MD"),
                md: hex::decode(v).expect("MD hex"),
            });
        }
    }
    out
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_digest(rng: &mut impl RngCore) -> Digest160 {
    let mut d = [0u8; 20];
    rng.fill_bytes(&mut d);
    Digest160(d)
}

fn sha1_cat(a: &[u8], b: &[u8]) -> [u8; 20] {
    let mut h = Sha1::new();
    h.update(a);
    h.update(b);
    h.finalize().into()
}

/// Root of a perfect binary tree over `leaves`, by plain recursion.
pub fn oracle_root(leaves: &[Digest160]) -> Digest160 {
    assert!(leaves.len().is_power_of_two());
    if leaves.len() == 1 {
        return leaves[0];
    }
    let (l, r) = leaves.split_at(leaves.len() / 2);
    Digest160(sha1_cat(&oracle_root(l).0, &oracle_root(r).0))
}

/// Every node a device must be handed to recompute the path of `leaf` in a
/// heap-ordered tree of height `height`: the leaf and its siblings.
pub fn oracle_path_nodes(height: u8, leaf: usize) -> Vec<usize> {
    // One-based heap numbering: node n has parent n/2 and sibling n^1.
    let mut n = (1usize << height) + leaf;
    let mut out = vec![n - 1];
    while n > 1 {
        out.push((n ^ 1) - 1);
        n /= 2;
    }
    out
}

/// `SHA-1(a || b)`: both the extend of a register and the parent of two nodes.
pub fn hash_pair(a: &Digest160, b: &Digest160) -> Digest160 {
    Digest160(sha1_cat(&a.0, &b.0))
}

pub fn to_ubig(v: &BigUint) -> UBig {
    UBig::from_be_bytes(&v.to_bytes_be())
}

pub fn mersenne_521() -> UBig {
    (UBig::from(1u8) << 521) - UBig::from(1u8)
}

/// `a · b mod p` using a different big-integer library.
pub fn oracle_mul(a: &BigUint, b: &BigUint, p: &UBig) -> UBig {
    let ring = ModuloRing::new(p);
    (ring.from(to_ubig(a)) * ring.from(to_ubig(b))).residue()
}

/// `a · b⁻¹ mod p`, inverting by Fermat's little theorem.
pub fn oracle_div(a: &BigUint, b: &BigUint, p: &UBig) -> UBig {
    let ring = ModuloRing::new(p);
    let inv = ring.from(to_ubig(b)).pow(&(p - UBig::from(2u8)));
    (ring.from(to_ubig(a)) * inv).residue()
}
