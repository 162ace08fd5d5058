mod common;

use num_bigint::BigUint;
use rand::RngCore;
use vpcr_bind::crypto::{mod_div, mod_mult, sha1, sha512, to_residue, Modulus, Residue};

use common::{cavp, mersenne_521, oracle_div, oracle_mul, rng, to_ubig};

#[test]
fn sha1_short_messages() {
    let vectors = cavp("SHA1ShortMsg.rsp");
    assert_eq!(vectors.len(), 65);
    for (i, v) in vectors.iter().enumerate() {
        assert_eq!(sha1(&v.msg).0.as_slice(), v.md.as_slice(), "vector {i}");
    }
}

#[test]
fn sha512_short_messages() {
    let vectors = cavp("SHA512ShortMsg.rsp");
    assert_eq!(vectors.len(), 129);
    for (i, v) in vectors.iter().enumerate() {
        assert_eq!(sha512(&v.msg).0.as_slice(), v.md.as_slice(), "vector {i}");
    }
}

#[test]
fn empty_message_digests() {
    assert_eq!(
        sha1(b"").to_hex(),
        "da39a3ee5e6b4b0d3255bfef95601890afd80709"
    );
    assert!(sha512(b"")
        .0
        .starts_with(&hex::decode("cf83e1357eefb8bd").unwrap()));
}

#[test]
fn residue_reduction_matches_oracle() {
    let m = Modulus::mersenne_521();
    let p = mersenne_521();
    let mut r = rng(3);
    for _ in 0..200 {
        let mut msg = [0u8; 40];
        r.fill_bytes(&mut msg);
        let d = sha512(&msg);
        let expected = ibig::UBig::from_be_bytes(&d.0) % &p;
        assert_eq!(to_ubig(to_residue(&d, &m).value()), expected);
    }
}

#[test]
fn field_ops_match_oracle() {
    let m = Modulus::mersenne_521();
    let p = mersenne_521();
    let mut r = rng(4);
    let mut draw = || loop {
        let mut bytes = [0u8; 66];
        r.fill_bytes(&mut bytes);
        let v = BigUint::from_bytes_be(&bytes) % m.value();
        if let Ok(res) = Residue::new(v, &m) {
            return res;
        }
    };
    for _ in 0..500 {
        let (a, b) = (draw(), draw());
        let prod = mod_mult(&a, &b, &m);
        let quot = mod_div(&a, &b, &m);
        assert_eq!(to_ubig(prod.value()), oracle_mul(a.value(), b.value(), &p));
        assert_eq!(to_ubig(quot.value()), oracle_div(a.value(), b.value(), &p));
        assert_eq!(mod_div(&prod, &b, &m), a);
    }
}
