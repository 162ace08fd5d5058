//! Canonical byte form of a [`QuoteBundle`].
//!
//! ```text
//! version(1) || scheme(1) || nonce || vquote || hwquote || vtpm_sml || proof
//! ```
//!
//! Every field after the scheme byte is a u32 length-prefixed blob. The tree
//! proof is `leaf(4) || snapshot`; the incremental proof is
//! `initial(66) || members(4) || (vtpm(4) || vpcr(20))* || log`.

use crate::crypto::{Digest160, Modulus, Residue, RESIDUE_BYTES};
use crate::hwtpm::HwQuote;
use crate::incbind::{encode_log, read_log};
use crate::treebind::TreeSnapshot;
use crate::vtpm::{decode_sml, encode_sml, VQuote, VTpmId};
use crate::wire::{DecodeError, Reader, Writer};
use crate::Scheme;

use super::{QuoteBundle, SchemeProof};

pub const BUNDLE_VERSION: u8 = 1;

pub fn encode_bundle(b: &QuoteBundle) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(BUNDLE_VERSION)
        .u8(b.scheme().tag())
        .blob(&b.nonce)
        .blob(&b.vquote.encode())
        .blob(&b.hwquote.encode())
        .blob(&encode_sml(&b.vtpm_sml))
        .blob(&encode_proof(&b.proof));
    w.finish()
}

fn encode_proof(proof: &SchemeProof) -> Vec<u8> {
    let mut w = Writer::new();
    match proof {
        SchemeProof::Tree { leaf, snapshot } => {
            w.u32(*leaf).raw(&snapshot.encode());
        }
        SchemeProof::Incremental {
            initial,
            setup,
            log,
        } => {
            w.raw(&initial.to_bytes()).u32(setup.len() as u32);
            for (k, vpcr) in setup {
                w.u32(k.get()).raw(&vpcr.0);
            }
            w.raw(&encode_log(log));
        }
    }
    w.finish()
}

pub fn decode_bundle(bytes: &[u8], m: &Modulus) -> Result<QuoteBundle, DecodeError> {
    let mut r = Reader::new(bytes);
    let version = r.u8()?;
    if version != BUNDLE_VERSION {
        return Err(DecodeError::Version(version));
    }
    let tag = r.u8()?;
    let scheme = Scheme::from_tag(tag)
        .ok_or_else(|| DecodeError::invalid("scheme", format!("tag {tag}")))?;
    let nonce = r.blob()?.to_vec();
    let vquote = VQuote::decode(r.blob()?)?;
    let hwquote = HwQuote::decode(r.blob()?, m)?;
    let vtpm_sml = decode_sml(r.blob()?)?;
    let proof = decode_proof(scheme, r.blob()?, m)?;
    r.finish()?;
    Ok(QuoteBundle {
        nonce,
        vquote,
        hwquote,
        vtpm_sml,
        proof,
    })
}

fn decode_proof(scheme: Scheme, bytes: &[u8], m: &Modulus) -> Result<SchemeProof, DecodeError> {
    let mut r = Reader::new(bytes);
    let proof = match scheme {
        Scheme::Tree => {
            let leaf = r.u32()?;
            let snapshot = TreeSnapshot::decode(r.take(r.remaining())?)?;
            SchemeProof::Tree { leaf, snapshot }
        }
        Scheme::Incremental => {
            let initial = Residue::from_bytes(r.take(RESIDUE_BYTES)?, m)
                .map_err(|e| DecodeError::invalid("initial", e.to_string()))?;
            let count = r.u32()? as usize;
            let mut setup = Vec::with_capacity(count.min(r.remaining() / 24));
            for _ in 0..count {
                let k = VTpmId::new(r.u32()?)
                    .map_err(|e| DecodeError::invalid("vtpm", e.to_string()))?;
                setup.push((k, Digest160(r.array()?)));
            }
            let log = read_log(&mut r, m)?;
            SchemeProof::Incremental {
                initial,
                setup,
                log,
            }
        }
    };
    r.finish()?;
    Ok(proof)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attest::{attest, BindingView};
    use crate::crypto::{sha1, HmacSigner};
    use crate::hwtpm::{HwTpm, PcrIndex};
    use crate::incbind::IncAccumulator;
    use crate::treebind::HashTreeStore;
    use crate::vtpm::VTpm;
    use std::collections::BTreeMap;

    fn setup() -> (HwTpm, VTpm) {
        let tpm = HwTpm::new(
            Box::new(HmacSigner::new(b"aik".to_vec())),
            Modulus::mersenne_521(),
        );
        let mut v = VTpm::new(
            VTpmId::new(2).unwrap(),
            Box::new(HmacSigner::new(b"v2".to_vec())),
        );
        v.extend(PcrIndex::new(10).unwrap(), sha1(b"boot"), "boot");
        (tpm, v)
    }

    #[test]
    fn tree_bundle_round_trip() {
        let (mut tpm, v) = setup();
        let pcr = PcrIndex::new(10).unwrap();
        let mut tree = HashTreeStore::new(2, Digest160::zero(), pcr).unwrap();
        tree.bind_device(&mut tpm).unwrap();
        tree.bind_update(&mut tpm, 1, v.vpcr(pcr)).unwrap();
        let b = attest(&[9; 16], &v, &tpm, BindingView::Tree(&tree)).unwrap();
        let bytes = encode_bundle(&b);
        assert_eq!(decode_bundle(&bytes, tpm.modulus()).unwrap(), b);
        for cut in 0..bytes.len() {
            assert!(decode_bundle(&bytes[..cut], tpm.modulus()).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_bundle(&extra, tpm.modulus()).is_err());
        let mut wrong_version = bytes;
        wrong_version[0] = 2;
        assert_eq!(
            decode_bundle(&wrong_version, tpm.modulus()),
            Err(DecodeError::Version(2))
        );
    }

    #[test]
    fn incremental_bundle_round_trip() {
        let (mut tpm, v) = setup();
        let pcr = PcrIndex::new(10).unwrap();
        let mut acc =
            IncAccumulator::bind(&mut tpm, pcr, BTreeMap::from([(v.id(), Digest160::zero())]))
                .unwrap();
        acc.inc_update(&mut tpm, v.id(), Digest160::zero(), v.vpcr(pcr))
            .unwrap();
        let b = attest(&[3; 32], &v, &tpm, BindingView::Incremental(&acc)).unwrap();
        let bytes = encode_bundle(&b);
        assert_eq!(decode_bundle(&bytes, tpm.modulus()).unwrap(), b);
        let mut bad_scheme = bytes;
        bad_scheme[1] = 7;
        assert!(matches!(
            decode_bundle(&bad_scheme, tpm.modulus()),
            Err(DecodeError::Invalid { .. })
        ));
    }
}
