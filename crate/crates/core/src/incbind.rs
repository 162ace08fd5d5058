//! Incremental-hash binding.
//!
//! The hardware PCR holds a residue modulo a prime. At setup it is the product
//! over all vTPMs `k` of `H(k || vPCR_k)`, with `H` being SHA-512 reduced into
//! the field. Each later update divides out `H(k || old)` and multiplies in
//! `H(k || new || PCR)`, where `PCR` is the register value before the update.
//! Since that history term never cancels, verification replays the log of
//! updates from the setup value instead of recomputing a product.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{mod_mult, Digest160, Modulus, Residue, RESIDUE_BYTES};
use crate::hwtpm::{increment_step, vtpm_term, Command, HwTpm, PcrIndex, Response, TpmError};
use crate::perf::OpCounters;
use crate::vtpm::VTpmId;
use crate::wire::{DecodeError, Reader, Writer};

const LOG_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IncError {
    #[error("device value {device} differs from host recomputation {local}")]
    DesyncDetected { device: Residue, local: Residue },
    #[error("setup needs at least one vTPM")]
    EmptySetup,
    #[error("{0:?} already contributes to the setup product")]
    AlreadyEnrolled(VTpmId),
    #[error(transparent)]
    Device(#[from] TpmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("replay diverges at entry seq {seq}")]
pub struct ReplayMismatch {
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncSmlEntry {
    pub seq: u64,
    pub vtpm: VTpmId,
    pub pcr: PcrIndex,
    pub vpcr_old: Digest160,
    pub vpcr_new: Digest160,
    pub pcr_before: Residue,
    pub pcr_after: Residue,
}

/// Product of `H(k || vPCR_k)` over all entries of `vpcrs`.
pub fn setup_product<'a>(
    vpcrs: impl IntoIterator<Item = (&'a VTpmId, &'a Digest160)>,
    m: &Modulus,
    counters: &mut OpCounters,
) -> Residue {
    vpcrs.into_iter().fold(Residue::one(), |acc, (k, vpcr)| {
        let term = vtpm_term(*k, vpcr, &[], m, counters);
        counters.mod_mults += 1;
        mod_mult(&acc, &term, m)
    })
}

/// Computes the setup product and loads it into the device.
pub fn inc_setup(
    tpm: &mut HwTpm,
    vpcrs: &BTreeMap<VTpmId, Digest160>,
    i: PcrIndex,
) -> Result<Residue, IncError> {
    if vpcrs.is_empty() {
        return Err(IncError::EmptySetup);
    }
    let value = setup_product(vpcrs, tpm.modulus(), &mut OpCounters::default());
    tpm.inc_setup(i, value.clone())?;
    Ok(value)
}

/// Replays `log` from `initial`, checking every entry's recorded values.
/// Returns the final register value.
pub fn inc_replay(
    initial: &Residue,
    log: &[IncSmlEntry],
    m: &Modulus,
    counters: &mut OpCounters,
) -> Result<Residue, ReplayMismatch> {
    let mut current = initial.clone();
    for (pos, e) in log.iter().enumerate() {
        let seq = pos as u64;
        if e.seq != seq || e.pcr_before != current {
            return Err(ReplayMismatch { seq });
        }
        let after = increment_step(&current, e.vtpm, &e.vpcr_old, &e.vpcr_new, m, counters);
        if after != e.pcr_after {
            return Err(ReplayMismatch { seq });
        }
        current = after;
    }
    Ok(current)
}

/// Host-side state of one incremental-bound PCR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncAccumulator {
    pcr: PcrIndex,
    modulus: Modulus,
    setup: BTreeMap<VTpmId, Digest160>,
    initial: Residue,
    log: Vec<IncSmlEntry>,
}

impl IncAccumulator {
    /// Starts an accumulator with the given setup members and binds the device
    /// index to their product. An empty member set yields the value 1.
    pub fn bind(
        tpm: &mut HwTpm,
        pcr: PcrIndex,
        setup: BTreeMap<VTpmId, Digest160>,
    ) -> Result<Self, IncError> {
        let modulus = tpm.modulus().clone();
        let initial = setup_product(&setup, &modulus, &mut OpCounters::default());
        tpm.bind_incremental(pcr, initial.clone(), true)?;
        Ok(Self {
            pcr,
            modulus,
            setup,
            initial,
            log: Vec::new(),
        })
    }

    pub fn restore(
        pcr: PcrIndex,
        modulus: Modulus,
        setup: BTreeMap<VTpmId, Digest160>,
        initial: Residue,
        log: Vec<IncSmlEntry>,
    ) -> Self {
        Self {
            pcr,
            modulus,
            setup,
            initial,
            log,
        }
    }

    pub fn pcr(&self) -> PcrIndex {
        self.pcr
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn initial(&self) -> &Residue {
        &self.initial
    }

    pub fn setup_members(&self) -> &BTreeMap<VTpmId, Digest160> {
        &self.setup
    }

    pub fn log(&self) -> &[IncSmlEntry] {
        &self.log
    }

    /// Whether new vTPMs can still join the setup product.
    pub fn setup_open(&self) -> bool {
        self.log.is_empty()
    }

    /// Adds a vTPM to the setup product while no update has happened yet.
    pub fn enroll(&mut self, tpm: &mut HwTpm, k: VTpmId, vpcr: Digest160) -> Result<(), IncError> {
        if self.setup.contains_key(&k) {
            return Err(IncError::AlreadyEnrolled(k));
        }
        let mut setup = self.setup.clone();
        setup.insert(k, vpcr);
        let initial = setup_product(&setup, &self.modulus, &mut OpCounters::default());
        tpm.inc_setup(self.pcr, initial.clone())?;
        self.setup = setup;
        self.initial = initial;
        Ok(())
    }

    /// Register value implied by the log.
    pub fn current(&self) -> &Residue {
        self.log.last().map_or(&self.initial, |e| &e.pcr_after)
    }

    /// Most recent vPCR value the binding knows for `k`, if any.
    pub fn last_vpcr(&self, k: VTpmId) -> Option<Digest160> {
        self.log
            .iter()
            .rev()
            .find(|e| e.vtpm == k)
            .map(|e| e.vpcr_new)
            .or_else(|| self.setup.get(&k).copied())
    }

    /// Overwrites the logged new vPCR of entry `seq`. Attack injection.
    pub fn overwrite_log_vpcr(&mut self, seq: usize, forged: Digest160) -> bool {
        match self.log.get_mut(seq) {
            Some(e) => {
                e.vpcr_new = forged;
                true
            }
            None => false,
        }
    }

    pub fn inc_update(
        &mut self,
        tpm: &mut HwTpm,
        k: VTpmId,
        vpcr_old: Digest160,
        vpcr_new: Digest160,
    ) -> Result<IncSmlEntry, IncError> {
        let before = match tpm.pcr_read(self.pcr)?.as_incremental() {
            Some(v) => v.clone(),
            None => unreachable!("pcr_read on an incremental index yields a residue"),
        };
        let response = tpm.submit(&Command::IncrementHash {
            pcr: self.pcr,
            vtpm: k,
            vpcr_old,
            vpcr_new,
        })?;
        let Response::Incremented(after) = response else {
            unreachable!("Increment_Hash answers with the new value");
        };
        let local = increment_step(
            &before,
            k,
            &vpcr_old,
            &vpcr_new,
            &self.modulus,
            &mut OpCounters::default(),
        );
        if local != after || before != *self.current() {
            return Err(IncError::DesyncDetected {
                device: after,
                local,
            });
        }
        let entry = IncSmlEntry {
            seq: self.log.len() as u64,
            vtpm: k,
            pcr: self.pcr,
            vpcr_old,
            vpcr_new,
            pcr_before: before,
            pcr_after: after,
        };
        self.log.push(entry.clone());
        Ok(entry)
    }
}

/// `version(1) || count(4) || entries`, each entry
/// `seq(8) || vtpm(4) || pcr(1) || old(20) || new(20) || before(66) || after(66)`.
pub fn encode_log(log: &[IncSmlEntry]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(LOG_VERSION).u32(log.len() as u32);
    for e in log {
        w.u64(e.seq)
            .u32(e.vtpm.get())
            .u8(e.pcr.get())
            .raw(&e.vpcr_old.0)
            .raw(&e.vpcr_new.0)
            .raw(&e.pcr_before.to_bytes())
            .raw(&e.pcr_after.to_bytes());
    }
    w.finish()
}

pub fn decode_log(bytes: &[u8], m: &Modulus) -> Result<Vec<IncSmlEntry>, DecodeError> {
    let mut r = Reader::new(bytes);
    read_log(&mut r, m).and_then(|log| r.finish().map(|()| log))
}

pub fn read_log(r: &mut Reader<'_>, m: &Modulus) -> Result<Vec<IncSmlEntry>, DecodeError> {
    const ENTRY_LEN: usize = 8 + 4 + 1 + 20 + 20 + 2 * RESIDUE_BYTES;
    let version = r.u8()?;
    if version != LOG_VERSION {
        return Err(DecodeError::Version(version));
    }
    let count = r.u32()? as usize;
    let residue = |r: &mut Reader<'_>| {
        Residue::from_bytes(r.take(RESIDUE_BYTES)?, m)
            .map_err(|e| DecodeError::invalid("residue", e.to_string()))
    };
    let mut out = Vec::with_capacity(count.min(r.remaining() / ENTRY_LEN));
    for _ in 0..count {
        out.push(IncSmlEntry {
            seq: r.u64()?,
            vtpm: VTpmId::new(r.u32()?).map_err(|e| DecodeError::invalid("vtpm", e.to_string()))?,
            pcr: PcrIndex::new(r.u8()?).map_err(|e| DecodeError::invalid("pcr", e.to_string()))?,
            vpcr_old: Digest160(r.array()?),
            vpcr_new: Digest160(r.array()?),
            pcr_before: residue(r)?,
            pcr_after: residue(r)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{sha1, sha512, HmacSigner};
    use num_bigint::BigUint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pcr() -> PcrIndex {
        PcrIndex::new(12).unwrap()
    }

    fn k(id: u32) -> VTpmId {
        VTpmId::new(id).unwrap()
    }

    fn device() -> HwTpm {
        HwTpm::new(
            Box::new(HmacSigner::new(b"aik".to_vec())),
            Modulus::mersenne_521(),
        )
    }

    // Oracle: plain big-integer arithmetic with a Fermat inverse.
    fn oracle_term(id: u32, vpcr: &Digest160, extra: &[u8], p: &BigUint) -> BigUint {
        let mut buf = id.to_be_bytes().to_vec();
        buf.extend_from_slice(&vpcr.0);
        buf.extend_from_slice(extra);
        let v = BigUint::from_bytes_be(&sha512(&buf).0) % p;
        if v == BigUint::from(0u32) {
            BigUint::from(1u32)
        } else {
            v
        }
    }

    fn oracle_step(
        before: &BigUint,
        id: u32,
        old: &Digest160,
        new: &Digest160,
        p: &BigUint,
    ) -> BigUint {
        let inv = oracle_term(id, old, &[], p).modpow(&(p - 2u32), p);
        let mut enc = [0u8; 66];
        let raw = before.to_bytes_be();
        enc[66 - raw.len()..].copy_from_slice(&raw);
        (before * inv % p) * oracle_term(id, new, &enc, p) % p
    }

    #[test]
    fn single_vtpm_setup_and_exact_cancellation() {
        let m = Modulus::mersenne_521();
        let p = m.value().clone();
        let z = sha1(b"Z");
        let z2 = sha1(b"Z'");
        let mut tpm = device();
        let mut acc = IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::from([(k(1), z)])).unwrap();
        let p0 = oracle_term(1, &z, &[], &p);
        assert_eq!(acc.initial().value(), &p0);

        let entry = acc.inc_update(&mut tpm, k(1), z, z2).unwrap();
        let mut enc = [0u8; 66];
        let raw = p0.to_bytes_be();
        enc[66 - raw.len()..].copy_from_slice(&raw);
        // The division cancels the setup term exactly, leaving only the new term.
        let expected = oracle_term(1, &z2, &enc, &p);
        assert_eq!(entry.pcr_after.value(), &expected);
        assert_eq!(
            tpm.pcr_read(pcr()).unwrap().as_incremental(),
            Some(&entry.pcr_after)
        );
    }

    #[test]
    fn setup_product_is_order_independent_and_matches_oracle() {
        let m = Modulus::mersenne_521();
        let p = m.value().clone();
        let members: Vec<(VTpmId, Digest160)> =
            (1..=3).map(|i| (k(i), sha1(&[i as u8, 7]))).collect();
        let forward = setup_product(
            members.iter().map(|(a, b)| (a, b)),
            &m,
            &mut OpCounters::default(),
        );
        let backward = setup_product(
            members.iter().rev().map(|(a, b)| (a, b)),
            &m,
            &mut OpCounters::default(),
        );
        assert_eq!(forward, backward);
        let oracle = members.iter().fold(BigUint::from(1u32), |acc, (id, v)| {
            acc * oracle_term(id.get(), v, &[], &p) % &p
        });
        assert_eq!(forward.value(), &oracle);

        let mut tpm = device();
        tpm.bind_incremental(pcr(), Residue::one(), true).unwrap();
        let map: BTreeMap<_, _> = members.into_iter().collect();
        assert_eq!(inc_setup(&mut tpm, &map, pcr()).unwrap(), forward);
        assert_eq!(
            inc_setup(&mut tpm, &BTreeMap::new(), pcr()),
            Err(IncError::EmptySetup)
        );
    }

    #[test]
    fn interleaved_updates_replay_to_device_value() {
        let m = Modulus::mersenne_521();
        let p = m.value().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut vpcrs: BTreeMap<VTpmId, Digest160> =
            (1..=3).map(|i| (k(i), sha1(&[i as u8]))).collect();
        let mut tpm = device();
        let mut acc = IncAccumulator::bind(&mut tpm, pcr(), vpcrs.clone()).unwrap();
        let mut oracle = acc.initial().value().clone();
        for _ in 0..12 {
            let id = k(rng.gen_range(1..=3));
            let old = vpcrs[&id];
            let new = sha1(&rng.gen::<[u8; 16]>());
            acc.inc_update(&mut tpm, id, old, new).unwrap();
            oracle = oracle_step(&oracle, id.get(), &old, &new, &p);
            vpcrs.insert(id, new);
        }
        let replayed =
            inc_replay(acc.initial(), acc.log(), &m, &mut OpCounters::default()).unwrap();
        assert_eq!(replayed.value(), &oracle);
        assert_eq!(
            tpm.pcr_read(pcr()).unwrap().as_incremental(),
            Some(&replayed)
        );
    }

    #[test]
    fn update_for_unknown_vtpm_is_well_defined() {
        let m = Modulus::mersenne_521();
        let mut tpm = device();
        let mut acc =
            IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::from([(k(1), sha1(b"a"))])).unwrap();
        acc.inc_update(&mut tpm, k(9), Digest160::zero(), sha1(b"n"))
            .unwrap();
        let replayed =
            inc_replay(acc.initial(), acc.log(), &m, &mut OpCounters::default()).unwrap();
        assert_eq!(&replayed, acc.current());
    }

    #[test]
    fn replay_localizes_tampering() {
        let m = Modulus::mersenne_521();
        let mut tpm = device();
        let mut acc =
            IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::from([(k(1), Digest160::zero())]))
                .unwrap();
        let mut cur = Digest160::zero();
        for n in 0..10u8 {
            let next = sha1(&[n]);
            acc.inc_update(&mut tpm, k(1), cur, next).unwrap();
            cur = next;
        }
        let mut c = OpCounters::default();
        assert_eq!(
            inc_replay(acc.initial(), &[], &m, &mut c).unwrap(),
            *acc.initial()
        );
        for target in 0..10 {
            let mut log = acc.log().to_vec();
            log[target].vpcr_new.0[0] ^= 1;
            assert_eq!(
                inc_replay(acc.initial(), &log, &m, &mut c),
                Err(ReplayMismatch { seq: target as u64 })
            );
        }
    }

    #[test]
    fn enroll_only_before_first_update() {
        let mut tpm = device();
        let mut acc = IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::new()).unwrap();
        assert_eq!(acc.initial(), &Residue::one());
        acc.enroll(&mut tpm, k(1), Digest160::zero()).unwrap();
        assert_eq!(
            acc.enroll(&mut tpm, k(1), Digest160::zero()),
            Err(IncError::AlreadyEnrolled(k(1)))
        );
        assert_eq!(
            tpm.pcr_read(pcr()).unwrap().as_incremental(),
            Some(acc.initial())
        );
        acc.inc_update(&mut tpm, k(1), Digest160::zero(), sha1(b"x"))
            .unwrap();
        assert!(matches!(
            acc.enroll(&mut tpm, k(2), Digest160::zero()),
            Err(IncError::Device(TpmError::SetupClosed(_)))
        ));
        assert_eq!(acc.last_vpcr(k(1)), Some(sha1(b"x")));
        assert_eq!(acc.last_vpcr(k(2)), None);
    }

    #[test]
    fn desync_is_reported() {
        let mut tpm = device();
        let mut acc =
            IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::from([(k(1), Digest160::zero())]))
                .unwrap();
        // Someone else moves the device behind the accumulator's back.
        tpm.increment_hash(pcr(), k(1), Digest160::zero(), sha1(b"y"))
            .unwrap();
        assert!(matches!(
            acc.inc_update(&mut tpm, k(1), sha1(b"y"), sha1(b"z")),
            Err(IncError::DesyncDetected { .. })
        ));
    }

    #[test]
    fn history_term_prevents_reset() {
        let m = Modulus::mersenne_521();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tpm = device();
        let setup = BTreeMap::from([(k(1), sha1(b"a")), (k(2), sha1(b"b"))]);
        let mut acc = IncAccumulator::bind(&mut tpm, pcr(), setup).unwrap();
        acc.inc_update(&mut tpm, k(1), sha1(b"a"), sha1(b"a2"))
            .unwrap();
        let initial = acc.initial().clone();
        let current = acc.current().clone();
        for _ in 0..1000 {
            let id = k(rng.gen_range(1..=4));
            let candidates = [
                sha1(b"a"),
                sha1(b"a2"),
                sha1(b"b"),
                sha1(&rng.gen::<[u8; 8]>()),
            ];
            let old = candidates[rng.gen_range(0..4)];
            let new = candidates[rng.gen_range(0..4)];
            let next = increment_step(&current, id, &old, &new, &m, &mut OpCounters::default());
            assert_ne!(next, initial);
        }
    }

    #[test]
    fn log_round_trip_and_truncation() {
        let m = Modulus::mersenne_521();
        let mut tpm = device();
        let mut acc =
            IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::from([(k(1), Digest160::zero())]))
                .unwrap();
        acc.inc_update(&mut tpm, k(1), Digest160::zero(), sha1(b"1"))
            .unwrap();
        acc.inc_update(&mut tpm, k(1), sha1(b"1"), sha1(b"2"))
            .unwrap();
        let bytes = encode_log(acc.log());
        assert_eq!(bytes.len(), 5 + 2 * 185);
        assert_eq!(decode_log(&bytes, &m).unwrap(), acc.log());
        for cut in 0..bytes.len() {
            assert!(decode_log(&bytes[..cut], &m).is_err());
        }
        // Residue field raised to all ones exceeds the modulus.
        let mut bad = bytes.clone();
        bad[5 + 8 + 4 + 1 + 40..5 + 8 + 4 + 1 + 40 + 66].fill(0xff);
        assert!(decode_log(&bad, &m).is_err());
    }

    #[test]
    fn replay_cost_is_linear_in_entries() {
        let m = Modulus::mersenne_521();
        let mut tpm = device();
        let mut acc =
            IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::from([(k(1), Digest160::zero())]))
                .unwrap();
        let mut cur = Digest160::zero();
        for n in 0..6u8 {
            let next = sha1(&[n]);
            acc.inc_update(&mut tpm, k(1), cur, next).unwrap();
            cur = next;
        }
        let mut c = OpCounters::default();
        inc_replay(acc.initial(), acc.log(), &m, &mut c).unwrap();
        assert_eq!((c.hashes, c.mod_divs, c.mod_mults), (12, 6, 6));
    }
}
