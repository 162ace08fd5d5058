mod common;

use std::collections::{BTreeMap, HashSet};

use num_bigint::BigUint;
use proptest::prelude::*;
use rand::{Rng, RngCore};
use vpcr_bind::attest::protocol::AttestRequest;
use vpcr_bind::attest::{
    decode_bundle, encode_bundle, verify_bundle, verify_bundle_counted, Verdict, VerifyPolicy,
};
use vpcr_bind::crypto::{
    mod_div, mod_mult, sha512, to_residue, Digest160, HmacSigner, Modulus, Residue,
};
use vpcr_bind::hwtpm::{decode_command, encode_command, Command, HwTpm, PcrIndex, TpmError};
use vpcr_bind::incbind::{inc_replay, IncAccumulator};
use vpcr_bind::perf::{run_tree, tree_height_for, OpCounters};
use vpcr_bind::platform::{Platform, PlatformConfig};
use vpcr_bind::treebind::{HashTreeStore, UpdateOutcome};
use vpcr_bind::vtpm::{replay_sml, VTpm, VTpmId};
use vpcr_bind::Scheme;

use common::{hash_pair, oracle_root, random_digest, rng};

fn pcr() -> PcrIndex {
    PcrIndex::new(10).unwrap()
}

fn device() -> HwTpm {
    HwTpm::new(
        Box::new(HmacSigner::new(b"aik".to_vec())),
        Modulus::mersenne_521(),
    )
}

fn residue() -> impl Strategy<Value = Residue> {
    proptest::collection::vec(any::<u8>(), 66).prop_filter_map("zero", |bytes| {
        let m = Modulus::mersenne_521();
        Residue::new(BigUint::from_bytes_be(&bytes) % m.value(), &m).ok()
    })
}

fn digest() -> impl Strategy<Value = Digest160> {
    any::<[u8; 20]>().prop_map(Digest160)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn field_group_laws(a in residue(), b in residue(), c in residue()) {
        let m = Modulus::mersenne_521();
        prop_assert_eq!(
            mod_mult(&mod_mult(&a, &b, &m), &c, &m),
            mod_mult(&a, &mod_mult(&b, &c, &m), &m)
        );
        prop_assert_eq!(mod_div(&mod_mult(&a, &b, &m), &b, &m), a.clone());
        prop_assert_eq!(mod_mult(&mod_div(&a, &b, &m), &b, &m), a);
    }
}

#[test]
fn to_residue_is_nonzero_and_collision_free() {
    let m = Modulus::mersenne_521();
    let mut r = rng(11);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let mut msg = [0u8; 32];
        r.fill_bytes(&mut msg);
        let v = to_residue(&sha512(&msg), &m);
        assert!(Residue::new(v.value().clone(), &m).is_ok());
        assert!(seen.insert(v.to_bytes()));
    }
}

fn command() -> impl Strategy<Value = Command> {
    let pcr = (0u8..24).prop_map(|i| PcrIndex::new(i).unwrap());
    let vtpm = (1u32..=u32::MAX).prop_map(|k| VTpmId::new(k).unwrap());
    prop_oneof![
        (pcr.clone(), any::<u16>(), digest(), digest()).prop_map(
            |(pcr, height, vpcr_old, vpcr_new)| {
                Command::UpdateLeafInit {
                    pcr,
                    height,
                    vpcr_old,
                    vpcr_new,
                }
            }
        ),
        (pcr.clone(), digest(), any::<bool>()).prop_map(|(pcr, sibling, sibling_is_left)| {
            Command::UpdateLeaf {
                pcr,
                sibling,
                sibling_is_left,
            }
        }),
        (pcr, vtpm, digest(), digest()).prop_map(|(pcr, vtpm, vpcr_old, vpcr_new)| {
            Command::IncrementHash {
                pcr,
                vtpm,
                vpcr_old,
                vpcr_new,
            }
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn command_codec_round_trips(cmd in command()) {
        let bytes = encode_command(&cmd);
        let expected = match cmd {
            Command::UpdateLeafInit { .. } => 56,
            Command::UpdateLeaf { .. } => 34,
            Command::IncrementHash { .. } => 58,
        };
        prop_assert_eq!(bytes.len(), expected);
        prop_assert_eq!(u32::from_be_bytes(bytes[2..6].try_into().unwrap()) as usize, expected);
        prop_assert_eq!(decode_command(&bytes).unwrap(), cmd);
        for cut in 0..bytes.len() {
            prop_assert!(decode_command(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn session_is_exclusive_per_index(other in (0u8..24).prop_filter("distinct", |i| *i != 10), old in digest(), new in digest()) {
        let mut tpm = device();
        let other = PcrIndex::new(other).unwrap();
        tpm.bind_tree(pcr(), Digest160::zero()).unwrap();
        tpm.bind_tree(other, Digest160::zero()).unwrap();
        tpm.update_leaf_init(pcr(), old, new, 3).unwrap();
        prop_assert_eq!(tpm.update_leaf_init(pcr(), old, new, 3), Err(TpmError::SessionBusy(pcr())));
        prop_assert!(tpm.update_leaf_init(other, old, new, 3).is_ok());
        tpm.update_abort(pcr());
        prop_assert!(tpm.update_leaf_init(pcr(), old, new, 3).is_ok());
    }

    /// Any single wrong sibling or ordering flag must fail the walk and leave
    /// the register as it was.
    #[test]
    fn forged_walk_is_tampered(
        height in 1u8..=4,
        seed in any::<u64>(),
        step_pick in any::<prop::sample::Index>(),
        flip_flag in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let leaves: Vec<Digest160> = (0..1usize << height).map(|_| random_digest(&mut r)).collect();
        let tree = HashTreeStore::from_leaves(pcr(), height, &leaves).unwrap();
        let mut tpm = device();
        tree.bind_device(&mut tpm).unwrap();
        let leaf = r.gen_range(0..leaves.len());
        let mut path = tree.sibling_path(leaf).unwrap();
        let step = &mut path.0[step_pick.index(height as usize)];
        if flip_flag {
            step.sibling_is_left = !step.sibling_is_left;
        } else {
            step.sibling.0[0] ^= 1;
        }
        let root = tpm.pcr_read(pcr()).unwrap();
        tpm.update_leaf_init(pcr(), leaves[leaf], random_digest(&mut r), u16::from(height)).unwrap();
        let mut outcome = Ok(None);
        for s in &path.0 {
            outcome = tpm.update_leaf(pcr(), s.sibling, s.sibling_is_left);
            if outcome.is_err() {
                break;
            }
        }
        prop_assert_eq!(outcome, Err(TpmError::Tampered(pcr())));
        prop_assert_eq!(tpm.pcr_read(pcr()).unwrap(), root);
        // The session is cleared, so the index is usable again.
        prop_assert!(tpm.update_leaf_init(pcr(), leaves[leaf], leaves[leaf], u16::from(height)).is_ok());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// After any update sequence every internal node hashes its children and
    /// the device root tracks the host root.
    #[test]
    fn merkle_consistency_and_lockstep(height in 1u8..=6, seed in any::<u64>(), updates in 1usize..40) {
        let mut r = rng(seed);
        let mut tree = HashTreeStore::new(height, Digest160::zero(), pcr()).unwrap();
        let mut tpm = device();
        tree.bind_device(&mut tpm).unwrap();
        let mut shadow = vec![Digest160::zero(); 1 << height];
        for _ in 0..updates {
            let leaf = r.gen_range(0..shadow.len());
            let new = random_digest(&mut r);
            let outcome = tree.bind_update(&mut tpm, leaf, new).unwrap();
            shadow[leaf] = new;
            prop_assert_eq!(outcome, UpdateOutcome::Updated(tree.root()));
            prop_assert_eq!(tpm.pcr_read(pcr()).unwrap().as_tree().copied(), Some(tree.root()));
        }
        let nodes = tree.nodes();
        for n in 0..(1usize << height) - 1 {
            prop_assert_eq!(nodes[n], hash_pair(&nodes[2 * n + 1], &nodes[2 * n + 2]));
        }
        prop_assert_eq!(tree.root(), oracle_root(&shadow));
    }

    #[test]
    fn incremental_replay_equivalence(n in 1u32..=8, u in 1u32..=32, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut tpm = device();
        let setup: BTreeMap<VTpmId, Digest160> =
            (1..=n).map(|k| (VTpmId::new(k).unwrap(), random_digest(&mut r))).collect();
        let mut acc = IncAccumulator::bind(&mut tpm, pcr(), setup.clone()).unwrap();
        let mut vpcrs = setup;
        let mut order: Vec<VTpmId> = vpcrs.keys().flat_map(|k| std::iter::repeat_n(*k, u as usize)).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        let order_len = order.len();
        for k in order {
            let old = vpcrs[&k];
            let new = hash_pair(&old, &random_digest(&mut r));
            acc.inc_update(&mut tpm, k, old, new).unwrap();
            vpcrs.insert(k, new);
            if !r.gen_bool(0.15) && acc.log().len() < order_len {
                continue;
            }
            let mut counters = OpCounters::default();
            let replayed = inc_replay(acc.initial(), acc.log(), acc.modulus(), &mut counters).unwrap();
            let live = tpm.pcr_read(pcr()).unwrap();
            prop_assert_eq!(Some(&replayed), live.as_incremental());
            prop_assert_eq!(counters.hashes, 2 * acc.log().len() as u64);
        }
    }
}

/// One further increment with adversary-chosen arguments never lands the
/// register back on its initial value.
#[test]
fn history_is_not_removable() {
    let mut r = rng(21);
    let k1 = VTpmId::new(1).unwrap();
    let mut tpm = device();
    let mut acc =
        IncAccumulator::bind(&mut tpm, pcr(), BTreeMap::from([(k1, Digest160::zero())])).unwrap();
    let v1 = random_digest(&mut r);
    acc.inc_update(&mut tpm, k1, Digest160::zero(), v1).unwrap();
    let initial = acc.initial().clone();
    for attempt in 0..1000 {
        let mut probe = device();
        probe
            .bind_incremental(pcr(), acc.current().clone(), false)
            .unwrap();
        let k = VTpmId::new(r.gen_range(1..=4)).unwrap();
        // Half the attempts try the obvious undo: new value back to zero.
        let (old, new) = if attempt % 2 == 0 {
            (v1, Digest160::zero())
        } else {
            (random_digest(&mut r), random_digest(&mut r))
        };
        let after = probe.increment_hash(pcr(), k, old, new).unwrap();
        assert_ne!(after, initial);
    }
}

#[test]
fn sml_reproduces_live_vpcrs() {
    let mut r = rng(31);
    let mut v = VTpm::new(
        VTpmId::new(1).unwrap(),
        Box::new(HmacSigner::new(b"v".to_vec())),
    );
    for _ in 0..200 {
        let i = PcrIndex::new(r.gen_range(0..24)).unwrap();
        v.extend(i, random_digest(&mut r), "m");
        assert_eq!(&replay_sml(v.sml()), v.vpcrs());
    }
}

#[test]
fn extend_is_injective_on_history() {
    let mut r = rng(41);
    let mut seen = HashSet::new();
    for _ in 0..10_000 {
        let len = r.gen_range(1..=8);
        let mut vpcr = Digest160::zero();
        for _ in 0..len {
            vpcr = hash_pair(&vpcr, &random_digest(&mut r));
        }
        assert!(seen.insert(vpcr));
    }
}

fn platform(scheme: Scheme, n: u32, u: u32, seed: u64) -> Platform {
    let mut r = rng(seed);
    let config = PlatformConfig {
        scheme,
        tree_height: 3,
        ..PlatformConfig::default()
    };
    let mut p = Platform::new(config, Box::new(HmacSigner::new(b"aik".to_vec()))).unwrap();
    for k in 0..n {
        p.create_vtpm(Box::new(HmacSigner::new(k.to_be_bytes().to_vec())))
            .unwrap();
    }
    for _ in 0..u {
        for k in 1..=n {
            let i = if r.gen_bool(0.8) {
                pcr()
            } else {
                PcrIndex::new(4).unwrap()
            };
            p.extend(VTpmId::new(k).unwrap(), i, random_digest(&mut r), "m")
                .unwrap();
        }
    }
    p
}

fn request(scheme: Scheme, vtpm: u32) -> AttestRequest {
    AttestRequest {
        scheme,
        pcr: pcr(),
        vtpm: VTpmId::new(vtpm).unwrap(),
        nonce: vec![0x5a; 20],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn honest_bundles_verify(tree in any::<bool>(), n in 1u32..=8, u in 0u32..=16, pick in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let scheme = if tree { Scheme::Tree } else { Scheme::Incremental };
        let p = platform(scheme, n, u, seed);
        let req = request(scheme, pick.index(n as usize) as u32 + 1);
        let bundle = p.attest(&req).unwrap();
        let decoded = decode_bundle(&encode_bundle(&bundle), &Modulus::mersenne_521()).unwrap();
        prop_assert_eq!(&decoded, &bundle);
        let mut counters = OpCounters::default();
        let verdict = verify_bundle_counted(&decoded, &req.challenge(), &p.trusted_keys(), &VerifyPolicy::default(), &mut counters);
        prop_assert_eq!(verdict, Verdict::Accepted);
        let sml = bundle.vtpm_sml.len() as u64;
        match scheme {
            // Full snapshot recompute plus the vTPM's own log.
            Scheme::Tree => prop_assert_eq!(counters.hashes, (1 << 3) - 1 + sml),
            // Setup product plus two hashes per logged update.
            Scheme::Incremental => {
                let logged = u64::from(n * u) - bundle_other_index_updates(&p);
                prop_assert_eq!(counters.hashes, sml + u64::from(n) + 2 * logged);
                prop_assert_eq!(counters.mod_divs, logged);
            }
        }
    }
}

fn bundle_other_index_updates(p: &Platform) -> u64 {
    p.vtpms()
        .values()
        .flat_map(|v| v.sml())
        .filter(|e| e.pcr != pcr())
        .count() as u64
}

/// A single bit flip anywhere in a serialized bundle either breaks decoding,
/// gets rejected, or only touched a free-form SML description.
#[test]
fn bit_flips_never_forge_acceptance() {
    let m = Modulus::mersenne_521();
    for scheme in [Scheme::Tree, Scheme::Incremental] {
        let p = platform(scheme, 3, 2, 51);
        let req = request(scheme, 2);
        let bundle = p.attest(&req).unwrap();
        let bytes = encode_bundle(&bundle);
        let strip = |b: &vpcr_bind::attest::QuoteBundle| {
            let mut b = b.clone();
            b.vtpm_sml.iter_mut().for_each(|e| e.description.clear());
            b
        };
        let mut accepted_flips = 0;
        for pos in 0..bytes.len() {
            for bit in [0u8, 3, 7] {
                let mut forged = bytes.clone();
                forged[pos] ^= 1 << bit;
                let Ok(decoded) = decode_bundle(&forged, &m) else {
                    continue;
                };
                let verdict = verify_bundle(
                    &decoded,
                    &req.challenge(),
                    &p.trusted_keys(),
                    &VerifyPolicy::default(),
                );
                if verdict.is_accepted() {
                    assert_eq!(
                        strip(&decoded),
                        strip(&bundle),
                        "{scheme} byte {pos} bit {bit}"
                    );
                    accepted_flips += 1;
                }
            }
        }
        // Only description bytes ("m" per entry) may flip without effect.
        assert_eq!(accepted_flips, 3 * bundle.vtpm_sml.len());
    }
}

#[test]
fn tree_update_cost_follows_height() {
    for n in [2u32, 4, 8, 16] {
        let l = u64::from(tree_height_for(n));
        assert!(1u32 << (l - 1) < n && n <= 1 << l);
        let point = run_tree(n, 3);
        assert_eq!(point.update.hashes, 2 * l);
        assert_eq!(point.update.commands, l + 1);
        assert_eq!(point.update.bytes_sent, 56 + 34 * l);
        assert_eq!(point.verify.hashes, (1 << l) - 1 + 3);
    }
}
