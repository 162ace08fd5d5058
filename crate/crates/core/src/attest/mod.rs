//! Remote attestation: bundle assembly on the attester, verification on the
//! challenger, and a framed request/response exchange between them.

mod bundle;
pub mod protocol;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::crypto::{Digest160, Modulus, Residue, VerifierKey};
use crate::hwtpm::{HwQuote, HwTpm, PcrIndex, PcrValue, TpmError};
use crate::incbind::{inc_replay, setup_product, IncAccumulator, IncSmlEntry};
use crate::perf::OpCounters;
use crate::treebind::{HashTreeStore, TreeSnapshot};
use crate::vtpm::{replay_sml, SmlEntry, VQuote, VTpm, VTpmId};
use crate::Scheme;

pub use bundle::{decode_bundle, encode_bundle, BUNDLE_VERSION};

/// Shortest nonce the attester will sign over.
pub const MIN_NONCE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemeProof {
    /// Every leaf of the tree, plus the position of the quoted vTPM.
    Tree { leaf: u32, snapshot: TreeSnapshot },
    /// Setup members and the full update log of the accumulator.
    Incremental {
        initial: Residue,
        setup: Vec<(VTpmId, Digest160)>,
        log: Vec<IncSmlEntry>,
    },
}

impl SchemeProof {
    pub fn scheme(&self) -> Scheme {
        match self {
            SchemeProof::Tree { .. } => Scheme::Tree,
            SchemeProof::Incremental { .. } => Scheme::Incremental,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuoteBundle {
    pub nonce: Vec<u8>,
    pub vquote: VQuote,
    pub hwquote: HwQuote,
    pub vtpm_sml: Vec<SmlEntry>,
    pub proof: SchemeProof,
}

impl QuoteBundle {
    pub fn scheme(&self) -> Scheme {
        self.proof.scheme()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    StaleNonce,
    BadVSignature,
    BadHwSignature,
    SmlMismatch,
    /// A logged measurement is missing from the reference list.
    UnknownMeasurement,
    RootMismatch,
    ReplayMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected(FailureReason),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

/// What the challenger asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Challenge {
    pub nonce: Vec<u8>,
    pub pcr: PcrIndex,
    pub vtpm: VTpmId,
}

/// What the challenger trusts: the platform AIK, one vAIK per vTPM, and the
/// accumulator modulus the platform was set up with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustedKeys {
    pub aik: VerifierKey,
    pub vaiks: BTreeMap<VTpmId, VerifierKey>,
    pub modulus: Modulus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyPolicy {
    /// Reference measurement list. `None` checks binding integrity only.
    pub allowed_measurements: Option<BTreeSet<Digest160>>,
}

#[derive(Debug, Error)]
pub enum AttestError {
    #[error("nonce of {0} bytes is shorter than {MIN_NONCE_LEN}")]
    NonceTooShort(usize),
    #[error("{0:?} has no leaf in a tree of {1} leaves")]
    NotInTree(VTpmId, usize),
    #[error(transparent)]
    Device(#[from] TpmError),
}

/// Borrowed host-side binding state for one PCR index.
#[derive(Debug, Clone, Copy)]
pub enum BindingView<'a> {
    Tree(&'a HashTreeStore),
    Incremental(&'a IncAccumulator),
}

impl BindingView<'_> {
    fn pcr(&self) -> PcrIndex {
        match self {
            BindingView::Tree(t) => t.pcr(),
            BindingView::Incremental(a) => a.pcr(),
        }
    }
}

/// Leaf position of a vTPM in a tree: vTPM `k` sits at leaf `k - 1`.
pub fn leaf_of(vtpm: VTpmId) -> usize {
    vtpm.get() as usize - 1
}

/// Assembles a bundle. Holding shared borrows of the device and binding state
/// means no update can interleave with the snapshot.
pub fn attest(
    nonce: &[u8],
    vtpm: &VTpm,
    device: &HwTpm,
    binding: BindingView<'_>,
) -> Result<QuoteBundle, AttestError> {
    if nonce.len() < MIN_NONCE_LEN {
        return Err(AttestError::NonceTooShort(nonce.len()));
    }
    let pcr = binding.pcr();
    let proof = match binding {
        BindingView::Tree(tree) => {
            let leaf = leaf_of(vtpm.id());
            if leaf >= tree.capacity() {
                return Err(AttestError::NotInTree(vtpm.id(), tree.capacity()));
            }
            SchemeProof::Tree {
                leaf: leaf as u32,
                snapshot: tree.snapshot(),
            }
        }
        BindingView::Incremental(acc) => SchemeProof::Incremental {
            initial: acc.initial().clone(),
            setup: acc.setup_members().iter().map(|(k, v)| (*k, *v)).collect(),
            log: acc.log().to_vec(),
        },
    };
    Ok(QuoteBundle {
        nonce: nonce.to_vec(),
        vquote: vtpm.quote(pcr, nonce),
        hwquote: device.quote(pcr, nonce)?,
        vtpm_sml: vtpm.sml().to_vec(),
        proof,
    })
}

pub fn verify_bundle(
    b: &QuoteBundle,
    challenge: &Challenge,
    trusted: &TrustedKeys,
    policy: &VerifyPolicy,
) -> Verdict {
    verify_bundle_counted(b, challenge, trusted, policy, &mut OpCounters::default())
}

/// [`verify_bundle`] that also records the hashing and field work it does.
pub fn verify_bundle_counted(
    b: &QuoteBundle,
    challenge: &Challenge,
    trusted: &TrustedKeys,
    policy: &VerifyPolicy,
    counters: &mut OpCounters,
) -> Verdict {
    match check(b, challenge, trusted, policy, counters) {
        Ok(()) => Verdict::Accepted,
        Err(reason) => Verdict::Rejected(reason),
    }
}

fn check(
    b: &QuoteBundle,
    challenge: &Challenge,
    trusted: &TrustedKeys,
    policy: &VerifyPolicy,
    counters: &mut OpCounters,
) -> Result<(), FailureReason> {
    use FailureReason::*;

    let nonce = &challenge.nonce;
    if &b.nonce != nonce || &b.vquote.nonce != nonce || &b.hwquote.nonce != nonce {
        return Err(StaleNonce);
    }

    // Signatures are checked against the identity that was challenged, so a
    // validly signed quote for some other vTPM or index is still rejected.
    let vaik = trusted.vaiks.get(&challenge.vtpm).ok_or(BadVSignature)?;
    if b.vquote.vtpm != challenge.vtpm || b.vquote.pcr != challenge.pcr || !b.vquote.verify(vaik) {
        return Err(BadVSignature);
    }
    if b.hwquote.pcr != challenge.pcr || !b.hwquote.verify(&trusted.aik) {
        return Err(BadHwSignature);
    }

    let pcr = challenge.pcr;
    counters.hashes += b.vtpm_sml.len() as u64;
    if replay_sml(&b.vtpm_sml)[usize::from(pcr.get())] != b.vquote.vpcr {
        return Err(SmlMismatch);
    }
    if let Some(allowed) = &policy.allowed_measurements {
        if b.vtpm_sml
            .iter()
            .any(|e| e.pcr == pcr && !allowed.contains(&e.measurement))
        {
            return Err(UnknownMeasurement);
        }
    }

    match (&b.proof, &b.hwquote.value) {
        (SchemeProof::Tree { leaf, snapshot }, PcrValue::Tree(root)) => {
            let leaf = *leaf as usize;
            if !snapshot.is_well_formed()
                || leaf != leaf_of(challenge.vtpm)
                || snapshot.leaves.get(leaf) != Some(&b.vquote.vpcr)
                || snapshot.compute_root(counters) != *root
            {
                return Err(RootMismatch);
            }
        }
        (SchemeProof::Tree { .. }, PcrValue::Incremental(_)) => return Err(RootMismatch),
        (
            SchemeProof::Incremental {
                initial,
                setup,
                log,
            },
            PcrValue::Incremental(value),
        ) => {
            check_incremental(
                initial,
                setup,
                log,
                value,
                b,
                challenge,
                &trusted.modulus,
                counters,
            )?;
        }
        (SchemeProof::Incremental { .. }, PcrValue::Tree(_)) => return Err(ReplayMismatch),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn check_incremental(
    initial: &Residue,
    setup: &[(VTpmId, Digest160)],
    log: &[IncSmlEntry],
    quoted: &Residue,
    b: &QuoteBundle,
    challenge: &Challenge,
    m: &Modulus,
    counters: &mut OpCounters,
) -> Result<(), FailureReason> {
    let members: BTreeMap<VTpmId, Digest160> = setup.iter().copied().collect();
    if members.len() != setup.len() || setup_product(&members, m, counters) != *initial {
        return Err(FailureReason::ReplayMismatch);
    }
    if log.iter().any(|e| e.pcr != challenge.pcr) {
        return Err(FailureReason::ReplayMismatch);
    }
    match inc_replay(initial, log, m, counters) {
        Ok(last) if last == *quoted => {}
        _ => return Err(FailureReason::ReplayMismatch),
    }
    // Each vTPM's updates must form an unbroken chain starting at its setup
    // value, or at the reset value if it joined after setup.
    let mut heads = members;
    for e in log {
        let head = heads.entry(e.vtpm).or_insert_with(Digest160::zero);
        if *head != e.vpcr_old {
            return Err(FailureReason::ReplayMismatch);
        }
        *head = e.vpcr_new;
    }
    let last = heads
        .get(&challenge.vtpm)
        .copied()
        .unwrap_or_else(Digest160::zero);
    if last != b.vquote.vpcr {
        return Err(FailureReason::ReplayMismatch);
    }
    Ok(())
}
