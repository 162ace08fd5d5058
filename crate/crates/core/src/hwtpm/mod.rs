//! Simulated hardware TPM holding the PCRs that anchor the vPCR bindings.
//!
//! Each PCR index is fixed at initialization to one of three modes. Tree-bound
//! indices hold a 20-byte root and accept the two-phase leaf update
//! (`update_leaf_init` followed by one `update_leaf` per tree level).
//! Incremental-bound indices hold a field residue and accept `increment_hash`.

pub mod codec;

use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

pub use codec::{decode_command, encode_command, CodecError, Command, CommandBlock};

use crate::crypto::{
    mod_div, mod_mult, sha1_pair, sha512, to_residue, Digest160, KeyId, Modulus, Residue,
    Signature, Signer, Verifier, VerifierKey, RESIDUE_BYTES,
};
use crate::perf::OpCounters;
use crate::vtpm::VTpmId;
use crate::wire::{DecodeError, Reader, Writer};

pub const NUM_PCRS: usize = 24;

/// Domain separator for hardware quotes.
pub const ORD_QUOTE: u32 = 0x2000_0010;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PcrIndex(u8);

impl PcrIndex {
    pub fn new(value: u8) -> Result<Self, TpmError> {
        if usize::from(value) < NUM_PCRS {
            Ok(Self(value))
        } else {
            Err(TpmError::InvalidPcrIndex(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..NUM_PCRS as u8).map(Self)
    }
}

impl fmt::Debug for PcrIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PCR{}", self.0)
    }
}

impl fmt::Display for PcrIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcrMode {
    TreeBound,
    IncrementalBound,
    Unbound,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TpmError {
    #[error("pcr index {0} out of range")]
    InvalidPcrIndex(u8),
    #[error("{pcr:?} is {mode:?}")]
    WrongMode { pcr: PcrIndex, mode: PcrMode },
    #[error("a hash tree update is already running on {0:?}")]
    SessionBusy(PcrIndex),
    #[error("no hash tree update running on {0:?}")]
    NoSession(PcrIndex),
    #[error("hash tree bound to {0:?} is tampered")]
    Tampered(PcrIndex),
    #[error("tree height {0} invalid")]
    InvalidHeight(u16),
    #[error("{0:?} is already bound")]
    AlreadyBound(PcrIndex),
    #[error("setup phase of {0:?} is closed")]
    SetupClosed(PcrIndex),
    #[error("quote nonce is empty")]
    EmptyNonce,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Volatile registers of a running tree update on one index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateSession {
    remaining: u16,
    tmp_old: Digest160,
    tmp_new: Digest160,
}

impl UpdateSession {
    pub fn remaining(&self) -> u16 {
        self.remaining
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PcrValue {
    Tree(Digest160),
    Incremental(Residue),
}

impl PcrValue {
    pub fn as_tree(&self) -> Option<&Digest160> {
        match self {
            Self::Tree(d) => Some(d),
            Self::Incremental(_) => None,
        }
    }

    pub fn as_incremental(&self) -> Option<&Residue> {
        match self {
            Self::Incremental(r) => Some(r),
            Self::Tree(_) => None,
        }
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        match self {
            Self::Tree(d) => w.u8(1).raw(&d.0),
            Self::Incremental(r) => w.u8(2).raw(&r.to_bytes()),
        };
    }

    pub(crate) fn read(r: &mut Reader<'_>, m: &Modulus) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => Ok(Self::Tree(Digest160(r.array()?))),
            2 => Residue::from_bytes(r.take(RESIDUE_BYTES)?, m)
                .map(Self::Incremental)
                .map_err(|e| DecodeError::invalid("pcr value", e.to_string())),
            k => Err(DecodeError::invalid("pcr value kind", k.to_string())),
        }
    }
}

impl fmt::Display for PcrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tree(d) => write!(f, "{d}"),
            Self::Incremental(r) => write!(f, "{r}"),
        }
    }
}

/// Result of a successfully executed command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok,
    InProgress,
    Updated(Digest160),
    Incremented(Residue),
}

/// A hardware-signed statement of one PCR value bound to a nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HwQuote {
    pub pcr: PcrIndex,
    pub nonce: Vec<u8>,
    pub value: PcrValue,
    pub key_id: KeyId,
    pub signature: Signature,
}

impl HwQuote {
    pub fn signed_message(pcr: PcrIndex, nonce: &[u8], value: &PcrValue) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(ORD_QUOTE).u32(u32::from(pcr.get())).blob(nonce);
        value.write(&mut w);
        w.finish()
    }

    pub fn verify(&self, key: &dyn Verifier) -> bool {
        key.key_id() == self.key_id
            && key.verify(
                &Self::signed_message(self.pcr, &self.nonce, &self.value),
                &self.signature,
            )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(self.pcr.get()).blob(&self.nonce);
        self.value.write(&mut w);
        w.raw(&self.key_id.0).blob(&self.signature.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8], m: &Modulus) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let pcr = PcrIndex::new(r.u8()?).map_err(|e| DecodeError::invalid("pcr", e.to_string()))?;
        let nonce = r.blob()?.to_vec();
        let value = PcrValue::read(&mut r, m)?;
        let key_id = KeyId(r.array()?);
        let signature = Signature(r.blob()?.to_vec());
        r.finish()?;
        Ok(Self {
            pcr,
            nonce,
            value,
            key_id,
            signature,
        })
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Unbound,
    Tree {
        value: Digest160,
        session: Option<UpdateSession>,
    },
    Incremental {
        value: Residue,
        setup_open: bool,
    },
}

impl Slot {
    fn mode(&self) -> PcrMode {
        match self {
            Self::Unbound => PcrMode::Unbound,
            Self::Tree { .. } => PcrMode::TreeBound,
            Self::Incremental { .. } => PcrMode::IncrementalBound,
        }
    }
}

/// `sha512(tag(k) || vpcr || extra)` reduced into the field.
pub(crate) fn vtpm_term(
    k: VTpmId,
    vpcr: &Digest160,
    extra: &[u8],
    m: &Modulus,
    counters: &mut OpCounters,
) -> Residue {
    let mut buf = Vec::with_capacity(24 + extra.len());
    buf.extend_from_slice(&k.get().to_be_bytes());
    buf.extend_from_slice(&vpcr.0);
    buf.extend_from_slice(extra);
    counters.hashes += 1;
    to_residue(&sha512(&buf), m)
}

/// One incremental update: divide out the old vPCR term, multiply in a term
/// over the new vPCR and the pre-update register value.
pub(crate) fn increment_step(
    before: &Residue,
    k: VTpmId,
    vpcr_old: &Digest160,
    vpcr_new: &Digest160,
    m: &Modulus,
    counters: &mut OpCounters,
) -> Residue {
    let old_term = vtpm_term(k, vpcr_old, &[], m, counters);
    counters.mod_divs += 1;
    let h = mod_div(before, &old_term, m);
    let new_term = vtpm_term(k, vpcr_new, &before.to_bytes(), m, counters);
    counters.mod_mults += 1;
    mod_mult(&h, &new_term, m)
}

pub struct HwTpm {
    slots: Vec<Slot>,
    aik: Box<dyn Signer>,
    modulus: Modulus,
    counters: OpCounters,
}

impl fmt::Debug for HwTpm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HwTpm")
            .field("slots", &self.slots)
            .field("aik", &self.aik.key_id())
            .field("modulus", &self.modulus)
            .finish()
    }
}

impl HwTpm {
    pub fn new(aik: Box<dyn Signer>, modulus: Modulus) -> Self {
        Self {
            slots: vec![Slot::Unbound; NUM_PCRS],
            aik,
            modulus,
            counters: OpCounters::default(),
        }
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    pub fn aik_verifier(&self) -> VerifierKey {
        self.aik.verifier()
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = OpCounters::default();
    }

    pub fn mode(&self, i: PcrIndex) -> PcrMode {
        self.slots[usize::from(i.0)].mode()
    }

    /// Binds an unbound index to a hash tree whose current root is `root`.
    pub fn bind_tree(&mut self, i: PcrIndex, root: Digest160) -> Result<(), TpmError> {
        let slot = &mut self.slots[usize::from(i.0)];
        if !matches!(slot, Slot::Unbound) {
            return Err(TpmError::AlreadyBound(i));
        }
        *slot = Slot::Tree {
            value: root,
            session: None,
        };
        Ok(())
    }

    /// Binds an unbound index to an incremental accumulator. While
    /// `setup_open` holds, [`HwTpm::inc_setup`] may replace the value.
    pub fn bind_incremental(
        &mut self,
        i: PcrIndex,
        initial: Residue,
        setup_open: bool,
    ) -> Result<(), TpmError> {
        let slot = &mut self.slots[usize::from(i.0)];
        if !matches!(slot, Slot::Unbound) {
            return Err(TpmError::AlreadyBound(i));
        }
        *slot = Slot::Incremental {
            value: initial,
            setup_open,
        };
        Ok(())
    }

    /// Loads the setup product. Only allowed before the first increment.
    pub fn inc_setup(&mut self, i: PcrIndex, value: Residue) -> Result<(), TpmError> {
        match &mut self.slots[usize::from(i.0)] {
            Slot::Incremental {
                value: v,
                setup_open: true,
            } => {
                *v = value;
                Ok(())
            }
            Slot::Incremental { .. } => Err(TpmError::SetupClosed(i)),
            other => Err(TpmError::WrongMode {
                pcr: i,
                mode: other.mode(),
            }),
        }
    }

    pub fn is_setup_open(&self, i: PcrIndex) -> bool {
        matches!(
            self.slots[usize::from(i.0)],
            Slot::Incremental {
                setup_open: true,
                ..
            }
        )
    }

    /// Remaining levels of the running tree update on `i`, 0 when idle.
    pub fn session_counter(&self, i: PcrIndex) -> u16 {
        match &self.slots[usize::from(i.0)] {
            Slot::Tree {
                session: Some(s), ..
            } => s.remaining,
            _ => 0,
        }
    }

    fn tree_slot(
        &mut self,
        i: PcrIndex,
    ) -> Result<(&mut Digest160, &mut Option<UpdateSession>), TpmError> {
        match &mut self.slots[usize::from(i.0)] {
            Slot::Tree { value, session } => Ok((value, session)),
            other => Err(TpmError::WrongMode {
                pcr: i,
                mode: other.mode(),
            }),
        }
    }

    pub fn update_leaf_init(
        &mut self,
        i: PcrIndex,
        vpcr_old: Digest160,
        vpcr_new: Digest160,
        height: u16,
    ) -> Result<(), TpmError> {
        let (_, session) = self.tree_slot(i)?;
        if session.is_some() {
            return Err(TpmError::SessionBusy(i));
        }
        if height == 0 {
            return Err(TpmError::InvalidHeight(height));
        }
        *session = Some(UpdateSession {
            remaining: height,
            tmp_old: vpcr_old,
            tmp_new: vpcr_new,
        });
        Ok(())
    }

    /// One level of the walk. Returns `Ok(None)` while levels remain and
    /// `Ok(Some(root))` once the stored root has been replaced.
    pub fn update_leaf(
        &mut self,
        i: PcrIndex,
        sibling: Digest160,
        sibling_is_left: bool,
    ) -> Result<Option<Digest160>, TpmError> {
        let (pcr, slot_session) = match &mut self.slots[usize::from(i.0)] {
            Slot::Tree { value, session } => (value, session),
            other => {
                return Err(TpmError::WrongMode {
                    pcr: i,
                    mode: other.mode(),
                })
            }
        };
        let Some(session) = slot_session.as_mut() else {
            return Err(TpmError::NoSession(i));
        };
        let fold = |tmp: &Digest160| {
            if sibling_is_left {
                sha1_pair(&sibling, tmp)
            } else {
                sha1_pair(tmp, &sibling)
            }
        };
        session.tmp_old = fold(&session.tmp_old);
        session.tmp_new = fold(&session.tmp_new);
        session.remaining -= 1;
        self.counters.hashes += 2;
        if session.remaining > 0 {
            return Ok(None);
        }
        let finished = slot_session.take().expect("session checked above");
        if finished.tmp_old == *pcr {
            *pcr = finished.tmp_new;
            Ok(Some(*pcr))
        } else {
            Err(TpmError::Tampered(i))
        }
    }

    /// Drops any running tree update on `i`. The PCR is untouched.
    pub fn update_abort(&mut self, i: PcrIndex) {
        if let Slot::Tree { session, .. } = &mut self.slots[usize::from(i.0)] {
            *session = None;
        }
    }

    pub fn increment_hash(
        &mut self,
        i: PcrIndex,
        k: VTpmId,
        vpcr_old: Digest160,
        vpcr_new: Digest160,
    ) -> Result<Residue, TpmError> {
        let modulus = &self.modulus;
        let counters = &mut self.counters;
        match &mut self.slots[usize::from(i.0)] {
            Slot::Incremental { value, setup_open } => {
                *value = increment_step(value, k, &vpcr_old, &vpcr_new, modulus, counters);
                *setup_open = false;
                Ok(value.clone())
            }
            other => Err(TpmError::WrongMode {
                pcr: i,
                mode: other.mode(),
            }),
        }
    }

    pub fn pcr_read(&self, i: PcrIndex) -> Result<PcrValue, TpmError> {
        match &self.slots[usize::from(i.0)] {
            Slot::Tree { value, .. } => Ok(PcrValue::Tree(*value)),
            Slot::Incremental { value, .. } => Ok(PcrValue::Incremental(value.clone())),
            Slot::Unbound => Err(TpmError::WrongMode {
                pcr: i,
                mode: PcrMode::Unbound,
            }),
        }
    }

    pub fn quote(&self, i: PcrIndex, nonce: &[u8]) -> Result<HwQuote, TpmError> {
        if nonce.is_empty() {
            return Err(TpmError::EmptyNonce);
        }
        let value = self.pcr_read(i)?;
        let signature = self.aik.sign(&HwQuote::signed_message(i, nonce, &value));
        Ok(HwQuote {
            pcr: i,
            nonce: nonce.to_vec(),
            value,
            key_id: self.aik.key_id(),
            signature,
        })
    }

    /// Decodes and runs one command block as received over the bus.
    pub fn execute(&mut self, block: &[u8]) -> Result<Response, TpmError> {
        self.counters.commands += 1;
        self.counters.bytes_sent += block.len() as u64;
        match decode_command(block)? {
            Command::UpdateLeafInit {
                pcr,
                height,
                vpcr_old,
                vpcr_new,
            } => self
                .update_leaf_init(pcr, vpcr_old, vpcr_new, height)
                .map(|()| Response::Ok),
            Command::UpdateLeaf {
                pcr,
                sibling,
                sibling_is_left,
            } => Ok(match self.update_leaf(pcr, sibling, sibling_is_left)? {
                Some(root) => Response::Updated(root),
                None => Response::InProgress,
            }),
            Command::IncrementHash {
                pcr,
                vtpm,
                vpcr_old,
                vpcr_new,
            } => self
                .increment_hash(pcr, vtpm, vpcr_old, vpcr_new)
                .map(Response::Incremented),
        }
    }

    /// Encodes `cmd` and runs it through [`HwTpm::execute`].
    pub fn submit(&mut self, cmd: &Command) -> Result<Response, TpmError> {
        self.execute(&encode_command(cmd))
    }
}

/// Cloneable handle serializing access to one device.
#[derive(Debug, Clone)]
pub struct SharedTpm(Arc<Mutex<HwTpm>>);

impl SharedTpm {
    pub fn new(tpm: HwTpm) -> Self {
        Self(Arc::new(Mutex::new(tpm)))
    }

    pub fn lock(&self) -> MutexGuard<'_, HwTpm> {
        self.0
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }
}
