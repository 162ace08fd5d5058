//! Software vTPM instances: vPCR banks with extend semantics, a Stored
//! Measurement Log per instance, and quoting under the instance's vAIK.

use std::fmt;

use thiserror::Error;

use crate::crypto::{sha1_pair, Digest160, KeyId, Signature, Signer, Verifier, VerifierKey};
use crate::hwtpm::{PcrIndex, NUM_PCRS};
use crate::wire::{DecodeError, Reader, Writer};

/// Domain separator for vTPM quotes.
pub const ORD_VQUOTE: u32 = 0x2000_0011;

const SML_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("vTPM ids start at 1")]
pub struct InvalidVTpmId;

/// Number of a vTPM instance on the platform, starting at 1.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VTpmId(u32);

impl VTpmId {
    pub fn new(id: u32) -> Result<Self, InvalidVTpmId> {
        if id == 0 {
            Err(InvalidVTpmId)
        } else {
            Ok(Self(id))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Debug for VTpmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vTPM{}", self.0)
    }
}

impl fmt::Display for VTpmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmlEntry {
    pub pcr: PcrIndex,
    pub measurement: Digest160,
    pub description: Vec<u8>,
}

/// Folds `sml` from the all-zero reset value into a full vPCR bank.
pub fn replay_sml(sml: &[SmlEntry]) -> [Digest160; NUM_PCRS] {
    let mut bank = [Digest160::zero(); NUM_PCRS];
    for e in sml {
        let slot = &mut bank[usize::from(e.pcr.get())];
        *slot = sha1_pair(slot, &e.measurement);
    }
    bank
}

pub fn encode_sml(sml: &[SmlEntry]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(SML_VERSION).u32(sml.len() as u32);
    for e in sml {
        let desc_len = u16::try_from(e.description.len()).expect("description over 64 KiB");
        w.u8(e.pcr.get())
            .raw(&e.measurement.0)
            .u16(desc_len)
            .raw(&e.description);
    }
    w.finish()
}

pub fn decode_sml(bytes: &[u8]) -> Result<Vec<SmlEntry>, DecodeError> {
    let mut r = Reader::new(bytes);
    let version = r.u8()?;
    if version != SML_VERSION {
        return Err(DecodeError::Version(version));
    }
    let count = r.u32()? as usize;
    // Each entry takes at least 23 bytes; cap the preallocation accordingly.
    let mut out = Vec::with_capacity(count.min(r.remaining() / 23));
    for _ in 0..count {
        let pcr = PcrIndex::new(r.u8()?).map_err(|e| DecodeError::invalid("pcr", e.to_string()))?;
        let measurement = Digest160(r.array()?);
        let len = r.u16()? as usize;
        let description = r.take(len)?.to_vec();
        out.push(SmlEntry {
            pcr,
            measurement,
            description,
        });
    }
    r.finish()?;
    Ok(out)
}

/// A vTPM-signed statement of one vPCR bound to a nonce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VQuote {
    pub vtpm: VTpmId,
    pub pcr: PcrIndex,
    pub nonce: Vec<u8>,
    pub vpcr: Digest160,
    pub key_id: KeyId,
    pub signature: Signature,
}

impl VQuote {
    pub fn signed_message(vtpm: VTpmId, pcr: PcrIndex, nonce: &[u8], vpcr: &Digest160) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(ORD_VQUOTE)
            .u32(vtpm.get())
            .u32(u32::from(pcr.get()))
            .blob(nonce)
            .raw(&vpcr.0);
        w.finish()
    }

    pub fn verify(&self, key: &dyn Verifier) -> bool {
        key.key_id() == self.key_id
            && key.verify(
                &Self::signed_message(self.vtpm, self.pcr, &self.nonce, &self.vpcr),
                &self.signature,
            )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.vtpm.get())
            .u8(self.pcr.get())
            .blob(&self.nonce)
            .raw(&self.vpcr.0)
            .raw(&self.key_id.0)
            .blob(&self.signature.0);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let vtpm =
            VTpmId::new(r.u32()?).map_err(|e| DecodeError::invalid("vtpm", e.to_string()))?;
        let pcr = PcrIndex::new(r.u8()?).map_err(|e| DecodeError::invalid("pcr", e.to_string()))?;
        let nonce = r.blob()?.to_vec();
        let vpcr = Digest160(r.array()?);
        let key_id = KeyId(r.array()?);
        let signature = Signature(r.blob()?.to_vec());
        r.finish()?;
        Ok(Self {
            vtpm,
            pcr,
            nonce,
            vpcr,
            key_id,
            signature,
        })
    }
}

pub struct VTpm {
    id: VTpmId,
    vpcrs: [Digest160; NUM_PCRS],
    sml: Vec<SmlEntry>,
    vaik: Box<dyn Signer>,
}

impl fmt::Debug for VTpm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VTpm")
            .field("id", &self.id)
            .field("sml_len", &self.sml.len())
            .field("vaik", &self.vaik.key_id())
            .finish()
    }
}

impl VTpm {
    pub fn new(id: VTpmId, vaik: Box<dyn Signer>) -> Self {
        Self {
            id,
            vpcrs: [Digest160::zero(); NUM_PCRS],
            sml: Vec::new(),
            vaik,
        }
    }

    /// Rebuilds an instance from persisted parts. `vpcrs` is taken as given,
    /// so a previously tampered bank stays tampered.
    pub fn restore(
        id: VTpmId,
        vpcrs: [Digest160; NUM_PCRS],
        sml: Vec<SmlEntry>,
        vaik: Box<dyn Signer>,
    ) -> Self {
        Self {
            id,
            vpcrs,
            sml,
            vaik,
        }
    }

    pub fn id(&self) -> VTpmId {
        self.id
    }

    pub fn vpcr(&self, i: PcrIndex) -> Digest160 {
        self.vpcrs[usize::from(i.get())]
    }

    pub fn vpcrs(&self) -> &[Digest160; NUM_PCRS] {
        &self.vpcrs
    }

    pub fn sml(&self) -> &[SmlEntry] {
        &self.sml
    }

    pub fn vaik_verifier(&self) -> VerifierKey {
        self.vaik.verifier()
    }

    /// Extends vPCR `i` with `measurement`, logs it, and returns the old and
    /// new register values for the binding driver.
    pub fn extend(
        &mut self,
        i: PcrIndex,
        measurement: Digest160,
        description: impl Into<Vec<u8>>,
    ) -> (Digest160, Digest160) {
        let slot = &mut self.vpcrs[usize::from(i.get())];
        let old = *slot;
        *slot = sha1_pair(&old, &measurement);
        self.sml.push(SmlEntry {
            pcr: i,
            measurement,
            description: description.into(),
        });
        (old, *slot)
    }

    pub fn quote(&self, i: PcrIndex, nonce: &[u8]) -> VQuote {
        let vpcr = self.vpcr(i);
        VQuote {
            vtpm: self.id,
            pcr: i,
            nonce: nonce.to_vec(),
            vpcr,
            key_id: self.vaik.key_id(),
            signature: self
                .vaik
                .sign(&VQuote::signed_message(self.id, i, nonce, &vpcr)),
        }
    }

    /// Overwrites a vPCR behind the binding layer's back. Attack injection.
    pub fn tamper(&mut self, i: PcrIndex, forged: Digest160) {
        self.vpcrs[usize::from(i.get())] = forged;
    }
}
