//! A whole simulated host: one hardware TPM, its vTPMs, and the binding state
//! of every bound PCR index.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attest::protocol::AttestRequest;
use crate::attest::{attest, leaf_of, AttestError, BindingView, QuoteBundle, TrustedKeys};
use crate::crypto::{Digest160, Modulus, Signer};
use crate::hwtpm::{HwTpm, PcrIndex, TpmError};
use crate::incbind::{IncAccumulator, IncError};
use crate::treebind::{HashTreeStore, TreeError, UpdateOutcome};
use crate::vtpm::{VTpm, VTpmId};
use crate::Scheme;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlatformConfig {
    pub scheme: Scheme,
    pub tree_height: u8,
    pub modulus: Modulus,
    /// Indices bound to the hardware TPM. Extends of other indices stay local
    /// to the vTPM.
    pub pcrs: Vec<PcrIndex>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Tree,
            tree_height: 4,
            modulus: Modulus::mersenne_521(),
            pcrs: vec![PcrIndex::new(10).expect("valid index")],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Binding {
    Tree(HashTreeStore),
    Incremental(IncAccumulator),
}

impl Binding {
    pub fn view(&self) -> BindingView<'_> {
        match self {
            Binding::Tree(t) => BindingView::Tree(t),
            Binding::Incremental(a) => BindingView::Incremental(a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtendOutcome {
    /// The index is not bound; only the vTPM changed.
    Local {
        old: Digest160,
        new: Digest160,
    },
    Bound {
        old: Digest160,
        new: Digest160,
    },
    /// The device refused the update: host tree and vPCR disagree with the PCR.
    Tampered,
}

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("no vTPM with id {0}")]
    UnknownVTpm(u32),
    #[error("{0:?} is not bound")]
    NotBound(PcrIndex),
    #[error("tree of {0} leaves is full")]
    TreeFull(usize),
    #[error("platform runs the {have} scheme, request asked for {asked}")]
    SchemeMismatch { have: Scheme, asked: Scheme },
    #[error("{0:?} is bound to an incremental accumulator, not a tree")]
    NotATree(PcrIndex),
    #[error("{0:?} is bound to a tree, not an incremental accumulator")]
    NotIncremental(PcrIndex),
    #[error("no log entry {0}")]
    NoLogEntry(usize),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Inc(#[from] IncError),
    #[error(transparent)]
    Attest(#[from] AttestError),
    #[error(transparent)]
    Device(#[from] TpmError),
}

#[derive(Debug)]
pub struct Platform {
    config: PlatformConfig,
    device: HwTpm,
    vtpms: BTreeMap<VTpmId, VTpm>,
    bindings: BTreeMap<PcrIndex, Binding>,
}

impl Platform {
    /// Fresh platform: binds every configured index on a new device.
    pub fn new(config: PlatformConfig, aik: Box<dyn Signer>) -> Result<Self, PlatformError> {
        let mut device = HwTpm::new(aik, config.modulus.clone());
        let mut bindings = BTreeMap::new();
        for &pcr in &config.pcrs {
            let binding = match config.scheme {
                Scheme::Tree => {
                    let tree = HashTreeStore::new(config.tree_height, Digest160::zero(), pcr)?;
                    tree.bind_device(&mut device)?;
                    Binding::Tree(tree)
                }
                Scheme::Incremental => {
                    Binding::Incremental(IncAccumulator::bind(&mut device, pcr, BTreeMap::new())?)
                }
            };
            bindings.insert(pcr, binding);
        }
        Ok(Self {
            config,
            device,
            vtpms: BTreeMap::new(),
            bindings,
        })
    }

    /// Reassembles a platform from persisted parts. The device must already
    /// hold the bound PCR values.
    pub fn from_parts(
        config: PlatformConfig,
        device: HwTpm,
        vtpms: BTreeMap<VTpmId, VTpm>,
        bindings: BTreeMap<PcrIndex, Binding>,
    ) -> Self {
        Self {
            config,
            device,
            vtpms,
            bindings,
        }
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn device(&self) -> &HwTpm {
        &self.device
    }

    pub fn device_mut(&mut self) -> &mut HwTpm {
        &mut self.device
    }

    pub fn vtpms(&self) -> &BTreeMap<VTpmId, VTpm> {
        &self.vtpms
    }

    pub fn vtpm(&self, k: VTpmId) -> Result<&VTpm, PlatformError> {
        self.vtpms
            .get(&k)
            .ok_or(PlatformError::UnknownVTpm(k.get()))
    }

    pub fn bindings(&self) -> &BTreeMap<PcrIndex, Binding> {
        &self.bindings
    }

    pub fn binding(&self, pcr: PcrIndex) -> Result<&Binding, PlatformError> {
        self.bindings.get(&pcr).ok_or(PlatformError::NotBound(pcr))
    }

    /// Adds a vTPM with the next free id. Under the incremental scheme the new
    /// vTPM joins each setup product that is still open.
    pub fn create_vtpm(&mut self, vaik: Box<dyn Signer>) -> Result<VTpmId, PlatformError> {
        let next = self.vtpms.keys().next_back().map_or(1, |k| k.get() + 1);
        let id = VTpmId::new(next).expect("ids start at 1");
        for binding in self.bindings.values_mut() {
            match binding {
                Binding::Tree(tree) => {
                    if leaf_of(id) >= tree.capacity() {
                        return Err(PlatformError::TreeFull(tree.capacity()));
                    }
                }
                Binding::Incremental(acc) => {
                    if acc.setup_open() && self.device.is_setup_open(acc.pcr()) {
                        acc.enroll(&mut self.device, id, Digest160::zero())?;
                    }
                }
            }
        }
        self.vtpms.insert(id, VTpm::new(id, vaik));
        Ok(id)
    }

    /// Measures into vPCR `pcr` of vTPM `k` and propagates the change to the
    /// hardware binding. The old value sent to the device is whatever the vTPM
    /// currently holds, so a tampered vPCR surfaces here.
    pub fn extend(
        &mut self,
        k: VTpmId,
        pcr: PcrIndex,
        measurement: Digest160,
        description: impl Into<Vec<u8>>,
    ) -> Result<ExtendOutcome, PlatformError> {
        let vtpm = self
            .vtpms
            .get_mut(&k)
            .ok_or(PlatformError::UnknownVTpm(k.get()))?;
        let (old, new) = vtpm.extend(pcr, measurement, description);
        let Some(binding) = self.bindings.get_mut(&pcr) else {
            return Ok(ExtendOutcome::Local { old, new });
        };
        match binding {
            Binding::Tree(tree) => {
                match tree.bind_transition(&mut self.device, leaf_of(k), old, new)? {
                    UpdateOutcome::Updated(_) => Ok(ExtendOutcome::Bound { old, new }),
                    UpdateOutcome::Tampered => Ok(ExtendOutcome::Tampered),
                }
            }
            Binding::Incremental(acc) => {
                acc.inc_update(&mut self.device, k, old, new)?;
                Ok(ExtendOutcome::Bound { old, new })
            }
        }
    }

    /// Overwrites a vPCR without telling the binding layer.
    pub fn tamper_vpcr(
        &mut self,
        k: VTpmId,
        pcr: PcrIndex,
        forged: Digest160,
    ) -> Result<(), PlatformError> {
        self.vtpms
            .get_mut(&k)
            .ok_or(PlatformError::UnknownVTpm(k.get()))?
            .tamper(pcr, forged);
        Ok(())
    }

    /// Overwrites one stored tree node.
    pub fn tamper_tree_node(
        &mut self,
        pcr: PcrIndex,
        node: usize,
        forged: Digest160,
    ) -> Result<(), PlatformError> {
        match self.bindings.get_mut(&pcr) {
            Some(Binding::Tree(tree)) => Ok(tree.overwrite_node(node, forged)?),
            Some(Binding::Incremental(_)) => Err(PlatformError::NotATree(pcr)),
            None => Err(PlatformError::NotBound(pcr)),
        }
    }

    /// Overwrites the new vPCR recorded in one incremental log entry.
    pub fn tamper_inc_log(
        &mut self,
        pcr: PcrIndex,
        seq: usize,
        forged: Digest160,
    ) -> Result<(), PlatformError> {
        match self.bindings.get_mut(&pcr) {
            Some(Binding::Incremental(acc)) => {
                if acc.overwrite_log_vpcr(seq, forged) {
                    Ok(())
                } else {
                    Err(PlatformError::NoLogEntry(seq))
                }
            }
            Some(Binding::Tree(_)) => Err(PlatformError::NotIncremental(pcr)),
            None => Err(PlatformError::NotBound(pcr)),
        }
    }

    pub fn attest(&self, request: &AttestRequest) -> Result<QuoteBundle, PlatformError> {
        if request.scheme != self.config.scheme {
            return Err(PlatformError::SchemeMismatch {
                have: self.config.scheme,
                asked: request.scheme,
            });
        }
        let binding = self.binding(request.pcr)?;
        let vtpm = self.vtpm(request.vtpm)?;
        Ok(attest(&request.nonce, vtpm, &self.device, binding.view())?)
    }

    pub fn trusted_keys(&self) -> TrustedKeys {
        TrustedKeys {
            aik: self.device.aik_verifier(),
            vaiks: self
                .vtpms
                .iter()
                .map(|(k, v)| (*k, v.vaik_verifier()))
                .collect(),
            modulus: self.config.modulus.clone(),
        }
    }
}
