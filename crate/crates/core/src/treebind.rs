//! Hash-tree binding.
//!
//! All same-index vPCRs of the platform are the leaves of a full binary tree
//! of fixed height; the root lives in the hardware PCR. Leaf `j` holds the vPCR
//! of vTPM `j + 1`. Nodes are stored as an implicit heap (root at 0, children
//! of `n` at `2n + 1` and `2n + 2`), so the leaves start at `2^height - 1`.
//!
//! An update never writes the PCR directly: the driver opens a session with
//! the old and new leaf value and streams one sibling per level. The device
//! recomputes both the old and the new root and only accepts the new one if
//! the old one matches what it holds.

use thiserror::Error;

use crate::crypto::{sha1_pair, Digest160};
use crate::hwtpm::{Command, HwTpm, PcrIndex, Response, TpmError};
use crate::perf::OpCounters;
use crate::wire::{DecodeError, Reader, Writer};

pub const MAX_HEIGHT: u8 = 20;
const SNAPSHOT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("tree height {0} outside 1..={MAX_HEIGHT}")]
    HeightOutOfRange(u8),
    #[error("leaf {leaf} outside tree of {capacity} leaves")]
    LeafOutOfRange { leaf: usize, capacity: usize },
    #[error("node {0} outside tree")]
    NodeOutOfRange(usize),
    #[error("device root {device} differs from host recomputation {local}")]
    DeviceDesync { device: Digest160, local: Digest160 },
    #[error(transparent)]
    Device(#[from] TpmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub sibling: Digest160,
    pub sibling_is_left: bool,
}

/// Siblings from the leaf level up to the children of the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiblingPath(pub Vec<PathStep>);

impl SiblingPath {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Hashes `leaf` up the path, returning the implied root.
    pub fn fold(&self, leaf: Digest160) -> Digest160 {
        self.0.iter().fold(leaf, |acc, step| {
            if step.sibling_is_left {
                sha1_pair(&step.sibling, &acc)
            } else {
                sha1_pair(&acc, &step.sibling)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Updated(Digest160),
    Tampered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashTreeStore {
    height: u8,
    pcr: PcrIndex,
    nodes: Vec<Digest160>,
}

fn check_height(height: u8) -> Result<(), TreeError> {
    if (1..=MAX_HEIGHT).contains(&height) {
        Ok(())
    } else {
        Err(TreeError::HeightOutOfRange(height))
    }
}

impl HashTreeStore {
    pub fn new(height: u8, default_leaf: Digest160, pcr: PcrIndex) -> Result<Self, TreeError> {
        check_height(height)?;
        let mut nodes = vec![default_leaf; (1usize << (height + 1)) - 1];
        // Every node of a level holds the same value, so hash once per level.
        let mut level_value = default_leaf;
        for depth in (0..height).rev() {
            level_value = sha1_pair(&level_value, &level_value);
            let start = (1usize << depth) - 1;
            nodes[start..2 * start + 1].fill(level_value);
        }
        Ok(Self { height, pcr, nodes })
    }

    pub fn from_leaves(pcr: PcrIndex, height: u8, leaves: &[Digest160]) -> Result<Self, TreeError> {
        check_height(height)?;
        let capacity = 1usize << height;
        if leaves.len() != capacity {
            return Err(TreeError::LeafOutOfRange {
                leaf: leaves.len(),
                capacity,
            });
        }
        let mut nodes = vec![Digest160::zero(); 2 * capacity - 1];
        nodes[capacity - 1..].copy_from_slice(leaves);
        for n in (0..capacity - 1).rev() {
            nodes[n] = sha1_pair(&nodes[2 * n + 1], &nodes[2 * n + 2]);
        }
        Ok(Self { height, pcr, nodes })
    }

    /// Rebuilds a store from the array returned by [`HashTreeStore::nodes`].
    /// Nodes are taken as given, so a stored inconsistency survives.
    pub fn from_nodes(pcr: PcrIndex, height: u8, nodes: Vec<Digest160>) -> Result<Self, TreeError> {
        check_height(height)?;
        let expected = (1usize << (height + 1)) - 1;
        if nodes.len() != expected {
            return Err(TreeError::NodeOutOfRange(nodes.len()));
        }
        Ok(Self { height, pcr, nodes })
    }

    pub fn height(&self) -> u8 {
        self.height
    }

    pub fn pcr(&self) -> PcrIndex {
        self.pcr
    }

    pub fn capacity(&self) -> usize {
        1 << self.height
    }

    pub fn root(&self) -> Digest160 {
        self.nodes[0]
    }

    pub fn nodes(&self) -> &[Digest160] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[Digest160] {
        &self.nodes[self.capacity() - 1..]
    }

    /// Heap index of leaf `leaf`.
    pub fn leaf_node(&self, leaf: usize) -> Result<usize, TreeError> {
        if leaf >= self.capacity() {
            return Err(TreeError::LeafOutOfRange {
                leaf,
                capacity: self.capacity(),
            });
        }
        Ok(self.capacity() - 1 + leaf)
    }

    pub fn leaf(&self, leaf: usize) -> Result<Digest160, TreeError> {
        Ok(self.nodes[self.leaf_node(leaf)?])
    }

    pub fn sibling_path(&self, leaf: usize) -> Result<SiblingPath, TreeError> {
        let mut n = self.leaf_node(leaf)?;
        let mut steps = Vec::with_capacity(usize::from(self.height));
        while n > 0 {
            let (sibling, sibling_is_left) = if n % 2 == 1 {
                (n + 1, false)
            } else {
                (n - 1, true)
            };
            steps.push(PathStep {
                sibling: self.nodes[sibling],
                sibling_is_left,
            });
            n = (n - 1) / 2;
        }
        Ok(SiblingPath(steps))
    }

    /// Heap indices of the nodes the device consumes when `leaf` is updated:
    /// the leaf itself and every sibling on its path.
    pub fn path_support(&self, leaf: usize) -> Result<Vec<usize>, TreeError> {
        let mut n = self.leaf_node(leaf)?;
        let mut out = vec![n];
        while n > 0 {
            out.push(if n % 2 == 1 { n + 1 } else { n - 1 });
            n = (n - 1) / 2;
        }
        Ok(out)
    }

    /// Binds the device PCR of this tree to the current root (setup phase).
    pub fn bind_device(&self, tpm: &mut HwTpm) -> Result<(), TpmError> {
        tpm.bind_tree(self.pcr, self.root())
    }

    /// Replaces `leaf` with `vpcr_new`, taking the stored leaf as old value.
    pub fn bind_update(
        &mut self,
        tpm: &mut HwTpm,
        leaf: usize,
        vpcr_new: Digest160,
    ) -> Result<UpdateOutcome, TreeError> {
        let old = self.leaf(leaf)?;
        self.bind_transition(tpm, leaf, old, vpcr_new)
    }

    /// Runs the device update protocol for `leaf` moving from `vpcr_old` to
    /// `vpcr_new`. The host tree is only written once the device accepts.
    pub fn bind_transition(
        &mut self,
        tpm: &mut HwTpm,
        leaf: usize,
        vpcr_old: Digest160,
        vpcr_new: Digest160,
    ) -> Result<UpdateOutcome, TreeError> {
        let path = self.sibling_path(leaf)?;
        tpm.submit(&Command::UpdateLeafInit {
            pcr: self.pcr,
            height: u16::from(self.height),
            vpcr_old,
            vpcr_new,
        })?;
        let mut device_root = None;
        for step in &path.0 {
            let res = tpm.submit(&Command::UpdateLeaf {
                pcr: self.pcr,
                sibling: step.sibling,
                sibling_is_left: step.sibling_is_left,
            });
            match res {
                Ok(Response::Updated(root)) => device_root = Some(root),
                Ok(_) => {}
                Err(TpmError::Tampered(_)) => return Ok(UpdateOutcome::Tampered),
                Err(e) => {
                    tpm.update_abort(self.pcr);
                    return Err(e.into());
                }
            }
        }
        let device_root = device_root.expect("height >= 1 walk ends with a root");
        let local = path.fold(vpcr_new);
        if local != device_root {
            return Err(TreeError::DeviceDesync {
                device: device_root,
                local,
            });
        }
        self.write_leaf(leaf, vpcr_new);
        Ok(UpdateOutcome::Updated(device_root))
    }

    fn write_leaf(&mut self, leaf: usize, value: Digest160) {
        let mut n = self.capacity() - 1 + leaf;
        self.nodes[n] = value;
        while n > 0 {
            n = (n - 1) / 2;
            self.nodes[n] = sha1_pair(&self.nodes[2 * n + 1], &self.nodes[2 * n + 2]);
        }
    }

    /// Overwrites one stored node without touching anything else.
    /// Attack injection for tests and demos.
    pub fn overwrite_node(&mut self, node: usize, value: Digest160) -> Result<(), TreeError> {
        let slot = self
            .nodes
            .get_mut(node)
            .ok_or(TreeError::NodeOutOfRange(node))?;
        *slot = value;
        Ok(())
    }

    /// Rewrites a leaf and all its ancestors consistently on the host only,
    /// as an attacker controlling host memory would.
    pub fn overwrite_leaf_consistent(
        &mut self,
        leaf: usize,
        value: Digest160,
    ) -> Result<(), TreeError> {
        self.leaf_node(leaf)?;
        self.write_leaf(leaf, value);
        Ok(())
    }

    pub fn snapshot(&self) -> TreeSnapshot {
        TreeSnapshot {
            height: self.height,
            leaves: self.leaves().to_vec(),
        }
    }
}

/// Leaf contents of a tree, enough to recompute its root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSnapshot {
    pub height: u8,
    pub leaves: Vec<Digest160>,
}

impl TreeSnapshot {
    /// `version(1) || height(1) || leaves(20 * 2^height)`.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(SNAPSHOT_VERSION).u8(self.height);
        for leaf in &self.leaves {
            w.raw(&leaf.0);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let version = r.u8()?;
        if version != SNAPSHOT_VERSION {
            return Err(DecodeError::Version(version));
        }
        let height = r.u8()?;
        check_height(height).map_err(|e| DecodeError::invalid("tree height", e.to_string()))?;
        let leaves = (0..1usize << height)
            .map(|_| r.array().map(Digest160))
            .collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Ok(Self { height, leaves })
    }

    /// Whether the height is in range and the leaf count matches it.
    pub fn is_well_formed(&self) -> bool {
        check_height(self.height).is_ok() && self.leaves.len() == 1usize << self.height
    }

    /// Recomputes the root from all leaves, counting one hash per internal node.
    /// Only meaningful for a well-formed snapshot.
    pub fn compute_root(&self, counters: &mut OpCounters) -> Digest160 {
        let mut level = self.leaves.clone();
        while level.len() > 1 {
            level = level
                .chunks_exact(2)
                .map(|pair| sha1_pair(&pair[0], &pair[1]))
                .collect();
            counters.hashes += level.len() as u64;
        }
        level[0]
    }

    pub fn into_store(self, pcr: PcrIndex) -> Result<HashTreeStore, TreeError> {
        HashTreeStore::from_leaves(pcr, self.height, &self.leaves)
    }
}
