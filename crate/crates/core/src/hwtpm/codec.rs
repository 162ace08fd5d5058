//! Byte layout of the binding commands.
//!
//! Every block starts with the standard 10-byte request header
//! `tag(2) || paramSize(4) || ordinal(4)`, all big-endian.
//!
//! ```text
//! Update_Leaf_Init  tag | size | ord | pcrIndex(4) | treeHeight(2) | vPCR_old(20) | vPCR_new(20)   56 bytes
//! Update_Leaf       tag | size | ord | pcrIndexAndFlag(4) | sibling(20)                           34 bytes
//! Increment_Hash    tag | size | ord | pcrIndex(4) | vtpmId(4) | vPCR_old(20) | vPCR_new(20)       58 bytes
//! ```
//!
//! The top bit of `pcrIndexAndFlag` is set when the sibling is the left child.

use thiserror::Error;

use super::PcrIndex;
use crate::crypto::Digest160;
use crate::vtpm::VTpmId;

pub const TAG_RQU_COMMAND: u16 = 0x00c1;

pub const ORD_UPDATE_LEAF_INIT: u32 = 0x2000_0001;
pub const ORD_UPDATE_LEAF: u32 = 0x2000_0002;
pub const ORD_INCREMENT_HASH: u32 = 0x2000_0003;

pub const HEADER_LEN: usize = 10;
pub const UPDATE_LEAF_INIT_LEN: usize = 56;
pub const UPDATE_LEAF_LEN: usize = 34;
pub const INCREMENT_HASH_LEN: usize = 58;

const SIBLING_LEFT_FLAG: u32 = 0x8000_0000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed command block: {0}")]
    MalformedBlock(String),
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::MalformedBlock(msg.into())
}

/// Header-level view of a command: everything after the header is `body`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandBlock {
    pub tag: u16,
    pub ordinal: u32,
    pub body: Vec<u8>,
}

impl CommandBlock {
    pub fn param_size(&self) -> usize {
        HEADER_LEN + self.body.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let size = u32::try_from(self.param_size()).expect("command block exceeds 4 GiB");
        let mut out = Vec::with_capacity(self.param_size());
        out.extend_from_slice(&self.tag.to_be_bytes());
        out.extend_from_slice(&size.to_be_bytes());
        out.extend_from_slice(&self.ordinal.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(malformed(format!(
                "{} bytes is shorter than header",
                bytes.len()
            )));
        }
        let tag = u16::from_be_bytes([bytes[0], bytes[1]]);
        let size = u32::from_be_bytes(bytes[2..6].try_into().unwrap()) as usize;
        let ordinal = u32::from_be_bytes(bytes[6..10].try_into().unwrap());
        if size != bytes.len() {
            return Err(malformed(format!(
                "paramSize {size} does not match block length {}",
                bytes.len()
            )));
        }
        Ok(Self {
            tag,
            ordinal,
            body: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    UpdateLeafInit {
        pcr: PcrIndex,
        height: u16,
        vpcr_old: Digest160,
        vpcr_new: Digest160,
    },
    UpdateLeaf {
        pcr: PcrIndex,
        sibling: Digest160,
        sibling_is_left: bool,
    },
    IncrementHash {
        pcr: PcrIndex,
        vtpm: VTpmId,
        vpcr_old: Digest160,
        vpcr_new: Digest160,
    },
}

impl Command {
    pub fn ordinal(&self) -> u32 {
        match self {
            Self::UpdateLeafInit { .. } => ORD_UPDATE_LEAF_INIT,
            Self::UpdateLeaf { .. } => ORD_UPDATE_LEAF,
            Self::IncrementHash { .. } => ORD_INCREMENT_HASH,
        }
    }

    pub fn to_block(&self) -> CommandBlock {
        let mut body = Vec::with_capacity(48);
        match self {
            Self::UpdateLeafInit {
                pcr,
                height,
                vpcr_old,
                vpcr_new,
            } => {
                body.extend_from_slice(&u32::from(pcr.get()).to_be_bytes());
                body.extend_from_slice(&height.to_be_bytes());
                body.extend_from_slice(&vpcr_old.0);
                body.extend_from_slice(&vpcr_new.0);
            }
            Self::UpdateLeaf {
                pcr,
                sibling,
                sibling_is_left,
            } => {
                let mut word = u32::from(pcr.get());
                if *sibling_is_left {
                    word |= SIBLING_LEFT_FLAG;
                }
                body.extend_from_slice(&word.to_be_bytes());
                body.extend_from_slice(&sibling.0);
            }
            Self::IncrementHash {
                pcr,
                vtpm,
                vpcr_old,
                vpcr_new,
            } => {
                body.extend_from_slice(&u32::from(pcr.get()).to_be_bytes());
                body.extend_from_slice(&vtpm.get().to_be_bytes());
                body.extend_from_slice(&vpcr_old.0);
                body.extend_from_slice(&vpcr_new.0);
            }
        }
        CommandBlock {
            tag: TAG_RQU_COMMAND,
            ordinal: self.ordinal(),
            body,
        }
    }

    pub fn from_block(block: &CommandBlock) -> Result<Self, CodecError> {
        if block.tag != TAG_RQU_COMMAND {
            return Err(malformed(format!("unexpected tag {:#06x}", block.tag)));
        }
        let expected = match block.ordinal {
            ORD_UPDATE_LEAF_INIT => UPDATE_LEAF_INIT_LEN,
            ORD_UPDATE_LEAF => UPDATE_LEAF_LEN,
            ORD_INCREMENT_HASH => INCREMENT_HASH_LEN,
            other => return Err(malformed(format!("unknown ordinal {other:#010x}"))),
        };
        if block.param_size() != expected {
            return Err(malformed(format!(
                "ordinal {:#010x} needs {expected} bytes, got {}",
                block.ordinal,
                block.param_size()
            )));
        }
        let b = &block.body;
        let word = |at: usize| u32::from_be_bytes(b[at..at + 4].try_into().unwrap());
        let digest = |at: usize| Digest160(b[at..at + 20].try_into().unwrap());
        let pcr = |raw: u32| {
            u8::try_from(raw)
                .ok()
                .and_then(|v| PcrIndex::new(v).ok())
                .ok_or_else(|| malformed(format!("pcr index {raw} out of range")))
        };
        Ok(match block.ordinal {
            ORD_UPDATE_LEAF_INIT => Self::UpdateLeafInit {
                pcr: pcr(word(0))?,
                height: u16::from_be_bytes([b[4], b[5]]),
                vpcr_old: digest(6),
                vpcr_new: digest(26),
            },
            ORD_UPDATE_LEAF => {
                let w = word(0);
                Self::UpdateLeaf {
                    pcr: pcr(w & !SIBLING_LEFT_FLAG)?,
                    sibling: digest(4),
                    sibling_is_left: w & SIBLING_LEFT_FLAG != 0,
                }
            }
            _ => Self::IncrementHash {
                pcr: pcr(word(0))?,
                vtpm: VTpmId::new(word(4)).map_err(|_| malformed("vTPM id 0"))?,
                vpcr_old: digest(8),
                vpcr_new: digest(28),
            },
        })
    }
}

pub fn encode_command(cmd: &Command) -> Vec<u8> {
    cmd.to_block().encode()
}

pub fn decode_command(bytes: &[u8]) -> Result<Command, CodecError> {
    Command::from_block(&CommandBlock::decode(bytes)?)
}
