//! Binding of virtual TPM registers to a simulated hardware TPM.
//!
//! Two binding schemes are provided: a binary hash tree whose root lives in a
//! hardware PCR ([`treebind`]), and a multiplicative accumulator modulo a
//! large prime ([`incbind`]). [`attest`] verifies both remotely, and [`perf`]
//! holds the bus cycle cost model.

pub mod wire;

pub mod attest;
pub mod crypto;
pub mod hwtpm;
pub mod incbind;
pub mod perf;
pub mod platform;
pub mod treebind;
pub mod vtpm;

pub use wire::DecodeError;

use std::fmt;
use std::str::FromStr;

/// Which binding scheme ties vPCRs to a hardware PCR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    Tree,
    Incremental,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Tree => "tree",
            Scheme::Incremental => "incremental",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Scheme::Tree => 1,
            Scheme::Incremental => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Scheme::Tree),
            2 => Some(Scheme::Incremental),
            _ => None,
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tree" => Ok(Scheme::Tree),
            "incremental" | "inc" => Ok(Scheme::Incremental),
            other => Err(format!(
                "unknown scheme `{other}` (expected tree or incremental)"
            )),
        }
    }
}
