//! Environment configuration: a `key = value` text file.
//!
//! ```text
//! # comments and blank lines are ignored
//! scheme = tree            # tree | incremental
//! tree_height = 4          # tree only, 1..=20
//! modulus = mersenne521    # incremental only: preset name or hex prime
//! pcrs = 10,11             # hardware indices to bind
//! signer = ed25519         # ed25519 | hmac-sha256
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use vpcr_bind::crypto::Modulus;
use vpcr_bind::hwtpm::PcrIndex;
use vpcr_bind::platform::PlatformConfig;
use vpcr_bind::treebind::MAX_HEIGHT;
use vpcr_bind::Scheme;

pub const DEFAULT_TREE_HEIGHT: u8 = 4;
pub const DEFAULT_PCR: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignerKind {
    Ed25519,
    HmacSha256,
}

impl SignerKind {
    pub fn label(self) -> &'static str {
        match self {
            SignerKind::Ed25519 => "ed25519",
            SignerKind::HmacSha256 => "hmac-sha256",
        }
    }
}

impl FromStr for SignerKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ed25519" => Ok(SignerKind::Ed25519),
            "hmac-sha256" | "hmac" => Ok(SignerKind::HmacSha256),
            other => bail!("unknown signer `{other}` (expected ed25519 or hmac-sha256)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvConfig {
    pub scheme: Scheme,
    /// Set iff the scheme is tree.
    pub tree_height: Option<u8>,
    /// Set iff the scheme is incremental.
    pub modulus: Option<Modulus>,
    pub pcrs: Vec<PcrIndex>,
    pub signer: SignerKind,
}

impl EnvConfig {
    pub fn new(scheme: Scheme) -> Self {
        let (tree_height, modulus) = match scheme {
            Scheme::Tree => (Some(DEFAULT_TREE_HEIGHT), None),
            Scheme::Incremental => (None, Some(Modulus::mersenne_521())),
        };
        Self {
            scheme,
            tree_height,
            modulus,
            pcrs: vec![PcrIndex::new(DEFAULT_PCR).expect("valid index")],
            signer: SignerKind::Ed25519,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut scheme = None;
        let mut tree_height = None;
        let mut modulus = None;
        let mut pcrs = None;
        let mut signer = None;
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", no + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("line {}: duplicate key `{key}`", no + 1);
            }
            let ctx = || format!("line {}: bad value for `{key}`", no + 1);
            match key {
                "scheme" => {
                    scheme = Some(
                        value
                            .parse::<Scheme>()
                            .map_err(|e| anyhow!(e))
                            .with_context(ctx)?,
                    )
                }
                "tree_height" => tree_height = Some(parse_height(value).with_context(ctx)?),
                "modulus" => modulus = Some(Modulus::parse(value).with_context(ctx)?),
                "pcrs" => pcrs = Some(parse_pcrs(value).with_context(ctx)?),
                "signer" => signer = Some(value.parse().with_context(ctx)?),
                other => bail!("line {}: unknown key `{other}`", no + 1),
            }
        }
        let scheme = scheme.ok_or_else(|| anyhow!("missing `scheme`"))?;
        let mut cfg = Self::new(scheme);
        match scheme {
            Scheme::Tree => {
                if modulus.is_some() {
                    bail!("`modulus` only applies to the incremental scheme");
                }
                cfg.tree_height = Some(tree_height.unwrap_or(DEFAULT_TREE_HEIGHT));
            }
            Scheme::Incremental => {
                if tree_height.is_some() {
                    bail!("`tree_height` only applies to the tree scheme");
                }
                cfg.modulus = Some(modulus.unwrap_or_else(Modulus::mersenne_521));
            }
        }
        if let Some(pcrs) = pcrs {
            cfg.pcrs = pcrs;
        }
        if let Some(signer) = signer {
            cfg.signer = signer;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scheme = {}", self.scheme);
        if let Some(h) = self.tree_height {
            let _ = writeln!(out, "tree_height = {h}");
        }
        if let Some(m) = &self.modulus {
            let text = if *m == Modulus::mersenne_521() {
                "mersenne521".to_string()
            } else {
                m.to_hex()
            };
            let _ = writeln!(out, "modulus = {text}");
        }
        let pcrs: Vec<String> = self.pcrs.iter().map(|p| p.get().to_string()).collect();
        let _ = writeln!(out, "pcrs = {}", pcrs.join(","));
        let _ = writeln!(out, "signer = {}", self.signer.label());
        out
    }

    pub fn platform_config(&self) -> PlatformConfig {
        PlatformConfig {
            scheme: self.scheme,
            tree_height: self.tree_height.unwrap_or(DEFAULT_TREE_HEIGHT),
            modulus: self.modulus.clone().unwrap_or_else(Modulus::mersenne_521),
            pcrs: self.pcrs.clone(),
        }
    }
}

pub fn parse_height(s: &str) -> Result<u8> {
    let h: u8 = s.parse()?;
    if !(1..=MAX_HEIGHT).contains(&h) {
        bail!("tree height {h} outside 1..={MAX_HEIGHT}");
    }
    Ok(h)
}

pub fn parse_pcrs(s: &str) -> Result<Vec<PcrIndex>> {
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        out.insert(PcrIndex::new(part.parse()?)?);
    }
    if out.is_empty() {
        bail!("no PCR indices given");
    }
    Ok(out.into_iter().collect())
}
