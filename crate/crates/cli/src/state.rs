//! On-disk environment.
//!
//! A state directory holds `config.txt`, the binary `state.bin` (device,
//! vTPMs, bindings and private key material), `trusted_keys.txt` (public
//! verifier keys for challengers) and a `lock` file. Writes go to a temporary
//! file that is renamed over the target, so a killed command leaves either
//! the old or the new state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::RngCore;
use vpcr_bind::attest::TrustedKeys;
use vpcr_bind::crypto::{
    Digest160, Ed25519Signer, HmacSigner, Modulus, Residue, Signer, VerifierKey, RESIDUE_BYTES,
};
use vpcr_bind::hwtpm::{HwTpm, PcrIndex, PcrValue, NUM_PCRS};
use vpcr_bind::incbind::{encode_log, read_log, IncAccumulator};
use vpcr_bind::platform::{Binding, Platform};
use vpcr_bind::treebind::HashTreeStore;
use vpcr_bind::vtpm::{decode_sml, encode_sml, VTpm, VTpmId};
use vpcr_bind::wire::{DecodeError, Reader, Writer};

use crate::config::{EnvConfig, SignerKind};

const MAGIC: &[u8; 8] = b"VPCRSTAT";
const STATE_VERSION: u8 = 1;

pub const CONFIG_FILE: &str = "config.txt";
pub const STATE_FILE: &str = "state.bin";
pub const TRUSTED_FILE: &str = "trusted_keys.txt";
const LOCK_FILE: &str = "lock";

/// Private half of a signing key.
#[derive(Clone, PartialEq, Eq)]
pub enum KeySecret {
    Ed25519([u8; 32]),
    Hmac(Vec<u8>),
}

impl KeySecret {
    pub fn generate(kind: SignerKind) -> Self {
        let mut bytes = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut bytes);
        match kind {
            SignerKind::Ed25519 => KeySecret::Ed25519(bytes),
            SignerKind::HmacSha256 => KeySecret::Hmac(bytes.to_vec()),
        }
    }

    pub fn signer(&self) -> Box<dyn Signer> {
        match self {
            KeySecret::Ed25519(seed) => Box::new(Ed25519Signer::from_seed(*seed)),
            KeySecret::Hmac(key) => Box::new(HmacSigner::new(key.clone())),
        }
    }

    fn write(&self, w: &mut Writer) {
        match self {
            KeySecret::Ed25519(seed) => w.u8(1).blob(seed),
            KeySecret::Hmac(key) => w.u8(2).blob(key),
        };
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => {
                let seed: [u8; 32] = r
                    .blob()?
                    .try_into()
                    .map_err(|_| DecodeError::invalid("ed25519 seed", "not 32 bytes"))?;
                Ok(KeySecret::Ed25519(seed))
            }
            2 => Ok(KeySecret::Hmac(r.blob()?.to_vec())),
            other => Err(DecodeError::invalid("key kind", other.to_string())),
        }
    }
}

/// A loaded environment: configuration, the platform, and its key material.
pub struct Env {
    pub config: EnvConfig,
    pub platform: Platform,
    pub aik: KeySecret,
    pub vaiks: BTreeMap<VTpmId, KeySecret>,
}

impl Env {
    pub fn create(config: EnvConfig) -> Result<Self> {
        let aik = KeySecret::generate(config.signer);
        let platform = Platform::new(config.platform_config(), aik.signer())?;
        Ok(Self {
            config,
            platform,
            aik,
            vaiks: BTreeMap::new(),
        })
    }

    pub fn create_vtpm(&mut self) -> Result<VTpmId> {
        let secret = KeySecret::generate(self.config.signer);
        let id = self.platform.create_vtpm(secret.signer())?;
        self.vaiks.insert(id, secret);
        Ok(id)
    }
}

/// Exclusive hold on a state directory for the lifetime of the value.
pub struct StateDir {
    path: PathBuf,
    _lock: File,
}

impl StateDir {
    /// Locks `path`, creating the directory when `create` is set.
    pub fn open(path: &Path, create: bool) -> Result<Self> {
        if create {
            fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        } else if !path.join(STATE_FILE).exists() {
            bail!("{} holds no environment; run `init` first", path.display());
        }
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path.join(LOCK_FILE))
            .with_context(|| format!("opening lock in {}", path.display()))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(TryLockError::WouldBlock) => {
                bail!("{} is in use by another process", path.display())
            }
            Err(TryLockError::Error(e)) => return Err(e).context("locking state directory"),
        }
        Ok(Self {
            path: path.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn exists(&self) -> bool {
        self.path.join(STATE_FILE).exists()
    }

    pub fn load(&self) -> Result<Env> {
        let config_text =
            fs::read_to_string(self.path.join(CONFIG_FILE)).context("reading config")?;
        let config = EnvConfig::parse(&config_text).context("parsing config")?;
        let bytes = fs::read(self.path.join(STATE_FILE)).context("reading state")?;
        decode_state(&bytes, config).context("decoding state")
    }

    pub fn save(&self, env: &Env) -> Result<()> {
        write_atomic(
            &self.path.join(CONFIG_FILE),
            env.config.to_text().as_bytes(),
        )?;
        write_atomic(
            &self.path.join(TRUSTED_FILE),
            trusted_keys_text(&env.platform.trusted_keys()).as_bytes(),
        )?;
        // The state file goes last: its presence marks a complete environment.
        write_atomic(&self.path.join(STATE_FILE), &encode_state(env))?;
        if let Ok(dir) = File::open(&self.path) {
            let _ = dir.sync_all();
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("replacing {}", path.display()))?;
    Ok(())
}

fn encode_state(env: &Env) -> Vec<u8> {
    let p = &env.platform;
    let mut w = Writer::new();
    w.raw(MAGIC).u8(STATE_VERSION);
    env.aik.write(&mut w);

    let bound: Vec<(PcrIndex, PcrValue)> = PcrIndex::all()
        .filter_map(|i| p.device().pcr_read(i).ok().map(|v| (i, v)))
        .collect();
    w.u8(bound.len() as u8);
    for (i, value) in bound {
        w.u8(i.get());
        match value {
            PcrValue::Tree(d) => {
                w.u8(1).raw(&d.0);
            }
            PcrValue::Incremental(r) => {
                w.u8(2)
                    .raw(&r.to_bytes())
                    .u8(u8::from(p.device().is_setup_open(i)));
            }
        }
    }

    w.u32(p.vtpms().len() as u32);
    for (id, vtpm) in p.vtpms() {
        w.u32(id.get());
        env.vaiks[id].write(&mut w);
        for v in vtpm.vpcrs() {
            w.raw(&v.0);
        }
        w.blob(&encode_sml(vtpm.sml()));
    }

    w.u8(p.bindings().len() as u8);
    for (pcr, binding) in p.bindings() {
        w.u8(pcr.get());
        match binding {
            Binding::Tree(tree) => {
                w.u8(1).u8(tree.height()).u32(tree.nodes().len() as u32);
                for n in tree.nodes() {
                    w.raw(&n.0);
                }
            }
            Binding::Incremental(acc) => {
                w.u8(2).raw(&acc.initial().to_bytes());
                w.u32(acc.setup_members().len() as u32);
                for (k, v) in acc.setup_members() {
                    w.u32(k.get()).raw(&v.0);
                }
                w.blob(&encode_log(acc.log()));
            }
        }
    }
    w.finish()
}

fn pcr(r: &mut Reader<'_>) -> Result<PcrIndex, DecodeError> {
    PcrIndex::new(r.u8()?).map_err(|e| DecodeError::invalid("pcr", e.to_string()))
}

fn vtpm_id(r: &mut Reader<'_>) -> Result<VTpmId, DecodeError> {
    VTpmId::new(r.u32()?).map_err(|e| DecodeError::invalid("vtpm", e.to_string()))
}

fn residue(r: &mut Reader<'_>, m: &Modulus) -> Result<Residue, DecodeError> {
    Residue::from_bytes(r.take(RESIDUE_BYTES)?, m)
        .map_err(|e| DecodeError::invalid("residue", e.to_string()))
}

fn decode_state(bytes: &[u8], config: EnvConfig) -> Result<Env> {
    let pc = config.platform_config();
    let m = pc.modulus.clone();
    let mut r = Reader::new(bytes);
    if r.take(MAGIC.len())? != MAGIC {
        bail!("not a state file");
    }
    let version = r.u8()?;
    if version != STATE_VERSION {
        return Err(DecodeError::Version(version).into());
    }
    let aik = KeySecret::read(&mut r)?;
    let mut device = HwTpm::new(aik.signer(), m.clone());

    for _ in 0..r.u8()? {
        let i = pcr(&mut r)?;
        match r.u8()? {
            1 => device.bind_tree(i, Digest160(r.array()?))?,
            2 => {
                let value = residue(&mut r, &m)?;
                let open = r.u8()? != 0;
                device.bind_incremental(i, value, open)?;
            }
            other => bail!("unknown PCR mode {other}"),
        }
    }

    let mut vtpms = BTreeMap::new();
    let mut vaiks = BTreeMap::new();
    for _ in 0..r.u32()? {
        let id = vtpm_id(&mut r)?;
        let secret = KeySecret::read(&mut r)?;
        let mut vpcrs = [Digest160::zero(); NUM_PCRS];
        for v in &mut vpcrs {
            *v = Digest160(r.array()?);
        }
        let sml = decode_sml(r.blob()?)?;
        vtpms.insert(id, VTpm::restore(id, vpcrs, sml, secret.signer()));
        vaiks.insert(id, secret);
    }

    let mut bindings = BTreeMap::new();
    for _ in 0..r.u8()? {
        let i = pcr(&mut r)?;
        let binding = match r.u8()? {
            1 => {
                let height = r.u8()?;
                let count = r.u32()? as usize;
                let nodes = (0..count)
                    .map(|_| r.array().map(Digest160))
                    .collect::<Result<Vec<_>, _>>()?;
                Binding::Tree(HashTreeStore::from_nodes(i, height, nodes)?)
            }
            2 => {
                let initial = residue(&mut r, &m)?;
                let mut setup = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let k = vtpm_id(&mut r)?;
                    setup.insert(k, Digest160(r.array()?));
                }
                let log_bytes = r.blob()?;
                let mut lr = Reader::new(log_bytes);
                let log = read_log(&mut lr, &m)?;
                lr.finish()?;
                Binding::Incremental(IncAccumulator::restore(i, m.clone(), setup, initial, log))
            }
            other => bail!("unknown binding kind {other}"),
        };
        bindings.insert(i, binding);
    }
    r.finish()?;

    if vtpms.keys().ne(vaiks.keys()) {
        return Err(anyhow!("vTPM key material out of step with vTPMs"));
    }
    Ok(Env {
        platform: Platform::from_parts(pc, device, vtpms, bindings),
        config,
        aik,
        vaiks,
    })
}

/// `aik = <key>`, `vtpm.<id> = <key>`, `modulus = <hex>`, one per line.
pub fn trusted_keys_text(keys: &TrustedKeys) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "aik = {}", keys.aik.to_text());
    for (id, key) in &keys.vaiks {
        let _ = writeln!(out, "vtpm.{} = {}", id.get(), key.to_text());
    }
    let _ = writeln!(out, "modulus = {}", keys.modulus.to_hex());
    out
}

pub fn parse_trusted_keys(text: &str) -> Result<TrustedKeys> {
    let mut aik = None;
    let mut modulus = None;
    let mut vaiks = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", no + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "aik" {
            aik = Some(VerifierKey::parse(value)?);
        } else if key == "modulus" {
            modulus = Some(Modulus::parse(value)?);
        } else if let Some(id) = key.strip_prefix("vtpm.") {
            vaiks.insert(VTpmId::new(id.parse()?)?, VerifierKey::parse(value)?);
        } else {
            bail!("line {}: unknown key `{key}`", no + 1);
        }
    }
    Ok(TrustedKeys {
        aik: aik.ok_or_else(|| anyhow!("no `aik` entry"))?,
        vaiks,
        modulus: modulus.unwrap_or_else(Modulus::mersenne_521),
    })
}
