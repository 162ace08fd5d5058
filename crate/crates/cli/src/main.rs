mod config;
mod state;

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;
use vpcr_bind::attest::protocol::{request_bundle, serve_connection, AttestRequest, ProtocolError};
use vpcr_bind::attest::{verify_bundle, Verdict, VerifyPolicy};
use vpcr_bind::crypto::{sha1, Digest160, Modulus};
use vpcr_bind::hwtpm::PcrIndex;
use vpcr_bind::perf::{emit_scaling, emit_tables, scaling_sweep, CostModel, ReportFormat};
use vpcr_bind::platform::{Binding, ExtendOutcome, Platform};
use vpcr_bind::vtpm::VTpmId;
use vpcr_bind::Scheme;

use crate::config::{parse_height, parse_pcrs, EnvConfig, SignerKind};
use crate::state::{parse_trusted_keys, Env, StateDir, TRUSTED_FILE};

const EXIT_REJECTED: u8 = 1;
const EXIT_TAMPERED: u8 = 2;
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(
    name = "vpcr-bind",
    version,
    about = "Bind virtual TPM PCRs to a simulated hardware TPM"
)]
struct Cli {
    /// Directory holding the environment.
    #[arg(long, global = true, default_value = "vpcr-state")]
    state_dir: PathBuf,
    /// Environment config file used by `init`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create the device and binding state.
    Init(InitArgs),
    /// Add a vTPM; prints its id.
    VtpmCreate,
    /// Measure into a vPCR and propagate to the hardware binding.
    Extend(ExtendArgs),
    /// Overwrite state behind the binding layer's back.
    Tamper(TamperArgs),
    /// Show device, binding and vTPM state.
    Status(StatusArgs),
    /// Answer attestation requests.
    AttestServe(ServeArgs),
    /// Request and verify an attestation bundle.
    Challenge(ChallengeArgs),
    /// `attest serve` / `attest challenge` spellings of the above.
    Attest {
        #[command(subcommand)]
        command: AttestCommand,
    },
    /// Emit the cost-model tables or the operation-count sweep.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum AttestCommand {
    Serve(ServeArgs),
    Challenge(ChallengeArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Replace an existing environment.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long, value_parser = parse_height)]
    tree_height: Option<u8>,
    /// `mersenne521` or a hex prime.
    #[arg(long, value_parser = |s: &str| Modulus::parse(s))]
    modulus: Option<Modulus>,
    /// Comma-separated hardware PCR indices to bind.
    #[arg(long)]
    pcrs: Option<String>,
    #[arg(long, value_parser = |s: &str| s.parse::<SignerKind>())]
    signer: Option<SignerKind>,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long)]
    vtpm: u32,
    #[arg(long)]
    pcr: u8,
    /// 20-byte measurement digest in hex.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    measurement: Option<String>,
    /// Measure this string (its SHA-1 becomes the measurement).
    #[arg(long)]
    data: Option<String>,
    #[arg(long, default_value = "")]
    description: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum TamperTarget {
    /// A vPCR of one vTPM.
    Vpcr,
    /// One stored node of a hash tree.
    TreeNode,
    /// The new vPCR recorded in one incremental log entry.
    LogEntry,
}

#[derive(Args)]
struct TamperArgs {
    #[arg(long, value_enum, default_value = "vpcr")]
    target: TamperTarget,
    #[arg(long)]
    pcr: u8,
    /// vTPM id (vpcr target).
    #[arg(long)]
    vtpm: Option<u32>,
    /// Node index (tree-node) or log sequence number (log-entry).
    #[arg(long)]
    index: Option<usize>,
    /// Forged 20-byte value in hex.
    #[arg(long)]
    value: String,
}

#[derive(Args)]
struct StatusArgs {
    /// Show every stored tree node and log entry.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7600")]
    addr: String,
    /// Exit after this many connections.
    #[arg(long)]
    max_connections: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
}

#[derive(Args)]
struct ChallengeArgs {
    #[arg(long, default_value = "127.0.0.1:7600")]
    addr: String,
    #[arg(long)]
    scheme: Scheme,
    #[arg(long, default_value_t = 1)]
    vtpm: u32,
    #[arg(long, default_value_t = config::DEFAULT_PCR)]
    pcr: u8,
    /// Trusted keys file; defaults to the one in the state directory.
    #[arg(long)]
    trusted: Option<PathBuf>,
    /// Reference measurement list: one hex digest per line.
    #[arg(long)]
    rml: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    /// Verify against a different nonce than the one sent.
    #[arg(long, hide = true)]
    test_stale_nonce: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchMode {
    Tables,
    Scaling,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "tables")]
    mode: BenchMode,
    #[arg(long, value_enum, default_value = "text")]
    format: BenchFormat,
}

fn main() -> ExitCode {
    // Usage errors must not collide with the tamper exit code.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Init(args) => cmd_init(&cli.state_dir, cli.config.as_deref(), args),
        Command::VtpmCreate => cmd_vtpm_create(&cli.state_dir),
        Command::Extend(args) => cmd_extend(&cli.state_dir, args),
        Command::Tamper(args) => cmd_tamper(&cli.state_dir, args),
        Command::Status(args) => cmd_status(&cli.state_dir, args),
        Command::AttestServe(args)
        | Command::Attest {
            command: AttestCommand::Serve(args),
        } => cmd_serve(&cli.state_dir, args),
        Command::Challenge(args)
        | Command::Attest {
            command: AttestCommand::Challenge(args),
        } => cmd_challenge(&cli.state_dir, args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn cmd_init(dir: &std::path::Path, config: Option<&std::path::Path>, args: InitArgs) -> Result<u8> {
    let sd = StateDir::open(dir, true)?;
    if sd.exists() && !args.force {
        bail!(
            "{} already holds an environment (use --force to replace it)",
            dir.display()
        );
    }
    let mut cfg = match config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            EnvConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => EnvConfig::new(args.scheme.unwrap_or(Scheme::Tree)),
    };
    if let Some(scheme) = args.scheme {
        if scheme != cfg.scheme {
            cfg = EnvConfig {
                pcrs: cfg.pcrs,
                signer: cfg.signer,
                ..EnvConfig::new(scheme)
            };
        }
    }
    if let Some(h) = args.tree_height {
        if cfg.scheme != Scheme::Tree {
            bail!("--tree-height only applies to the tree scheme");
        }
        cfg.tree_height = Some(h);
    }
    if let Some(m) = args.modulus {
        if cfg.scheme != Scheme::Incremental {
            bail!("--modulus only applies to the incremental scheme");
        }
        cfg.modulus = Some(m);
    }
    if let Some(pcrs) = args.pcrs {
        cfg.pcrs = parse_pcrs(&pcrs)?;
    }
    if let Some(signer) = args.signer {
        cfg.signer = signer;
    }
    let env = Env::create(cfg)?;
    sd.save(&env)?;
    println!(
        "initialized {} environment in {}",
        env.config.scheme,
        dir.display()
    );
    print_device(&env.platform);
    Ok(0)
}

fn cmd_vtpm_create(dir: &std::path::Path) -> Result<u8> {
    let sd = StateDir::open(dir, false)?;
    let mut env = sd.load()?;
    let id = env.create_vtpm()?;
    sd.save(&env)?;
    println!("{}", id.get());
    Ok(0)
}

fn parse_digest(s: &str) -> Result<Digest160> {
    Digest160::from_hex(s).map_err(|e| anyhow!("bad digest `{s}`: {e}"))
}

fn vtpm_id(id: u32) -> Result<VTpmId> {
    VTpmId::new(id).map_err(|e| anyhow!("{e}"))
}

fn cmd_extend(dir: &std::path::Path, args: ExtendArgs) -> Result<u8> {
    let sd = StateDir::open(dir, false)?;
    let mut env = sd.load()?;
    let measurement = match (&args.measurement, &args.data) {
        (Some(hex), _) => parse_digest(hex)?,
        (None, Some(data)) => sha1(data.as_bytes()),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let k = vtpm_id(args.vtpm)?;
    let pcr = PcrIndex::new(args.pcr)?;
    let outcome = env
        .platform
        .extend(k, pcr, measurement, args.description.into_bytes())?;
    sd.save(&env)?;
    match outcome {
        ExtendOutcome::Local { old, new } => {
            println!(
                "vtpm {} pcr {} (unbound): {old} -> {new}",
                k.get(),
                pcr.get()
            );
            Ok(0)
        }
        ExtendOutcome::Bound { old, new } => {
            println!("vtpm {} pcr {}: {old} -> {new}", k.get(), pcr.get());
            Ok(0)
        }
        ExtendOutcome::Tampered => {
            println!(
                "TAMPERED: device rejected the update of vtpm {} pcr {}",
                k.get(),
                pcr.get()
            );
            Ok(EXIT_TAMPERED)
        }
    }
}

fn cmd_tamper(dir: &std::path::Path, args: TamperArgs) -> Result<u8> {
    let sd = StateDir::open(dir, false)?;
    let mut env = sd.load()?;
    let pcr = PcrIndex::new(args.pcr)?;
    let forged = parse_digest(&args.value)?;
    match args.target {
        TamperTarget::Vpcr => {
            let k = vtpm_id(
                args.vtpm
                    .ok_or_else(|| anyhow!("--vtpm is required for vpcr"))?,
            )?;
            env.platform.tamper_vpcr(k, pcr, forged)?;
        }
        TamperTarget::TreeNode => {
            let node = args
                .index
                .ok_or_else(|| anyhow!("--index is required for tree-node"))?;
            env.platform.tamper_tree_node(pcr, node, forged)?;
        }
        TamperTarget::LogEntry => {
            let seq = args
                .index
                .ok_or_else(|| anyhow!("--index is required for log-entry"))?;
            env.platform.tamper_inc_log(pcr, seq, forged)?;
        }
    }
    sd.save(&env)?;
    println!("tampered");
    Ok(0)
}

fn print_device(p: &Platform) {
    for i in PcrIndex::all() {
        if let Ok(v) = p.device().pcr_read(i) {
            match v.as_tree() {
                Some(root) => println!("pcr {:>2} tree root {root}", i.get()),
                None => println!(
                    "pcr {:>2} accumulator {}{}",
                    i.get(),
                    v.as_incremental().expect("bound value").to_hex(),
                    if p.device().is_setup_open(i) {
                        " (setup open)"
                    } else {
                        ""
                    }
                ),
            }
        }
    }
}

fn cmd_status(dir: &std::path::Path, args: StatusArgs) -> Result<u8> {
    let sd = StateDir::open(dir, false)?;
    let env = sd.load()?;
    let p = &env.platform;
    println!("scheme {}", env.config.scheme);
    print_device(p);
    for (pcr, binding) in p.bindings() {
        match binding {
            Binding::Tree(tree) => {
                println!(
                    "binding pcr {}: tree height {}, {} leaves, host root {}",
                    pcr.get(),
                    tree.height(),
                    tree.capacity(),
                    tree.root()
                );
                if args.verbose {
                    for (n, d) in tree.nodes().iter().enumerate() {
                        println!("  node {n:>4} {d}");
                    }
                }
            }
            Binding::Incremental(acc) => {
                println!(
                    "binding pcr {}: incremental, {} setup members, {} log entries",
                    pcr.get(),
                    acc.setup_members().len(),
                    acc.log().len()
                );
                if args.verbose {
                    for e in acc.log() {
                        println!(
                            "  seq {:>4} vtpm {} {} -> {}",
                            e.seq,
                            e.vtpm.get(),
                            e.vpcr_old,
                            e.vpcr_new
                        );
                    }
                }
            }
        }
    }
    for (id, v) in p.vtpms() {
        println!("vtpm {} ({} log entries)", id.get(), v.sml().len());
        for pcr in p.bindings().keys() {
            println!("  vpcr {:>2} {}", pcr.get(), v.vpcr(*pcr));
        }
    }
    Ok(0)
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr}"))?
        .next()
        .ok_or_else(|| anyhow!("{addr} resolves to nothing"))
}

fn cmd_serve(dir: &std::path::Path, args: ServeArgs) -> Result<u8> {
    // The lock is held for as long as the server runs.
    let sd = StateDir::open(dir, false)?;
    let env = sd.load()?;
    let platform = Arc::new(Mutex::new(env.platform));
    let listener = TcpListener::bind(resolve(&args.addr)?)
        .with_context(|| format!("binding {}", args.addr))?;
    println!("listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    let timeout = Some(Duration::from_millis(args.timeout_ms));
    let mut workers = Vec::new();
    for (n, conn) in listener.incoming().enumerate() {
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        let platform = Arc::clone(&platform);
        workers.push(thread::spawn(move || {
            let mut stream = stream;
            let _ = stream.set_read_timeout(timeout);
            let _ = stream.set_write_timeout(timeout);
            let result = serve_connection(&mut stream, |req| {
                let p = platform.lock().unwrap_or_else(|e| e.into_inner());
                p.attest(req).map_err(|e| e.to_string())
            });
            match result {
                Ok(req) => eprintln!(
                    "served {} bundle for vtpm {} pcr {}",
                    req.scheme,
                    req.vtpm.get(),
                    req.pcr.get()
                ),
                Err(e) => eprintln!("request failed: {e}"),
            }
        }));
        if args.max_connections.is_some_and(|max| n + 1 >= max) {
            break;
        }
    }
    for w in workers {
        let _ = w.join();
    }
    drop(sd);
    Ok(0)
}

fn fresh_nonce() -> Vec<u8> {
    let mut nonce = vec![0u8; 32];
    rand::thread_rng().fill_bytes(&mut nonce);
    nonce
}

fn cmd_challenge(dir: &std::path::Path, args: ChallengeArgs) -> Result<u8> {
    let trusted_path = args
        .trusted
        .clone()
        .unwrap_or_else(|| dir.join(TRUSTED_FILE));
    let trusted_text = fs::read_to_string(&trusted_path)
        .with_context(|| format!("reading {}", trusted_path.display()))?;
    let trusted = parse_trusted_keys(&trusted_text)?;
    let policy = match &args.rml {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let allowed = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(parse_digest)
                .collect::<Result<BTreeSet<_>>>()?;
            VerifyPolicy {
                allowed_measurements: Some(allowed),
            }
        }
        None => VerifyPolicy::default(),
    };
    let request = AttestRequest {
        scheme: args.scheme,
        pcr: PcrIndex::new(args.pcr)?,
        vtpm: vtpm_id(args.vtpm)?,
        nonce: fresh_nonce(),
    };
    let timeout = Duration::from_millis(args.timeout_ms);
    let mut stream = TcpStream::connect_timeout(&resolve(&args.addr)?, timeout)
        .with_context(|| format!("connecting to {}", args.addr))?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;

    let mut expected = request.challenge();
    if args.test_stale_nonce {
        expected.nonce = fresh_nonce();
    }
    let verdict = match request_bundle(&mut stream, &request, &trusted.modulus) {
        Ok(bundle) => verify_bundle(&bundle, &expected, &trusted, &policy),
        Err(ProtocolError::Malformed(e)) => {
            println!("REJECTED: MalformedBundle ({e})");
            return Ok(EXIT_REJECTED);
        }
        Err(e) => return Err(e.into()),
    };
    match verdict {
        Verdict::Accepted => {
            println!("ACCEPTED");
            Ok(0)
        }
        Verdict::Rejected(reason) => {
            println!("REJECTED: {reason:?}");
            Ok(EXIT_REJECTED)
        }
    }
}

fn cmd_bench(args: BenchArgs) -> Result<u8> {
    let format = match args.format {
        BenchFormat::Text => ReportFormat::Text,
        BenchFormat::Csv => ReportFormat::Csv,
    };
    let out = match args.mode {
        BenchMode::Tables => emit_tables(&CostModel::default(), format),
        BenchMode::Scaling => emit_scaling(&scaling_sweep(), format),
    };
    print!("{out}");
    Ok(0)
}
