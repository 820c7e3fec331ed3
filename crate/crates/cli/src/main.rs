use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use comanche_core::bench::{self, BenchConfig, BenchError, Workload};
use comanche_core::blockdev::buffer_with;
use comanche_core::component::ComponentError;
use comanche_core::compose::{instantiate, ComposeError, Stack, StackConfig};
use comanche_core::kv::{KvError, KvStore};
use comanche_core::memory::DEFAULT_ALIGNMENT;
use comanche_core::mgmt::{Vfs, VfsError, VfsPath};
use comanche_core::service::{Idle, ShmSegment, ShmServer, Task};
use comanche_core::Registry;
use serde_json::json;

#[derive(Parser)]
#[command(name = "comanche", version, about = "Compose and drive component storage stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a stack config and optionally build it.
    Compose {
        #[arg(long)]
        config: PathBuf,
        /// Check the config without creating any device.
        #[arg(long)]
        check: bool,
    },
    /// Run a workload against a stack's block device.
    Bench(BenchArgs),
    /// Key-value verbs on a stack whose root is a KV store.
    Kv {
        #[arg(long)]
        config: PathBuf,
        #[command(subcommand)]
        verb: KvVerb,
    },
    /// File-system verbs on a stack whose root is a KV store.
    Fs {
        #[arg(long)]
        config: PathBuf,
        #[command(subcommand)]
        verb: FsVerb,
    },
    /// Serve a stack to another process over a shared-memory segment.
    Serve(ServeArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "randread")]
    workload: String,
    #[arg(long, default_value_t = 1)]
    qd: usize,
    #[arg(long = "io-size", default_value_t = 4096)]
    io_size: usize,
    /// Seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Stop each client after this many operations.
    #[arg(long)]
    ops: Option<u64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    /// Write the report JSON here as well as to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write one line per issued operation.
    #[arg(long = "op-log")]
    op_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum KvVerb {
    /// Write a fresh, empty store.
    Format,
    Put {
        key: String,
        /// Read the value from this file instead of stdin.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    Get {
        key: String,
        /// Write the value to this file instead of stdout.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    Ls {
        #[arg(default_value = "")]
        prefix: String,
    },
    Rm {
        key: String,
    },
}

#[derive(Subcommand)]
enum FsVerb {
    Ls {
        #[arg(default_value = "/")]
        path: String,
    },
    Stat {
        path: String,
    },
    Rm {
        path: String,
    },
    Mv {
        src: String,
        dst: String,
        #[arg(long)]
        force: bool,
    },
    Cp {
        src: String,
        dst: String,
        #[arg(long)]
        force: bool,
    },
    Read {
        path: String,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    Write {
        path: String,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Segment name, created under the shared-memory directory.
    #[arg(long)]
    name: String,
    #[arg(long = "ring-order", default_value_t = 8)]
    ring_order: u32,
    #[arg(long = "desc-count", default_value_t = 256)]
    desc_count: u32,
    #[arg(long = "data-size", default_value_t = 16 << 20)]
    data_size: usize,
    /// Give up after this many seconds.
    #[arg(long)]
    timeout: Option<f64>,
}

/// Exit statuses: 1 for a failed verb (missing key, existing target),
/// 2 for configuration errors, 3 for device IO errors.
enum Failure {
    Verb(anyhow::Error),
    Config(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verb(_) => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Verb(e) | Failure::Config(e) | Failure::Io(e) => e,
        }
    }
}

impl From<ComposeError> for Failure {
    fn from(e: ComposeError) -> Self {
        match e {
            ComposeError::Component(ComponentError::StartFailed(_)) => Failure::Io(e.into()),
            e => Failure::Config(e.into()),
        }
    }
}

impl From<KvError> for Failure {
    fn from(e: KvError) -> Self {
        match e {
            KvError::NotFound | KvError::KeyTooLong(_) | KvError::NoSpace | KvError::BufferTooSmall => {
                Failure::Verb(e.into())
            }
            e => Failure::Io(e.into()),
        }
    }
}

impl From<VfsError> for Failure {
    fn from(e: VfsError) -> Self {
        match e {
            VfsError::Kv(k) => k.into(),
            e => Failure::Verb(e.into()),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn io_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Io(e.into())
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compose { config, check } => compose(&config, check),
        Command::Bench(args) => run_bench(&args),
        Command::Kv { config, verb } => kv(&config, verb),
        Command::Fs { config, verb } => fs(&config, verb),
        Command::Serve(args) => serve(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("comanche: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Path) -> Result<StackConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    Ok(StackConfig::parse(&text)?)
}

fn build(config: &StackConfig) -> Result<(Registry, Stack), Failure> {
    let registry = Registry::with_builtins();
    let stack = instantiate(config, &registry)?;
    Ok((registry, stack))
}

fn compose(path: &Path, check: bool) -> Outcome {
    let config = load_config(path)?;
    let registry = Registry::with_builtins();
    config.check_types(&registry)?;
    let root = config.root()?.to_string();
    if check {
        println!("ok: {} components, root `{root}`", config.components.len());
        return Ok(());
    }
    let stack = instantiate(&config, &registry)?;
    let mut summary = json!({
        "root": root,
        "components": config.components.len(),
        "live_instances": registry.live_instances(),
        "service": stack.mode().map(|m| m.name()),
    });
    if let Ok(dev) = stack.block_device() {
        let info = dev.info().map_err(io_err)?;
        summary["block_size"] = json!(info.block_size);
        summary["block_count"] = json!(info.block_count);
    }
    if let Ok(kv) = stack.kv_store() {
        let s = kv.stats()?;
        summary["keys"] = json!(s.keys);
        summary["free_blocks"] = json!(s.free_blocks);
    }
    stack.release().map_err(io_err)?;
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Outcome {
    let config = load_config(&args.config)?;
    let workload: Workload = args.workload.parse().map_err(config_err)?;
    if !(args.duration > 0.0) {
        return Err(config_err(anyhow!("duration must be positive")));
    }
    let (_registry, stack) = build(&config)?;
    let device = stack.block_device().map_err(config_err)?;
    let mode = stack.mode().map(|m| m.name()).unwrap_or("DIRECT");
    let bench_config = BenchConfig {
        workload,
        qd: args.qd,
        io_size: args.io_size,
        duration: Duration::from_secs_f64(args.duration),
        ops: args.ops,
        seed: args.seed,
        clients: args.clients,
        record_ops: args.op_log.is_some(),
        keep_samples: false,
    };
    let outcome = bench::run(device, mode, &bench_config).map_err(|e| match e {
        BenchError::Config(_) => config_err(e),
        BenchError::Device(_) => io_err(e),
    })?;
    let text = serde_json::to_string_pretty(&outcome.report).unwrap();
    println!("{text}");
    if let Some(path) = &args.report {
        std::fs::write(path, format!("{text}\n")).map_err(io_err)?;
    }
    if let Some(path) = &args.op_log {
        let mut log = String::new();
        for op in &outcome.ops {
            let kind = if op.write { "W" } else { "R" };
            log.push_str(&format!("{} {kind} {} {}\n", op.client, op.lba, op.blocks));
        }
        std::fs::write(path, log).map_err(io_err)?;
    }
    if outcome.report.errors > 0 {
        return Err(io_err(anyhow!(
            "{} operations failed: {:?}",
            outcome.report.errors,
            outcome.report.error_counts
        )));
    }
    Ok(())
}

fn kv_stack(path: &Path, format: bool) -> Result<(Registry, Stack, Arc<dyn KvStore>), Failure> {
    let mut config = load_config(path)?;
    let root = config.root()?.to_string();
    let spec = config.components.iter_mut().find(|c| c.id == root).unwrap();
    if spec.type_name != "kv" {
        return Err(config_err(anyhow!("root `{root}` is a {}, not a kv store", spec.type_name)));
    }
    if !spec.config.is_object() {
        spec.config = json!({});
    }
    spec.config["format"] = json!(format);
    let (registry, stack) = build(&config)?;
    let kv = stack.kv_store().map_err(config_err)?;
    Ok((registry, stack, kv))
}

fn read_input(file: &Option<PathBuf>) -> Result<Vec<u8>, Failure> {
    match file {
        Some(p) => std::fs::read(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::Verb),
        None => {
            let mut v = Vec::new();
            std::io::stdin().read_to_end(&mut v).map_err(io_err)?;
            Ok(v)
        }
    }
}

fn write_output(file: &Option<PathBuf>, data: &[u8]) -> Outcome {
    match file {
        Some(p) => std::fs::write(p, data).map_err(io_err),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(data).and_then(|_| out.flush()).map_err(io_err)
        }
    }
}

fn kv(path: &Path, verb: KvVerb) -> Outcome {
    let (_registry, stack, kv) = kv_stack(path, matches!(verb, KvVerb::Format))?;
    match verb {
        KvVerb::Format => {
            let s = kv.stats()?;
            println!("formatted: {} data blocks", s.data_blocks);
        }
        KvVerb::Put { key, file } => {
            let value = read_input(&file)?;
            kv.put(key.as_bytes(), &value)?;
            kv.flush()?;
        }
        KvVerb::Get { key, file } => {
            let value = kv.get(key.as_bytes())?;
            write_output(&file, &value)?;
        }
        KvVerb::Ls { prefix } => {
            for key in kv.list(prefix.as_bytes())? {
                println!("{}", String::from_utf8_lossy(&key));
            }
        }
        KvVerb::Rm { key } => {
            kv.erase(key.as_bytes())?;
            kv.flush()?;
        }
    }
    drop(kv);
    stack.release().map_err(io_err)
}

fn vpath(s: &str) -> Result<VfsPath, Failure> {
    Ok(VfsPath::parse(s)?)
}

fn fs(path: &Path, verb: FsVerb) -> Outcome {
    let (_registry, stack, kv) = kv_stack(path, false)?;
    let vfs = Vfs::new(kv.clone());
    match verb {
        FsVerb::Ls { path } => {
            for e in vfs.list(&vpath(&path)?)? {
                let suffix = if e.kind.name() == "dir" { "/" } else { "" };
                println!("{}{suffix}", e.name);
            }
        }
        FsVerb::Stat { path } => {
            let s = vfs.stat(&vpath(&path)?)?;
            println!("{}", json!({"path": path, "kind": s.kind.name(), "size": s.size}));
        }
        FsVerb::Rm { path } => vfs.remove(&vpath(&path)?)?,
        FsVerb::Mv { src, dst, force } => vfs.rename(&vpath(&src)?, &vpath(&dst)?, force)?,
        FsVerb::Cp { src, dst, force } => vfs.copy(&vpath(&src)?, &vpath(&dst)?, force)?,
        FsVerb::Read {
            path,
            offset,
            length,
            file,
        } => {
            let p = vpath(&path)?;
            let size = vfs.stat(&p)?.size;
            let len = length.unwrap_or(size.saturating_sub(offset) as usize);
            let bs = kv.block_size()?;
            let memory = kv.memory()?;
            let buffer = memory
                .allocate_io_buffer(len.div_ceil(bs as usize).max(1) * bs as usize, DEFAULT_ALIGNMENT, -1)
                .map_err(io_err)?;
            let n = vfs.read(&p, offset, len, &buffer)?;
            write_output(&file, &buffer.to_vec()[..n])?;
        }
        FsVerb::Write { path, offset, file } => {
            let data = read_input(&file)?;
            let bs = kv.block_size()?;
            let memory = kv.memory()?;
            let buffer = buffer_with(memory.as_ref(), &data, bs).map_err(io_err)?;
            vfs.write(&vpath(&path)?, offset, data.len(), &buffer)?;
        }
    }
    kv.flush()?;
    drop((vfs, kv));
    stack.release().map_err(io_err)
}

fn serve(args: &ServeArgs) -> Outcome {
    let config = load_config(&args.config)?;
    let (_registry, stack) = build(&config)?;
    let device = stack.block_device().map_err(config_err)?;
    let seg = ShmSegment::create(&args.name, args.ring_order, args.desc_count, args.data_size)
        .map_err(config_err)?;
    let seg = Arc::new(seg);
    let queue = device.open_queue().map_err(io_err)?;
    let mut server = ShmServer::new(seg.clone(), queue).map_err(io_err)?;
    println!("ready {}", seg.path().display());
    std::io::stdout().flush().map_err(io_err)?;
    let deadline = args.timeout.map(|s| Instant::now() + Duration::from_secs_f64(s));
    let mut idle = Idle::new();
    let mut steps = 0u64;
    while !server.finished() {
        if server.step() {
            idle.reset();
        } else {
            idle.wait();
        }
        steps += 1;
        if steps % 4096 == 0 && deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(io_err(anyhow!("timed out waiting for the client")));
        }
    }
    let invalid = server.invalid_submissions();
    drop(server);
    drop(seg);
    drop(device);
    stack.release().map_err(io_err)?;
    println!("stopped; {invalid} invalid submissions");
    Ok(())
}
