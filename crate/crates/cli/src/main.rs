// SPDX-License-Identifier: Apache-2.0

//! `opcvault` command line.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use opcvault::bench::{self, BenchPlan, DEFAULT_ALTERNATE};
use opcvault::cluster::{run_local, run_worker, LocalWorker, Primary, RunConfig, RunSummary, WorkerConfig, PHASES};
use opcvault::layout::{fragment, gen_random, parse_layout, write_layout, GenParams, Layout};
use opcvault::litho::OpticalModel;
use opcvault::opc::{cost, measure, OpcParams};
use opcvault::secure_store::{
    new_master_key, open_store, read_sealed, seal_key, sealed_key_path, store_serve, validate_name, write_sealed,
    ObjectStore, PlainStore, StoreClient, StoreMode,
};
use opcvault::transport::{gen_workload_credentials, load_credentials, Credentials, SecurityMode};

const DEFAULT_MEASUREMENT: &str = "opcvault-local-measurement";

#[derive(Parser)]
#[command(name = "opcvault", version, about = "Confidential distributed optical proximity correction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
struct ModelArgs {
    /// Gaussian blur width, grid units
    #[arg(long, default_value_t = 20.0)]
    sigma: f64,
    /// Print threshold on normalized intensity
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Maximum fragment length, grid units
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(i64).range(1..))]
    frag_len: i64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    max_iter: u32,
    /// Convergence bound on max |EPE|, grid units
    #[arg(long, default_value_t = 0.25)]
    epe_tol: f64,
    /// Proportional update gain
    #[arg(long, default_value_t = 0.7)]
    gain: f64,
}

impl ModelArgs {
    fn model(&self) -> Result<OpticalModel> {
        OpticalModel::with_sigma(self.sigma, self.threshold).context("--sigma/--threshold")
    }

    fn opc(&self) -> Result<OpcParams> {
        let p = OpcParams {
            max_iter: self.max_iter,
            epe_tol: self.epe_tol,
            gain: self.gain,
            ..OpcParams::default()
        };
        p.validate().context("--max-iter/--epe-tol/--gain")?;
        Ok(p)
    }
}

#[derive(Args, Clone, Debug)]
struct RunArgs {
    /// Core tile edge, grid units
    #[arg(long, default_value_t = 2500, value_parser = clap::value_parser!(i64).range(1..))]
    tile_size: i64,
    /// Worker count (spawned for run-local, expected for run-primary)
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=1024))]
    workers: u64,
    /// plain | mutual
    #[arg(long, default_value = "plain")]
    security: SecurityMode,
    /// passthrough | sidecar | sidecar-enc
    #[arg(long, default_value = "passthrough")]
    store: StoreMode,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Clone, Debug)]
#[group(required = true, multiple = false)]
struct StoreTarget {
    /// Store daemon address
    #[arg(long)]
    store_addr: Option<SocketAddr>,
    /// Store root for direct (passthrough) access
    #[arg(long)]
    root: Option<PathBuf>,
}

impl StoreTarget {
    fn open(&self) -> Result<Box<dyn ObjectStore>> {
        Ok(match (&self.store_addr, &self.root) {
            (Some(a), _) => Box::new(StoreClient::new(a)?),
            (None, Some(r)) => Box::new(PlainStore::open(r)?),
            (None, None) => unreachable!("clap enforces the group"),
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random Manhattan layout
    Gen {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Polygon count
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..=100_000))]
        n: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Primary, workers and store in one process on loopback
    RunLocal {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store root (a temporary directory if omitted)
        #[arg(long)]
        root: Option<PathBuf>,
        /// Measurement the store key is sealed to (sidecar-enc)
        #[arg(long, default_value = DEFAULT_MEASUREMENT)]
        measurement: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Serve tiles to remote workers
    RunPrimary {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Input object name
        #[arg(long = "in")]
        input: String,
        /// Output object name
        #[arg(long)]
        out: String,
        /// Credential prefix (mutual)
        #[arg(long)]
        creds: Option<PathBuf>,
        #[arg(long)]
        store_addr: Option<SocketAddr>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pull and correct tiles from a primary
    RunWorker {
        #[arg(long)]
        primary: String,
        /// plain | mutual
        #[arg(long, default_value = "plain")]
        security: SecurityMode,
        /// Credential prefix (mutual)
        #[arg(long)]
        creds: Option<PathBuf>,
    },
    /// Object store daemon and client
    Store {
        #[command(subcommand)]
        op: StoreCmd,
    },
    /// Seal a fresh store master key to a measurement
    Seal {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        measurement: String,
    },
    /// Issue a workload trust anchor and member identities
    Creds {
        /// Workload id ([a-z0-9-], 1-63)
        workload: String,
        /// Output directory (must not exist)
        #[arg(long)]
        out: PathBuf,
        /// Worker identities; member-0 is the primary
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=1024))]
        workers: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the security configuration ladder
    Bench {
        /// Layout file (generated from --seed/--n if omitted)
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..=100_000))]
        n: u64,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..=1000))]
        repeats: u64,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=1024))]
        workers: u64,
        #[arg(long, default_value_t = 2500, value_parser = clap::value_parser!(i64).range(1..))]
        tile_size: i64,
        /// Scratch directory, absent or empty (temporary if omitted)
        #[arg(long)]
        root: Option<PathBuf>,
        /// Directory for samples.csv, summary.csv and report.txt
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "opcvault-bench-measurement")]
        measurement: String,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Compare two layouts, or with --epe audit a corrected layout
    Verify {
        /// Layout A (the corrected layout with --epe)
        a: PathBuf,
        /// Layout B (the target with --epe)
        b: PathBuf,
        /// Report max |EPE| of A against the fragments of B
        #[arg(long)]
        epe: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Run the daemon until killed
    Serve {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7879")]
        listen: String,
        /// sidecar | sidecar-enc
        #[arg(long, default_value = "sidecar")]
        store: StoreMode,
        #[arg(long)]
        measurement: Option<String>,
    },
    Put {
        name: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        target: StoreTarget,
    },
    Get {
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        target: StoreTarget,
    },
    List {
        #[command(flatten)]
        target: StoreTarget,
    },
}

fn read_layout(path: &Path) -> Result<Layout> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_layout(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_creds(security: SecurityMode, prefix: Option<&Path>) -> Result<Option<Credentials>> {
    match (security, prefix) {
        (SecurityMode::Plain, _) => Ok(None),
        (SecurityMode::Mutual, Some(p)) => Ok(Some(load_credentials(p)?)),
        (SecurityMode::Mutual, None) => bail!("--security mutual needs --creds"),
    }
}

fn run_config(run: &RunArgs, input: &str, output: &str) -> Result<RunConfig> {
    let mut c = RunConfig::new(input, output, run.tile_size);
    c.expected_workers = run.workers as usize;
    c.security = run.security;
    c.store = run.store;
    c.model = run.model.model()?;
    c.opc = run.model.opc()?;
    c.frag_len = run.model.frag_len;
    c.validate()?;
    Ok(c)
}

fn print_summary(s: &RunSummary) {
    println!(
        "tiles {}  workers {}  redispatches {}  queue checks {}",
        s.tiles.len(),
        s.workers_observed,
        s.redispatches,
        s.queue_checks
    );
    for (p, t) in PHASES.iter().zip(s.phases) {
        println!("phase {p:<9} {t:.4} s");
    }
    println!("wall {:.4} s", s.wall_seconds);
    println!("converged {}  max|EPE| {:.6}", s.converged(), s.max_abs_epe());
    println!("output {}  sha256 {}", s.output_id, s.output_digest);
}

fn cmd_run_local(input: &Path, out: &Path, root: Option<&Path>, measurement: &str, run: &RunArgs) -> Result<()> {
    let cfg = run_config(run, "input.lay", "output.lay")?;
    let layout = read_layout(input)?;
    let scratch = tempfile::tempdir()?;
    let root = match root {
        Some(r) => {
            fs::create_dir_all(r)?;
            r.to_path_buf()
        }
        None => scratch.path().join("store"),
    };
    fs::create_dir_all(&root)?;
    if run.store == StoreMode::SidecarEncrypted && !sealed_key_path(&root).exists() {
        write_sealed(&root, &seal_key(&new_master_key(), measurement)?)?;
    }
    let daemon = match run.store {
        StoreMode::Passthrough => None,
        m => {
            let d = store_serve("127.0.0.1:0", &root, m, Some(measurement))?;
            if let Some(why) = d.locked() {
                bail!("store is locked: {why}");
            }
            Some(d)
        }
    };
    let store = || open_store(run.store, &root, daemon.as_ref().map(|d| d.addr()));
    store()?.put("input.lay", write_layout(&layout).as_bytes())?;

    let (primary, workers) = match run.security {
        SecurityMode::Plain => (None, vec![None; run.workers as usize]),
        SecurityMode::Mutual => {
            let prefixes = gen_workload_credentials(&scratch.path().join("creds"), "local", run.workers as u32 + 1, b"run-local")?;
            let mut all = prefixes.iter().map(|p| load_credentials(p)).collect::<Result<Vec<_>, _>>()?;
            let workers = all.split_off(1).into_iter().map(Some).collect();
            (all.pop(), workers)
        }
    };
    let workers = workers
        .into_iter()
        .map(|creds| LocalWorker {
            creds,
            ..LocalWorker::default()
        })
        .collect();
    let r = run_local(cfg, primary.as_ref(), store()?, workers)?;
    for (i, w) in r.workers.iter().enumerate() {
        if let Err(e) = w {
            log::warn!("worker {i}: {e}");
        }
    }
    fs::write(out, store()?.get("output.lay")?).with_context(|| format!("writing {}", out.display()))?;
    print_summary(&r.summary);
    Ok(())
}

fn cmd_run_primary(
    listen: &str,
    input: &str,
    out: &str,
    creds: Option<&Path>,
    store_addr: Option<SocketAddr>,
    root: Option<&Path>,
    run: &RunArgs,
) -> Result<()> {
    let mut cfg = run_config(run, input, out)?;
    cfg.listen = listen.to_string();
    let store: Box<dyn ObjectStore> = match (run.store, store_addr, root) {
        (StoreMode::Passthrough, _, Some(r)) => Box::new(PlainStore::open(r)?),
        (StoreMode::Passthrough, _, None) => bail!("--store passthrough needs --root"),
        (_, Some(a), _) => Box::new(StoreClient::new(a)?),
        (_, None, _) => bail!("--store {} needs --store-addr", run.store),
    };
    let creds = load_creds(run.security, creds)?;
    let primary = Primary::bind(cfg, creds.as_ref(), store)?;
    println!("listening on {}", primary.local_addr()?);
    print_summary(&primary.run()?);
    Ok(())
}

fn cmd_store(op: &StoreCmd) -> Result<()> {
    match op {
        StoreCmd::Serve {
            root,
            listen,
            store,
            measurement,
        } => {
            if *store == StoreMode::Passthrough {
                bail!("--store passthrough has no daemon; use sidecar or sidecar-enc");
            }
            if *store == StoreMode::SidecarEncrypted && measurement.is_none() {
                bail!("--store sidecar-enc needs --measurement");
            }
            let d = store_serve(listen.as_str(), root, *store, measurement.as_deref())?;
            match d.locked() {
                Some(why) => eprintln!("store locked: {why}"),
                None => println!("listening on {}", d.addr()),
            }
            d.wait();
        }
        StoreCmd::Put { name, input, target } => {
            validate_name(name)?;
            let data = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
            println!("{}", target.open()?.put(name, &data)?);
        }
        StoreCmd::Get { name, out, target } => {
            validate_name(name)?;
            let data = target.open()?.get(name)?;
            fs::write(out, data).with_context(|| format!("writing {}", out.display()))?;
        }
        StoreCmd::List { target } => {
            for n in target.open()?.list()? {
                println!("{n}");
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    input: Option<&Path>,
    seed: u64,
    n: u64,
    repeats: u64,
    workers: u64,
    tile_size: i64,
    root: Option<&Path>,
    csv: Option<&Path>,
    measurement: &str,
    model: &ModelArgs,
) -> Result<bool> {
    let (m, opc) = (model.model()?, model.opc()?);
    let layout = match input {
        Some(p) => read_layout(p)?,
        None => gen_random(&GenParams {
            n_polys: n as usize,
            ..GenParams::regression(seed)
        })?,
    };
    let scratch = tempfile::tempdir()?;
    let work_dir = root.map(Path::to_path_buf).unwrap_or_else(|| scratch.path().join("bench"));
    let mut plan = BenchPlan::new(layout, work_dir);
    plan.repeats = repeats as usize;
    plan.workers = workers as usize;
    plan.tile_size = tile_size;
    plan.model = m;
    plan.opc = opc;
    plan.frag_len = model.frag_len;
    plan.measurement = measurement.to_string();

    let samples = match bench::run_matrix(&plan, |s| {
        eprintln!("{} run {}: {:.3} s", s.config, s.run, s.wall_seconds)
    }) {
        Ok(s) => s,
        Err(e) => {
            if let Some(dir) = csv {
                bench::write_reports(dir, &e.samples, None)?;
            }
            return Err(anyhow!(e.error));
        }
    };
    let report = bench::normalize(&samples, DEFAULT_ALTERNATE)?;
    if let Some(dir) = csv {
        bench::write_reports(dir, &samples, Some(&report))?;
    }
    print!("{}", bench::text_report(&report));
    println!("output sha256 {}", samples[0].output_digest);
    Ok(true)
}

fn cmd_verify(a: &Path, b: &Path, epe: bool, model: &ModelArgs) -> Result<bool> {
    let (la, lb) = (read_layout(a)?, read_layout(b)?);
    if !epe {
        let same = write_layout(&la) == write_layout(&lb);
        println!("{}", if same { "identical" } else { "differ" });
        return Ok(same);
    }
    let (m, opc) = (model.model()?, model.opc()?);
    let fs = fragment(&lb, model.frag_len)?;
    let epes = measure(&fs, &la, &m);
    let worst = cost(&epes)?;
    let clamped = epes.iter().filter(|e| e.clamped).count();
    println!(
        "max|EPE| {worst:.6} over {} fragments ({clamped} clamped), tolerance {}",
        epes.len(),
        opc.epe_tol
    );
    Ok(worst <= opc.epe_tol)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Gen { seed, n, out } => {
            let l = gen_random(&GenParams {
                n_polys: n as usize,
                ..GenParams::regression(seed)
            })?;
            fs::write(&out, write_layout(&l)).with_context(|| format!("writing {}", out.display()))?;
        }
        Cmd::RunLocal {
            input,
            out,
            root,
            measurement,
            run,
        } => cmd_run_local(&input, &out, root.as_deref(), &measurement, &run)?,
        Cmd::RunPrimary {
            listen,
            input,
            out,
            creds,
            store_addr,
            root,
            run,
        } => cmd_run_primary(&listen, &input, &out, creds.as_deref(), store_addr, root.as_deref(), &run)?,
        Cmd::RunWorker {
            primary,
            security,
            creds,
        } => {
            let creds = load_creds(security, creds.as_deref())?;
            let s = run_worker(&WorkerConfig::new(primary, security, creds))?;
            println!("tiles {}  compute {:.4} s", s.tiles, s.compute_seconds);
        }
        Cmd::Store { op } => cmd_store(&op)?,
        Cmd::Seal { root, measurement } => {
            if measurement.is_empty() {
                bail!("--measurement must not be empty");
            }
            if sealed_key_path(&root).exists() {
                bail!("{} already exists", sealed_key_path(&root).display());
            }
            write_sealed(&root, &seal_key(&new_master_key(), &measurement)?)?;
            let s = read_sealed(&root)?;
            println!("sealed {}", sealed_key_path(&root).display());
            println!("measurement sha256 {}", hex_digest(&s.measurement_digest));
        }
        Cmd::Creds {
            workload,
            out,
            workers,
            seed,
        } => {
            for p in gen_workload_credentials(&out, &workload, workers + 1, &seed.to_be_bytes())? {
                println!("{}", p.display());
            }
        }
        Cmd::Bench {
            input,
            seed,
            n,
            repeats,
            workers,
            tile_size,
            root,
            csv,
            measurement,
            model,
        } => {
            return cmd_bench(
                input.as_deref(),
                seed,
                n,
                repeats,
                workers,
                tile_size,
                root.as_deref(),
                csv.as_deref(),
                &measurement,
                &model,
            )
        }
        Cmd::Verify { a, b, epe, model } => return cmd_verify(&a, &b, epe, &model),
    }
    Ok(true)
}

fn hex_digest(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OPCVAULT_LOG", "error")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
