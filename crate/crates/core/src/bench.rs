// SPDX-License-Identifier: Apache-2.0

//! Security ladder benchmark: the same job under each storage/transport
//! configuration, repeated round-robin, normalized against the baseline.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::cluster::{run_local, ClusterError, LocalWorker, RunConfig, PHASES};
use crate::layout::{write_layout, Layout};
use crate::litho::OpticalModel;
use crate::opc::{OpcParams, DEFAULT_FRAG_LEN};
use crate::secure_store::{
    new_master_key, open_store, seal_key, store_serve, write_sealed, ObjectStore, StoreDaemon, StoreError,
    StoreMode,
};
use crate::transport::{gen_workload_credentials, load_credentials, Credentials, SecurityMode, TransportError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no baseline samples to normalize against")]
    MissingBaseline,
    #[error("no samples for alternate baseline {0}")]
    MissingAlternate(ConfigName),
    #[error("{config} run {run} produced digest {got}, expected {want}")]
    DigestMismatch {
        config: ConfigName,
        run: usize,
        got: String,
        want: String,
    },
    #[error("{config} run {run}: {source}")]
    Run {
        config: ConfigName,
        run: usize,
        source: ClusterError,
    },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Rows of the configuration ladder, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConfigName {
    Baseline,
    StorageSidecar,
    StorageEncrypted,
    EndToEnd,
    KataVm,
    CocoVm,
}

impl ConfigName {
    pub const ALL: [ConfigName; 6] = [
        Self::Baseline,
        Self::StorageSidecar,
        Self::StorageEncrypted,
        Self::EndToEnd,
        Self::KataVm,
        Self::CocoVm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::StorageSidecar => "storage_sidecar",
            Self::StorageEncrypted => "storage_encrypted",
            Self::EndToEnd => "end_to_end",
            Self::KataVm => "kata_vm",
            Self::CocoVm => "coco_vm",
        }
    }

    pub fn config(self) -> BenchConfig {
        let (store, security) = match self {
            Self::Baseline => (Some(StoreMode::Passthrough), Some(SecurityMode::Plain)),
            Self::StorageSidecar => (Some(StoreMode::SidecarPlain), Some(SecurityMode::Plain)),
            Self::StorageEncrypted => (Some(StoreMode::SidecarEncrypted), Some(SecurityMode::Plain)),
            Self::EndToEnd => (Some(StoreMode::SidecarEncrypted), Some(SecurityMode::Mutual)),
            Self::KataVm | Self::CocoVm => (None, None),
        };
        BenchConfig {
            name: self,
            store_mode: store,
            security_mode: security,
            runnable: store.is_some(),
        }
    }
}

impl fmt::Display for ConfigName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConfigName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown configuration {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub name: ConfigName,
    pub store_mode: Option<StoreMode>,
    pub security_mode: Option<SecurityMode>,
    pub runnable: bool,
}

/// The fixed six-row ladder.
pub fn ladder() -> [BenchConfig; 6] {
    ConfigName::ALL.map(ConfigName::config)
}

pub const NA_REASON: &str = "requires VM/TEE hardware";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSample {
    pub config: ConfigName,
    pub run: usize,
    pub wall_seconds: f64,
    /// Seconds per entry of [`PHASES`].
    pub phase_seconds: [f64; 5],
    pub output_digest: String,
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub layout: Layout,
    pub workers: usize,
    pub repeats: usize,
    pub tile_size: i64,
    pub model: OpticalModel,
    pub opc: OpcParams,
    pub frag_len: i64,
    /// Scratch root; must be absent or empty.
    pub work_dir: PathBuf,
    pub measurement: String,
    pub configs: Vec<ConfigName>,
}

impl BenchPlan {
    pub fn new(layout: Layout, work_dir: PathBuf) -> Self {
        Self {
            layout,
            workers: 4,
            repeats: 5,
            tile_size: 2500,
            model: OpticalModel::default(),
            opc: OpcParams::default(),
            frag_len: DEFAULT_FRAG_LEN,
            work_dir,
            measurement: "opcvault-bench-measurement".into(),
            configs: ConfigName::ALL.to_vec(),
        }
    }
}

/// A failed matrix with the samples collected before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct MatrixError {
    pub samples: Vec<RunSample>,
    #[source]
    pub error: BenchError,
}

/// Everything one runnable configuration needs across its repeats.
struct Prepared {
    name: ConfigName,
    root: PathBuf,
    store_mode: StoreMode,
    security: SecurityMode,
    daemon: Option<StoreDaemon>,
    primary: Option<Credentials>,
    workers: Vec<Option<Credentials>>,
}

impl Prepared {
    fn store(&self) -> Result<Box<dyn ObjectStore>, StoreError> {
        open_store(self.store_mode, &self.root, self.daemon.as_ref().map(StoreDaemon::addr))
    }
}

fn prepare(plan: &BenchPlan, name: ConfigName, input: &[u8]) -> Result<Prepared, BenchError> {
    let c = name.config();
    let (store_mode, security) = (c.store_mode.unwrap(), c.security_mode.unwrap());
    let root = plan.work_dir.join(name.as_str());
    fs::create_dir_all(&root)?;
    if store_mode == StoreMode::SidecarEncrypted {
        write_sealed(&root, &seal_key(&new_master_key(), &plan.measurement)?)?;
    }
    let daemon = match store_mode {
        StoreMode::Passthrough => None,
        m => {
            let d = store_serve("127.0.0.1:0", &root, m, Some(&plan.measurement))?;
            if let Some(why) = d.locked() {
                return Err(BenchError::Plan(format!("{name} store is locked: {why}")));
            }
            Some(d)
        }
    };
    let (primary, workers) = match security {
        SecurityMode::Plain => (None, vec![None; plan.workers]),
        SecurityMode::Mutual => {
            let dir = plan.work_dir.join(format!("{name}-creds"));
            let prefixes = gen_workload_credentials(&dir, "bench", plan.workers as u32 + 1, b"opcvault bench")?;
            let mut all = prefixes
                .iter()
                .map(|p| load_credentials(p))
                .collect::<Result<Vec<_>, _>>()?;
            let workers = all.split_off(1).into_iter().map(Some).collect();
            (all.pop(), workers)
        }
    };
    let p = Prepared {
        name,
        root,
        store_mode,
        security,
        daemon,
        primary,
        workers,
    };
    p.store()?.put("input.lay", input)?;
    Ok(p)
}

fn run_once(plan: &BenchPlan, p: &Prepared, run: usize) -> Result<RunSample, BenchError> {
    let wrap = |source: ClusterError| BenchError::Run {
        config: p.name,
        run,
        source,
    };
    let mut cfg = RunConfig::new("input.lay", "merged.lay", plan.tile_size);
    cfg.expected_workers = plan.workers;
    cfg.security = p.security;
    cfg.store = p.store_mode;
    cfg.model = plan.model;
    cfg.opc = plan.opc;
    cfg.frag_len = plan.frag_len;
    let workers = p
        .workers
        .iter()
        .map(|c| LocalWorker {
            creds: c.clone(),
            ..LocalWorker::default()
        })
        .collect();
    let out = run_local(cfg, p.primary.as_ref(), p.store()?, workers).map_err(wrap)?;
    if let Some(Err(e)) = out.workers.into_iter().find(Result::is_err) {
        return Err(wrap(e));
    }
    let s = out.summary;
    Ok(RunSample {
        config: p.name,
        run,
        wall_seconds: s.wall_seconds,
        phase_seconds: s.phases,
        output_digest: s.output_digest,
    })
}

/// Runs every runnable configuration `repeats` times, interleaved
/// round-robin. Every sample's output digest must equal the first one.
pub fn run_matrix(plan: &BenchPlan, mut on_sample: impl FnMut(&RunSample)) -> Result<Vec<RunSample>, MatrixError> {
    let mut samples = Vec::new();
    let r = matrix(plan, &mut samples, &mut on_sample);
    match r {
        Ok(()) => Ok(samples),
        Err(error) => Err(MatrixError { samples, error }),
    }
}

fn matrix(plan: &BenchPlan, samples: &mut Vec<RunSample>, on_sample: &mut dyn FnMut(&RunSample)) -> Result<(), BenchError> {
    if plan.repeats < 1 || plan.workers < 1 {
        return Err(BenchError::Plan("repeats and workers must be at least 1".into()));
    }
    if plan.work_dir.exists() && fs::read_dir(&plan.work_dir)?.next().is_some() {
        return Err(BenchError::Plan(format!("{} is not empty", plan.work_dir.display())));
    }
    let mut names: Vec<ConfigName> = plan.configs.iter().copied().filter(|c| c.config().runnable).collect();
    names.sort();
    names.dedup();
    let input = write_layout(&plan.layout);
    let prepared = names
        .iter()
        .map(|&n| prepare(plan, n, input.as_bytes()))
        .collect::<Result<Vec<_>, _>>()?;
    for run in 0..plan.repeats {
        for p in &prepared {
            log::info!("bench {} run {run}", p.name);
            let s = run_once(plan, p, run)?;
            if let Some(first) = samples.first() {
                if s.output_digest != first.output_digest {
                    return Err(BenchError::DigestMismatch {
                        config: s.config,
                        run,
                        got: s.output_digest,
                        want: first.output_digest.clone(),
                    });
                }
            }
            on_sample(&s);
            samples.push(s);
        }
    }
    Ok(())
}

pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `(mean / reference − 1) · 100`.
pub fn overhead_pct(mean: f64, reference: f64) -> f64 {
    (mean / reference - 1.0) * 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowStatus {
    Measured,
    /// Runnable but not part of this matrix.
    Skipped,
    NotAvailable,
}

impl RowStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Measured => "measured",
            Self::Skipped => "skipped",
            Self::NotAvailable => "N/A",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadRow {
    pub config: ConfigName,
    pub status: RowStatus,
    pub n: usize,
    pub mean_s: Option<f64>,
    pub stdev_s: Option<f64>,
    pub overhead_pct: Option<f64>,
    pub alt_overhead_pct: Option<f64>,
    pub phase_means: Option<[f64; 5]>,
    /// Faster than baseline by more than two combined standard deviations.
    pub below_baseline: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    pub alternate: ConfigName,
    pub rows: Vec<OverheadRow>,
}

/// Alternate reference row when none is named.
pub const DEFAULT_ALTERNATE: ConfigName = ConfigName::StorageSidecar;

/// Per-config statistics over `samples`, relative to the baseline and to
/// `alternate` when it has samples.
pub fn normalize(samples: &[RunSample], alternate: ConfigName) -> Result<OverheadReport, BenchError> {
    let mut by: BTreeMap<ConfigName, Vec<&RunSample>> = BTreeMap::new();
    for s in samples {
        by.entry(s.config).or_default().push(s);
    }
    let stats = |c: ConfigName| {
        by.get(&c).map(|v| mean_stdev(&v.iter().map(|s| s.wall_seconds).collect::<Vec<_>>()))
    };
    let (mb, sb) = stats(ConfigName::Baseline).ok_or(BenchError::MissingBaseline)?;
    let alt = stats(alternate).map(|(m, _)| m);
    let rows = ConfigName::ALL
        .into_iter()
        .map(|c| {
            let Some(v) = by.get(&c) else {
                return OverheadRow {
                    config: c,
                    status: if c.config().runnable {
                        RowStatus::Skipped
                    } else {
                        RowStatus::NotAvailable
                    },
                    n: 0,
                    mean_s: None,
                    stdev_s: None,
                    overhead_pct: None,
                    alt_overhead_pct: None,
                    phase_means: None,
                    below_baseline: false,
                };
            };
            let (m, s) = stats(c).unwrap();
            let mut phases = [0.0; 5];
            for (k, p) in phases.iter_mut().enumerate() {
                *p = v.iter().map(|x| x.phase_seconds[k]).sum::<f64>() / v.len() as f64;
            }
            OverheadRow {
                config: c,
                status: RowStatus::Measured,
                n: v.len(),
                mean_s: Some(m),
                stdev_s: Some(s),
                overhead_pct: Some(overhead_pct(m, mb)),
                alt_overhead_pct: alt.map(|a| overhead_pct(m, a)),
                phase_means: Some(phases),
                below_baseline: m < mb - 2.0 * (sb * sb + s * s).sqrt(),
            }
        })
        .collect();
    Ok(OverheadReport { alternate, rows })
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `config,run,wall_seconds,phase,phase_seconds`, one row per phase.
pub fn samples_csv(samples: &[RunSample]) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "run", "wall_seconds", "phase", "phase_seconds"])?;
    for s in samples {
        for (k, phase) in PHASES.iter().enumerate() {
            w.write_record([
                s.config.as_str(),
                &s.run.to_string(),
                &s.wall_seconds.to_string(),
                phase,
                &s.phase_seconds[k].to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| BenchError::Io(e.into_error()))
}

/// `config,mean_s,stdev_s,overhead_pct,alt_overhead_pct,status`.
pub fn summary_csv(report: &OverheadReport) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "mean_s", "stdev_s", "overhead_pct", "alt_overhead_pct", "status"])?;
    for r in &report.rows {
        w.write_record([
            r.config.as_str(),
            &num(r.mean_s),
            &num(r.stdev_s),
            &num(r.overhead_pct),
            &num(r.alt_overhead_pct),
            r.status.as_str(),
        ])?;
    }
    w.into_inner().map_err(|e| BenchError::Io(e.into_error()))
}

/// Mean per config as read back from a summary CSV.
pub fn parse_summary_means(bytes: &[u8]) -> Result<BTreeMap<ConfigName, Option<f64>>, BenchError> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let name: ConfigName = rec[0].parse().map_err(BenchError::Plan)?;
        let mean = match &rec[1] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|e| BenchError::Plan(e.to_string()))?),
        };
        out.insert(name, mean);
    }
    Ok(out)
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:+.2}%")).unwrap_or_else(|| "-".into())
}

/// Fixed-width overhead table plus per-phase breakdown.
pub fn text_report(report: &OverheadReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>3} {:>10} {:>10} {:>10} {:>12}",
        "config",
        "n",
        "mean_s",
        "stdev_s",
        "overhead",
        format!("vs {}", report.alternate)
    );
    for r in &report.rows {
        match r.status {
            RowStatus::NotAvailable => {
                let _ = writeln!(s, "{:<18} N/A ({NA_REASON})", r.config.as_str());
            }
            RowStatus::Skipped => {
                let _ = writeln!(s, "{:<18} not run", r.config.as_str());
            }
            RowStatus::Measured => {
                let _ = writeln!(
                    s,
                    "{:<18} {:>3} {:>10.4} {:>10.4} {:>10} {:>12}{}",
                    r.config.as_str(),
                    r.n,
                    r.mean_s.unwrap(),
                    r.stdev_s.unwrap(),
                    pct(r.overhead_pct),
                    pct(r.alt_overhead_pct),
                    if r.below_baseline { "  FLAG: faster than baseline by >2 sd" } else { "" }
                );
            }
        }
    }
    let _ = writeln!(s, "\nphase means (s)");
    let _ = write!(s, "{:<18}", "config");
    for p in PHASES {
        let _ = write!(s, " {p:>10}");
    }
    s.push('\n');
    for r in &report.rows {
        if let Some(ph) = r.phase_means {
            let _ = write!(s, "{:<18}", r.config.as_str());
            for v in ph {
                let _ = write!(s, " {v:>10.4}");
            }
            s.push('\n');
        }
    }
    s
}

/// Writes `<dir>/samples.csv`, `<dir>/summary.csv` and `<dir>/report.txt`.
pub fn write_reports(dir: &Path, samples: &[RunSample], report: Option<&OverheadReport>) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("samples.csv"), samples_csv(samples)?)?;
    if let Some(r) = report {
        fs::write(dir.join("summary.csv"), summary_csv(r)?)?;
        fs::write(dir.join("report.txt"), text_report(r))?;
    }
    Ok(())
}
