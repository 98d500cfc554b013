//! Config-driven runs: training, ablation matrices and metrics export.
//!
//! A run directory is `<out_dir>/<name>-<hash>` where `hash` is the first
//! 12 hex digits of the SHA-256 of the canonical JSON form of the config.
//! It holds `config.toml`, `metrics.jsonl`, `last.ckpt`, periodic
//! `epoch-<k>.ckpt`, `final.ckpt` and the deployable `leader.ckpt`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::branch_net::{LeaderNet, NetConfig};
use crate::data::{load_cifar, synthetic_dataset, CifarVariant, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::ffm::Mechanism;
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate, top_k_error, EvalResult};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, TrainConfig, Trainer};

pub const DATA_ROOT_ENV: &str = "MBKD_DATA_ROOT";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LEADER_CHECKPOINT: &str = "leader.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// CIFAR directory; falls back to `$MBKD_DATA_ROOT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetConfig {
    fn cifar_dir(&self) -> Option<PathBuf> {
        self.path
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    fn shape(&self) -> Option<([usize; 3], usize)> {
        match self.kind {
            DatasetKind::Cifar10 => Some(([3, 32, 32], 10)),
            DatasetKind::Cifar100 => Some(([3, 32, 32], 100)),
            DatasetKind::Synthetic => self.synthetic.as_ref().map(|s| (s.image, s.classes)),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.kind {
            DatasetKind::Synthetic => match &self.synthetic {
                Some(spec) => out.extend(spec.problems()),
                None => out.push("dataset.synthetic is required for kind = \"synthetic\"".into()),
            },
            _ => match self.cifar_dir() {
                Some(dir) if dir.is_dir() => {}
                Some(dir) => out.push(format!("dataset.path {} is not a directory", dir.display())),
                None => out.push(format!("dataset.path is not set and ${DATA_ROOT_ENV} is unset")),
            },
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            out.push("dataset limits must be positive".into());
        }
        out
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.kind {
            DatasetKind::Synthetic => {
                let spec = self
                    .synthetic
                    .as_ref()
                    .ok_or_else(|| Error::Config(self.problems()))?;
                synthetic_dataset(spec)?
            }
            kind => {
                let variant = if kind == DatasetKind::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let dir = self.cifar_dir().ok_or_else(|| Error::Config(self.problems()))?;
                load_cifar(&dir, variant)?
            }
        };
        let train = match self.train_limit {
            Some(n) => train.take(n),
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.take(n),
            None => test,
        };
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every `interval` epochs and always after the last one.
    pub interval: usize,
    pub batch_size: usize,
    /// Rate all `m` branches in the interrater statistic, not only the
    /// auxiliary ones.
    #[serde(default)]
    pub rate_all_branches: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 1,
            batch_size: 256,
            rate_all_branches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub mechanisms: Vec<Mechanism>,
    /// CD settings to cross with the mechanisms; `true` keeps the configured
    /// gamma, `false` sets it to zero.
    pub cd: Vec<bool>,
    #[serde(default)]
    pub parallel: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            mechanisms: vec![Mechanism::Gate, Mechanism::SelfAttention, Mechanism::Ffm],
            cd: vec![false, true],
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Write `epoch-<k>.ckpt` every this many epochs; 0 disables.
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: usize,
    pub dataset: DatasetConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

fn default_name() -> String {
    "run".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_checkpoint_interval() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    /// Every violated constraint, checked before any compute.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.dataset.problems();
        out.extend(self.net.problems());
        out.extend(self.train.problems());
        if let Some((image, classes)) = self.dataset.shape() {
            if image != self.net.input {
                out.push(format!("net.input {:?} does not match the dataset images {image:?}", self.net.input));
            }
            if classes != self.net.num_classes {
                out.push(format!(
                    "net.num_classes {} does not match the dataset's {classes}",
                    self.net.num_classes
                ));
            }
        }
        if self.eval.interval == 0 || self.eval.batch_size == 0 {
            out.push("eval.interval and eval.batch_size must be positive".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            out.push(format!("name `{}` must be a non-empty file name", self.name));
        }
        if let Some(ab) = &self.ablation {
            if ab.mechanisms.is_empty() || ab.cd.is_empty() {
                out.push("ablation.mechanisms and ablation.cd must be non-empty".into());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.train.init_seed = seed;
        self.train.shuffle_seed = seed.wrapping_add(1);
    }

    /// Digest of everything except `out_dir`, which only says where the
    /// artifacts go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("serializable");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_owned()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.name, self.hash()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub eval: Option<EvalResult>,
    pub wall_seconds: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalResult,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
}

fn write_checkpoint(trainer: &Trainer, hash: &str, path: &Path) -> Result<()> {
    let mut ckpt = trainer.checkpoint();
    ckpt.meta.insert("config_hash".into(), hash.to_owned());
    atomic_write(path, &ckpt.encode())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the trunk and group leader as a standalone checkpoint.
pub fn write_leader_checkpoint(trainer: &Trainer, hash: &str, path: &Path) -> Result<()> {
    let meta = BTreeMap::from([
        ("kind".to_owned(), "leader".to_owned()),
        ("config_hash".to_owned(), hash.to_owned()),
        (
            "net_config".to_owned(),
            serde_json::to_string(&trainer.net.config).expect("serializable"),
        ),
    ]);
    let ckpt = Checkpoint {
        meta,
        tensors: trainer.net.leader_state(),
    };
    atomic_write(path, &ckpt.encode())
}

pub fn load_leader(path: &Path) -> Result<LeaderNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    if ckpt.meta("kind")? != "leader" {
        return Err(Error::format("checkpoint", "not a leader checkpoint"));
    }
    let config: NetConfig = serde_json::from_str(ckpt.meta("net_config")?)
        .map_err(|e| Error::format("checkpoint", format!("net_config: {e}")))?;
    LeaderNet::from_state(&config, &ckpt.tensors)
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricsRecord>> {
    if !run_dir.is_dir() {
        return Err(Error::io(
            run_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        ));
    }
    let path = run_dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format("metrics file", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Trains per the config, writing all artifacts into its run directory.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let hash = config.hash();
    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    atomic_write(&run_dir.join("config.toml"), config.to_toml().as_bytes())?;
    let (train, test) = config.dataset.load()?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let (mut trainer, mut records) = match &opts.resume {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let ckpt = Checkpoint::decode(&bytes)?;
            if ckpt.meta.get("config_hash").is_some_and(|h| *h != hash) {
                return Err(Error::format("checkpoint", "written by a different config"));
            }
            let trainer = Trainer::from_checkpoint(&ckpt)?;
            if trainer.config != config.train || trainer.net.config != config.net {
                return Err(Error::format("checkpoint", "does not match the config"));
            }
            let mut records = read_metrics(&run_dir)?;
            records.retain(|r| r.epoch <= trainer.epoch());
            (trainer, records)
        }
        None => (Trainer::new(&config.net, config.train.clone())?, Vec::new()),
    };
    write_metrics(&metrics_path, &records)?;

    let epochs = config.train.schedule.epochs;
    while !trainer.is_finished() {
        let start = Instant::now();
        let loss = trainer.train_epoch(&train)?;
        let epoch = trainer.epoch();
        let eval = if epoch % config.eval.interval == 0 || epoch == epochs {
            Some(evaluate(
                &mut trainer.net,
                &test,
                config.eval.batch_size,
                config.eval.rate_all_branches,
            )?)
        } else {
            None
        };
        let record = MetricsRecord {
            epoch,
            lr: trainer.optim.lr,
            loss,
            eval,
            wall_seconds: start.elapsed().as_secs_f64(),
            config_hash: hash.clone(),
        };
        let mut file = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(file, "{}", serde_json::to_string(&record).expect("serializable"))
            .map_err(|e| Error::io(&metrics_path, e))?;
        records.push(record);

        write_checkpoint(&trainer, &hash, &run_dir.join(LAST_CHECKPOINT))?;
        if config.checkpoint_interval > 0 && epoch % config.checkpoint_interval == 0 {
            write_checkpoint(&trainer, &hash, &run_dir.join(format!("epoch-{epoch}.ckpt")))?;
        }
    }
    write_checkpoint(&trainer, &hash, &run_dir.join(FINAL_CHECKPOINT))?;
    write_leader_checkpoint(&trainer, &hash, &run_dir.join(LEADER_CHECKPOINT))?;
    let final_eval = match records.last().and_then(|r| r.eval.clone()) {
        Some(e) => e,
        None => evaluate(
            &mut trainer.net,
            &test,
            config.eval.batch_size,
            config.eval.rate_all_branches,
        )?,
    };
    Ok(RunSummary {
        run_dir,
        config_hash: hash,
        records,
        final_eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mechanism: Mechanism,
    pub cd: bool,
    pub run_dir: Option<PathBuf>,
    pub leader_top1: Option<f64>,
    pub leader_top5: Option<f64>,
    pub ensemble_top1: Option<f64>,
    pub interrater: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.2}"));
        let mut out = String::from(
            "| mechanism | cd | leader top-1 | leader top-5 | ensemble top-1 | interrater s | status |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.mechanism,
                if r.cd { "on" } else { "off" },
                fmt(r.leader_top1),
                fmt(r.leader_top5),
                fmt(r.ensemble_top1),
                r.interrater.map_or("-".to_owned(), |s| format!("{s:.4}")),
                r.error.as_deref().unwrap_or("ok"),
            ));
        }
        out
    }
}

/// The run config of one ablation cell.
pub fn ablation_cell(base: &ExperimentConfig, mechanism: Mechanism, cd: bool, root: &Path) -> ExperimentConfig {
    let mut cell = base.clone();
    cell.ablation = None;
    cell.out_dir = root.to_path_buf();
    cell.name = format!("{}-{}-cd-{}", base.name, mechanism, if cd { "on" } else { "off" });
    cell.train.mechanism = mechanism;
    if !cd {
        cell.train.distill.gamma = 0.0;
    }
    cell
}

/// Runs every mechanism × CD cell with shared seeds. A failing cell is
/// recorded in its row and the others still run.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationTable> {
    config.validate()?;
    let matrix = config.ablation.clone().unwrap_or_default();
    let hash = config.hash();
    let root = config.out_dir.join(format!("{}-ablation-{hash}", config.name));
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let cells: Vec<(Mechanism, bool)> = matrix
        .mechanisms
        .iter()
        .flat_map(|&m| matrix.cd.iter().map(move |&cd| (m, cd)))
        .collect();
    let run_cell = |&(mechanism, cd): &(Mechanism, bool)| {
        let cell = ablation_cell(config, mechanism, cd, &root);
        let result = run_experiment(&cell, &RunOptions::default());
        match result {
            Ok(s) => AblationRow {
                mechanism,
                cd,
                run_dir: Some(s.run_dir),
                leader_top1: Some(s.final_eval.leader_top1),
                leader_top5: s.final_eval.leader_top5,
                ensemble_top1: Some(s.final_eval.ensemble_top1),
                interrater: s.final_eval.interrater,
                error: None,
            },
            Err(e) => AblationRow {
                mechanism,
                cd,
                run_dir: None,
                leader_top1: None,
                leader_top5: None,
                ensemble_top1: None,
                interrater: None,
                error: Some(e.to_string()),
            },
        }
    };
    let rows = if matrix.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cells.iter().map(|c| s.spawn(move || run_cell(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation cell panicked"))
                .collect()
        })
    } else {
        cells.iter().map(run_cell).collect()
    };
    let table = AblationTable { config_hash: hash, rows };
    atomic_write(
        &root.join("table.json"),
        serde_json::to_string_pretty(&table).expect("serializable").as_bytes(),
    )?;
    atomic_write(&root.join("table.md"), table.to_markdown().as_bytes())?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::invalid("export", format!("unknown format `{other}`"))),
        }
    }
}

/// Column order of the CSV export.
pub const CSV_COLUMNS: [&str; 21] = [
    "epoch",
    "lr",
    "ce_sum",
    "kl1",
    "kl2",
    "cd",
    "ensemble_ce",
    "total",
    "alpha",
    "beta",
    "gamma",
    "temperature",
    "samples",
    "leader_top1",
    "leader_top5",
    "ensemble_top1",
    "aux_mean_top1",
    "interrater",
    "branch_top1",
    "branch_top5",
    "wall_seconds",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn csv_row(r: &MetricsRecord) -> Vec<String> {
    let l = &r.loss;
    let e = r.eval.as_ref();
    vec![
        r.epoch.to_string(),
        r.lr.to_string(),
        l.ce_sum.to_string(),
        l.kl1.to_string(),
        l.kl2.to_string(),
        l.cd.to_string(),
        l.ensemble_ce.to_string(),
        l.total.to_string(),
        l.alpha.to_string(),
        l.beta.to_string(),
        l.gamma.to_string(),
        l.temperature.to_string(),
        e.map_or_else(String::new, |e| e.samples.to_string()),
        opt(e.map(|e| e.leader_top1)),
        opt(e.and_then(|e| e.leader_top5)),
        opt(e.map(|e| e.ensemble_top1)),
        opt(e.map(|e| e.aux_mean_top1)),
        opt(e.and_then(|e| e.interrater)),
        e.map_or_else(String::new, |e| list(&e.branch_top1)),
        e.map_or_else(String::new, |e| list(&e.branch_top5)),
        r.wall_seconds.to_string(),
    ]
}

pub fn metrics_to_csv(records: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    header.push("config_hash");
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = csv_row(r);
        row.push(r.config_hash.clone());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

/// Parses a CSV export back into records.
pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let mut want: Vec<&str> = CSV_COLUMNS.to_vec();
    want.push("config_hash");
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::format("csv", "unexpected header"));
    }
    let bad = |col: &str| Error::format("csv", format!("malformed `{col}`"));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let get = |i: usize| row.get(i).unwrap_or("");
        let f = |i: usize| get(i).parse::<f64>().map_err(|_| bad(want[i]));
        let of = |i: usize| -> Result<Option<f64>> {
            if get(i).is_empty() {
                Ok(None)
            } else {
                f(i).map(Some)
            }
        };
        let lst = |i: usize| -> Result<Vec<f64>> {
            if get(i).is_empty() {
                return Ok(Vec::new());
            }
            get(i).split(';').map(|v| v.parse().map_err(|_| bad(want[i]))).collect()
        };
        let loss = LossBreakdown {
            ce_sum: f(2)?,
            kl1: f(3)?,
            kl2: f(4)?,
            cd: f(5)?,
            ensemble_ce: f(6)?,
            total: f(7)?,
            alpha: f(8)?,
            beta: f(9)?,
            gamma: f(10)?,
            temperature: f(11)?,
        };
        let eval = if get(12).is_empty() {
            None
        } else {
            let branch_top1 = lst(18)?;
            Some(EvalResult {
                samples: get(12).parse().map_err(|_| bad("samples"))?,
                leader_top1: f(13)?,
                leader_top5: of(14)?,
                ensemble_top1: f(15)?,
                aux_mean_top1: f(16)?,
                interrater: of(17)?,
                branch_top1,
                branch_top5: lst(19)?,
            })
        };
        out.push(MetricsRecord {
            epoch: get(0).parse().map_err(|_| bad("epoch"))?,
            lr: f(1)?,
            loss,
            eval,
            wall_seconds: f(20)?,
            config_hash: get(21).to_owned(),
        });
    }
    Ok(out)
}

/// Writes `metrics.<format>` into the run directory and returns its path.
pub fn export_metrics(run_dir: &Path, format: ExportFormat) -> Result<PathBuf> {
    let records = read_metrics(run_dir)?;
    let (name, text) = match format {
        ExportFormat::Csv => ("metrics.csv", metrics_to_csv(&records)?),
        ExportFormat::Json => (
            "metrics.json",
            serde_json::to_string_pretty(&records).expect("serializable"),
        ),
    };
    let path = run_dir.join(name);
    atomic_write(&path, text.as_bytes())?;
    Ok(path)
}

/// Result of evaluating a stored checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluationReport {
    Full(EvalResult),
    Leader {
        samples: usize,
        top1: f64,
        top5: Option<f64>,
    },
}

/// Evaluates a full or leader checkpoint on the config's test split.
pub fn evaluate_checkpoint(config: &ExperimentConfig, path: &Path) -> Result<EvaluationReport> {
    config.validate()?;
    let (_, test) = config.dataset.load()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    if ckpt.meta.get("kind").is_some_and(|k| k == "leader") {
        let mut leader = load_leader(path)?;
        let mut parts = Vec::new();
        for idx in crate::data::sequential_batches(test.len(), config.eval.batch_size) {
            let (x, _) = test.batch(&idx)?;
            parts.push(leader.forward(&x)?);
        }
        let logits = Tensor::concat(&parts, 0)?;
        let c = logits.shape()[1];
        return Ok(EvaluationReport::Leader {
            samples: test.len(),
            top1: top_k_error(&logits, test.labels(), 1)?,
            top5: if c > 5 {
                Some(top_k_error(&logits, test.labels(), 5)?)
            } else {
                None
            },
        });
    }
    let mut trainer = Trainer::from_checkpoint(&ckpt)?;
    Ok(EvaluationReport::Full(evaluate(
        &mut trainer.net,
        &test,
        config.eval.batch_size,
        config.eval.rate_all_branches,
    )?))
}
