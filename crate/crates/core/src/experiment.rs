//! Experiment configuration and the commands behind the `calibrar` binary.
//!
//! A config is a flat `key = value` text file (`#` starts a comment). Values
//! are resolved in order: built-in defaults, the file, `CALIBRAR_*`
//! environment variables (`data.spread` ↔ `CALIBRAR_DATA_SPREAD`), then
//! command-line overrides. The resolved config is written next to every
//! result and its hash is embedded in every output file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::NumArray;
use crate::attack::{self, AttackConfig, RobustnessPartition};
use crate::data::{self, Corruption, CsvSchema, Dataset};
use crate::ensemble::{self, EnsembleMode, EnsembleRun, EnsembleSetup};
use crate::error::{Error, Result};
use crate::metrics::{self, SubsetStats};
use crate::model::{self, Checkpoint, MlpSpec, OptimizerKind, TrainConfig};
use crate::smoothing::{
    self, AdaptiveSmoothing, PartitionSource, Policy, DEFAULT_ADALS_ALPHA, DEFAULT_AR_ADALS_ALPHA,
};

pub const ENV_PREFIX: &str = "CALIBRAR_";

/// Recognised keys, their defaults and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("out", "runs", "output root directory"),
    ("run.name", "", "run directory name under `out` (default: policy or ensemble mode)"),
    ("data.csv", "", "CSV with a `label` column; empty = synthetic blobs"),
    ("data.classes", "4", "synthetic: number of classes"),
    ("data.dim", "8", "synthetic: input dimension"),
    ("data.n_per_class", "500", "synthetic: examples per class"),
    ("data.spread", "0.9", "synthetic: cluster standard deviation"),
    ("data.seed", "7", "seed for data generation and the split"),
    ("data.split", "0.7,0.15,0.15", "train,val,test fractions"),
    ("model.hidden", "64,64", "hidden layer widths"),
    ("model.seed", "0", "weight initialisation seed"),
    ("train.epochs", "100", "training epochs"),
    ("train.batch_size", "64", "minibatch size"),
    ("train.optimizer", "adam", "adam or sgd"),
    ("train.learning_rate", "0.001", "optimizer step size"),
    ("train.seed", "0", "minibatch order seed"),
    ("policy", "vanilla", "vanilla, ls, adals or ar_adals"),
    ("policy.epsilon", "0.02", "ls: smoothing strength"),
    ("policy.alpha", "", "adals/ar_adals step size (default 0.05 / 0.005)"),
    ("policy.subsets", "10", "ar_adals: number of robustness subsets R"),
    ("policy.on_the_fly", "false", "ar_adals: re-attack the trained model every epoch"),
    ("policy.partition_dir", "", "precomputed partitions (default: <out>/partitions)"),
    ("attack.checkpoint", "", "model to attack (default: <out>/vanilla/model.ckpt)"),
    ("attack.binary_search_steps", "3", "rounds of the trade-off constant search"),
    ("attack.max_iterations", "500", "optimizer steps per round"),
    ("attack.step_size", "0.005", "Adam step size over the perturbation"),
    ("attack.initial_const", "1.0", "initial trade-off constant"),
    ("attack.const_growth", "10", "constant growth after a failed round"),
    ("attack.confidence", "0", "required logit margin"),
    ("attack.clamp_unit_box", "false", "keep attacked inputs in [0, 1]"),
    ("attack.abort_early", "true", "stop a round once the objective stalls"),
    ("ensemble.mode", "ensemble_of_vanilla", "ensemble training mode"),
    ("ensemble.seeds", "0,1,2,3,4", "member seeds (model and minibatch order)"),
    ("eval.bins", "10", "ECE bins"),
    ("eval.corruption_seed", "11", "seed for corrupted test sets"),
    ("sweep.param", "epsilon", "epsilon (ls) or alpha (adals, ar_adals)"),
    ("sweep.grid", "0,0.01,0.02,0.03,0.04,0.05,0.06,0.07,0.08,0.09,0.1", "values to try"),
    ("jobs", "1", "concurrent sweep runs"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("{origin}:{}: expected key = value", k + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| config_err(format!("{origin}:{}: {e}", k + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then matching `CALIBRAR_*` entries of `env`,
    /// then `overrides`.
    pub fn resolve<I>(file: Option<&Path>, env: I, overrides: &[(String, String)]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let env: BTreeMap<String, String> = env.into_iter().collect();
        for (key, _, _) in KEYS {
            if let Some(v) = env.get(&env_name(key)) {
                cfg.set(key, v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(config_err(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Canonical text: every key in sorted order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    /// Parses every typed field once so errors surface before any work.
    pub fn validate(&self) -> Result<()> {
        self.data_source()?;
        self.split_fractions()?;
        self.hidden()?;
        self.model_seed()?;
        self.train_config()?;
        self.policy()?;
        // checked even when the active policy ignores it
        let eps: f64 = self.num("policy.epsilon")?;
        if !(0.0..1.0).contains(&eps) {
            return Err(config_err("policy.epsilon must lie in [0, 1)"));
        }
        self.on_the_fly()?;
        self.attack_config()?;
        self.ensemble_mode()?;
        self.ensemble_seeds()?;
        self.bins()?;
        self.corruption_seed()?;
        self.sweep_param()?;
        self.sweep_grid()?;
        self.jobs()?;
        Ok(())
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| config_err(format!("{key} = {v:?} is not a valid number")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(config_err(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| config_err(format!("{key}: {s:?} is not a valid number")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn data_source(&self) -> Result<DataSource> {
        let csv = self.get("data.csv");
        if !csv.is_empty() {
            return Ok(DataSource::Csv(PathBuf::from(csv)));
        }
        let src = DataSource::Synthetic {
            classes: self.num("data.classes")?,
            dim: self.num("data.dim")?,
            n_per_class: self.num("data.n_per_class")?,
            spread: self.num("data.spread")?,
        };
        Ok(src)
    }

    pub fn data_seed(&self) -> Result<u64> {
        self.num("data.seed")
    }

    pub fn split_fractions(&self) -> Result<[f64; 3]> {
        let v: Vec<f64> = self.list("data.split")?;
        let f: [f64; 3] = v
            .try_into()
            .map_err(|_| config_err("data.split needs three fractions"))?;
        if f.iter().any(|x| !(*x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err("data.split fractions must be non-negative and sum to 1"));
        }
        Ok(f)
    }

    pub fn hidden(&self) -> Result<Vec<usize>> {
        let h: Vec<usize> = self.list("model.hidden")?;
        if h.contains(&0) {
            return Err(config_err("model.hidden widths must be positive"));
        }
        Ok(h)
    }

    pub fn model_seed(&self) -> Result<u64> {
        self.num("model.seed")
    }

    pub fn mlp_spec(&self, input: usize, classes: usize) -> Result<MlpSpec> {
        Ok(MlpSpec::new(input, &self.hidden()?, classes, self.model_seed()?))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.get("train.optimizer") {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            v => return Err(config_err(format!("train.optimizer = {v:?}; expected adam or sgd"))),
        };
        let cfg = TrainConfig {
            epochs: self.num("train.epochs")?,
            batch_size: self.num("train.batch_size")?,
            optimizer,
            learning_rate: self.num("train.learning_rate")?,
            seed: self.num("train.seed")?,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn policy(&self) -> Result<Policy> {
        let alpha = |default: f64| -> Result<f64> {
            if self.get("policy.alpha").is_empty() {
                Ok(default)
            } else {
                self.num("policy.alpha")
            }
        };
        let policy = match self.get("policy") {
            "vanilla" => Policy::Vanilla,
            "ls" => Policy::LabelSmoothing {
                epsilon: self.num("policy.epsilon")?,
            },
            "adals" => Policy::AdaLs {
                alpha: alpha(DEFAULT_ADALS_ALPHA)?,
            },
            "ar_adals" => Policy::ArAdaLs {
                alpha: alpha(DEFAULT_AR_ADALS_ALPHA)?,
                subsets: self.num("policy.subsets")?,
            },
            v => {
                return Err(config_err(format!(
                    "policy = {v:?}; expected vanilla, ls, adals or ar_adals"
                )))
            }
        };
        match policy {
            Policy::LabelSmoothing { epsilon } if !(0.0..1.0).contains(&epsilon) => {
                Err(config_err("policy.epsilon must lie in [0, 1)"))
            }
            Policy::AdaLs { alpha } | Policy::ArAdaLs { alpha, .. } if !(alpha >= 0.0 && alpha.is_finite()) => {
                Err(config_err("policy.alpha must be a finite non-negative number"))
            }
            Policy::ArAdaLs { subsets: 0, .. } => Err(config_err("policy.subsets must be ≥ 1")),
            p => Ok(p),
        }
    }

    pub fn subsets(&self) -> Result<usize> {
        self.num("policy.subsets")
    }

    pub fn on_the_fly(&self) -> Result<bool> {
        self.flag("policy.on_the_fly")
    }

    pub fn partition_dir(&self) -> PathBuf {
        match self.get("policy.partition_dir") {
            "" => self.out_dir().join("partitions"),
            p => PathBuf::from(p),
        }
    }

    pub fn attack_checkpoint(&self) -> PathBuf {
        match self.get("attack.checkpoint") {
            "" => self.out_dir().join("vanilla").join("model.ckpt"),
            p => PathBuf::from(p),
        }
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            binary_search_steps: self.num("attack.binary_search_steps")?,
            max_iterations: self.num("attack.max_iterations")?,
            step_size: self.num("attack.step_size")?,
            initial_const: self.num("attack.initial_const")?,
            const_growth: self.num("attack.const_growth")?,
            confidence: self.num("attack.confidence")?,
            clamp_unit_box: self.flag("attack.clamp_unit_box")?,
            abort_early: self.flag("attack.abort_early")?,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn ensemble_mode(&self) -> Result<EnsembleMode> {
        EnsembleMode::parse(self.get("ensemble.mode")).map_err(|e| config_err(e.to_string()))
    }

    pub fn ensemble_seeds(&self) -> Result<Vec<u64>> {
        self.list("ensemble.seeds")
    }

    pub fn bins(&self) -> Result<usize> {
        let b: usize = self.num("eval.bins")?;
        if b == 0 {
            return Err(config_err("eval.bins must be ≥ 1"));
        }
        Ok(b)
    }

    pub fn corruption_seed(&self) -> Result<u64> {
        self.num("eval.corruption_seed")
    }

    pub fn sweep_param(&self) -> Result<SweepParam> {
        match self.get("sweep.param") {
            "epsilon" => Ok(SweepParam::Epsilon),
            "alpha" => Ok(SweepParam::Alpha),
            v => Err(config_err(format!("sweep.param = {v:?}; expected epsilon or alpha"))),
        }
    }

    pub fn sweep_grid(&self) -> Result<Vec<f64>> {
        self.list("sweep.grid")
    }

    pub fn jobs(&self) -> Result<usize> {
        let j: usize = self.num("jobs")?;
        Ok(j.max(1))
    }

    /// Run directory name: `run.name`, else the policy name.
    pub fn run_name(&self) -> String {
        match self.get("run.name") {
            "" => self.get("policy").to_string(),
            n => n.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        spread: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Epsilon,
    Alpha,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "policy.epsilon",
            SweepParam::Alpha => "policy.alpha",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::Alpha => "alpha",
        }
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Builds (or loads) the dataset and splits it. Synthetic data is
/// regenerated from the config, so every command sees the same examples.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let seed = cfg.data_seed()?;
    let ds = match cfg.data_source()? {
        DataSource::Csv(path) => data::load_csv(&path, &CsvSchema::default())?,
        DataSource::Synthetic {
            classes,
            dim,
            n_per_class,
            spread,
        } => data::synth(classes, dim, n_per_class, spread, seed)?,
    };
    let (train, val, test) = data::split(&ds, cfg.split_fractions()?, seed)?;
    Ok(Splits { train, val, test })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

/// CSV text with a leading `# config_hash=…` line.
fn tagged_csv(hash: &str, header: &str, rows: &[String]) -> String {
    let mut out = format!("# config_hash={hash}\n{header}\n");
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- generate-data

pub fn generate_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let splits = load_splits(cfg)?;
    let dir = cfg.out_dir().join("data");
    create_dir(&dir)?;
    let tag = vec![format!("config_hash={}", cfg.hash())];
    let mut written = Vec::new();
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let path = dir.join(format!("{name}.csv"));
        data::save_csv_with_comments(ds, &path, &tag)?;
        written.push(path);
    }
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(written)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub confidence: f64,
    pub ece: f64,
}

impl SplitMetrics {
    pub fn of(probs: &NumArray, labels: &[usize], bins: usize) -> Result<Self> {
        let r = metrics::ece(probs, labels, bins)?;
        Ok(SplitMetrics {
            n: r.n,
            accuracy: r.accuracy,
            confidence: r.confidence,
            ece: r.ece,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub policy: Policy,
    pub epochs: usize,
    pub checkpoint_hash: String,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
}

fn read_partitions(cfg: &ExperimentConfig, splits: &Splits) -> Result<(RobustnessPartition, RobustnessPartition)> {
    let dir = cfg.partition_dir();
    let mut out = Vec::new();
    for (name, ds) in [("train", &splits.train), ("val", &splits.val)] {
        let path = dir.join(format!("{name}.csv"));
        if !path.exists() {
            return Err(config_err(format!(
                "ar_adals needs {} (run `attack` first) or policy.on_the_fly = true",
                path.display()
            )));
        }
        let (header, p) = attack::read_partition(&path)?;
        if p.len() != ds.len() {
            return Err(Error::Shape(format!(
                "{} covers {} examples, {name} split has {}",
                path.display(),
                p.len(),
                ds.len()
            )));
        }
        if header.subsets != cfg.subsets()? {
            return Err(config_err(format!(
                "{} has R = {}, config asks for {}",
                path.display(),
                header.subsets,
                cfg.subsets()?
            )));
        }
        out.push(p);
    }
    let val = out.pop().expect("two partitions");
    let train = out.pop().expect("two partitions");
    Ok((train, val))
}

/// Trains one model under the configured policy and writes its run
/// directory: `model.ckpt`, `config.txt`, `metrics.json`, `epochs.csv` and,
/// for adaptive policies, `trajectory.csv`.
pub fn train_run(cfg: &ExperimentConfig) -> Result<(PathBuf, RunMetrics)> {
    let splits = load_splits(cfg)?;
    let policy = cfg.policy()?;
    let train_cfg = cfg.train_config()?;
    let bins = cfg.bins()?;
    let spec = cfg.mlp_spec(splits.train.dim(), splits.train.classes())?;
    let init = model::init(&spec)?;
    let hash = cfg.hash();

    let source = if policy.needs_partition() {
        Some(if cfg.on_the_fly()? {
            PartitionSource::OnTheFly {
                subsets: cfg.subsets()?,
                attack: cfg.attack_config()?,
            }
        } else {
            let (train, val) = read_partitions(cfg, &splits)?;
            PartitionSource::Precomputed { train, val }
        })
    } else {
        None
    };

    let mut epochs = Vec::new();
    let mut record = |r: &model::EpochReport, ck: &Checkpoint| -> Result<()> {
        let p = ck.predict_proba(splits.val.features())?;
        let m = SplitMetrics::of(&p, splits.val.labels(), bins)?;
        epochs.push(format!("{},{},{},{}", r.epoch, r.loss, m.accuracy, m.ece));
        Ok(())
    };
    let (ckpt, trajectory) = match (policy, source) {
        (Policy::AdaLs { alpha }, _) => {
            let mut sup = AdaptiveSmoothing::without_robustness(&splits.train, &splits.val, alpha)?;
            let ck = model::train(init, &splits.train, &mut sup, &train_cfg, &mut record)?;
            (ck, Some(sup.trajectory().to_vec()))
        }
        (Policy::ArAdaLs { alpha, .. }, Some(src)) => {
            let mut sup = AdaptiveSmoothing::from_source(&splits.train, &splits.val, src, alpha, &init)?;
            let ck = model::train(init, &splits.train, &mut sup, &train_cfg, &mut record)?;
            (ck, Some(sup.trajectory().to_vec()))
        }
        (p, src) => {
            let mut sup = p.supervisor(&splits.train, &splits.val, src, &init)?;
            let ck = model::train(init, &splits.train, sup.as_mut(), &train_cfg, &mut record)?;
            (ck, None)
        }
    };

    let dir = cfg.out_dir().join(cfg.run_name());
    create_dir(&dir)?;
    ckpt.save(&dir.join("model.ckpt"))?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    write_file(
        &dir.join("epochs.csv"),
        &tagged_csv(&hash, "epoch,loss,val_accuracy,val_ece", &epochs),
    )?;
    if let Some(rows) = trajectory {
        smoothing::write_trajectory(&rows, &dir.join("trajectory.csv"))?;
    }
    let m = |ds: &Dataset| SplitMetrics::of(&ckpt.predict_proba(ds.features())?, ds.labels(), bins);
    let metrics = RunMetrics {
        config_hash: hash,
        policy,
        epochs: train_cfg.epochs,
        checkpoint_hash: ckpt.content_hash()?,
        train: m(&splits.train)?,
        val: m(&splits.val)?,
        test: m(&splits.test)?,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok((dir, metrics))
}

// ---------------------------------------------------------------- attack

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub split: String,
    pub attempted: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub path: PathBuf,
}

impl AttackSummary {
    pub fn success_rate(&self) -> f64 {
        self.succeeded as f64 / self.attempted as f64
    }
}

/// Attacks the configured checkpoint on every split and writes
/// `train.csv`, `val.csv`, `test.csv` partition files with R subsets.
pub fn attack_run(cfg: &ExperimentConfig) -> Result<Vec<AttackSummary>> {
    let path = cfg.attack_checkpoint();
    if !path.exists() {
        return Err(Error::io(
            format!("checkpoint {} (train a vanilla model first)", path.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let ckpt = Checkpoint::load(&path)?;
    let splits = load_splits(cfg)?;
    if ckpt.spec.input_dim() != splits.train.dim() || ckpt.spec.classes() != splits.train.classes() {
        return Err(Error::Shape(format!(
            "checkpoint {:?} does not match {}-dim data with {} classes",
            ckpt.spec.layer_sizes,
            splits.train.dim(),
            splits.train.classes()
        )));
    }
    let attack_cfg = cfg.attack_config()?;
    let subsets = cfg.subsets()?;
    let dir = cfg.partition_dir();
    create_dir(&dir)?;
    let ckpt_hash = ckpt.content_hash()?;
    let mut out = Vec::new();
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let outcomes = attack::robustness_scores(&ckpt, ds.features(), &attack_cfg)?;
        let p = attack::partition(&attack::scores_of(&outcomes), subsets)?;
        let file = dir.join(format!("{name}.csv"));
        attack::write_partition(&file, &p, &attack_cfg.hash(), &ckpt_hash, &cfg.hash())?;
        out.push(AttackSummary {
            split: name.to_string(),
            attempted: outcomes.len(),
            succeeded: outcomes.iter().filter(|o| o.is_success()).count(),
            failed: outcomes
                .iter()
                .filter(|o| matches!(o, attack::AttackOutcome::Failed(_)))
                .count(),
            path: file,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- eval

/// One evaluated test set: the clean split or a corrupted copy of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub test_set: String,
    pub kind: String,
    pub intensity: u8,
    pub metrics: SplitMetrics,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileRow {
    pub intensity: u8,
    pub metric: String,
    pub summary: metrics::Quartiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub members: usize,
    pub rows: Vec<EvalRow>,
    pub quartiles: Vec<QuartileRow>,
    pub subsets: Option<Vec<SubsetStats>>,
}

/// Loads the model(s) stored in a run directory: a single `model.ckpt` or
/// an ensemble manifest.
pub fn load_run_models(dir: &Path) -> Result<Vec<Checkpoint>> {
    let single = dir.join("model.ckpt");
    if single.exists() {
        return Ok(vec![Checkpoint::load(&single)?]);
    }
    if dir.join("manifest.json").exists() {
        let (_, run) = EnsembleRun::load(dir)?;
        return Ok(run.members);
    }
    Err(Error::io(
        format!("no model.ckpt or manifest.json in {}", dir.display()),
        std::io::Error::from(std::io::ErrorKind::NotFound),
    ))
}

/// The 21 evaluation sets: clean test, then every corruption kind at
/// intensities 1–5.
pub fn shifted_test_sets(test: &Dataset, seed: u64) -> Result<Vec<(String, String, u8, Dataset)>> {
    let mut sets = vec![("clean".to_string(), "none".to_string(), 0, test.clone())];
    for kind in Corruption::ALL {
        for intensity in 1..=5u8 {
            sets.push((
                format!("{}_{intensity}", kind.name()),
                kind.name().to_string(),
                intensity,
                data::corrupt(test, kind, intensity, seed)?,
            ));
        }
    }
    Ok(sets)
}

/// Evaluates a run directory on clean and corrupted test data and writes
/// `eval/summary.csv`, `eval/quartiles.csv`, `eval/reliability.csv`,
/// `eval/subsets.csv` (when a test partition exists) and `eval/eval.json`.
///
/// The run's stored config is used. If `cfg` is given its hash must match
/// the run's unless `force` is set.
pub fn eval_run(run_dir: &Path, cfg: Option<&ExperimentConfig>, force: bool) -> Result<EvalReport> {
    let cfg_path = run_dir.join("config.txt");
    if !cfg_path.exists() {
        return Err(Error::io(
            format!("{} (not a run directory?)", cfg_path.display()),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let run_cfg = ExperimentConfig::load(&cfg_path)?;
    if let Some(given) = cfg {
        if given.hash() != run_cfg.hash() && !force {
            return Err(Error::HashMismatch {
                expected: run_cfg.hash(),
                found: given.hash(),
            });
        }
    }
    let hash = run_cfg.hash();
    let members = load_run_models(run_dir)?;
    let splits = load_splits(&run_cfg)?;
    let bins = run_cfg.bins()?;
    let sets = shifted_test_sets(&splits.test, run_cfg.corruption_seed()?)?;

    let mut rows = Vec::new();
    let mut reliability = Vec::new();
    let mut subsets = None;
    for (name, kind, intensity, ds) in &sets {
        let per_member = ensemble::predict_members(&members, ds.features())?;
        let probs = ensemble::mean_probs(&per_member)?;
        let report = metrics::ece(&probs, ds.labels(), bins)?;
        for r in report.reliability_rows() {
            reliability.push(format!(
                "{name},{},{},{},{}",
                r.bin_center, r.accuracy, r.confidence, r.count
            ));
        }
        let variance = if members.len() >= 2 {
            Some(metrics::variance(&per_member, ds.labels())?.sigma2)
        } else {
            None
        };
        if *intensity == 0 {
            let test_partition = run_cfg.partition_dir().join("test.csv");
            if test_partition.exists() {
                let (_, p) = attack::read_partition(&test_partition)?;
                if p.len() == ds.len() {
                    let m = (members.len() >= 2).then_some(per_member.as_slice());
                    subsets = Some(metrics::per_subset_stats(&probs, ds.labels(), &p, bins, m)?);
                }
            }
        }
        rows.push(EvalRow {
            test_set: name.clone(),
            kind: kind.clone(),
            intensity: *intensity,
            metrics: SplitMetrics {
                n: report.n,
                accuracy: report.accuracy,
                confidence: report.confidence,
                ece: report.ece,
            },
            variance,
        });
    }

    let mut quartiles = Vec::new();
    for intensity in 1..=5u8 {
        let at: Vec<&EvalRow> = rows.iter().filter(|r| r.intensity == intensity).collect();
        let mut push = |metric: &str, values: Vec<f64>| -> Result<()> {
            quartiles.push(QuartileRow {
                intensity,
                metric: metric.to_string(),
                summary: metrics::quartiles(&values)?,
            });
            Ok(())
        };
        push("ece", at.iter().map(|r| r.metrics.ece).collect())?;
        push("accuracy", at.iter().map(|r| r.metrics.accuracy).collect())?;
        push("confidence", at.iter().map(|r| r.metrics.confidence).collect())?;
        if members.len() >= 2 {
            push("variance", at.iter().filter_map(|r| r.variance).collect())?;
        }
    }

    let dir = run_dir.join("eval");
    create_dir(&dir)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let summary: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.test_set,
                r.kind,
                r.intensity,
                r.metrics.n,
                r.metrics.accuracy,
                r.metrics.confidence,
                r.metrics.ece,
                opt(r.variance)
            )
        })
        .collect();
    write_file(
        &dir.join("summary.csv"),
        &tagged_csv(&hash, "test_set,kind,intensity,n,accuracy,confidence,ece,variance", &summary),
    )?;
    let q: Vec<String> = quartiles
        .iter()
        .map(|q| {
            let s = &q.summary;
            format!(
                "{},{},{},{},{},{},{}",
                q.intensity, q.metric, s.min, s.q25, s.median, s.q75, s.max
            )
        })
        .collect();
    write_file(
        &dir.join("quartiles.csv"),
        &tagged_csv(&hash, "intensity,metric,min,q25,median,q75,max", &q),
    )?;
    write_file(
        &dir.join("reliability.csv"),
        &tagged_csv(&hash, "test_set,bin_center,accuracy,confidence,count", &reliability),
    )?;
    if let Some(st) = &subsets {
        let lines: Vec<String> = st
            .iter()
            .map(|s| {
                format!(
                    "{},{},{},{},{},{}",
                    s.subset,
                    s.count,
                    s.accuracy,
                    s.confidence,
                    s.ece,
                    opt(s.variance)
                )
            })
            .collect();
        write_file(
            &dir.join("subsets.csv"),
            &tagged_csv(&hash, "subset,count,accuracy,confidence,ece,variance", &lines),
        )?;
    }
    let report = EvalReport {
        config_hash: hash,
        members: members.len(),
        rows,
        quartiles,
        subsets,
    };
    write_json(&dir.join("eval.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub val_ece: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_hash: String,
    pub param: String,
    pub points: Vec<SweepPoint>,
    pub best: Option<f64>,
}

/// Grid value with the lowest validation ECE; ties go to the smaller value.
pub fn select_best(points: &[SweepPoint]) -> Option<f64> {
    points
        .iter()
        .filter_map(|p| p.val_ece.map(|e| (p.value, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
        .map(|(v, _)| v)
}

/// One training run per grid value (`sweep-<param>-<value>` under `out`),
/// at most `jobs` at a time. A failed run is recorded and the sweep goes on.
pub fn sweep_run(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let param = cfg.sweep_param()?;
    let grid = cfg.sweep_grid()?;
    if grid.is_empty() {
        return Err(config_err("sweep.grid is empty"));
    }
    match (param, cfg.policy()?) {
        (SweepParam::Epsilon, Policy::LabelSmoothing { .. })
        | (SweepParam::Alpha, Policy::AdaLs { .. } | Policy::ArAdaLs { .. }) => {}
        (p, policy) => {
            return Err(config_err(format!(
                "cannot sweep {} for policy {}",
                p.name(),
                policy.name()
            )))
        }
    }
    let run_one = |value: f64| -> SweepPoint {
        let attempt = || -> Result<f64> {
            let mut c = cfg.clone();
            c.set(param.key(), &value.to_string())?;
            c.set("run.name", &format!("sweep-{}-{value}", param.name()))?;
            c.validate()?;
            Ok(train_run(&c)?.1.val.ece)
        };
        match attempt() {
            Ok(e) => SweepPoint {
                value,
                val_ece: Some(e),
                error: None,
            },
            Err(e) => SweepPoint {
                value,
                val_ece: None,
                error: Some(e.to_string()),
            },
        }
    };
    let mut points = Vec::with_capacity(grid.len());
    for chunk in grid.chunks(cfg.jobs()?) {
        let done: Vec<SweepPoint> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&v| s.spawn(move || run_one(v))).collect();
            handles
                .into_iter()
                .zip(chunk)
                .map(|(h, &v)| {
                    h.join().unwrap_or_else(|_| SweepPoint {
                        value: v,
                        val_ece: None,
                        error: Some("run panicked".into()),
                    })
                })
                .collect()
        });
        points.extend(done);
    }
    let result = SweepResult {
        config_hash: cfg.hash(),
        param: param.name().to_string(),
        best: select_best(&points),
        points,
    };
    let lines: Vec<String> = result
        .points
        .iter()
        .map(|p| {
            format!(
                "{},{},{}",
                p.value,
                p.val_ece.map_or(String::new(), |e| e.to_string()),
                p.error.as_deref().unwrap_or("").replace(',', ";")
            )
        })
        .collect();
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    write_file(
        &dir.join(format!("sweep-{}.csv", param.name())),
        &tagged_csv(&result.config_hash, &format!("{},val_ece,error", param.name()), &lines),
    )?;
    write_json(&dir.join(format!("sweep-{}.json", param.name())), &result)?;
    Ok(result)
}

// ---------------------------------------------------------------- ensemble-train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetrics {
    pub config_hash: String,
    pub mode: EnsembleMode,
    pub seeds: Vec<u64>,
    pub ensemble: SplitMetrics,
    pub members: Vec<SplitMetrics>,
    pub variance: Option<f64>,
}

/// Trains an ensemble with the configured policy and mode and writes it to
/// `<out>/<run.name or mode>` together with `config.txt` and `metrics.json`.
pub fn ensemble_train(cfg: &ExperimentConfig) -> Result<(PathBuf, EnsembleMetrics)> {
    let splits = load_splits(cfg)?;
    let mode = cfg.ensemble_mode()?;
    let policy = cfg.policy()?;
    let seeds = cfg.ensemble_seeds()?;
    let partitions = if policy.needs_partition() {
        Some(read_partitions(cfg, &splits)?)
    } else {
        None
    };
    let setup = EnsembleSetup {
        spec: cfg.mlp_spec(splits.train.dim(), splits.train.classes())?,
        train: &splits.train,
        val: &splits.val,
        policy,
        cfg: cfg.train_config()?,
        partitions,
    };
    let run = ensemble::train_ensemble(&setup, &seeds, mode).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(m),
        e => e,
    })?;
    let name = match cfg.get("run.name") {
        "" => mode.name().to_string(),
        n => n.to_string(),
    };
    let dir = cfg.out_dir().join(name);
    let hash = cfg.hash();
    run.save(&dir, &hash)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;

    let bins = cfg.bins()?;
    let test = &splits.test;
    let per_member = ensemble::predict_members(&run.members, test.features())?;
    let metrics = EnsembleMetrics {
        config_hash: hash,
        mode,
        seeds,
        ensemble: SplitMetrics::of(&ensemble::mean_probs(&per_member)?, test.labels(), bins)?,
        members: per_member
            .iter()
            .map(|p| SplitMetrics::of(p, test.labels(), bins))
            .collect::<Result<_>>()?,
        variance: if per_member.len() >= 2 {
            Some(metrics::variance(&per_member, test.labels())?.sigma2)
        } else {
            None
        },
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok((dir, metrics))
}

// ---------------------------------------------------------------- report

fn read_tagged_csv(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), std::io::Error::other(e)))?;
    r.records()
        .map(|rec| {
            rec.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Gathers evaluated runs into two plot-ready tables under `<out>/report`:
/// `subsets.csv` (per-robustness-subset accuracy, confidence, ECE and
/// variance per run) and `shift.csv` (ECE quartiles across corruption kinds
/// per intensity per run).
pub fn report(cfg: &ExperimentConfig, runs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(config_err("report needs at least one run directory"));
    }
    let mut subsets = Vec::new();
    let mut shift = Vec::new();
    for run in runs {
        let name = run
            .file_name()
            .map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        let q = run.join("eval").join("quartiles.csv");
        if !q.exists() {
            return Err(Error::io(
                format!("{} (run `eval` first)", q.display()),
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
        for rec in read_tagged_csv(&q)? {
            if rec.get(1) == Some("ece") {
                let f = |i| rec.get(i).unwrap_or("");
                shift.push(format!("{name},{},{},{},{},{},{}", f(0), f(2), f(3), f(4), f(5), f(6)));
            }
        }
        let s = run.join("eval").join("subsets.csv");
        if s.exists() {
            for rec in read_tagged_csv(&s)? {
                subsets.push(format!("{name},{}", rec.iter().collect::<Vec<_>>().join(",")));
            }
        }
    }
    let dir = cfg.out_dir().join("report");
    create_dir(&dir)?;
    let hash = cfg.hash();
    let a = dir.join("subsets.csv");
    write_file(
        &a,
        &tagged_csv(&hash, "run,subset,count,accuracy,confidence,ece,variance", &subsets),
    )?;
    let b = dir.join("shift.csv");
    write_file(&b, &tagged_csv(&hash, "run,intensity,min,q25,median,q75,max", &shift))?;
    Ok(vec![a, b])
}

/// Reads back a run's `metrics.json`.
pub fn read_run_metrics(run_dir: &Path) -> Result<RunMetrics> {
    let text = read_file(&run_dir.join("metrics.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
}
