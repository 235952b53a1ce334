//! Flat TOML run configuration with a single include level.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use e2p_core::data::synth::{PopulationConfig, RecConfig};
use e2p_core::lm::PretrainConfig;
use e2p_core::{AdamWConfig, LmConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Exit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lm,
    Pref,
    Rec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out: PathBuf,
    /// Relative paths below resolve against `out`.
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,

    pub n_clusters: usize,
    pub dim: usize,
    pub sigma: f64,
    pub n_users: usize,
    pub records_per_user: usize,
    pub n_symbols: usize,
    pub target_len: usize,
    pub concentration: f64,
    pub n_items: usize,
    pub n_codes: usize,
    pub item_sigma: f64,

    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    /// Share of pretraining texts that keep their profile block.
    pub profile_keep_prob: f64,

    pub preset: String,
    pub objective: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub alpha: f64,
    pub weight_decay: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub baselines: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<String>>,
    pub hitrate_k: usize,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pop = PopulationConfig::default();
        let rec = RecConfig::default();
        let lm = LmConfig::default();
        let pre = PretrainConfig::default();
        let train = TrainConfig::preset("synthetic").expect("built-in preset");
        Self {
            task: Task::Lm,
            seed: 42,
            out: PathBuf::from("runs/e2p"),
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
            train_file: None,
            test_file: None,
            n_clusters: pop.n_clusters,
            dim: pop.dim,
            sigma: pop.sigma,
            n_users: pop.n_users,
            records_per_user: pop.records_per_user,
            n_symbols: pop.n_symbols,
            target_len: pop.target_len,
            concentration: pop.concentration,
            n_items: rec.n_items,
            n_codes: rec.n_codes,
            item_sigma: rec.item_sigma,
            vocab_size: lm.vocab_size,
            hidden_dim: lm.hidden_dim,
            n_layers: lm.n_layers,
            n_heads: lm.n_heads,
            max_seq_len: lm.max_seq_len,
            layer_norm_eps: lm.layer_norm_eps,
            pretrain_epochs: pre.epochs,
            pretrain_batch_size: pre.batch_size,
            pretrain_learning_rate: pre.optimizer.learning_rate,
            profile_keep_prob: 0.5,
            preset: "synthetic".into(),
            objective: "lm".into(),
            learning_rate: None,
            batch_size: None,
            epochs: None,
            alpha: train.alpha,
            weight_decay: train.weight_decay,
            hidden_width: None,
            baselines: None,
            metrics: None,
            hitrate_k: 30,
            temperature: 1.0,
            max_new_tokens: None,
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Exit::config(msg).into()
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    let table: Table = text
        .parse()
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(config_error(format!(
            "{}: `{k}` is a table; the config is flat key = value pairs",
            path.display()
        )));
    }
    Ok(table)
}

/// Reads `path`, merging the file it includes underneath it.
pub fn load_table(path: &Path) -> Result<Table> {
    let mut main = read_table(path)?;
    let Some(inc) = main.remove("include") else {
        return Ok(main);
    };
    let Value::String(inc) = inc else {
        return Err(config_error("`include` must be a path string"));
    };
    let inc_path = path.parent().unwrap_or(Path::new(".")).join(inc);
    let mut base = read_table(&inc_path)?;
    if base.contains_key("include") {
        return Err(config_error(format!(
            "{}: included files cannot include further files",
            inc_path.display()
        )));
    }
    base.extend(main);
    Ok(base)
}

/// Parses a `key=value` override; the value is read as TOML and falls back to
/// a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{s}` is not key=value")))?;
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_owned()));
    Ok((k.trim().to_owned(), value))
}

impl RunConfig {
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let wrap = |r: e2p_core::Result<()>| r.map_err(|e| config_error(e.to_string()));
        wrap(self.population().validate())?;
        wrap(self.lm().validate())?;
        wrap(self.train().and_then(|t| t.validate()))?;
        wrap(self.pretrain().optimizer.validate())?;
        if !(0.0..=1.0).contains(&self.profile_keep_prob) {
            return Err(config_error("profile_keep_prob must lie in [0, 1]"));
        }
        if self.hitrate_k == 0 {
            return Err(config_error("hitrate_k must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    /// Digest of every setting except output locations, so the same run in
    /// two directories carries the same digest.
    pub fn digest(&self) -> String {
        let d = RunConfig::default();
        let pathless = RunConfig {
            out: d.out,
            data_dir: d.data_dir,
            checkpoint_dir: d.checkpoint_dir,
            report_dir: d.report_dir,
            train_file: None,
            test_file: None,
            ..self.clone()
        };
        e2p_core::checkpoint::bytes_digest(pathless.to_toml().as_bytes())
    }

    fn under_out(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.under_out(&self.data_dir)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.under_out(&self.checkpoint_dir)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.under_out(&self.report_dir)
    }

    pub fn train_file(&self) -> PathBuf {
        self.train_file.clone().unwrap_or_else(|| self.data_dir().join("train.jsonl"))
    }

    pub fn test_file(&self) -> PathBuf {
        self.test_file.clone().unwrap_or_else(|| self.data_dir().join("test.jsonl"))
    }

    pub fn lm_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("lm.ckpt")
    }

    pub fn phi_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("phi.ckpt")
    }

    pub fn population(&self) -> PopulationConfig {
        PopulationConfig {
            n_clusters: self.n_clusters,
            dim: self.dim,
            sigma: self.sigma,
            n_users: self.n_users,
            records_per_user: self.records_per_user,
            n_symbols: self.n_symbols,
            target_len: self.target_len,
            concentration: self.concentration,
            seed: self.seed,
        }
    }

    pub fn rec(&self) -> RecConfig {
        RecConfig {
            n_items: self.n_items,
            n_codes: self.n_codes,
            item_sigma: self.item_sigma,
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            layer_norm_eps: self.layer_norm_eps,
            seed: self.seed,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.pretrain_learning_rate,
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn train(&self) -> e2p_core::Result<TrainConfig> {
        let base = TrainConfig::preset(&self.preset)?;
        Ok(TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed,
            alpha: self.alpha,
            weight_decay: self.weight_decay,
            hidden_width: self.hidden_width,
            ..base
        })
    }

    pub fn baselines(&self) -> Vec<String> {
        if let Some(b) = &self.baselines {
            return b.clone();
        }
        let names: &[&str] = match self.task {
            Task::Lm => &["no-context", "prompt-context", "e2p-random", "e2p", "e2p-plus-prompt"],
            Task::Pref => &["no-context", "e2p-random", "e2p"],
            Task::Rec => &["no-context", "e2p-random", "e2p", "embedding-retrieval"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn metrics(&self) -> Vec<String> {
        self.metrics.clone().unwrap_or_else(|| match self.task {
            Task::Lm | Task::Pref => vec!["perplexity".into()],
            Task::Rec => vec!["hitrate".into()],
        })
    }
}

/// File config, then `--set` overrides, then the global flags.
pub fn resolve(
    file: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let mut table = match file {
        Some(p) => load_table(p).with_context(|| format!("loading {}", p.display()))?,
        None => Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| config_error("seed must fit in a signed 64-bit integer"))?;
        table.insert("seed".into(), Value::Integer(s));
    }
    if let Some(o) = out {
        table.insert("out".into(), Value::String(o.display().to_string()));
    }
    RunConfig::from_table(table)
}
