//! Flat `key = value` experiment configuration with `scm.`, `data.`,
//! `train.`, `model.`, `metric.` and `run.` sections.
//!
//! Lines starting with `#` are comments. Every key is optional; unknown or
//! repeated keys are errors. The canonical text form (all keys, fixed order,
//! shortest round-trip floats) is what the config hash covers, apart from
//! the output directory and worker count.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_ECE_BINS;
use crate::models::EncoderSpec;
use crate::scm::{enrichment_matrix, OodMode, ScmConfig, TaskMode};
use crate::trainer::{Ablation, CriticBatches, ModelConfig, Schedule, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_id_test: usize,
    pub n_ood: usize,
    pub ood_mode: OodMode,
    /// Load splits from here instead of sampling them.
    pub dir: Option<PathBuf>,
    /// Also write the delimited-text form next to each binary split.
    pub write_text: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_val: 1000,
            n_id_test: 2000,
            n_ood: 2000,
            ood_mode: OodMode::Reversed,
            dir: None,
            write_text: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub ece_bins: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_seeds: usize,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub dump_representations: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_seeds: 5,
            out_dir: PathBuf::from("runs"),
            workers: 1,
            dump_representations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub scm: ScmConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub metric: MetricConfig,
    pub run: RunConfig,
}

fn bad(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("{key} = {value}: {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(key, value, "not a valid number"))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
enum Selection {
    Uniform,
    Enrichment(f64, f64),
    Rows(Vec<Vec<f64>>),
}

fn parse_selection(key: &str, value: &str) -> Result<Selection> {
    if value == "uniform" {
        return Ok(Selection::Uniform);
    }
    if let Some(rest) = value.strip_prefix("enrichment:") {
        let v: Vec<f64> = list(key, rest)?;
        if v.len() != 2 {
            return Err(bad(key, value, "enrichment takes HIGH,LOW"));
        }
        return Ok(Selection::Enrichment(v[0], v[1]));
    }
    let rows = value
        .split(';')
        .map(|r| list(key, r.trim()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(Selection::Rows(rows))
}

fn parse_encoder(key: &str, value: &str) -> Result<EncoderSpec> {
    if value == "identity" {
        return Ok(EncoderSpec::Identity);
    }
    match value.strip_prefix("projection:") {
        Some(d) => Ok(EncoderSpec::RandomProjection { dim: num(key, d)? }),
        None => Err(bad(key, value, "expected identity or projection:DIM")),
    }
}

fn encoder_text(e: EncoderSpec) -> String {
    match e {
        EncoderSpec::Identity => "identity".into(),
        EncoderSpec::RandomProjection { dim } => format!("projection:{dim}"),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        let mut selection = None;
        let mut stratum_probs = None;
        let mut warmup = 0.05;
        let mut schedule_kind = "cosine".to_string();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: key {key} given twice",
                    lineno + 1
                )));
            }
            let (s, t, m) = (&mut cfg.scm, &mut cfg.train, &mut cfg.model);
            match key {
                "scm.n_sites" => s.n_sites = num(key, value)?,
                "scm.n_strata" => s.n_strata = num(key, value)?,
                "scm.n_classes" => s.n_classes = num(key, value)?,
                "scm.feature_dim" => s.feature_dim = num(key, value)?,
                "scm.artifact_strength" => s.artifact_strength = num(key, value)?,
                "scm.confounder_strength" => s.confounder_strength = num(key, value)?,
                "scm.demographic_strength" => s.demographic_strength = num(key, value)?,
                "scm.signal_strength" => s.signal_strength = num(key, value)?,
                "scm.feature_noise" => s.feature_noise = num(key, value)?,
                "scm.outcome_noise" => s.outcome_noise = num(key, value)?,
                "scm.label_noise" => s.label_noise = num(key, value)?,
                "scm.selection" => selection = Some(parse_selection(key, value)?),
                "scm.stratum_probs" => stratum_probs = Some(list(key, value)?),
                "scm.task_mode" => s.task_mode = TaskMode::parse(value)?,
                "scm.seed" => s.seed = num(key, value)?,

                "data.n_train" => cfg.data.n_train = num(key, value)?,
                "data.n_val" => cfg.data.n_val = num(key, value)?,
                "data.n_id_test" => cfg.data.n_id_test = num(key, value)?,
                "data.n_ood" => cfg.data.n_ood = num(key, value)?,
                "data.ood_mode" => cfg.data.ood_mode = OodMode::parse(value)?,
                "data.dir" => cfg.data.dir = (!value.is_empty()).then(|| PathBuf::from(value)),
                "data.write_text" => cfg.data.write_text = boolean(key, value)?,

                "train.lambda" => t.lambda = num(key, value)?,
                "train.beta" => t.beta = num(key, value)?,
                "train.n_critic" => t.n_critic = num(key, value)?,
                "train.batch_size" => t.batch_size = num(key, value)?,
                "train.lr_predictor" => t.lr_predictor = num(key, value)?,
                "train.lr_critic" => t.lr_critic = num(key, value)?,
                "train.weight_decay" => t.weight_decay = num(key, value)?,
                "train.momentum_ema" => t.momentum_ema = num(key, value)?,
                "train.max_steps" => t.max_steps = num(key, value)?,
                "train.eval_every" => t.eval_every = num(key, value)?,
                "train.patience" => t.patience = num(key, value)?,
                "train.seed" => t.seed = num(key, value)?,
                "train.ablation" => t.ablation = Ablation::parse(value)?,
                "train.lambda_grid" => t.lambda_grid = list(key, value)?,
                "train.schedule" => schedule_kind = value.to_string(),
                "train.warmup_frac" => warmup = num(key, value)?,
                "train.critic_batches" => t.critic_batches = CriticBatches::parse(value)?,

                "model.hidden_dims" => m.hidden_dims = list(key, value)?,
                "model.use_demographics" => m.use_demographics = boolean(key, value)?,
                "model.predictor_d_embed_dim" => m.predictor_d_embed_dim = num(key, value)?,
                "model.encoder" => m.encoder = parse_encoder(key, value)?,
                "model.critic_z_embed_dim" => m.critic_z_embed_dim = num(key, value)?,
                "model.critic_d_embed_dim" => m.critic_d_embed_dim = num(key, value)?,
                "model.critic_hidden_dim" => m.critic_hidden_dim = num(key, value)?,
                "model.critic_layers" => m.critic_layers = num(key, value)?,
                "model.critic_output_dim" => m.critic_output_dim = num(key, value)?,
                "model.leaky_slope" => m.leaky_slope = num(key, value)?,

                "metric.ece_bins" => cfg.metric.ece_bins = num(key, value)?,

                "run.n_seeds" => cfg.run.n_seeds = num(key, value)?,
                "run.out_dir" => cfg.run.out_dir = PathBuf::from(value),
                "run.workers" => cfg.run.workers = num(key, value)?,
                "run.dump_representations" => cfg.run.dump_representations = boolean(key, value)?,
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {key}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.train.schedule = match schedule_kind.as_str() {
            "constant" => Schedule::Constant,
            "cosine" => Schedule::Cosine {
                warmup_frac: warmup,
            },
            other => return Err(bad("train.schedule", other, "expected constant or cosine")),
        };
        let (k, s) = (cfg.scm.n_strata, cfg.scm.n_sites);
        cfg.scm.selection_matrix = match selection.unwrap_or(Selection::Uniform) {
            Selection::Uniform => vec![vec![1.0 / s as f64; s]; k],
            Selection::Enrichment(hi, lo) => {
                if k != 2 {
                    return Err(Error::Config(
                        "enrichment selection needs exactly 2 strata".into(),
                    ));
                }
                enrichment_matrix(s, hi, lo).map_err(|e| Error::Config(e.to_string()))?
            }
            Selection::Rows(rows) => rows,
        };
        cfg.scm.stratum_probs = stratum_probs.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.scm.validate().map_err(as_config)?;
        self.train.validate()?;
        if self.run.n_seeds == 0 {
            return Err(Error::Config("run.n_seeds must be at least 1".into()));
        }
        if self.metric.ece_bins == 0 {
            return Err(Error::Config("metric.ece_bins must be at least 1".into()));
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_val == 0 || d.n_id_test == 0 || d.n_ood == 0 {
            return Err(Error::Config("every split size must be at least 1".into()));
        }
        if self.model.hidden_dims.is_empty() {
            return Err(Error::Config("model.hidden_dims must be nonempty".into()));
        }
        Ok(())
    }

    /// Every key in fixed order; parsing this text reproduces `self`.
    pub fn to_canonical_text(&self) -> String {
        let mut o = String::new();
        let (s, t, m) = (&self.scm, &self.train, &self.model);
        let rows: Vec<String> = s.selection_matrix.iter().map(|r| join(r)).collect();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("scm.n_sites", s.n_sites.to_string());
        kv("scm.n_strata", s.n_strata.to_string());
        kv("scm.n_classes", s.n_classes.to_string());
        kv("scm.feature_dim", s.feature_dim.to_string());
        kv("scm.artifact_strength", s.artifact_strength.to_string());
        kv("scm.confounder_strength", s.confounder_strength.to_string());
        kv(
            "scm.demographic_strength",
            s.demographic_strength.to_string(),
        );
        kv("scm.signal_strength", s.signal_strength.to_string());
        kv("scm.feature_noise", s.feature_noise.to_string());
        kv("scm.outcome_noise", s.outcome_noise.to_string());
        kv("scm.label_noise", s.label_noise.to_string());
        kv("scm.selection", rows.join("; "));
        kv("scm.stratum_probs", join(&s.stratum_probs));
        kv("scm.task_mode", s.task_mode.as_str().into());
        kv("scm.seed", s.seed.to_string());
        let d = &self.data;
        kv("data.n_train", d.n_train.to_string());
        kv("data.n_val", d.n_val.to_string());
        kv("data.n_id_test", d.n_id_test.to_string());
        kv("data.n_ood", d.n_ood.to_string());
        kv("data.ood_mode", d.ood_mode.label());
        kv(
            "data.dir",
            d.dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        kv("data.write_text", d.write_text.to_string());
        kv("train.lambda", t.lambda.to_string());
        kv("train.beta", t.beta.to_string());
        kv("train.n_critic", t.n_critic.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr_predictor", t.lr_predictor.to_string());
        kv("train.lr_critic", t.lr_critic.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.momentum_ema", t.momentum_ema.to_string());
        kv("train.max_steps", t.max_steps.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.ablation", t.ablation.as_str().into());
        kv("train.lambda_grid", join(&t.lambda_grid));
        match t.schedule {
            Schedule::Constant => kv("train.schedule", "constant".into()),
            Schedule::Cosine { warmup_frac } => {
                kv("train.schedule", "cosine".into());
                kv("train.warmup_frac", warmup_frac.to_string());
            }
        }
        kv("train.critic_batches", t.critic_batches.as_str().into());
        kv("model.hidden_dims", join(&m.hidden_dims));
        kv("model.use_demographics", m.use_demographics.to_string());
        kv(
            "model.predictor_d_embed_dim",
            m.predictor_d_embed_dim.to_string(),
        );
        kv("model.encoder", encoder_text(m.encoder));
        kv("model.critic_z_embed_dim", m.critic_z_embed_dim.to_string());
        kv("model.critic_d_embed_dim", m.critic_d_embed_dim.to_string());
        kv("model.critic_hidden_dim", m.critic_hidden_dim.to_string());
        kv("model.critic_layers", m.critic_layers.to_string());
        kv("model.critic_output_dim", m.critic_output_dim.to_string());
        kv("model.leaky_slope", m.leaky_slope.to_string());
        kv("metric.ece_bins", self.metric.ece_bins.to_string());
        kv("run.n_seeds", self.run.n_seeds.to_string());
        kv("run.out_dir", self.run.out_dir.display().to_string());
        kv("run.workers", self.run.workers.to_string());
        kv(
            "run.dump_representations",
            self.run.dump_representations.to_string(),
        );
        o
    }

    /// SHA-256 of the canonical text, hex encoded. Keys that only affect
    /// where and how outputs are written are left out.
    pub fn hash(&self) -> String {
        const OUTPUT_ONLY: [&str; 4] = [
            "run.out_dir",
            "run.workers",
            "run.dump_representations",
            "data.write_text",
        ];
        let text: String = self
            .to_canonical_text()
            .lines()
            .filter(|l| {
                l.split(" = ")
                    .next()
                    .map_or(true, |k| !OUTPUT_ONLY.contains(&k))
            })
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The `scm.*` lines of the canonical form, used as dataset provenance.
pub fn scm_to_text(scm: &ScmConfig) -> String {
    let cfg = ExperimentConfig {
        scm: scm.clone(),
        ..ExperimentConfig::default()
    };
    cfg.to_canonical_text()
        .lines()
        .filter(|l| l.starts_with("scm."))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn scm_from_text(text: &str) -> Result<ScmConfig> {
    Ok(ExperimentConfig::parse(text)?.scm)
}
