//! Alternating minimax training: `n_critic` ascent steps on the critic, then
//! one descent step on the predictor, with source-validation model selection.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{macro_auroc, PredictionLog};
use crate::models::{Critic, CriticSpec, EncoderSpec, Predictor, PredictorSpec};
use crate::moments::{
    center_instruments, compute_residuals, gmm_loss, gmm_loss_grad, moment_grad_instruments,
    moment_grad_residuals, moment_matrix, MomentBatch, MomentState,
};
use crate::scm::{DatasetSplit, SplitRole, TaskMode};
use crate::seed::{self, stream};
use crate::tensor::{sigmoid_bce, softmax_ce, AdamW, AdamWConfig, DenseArray, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    FullCiv,
    /// Critic sees a single stratum, so centering is global.
    NoCiv,
    /// Critic sees a seeded within-batch permutation of the site ids.
    RandomZ,
    /// λ forced to 0; the critic still trains.
    Erm,
}

impl Ablation {
    /// Row order of the ablation table.
    pub const ALL: [Ablation; 4] = [
        Ablation::Erm,
        Ablation::NoCiv,
        Ablation::RandomZ,
        Ablation::FullCiv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::FullCiv => "full_civ",
            Ablation::NoCiv => "no_civ",
            Ablation::RandomZ => "random_z",
            Ablation::Erm => "erm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warmup over the first `warmup_frac` of `max_steps`, then cosine decay to 0.
    Cosine {
        warmup_frac: f64,
    },
}

impl Schedule {
    pub fn factor(self, step: usize, max_steps: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine { warmup_frac } => {
                let warm = (warmup_frac * max_steps as f64).ceil() as usize;
                if step <= warm && warm > 0 {
                    step as f64 / warm as f64
                } else {
                    let span = max_steps.saturating_sub(warm).max(1) as f64;
                    let t = (step - warm) as f64 / span;
                    0.5 * (1.0 + (PI * t.min(1.0)).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub lr_predictor: f64,
    pub lr_critic: f64,
    pub weight_decay: f64,
    pub momentum_ema: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub lambda_grid: Vec<f64>,
    pub schedule: Schedule,
    pub critic_batches: CriticBatches,
}

/// Where critic steps get their mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticBatches {
    /// Every critic step reuses the predictor step's batch.
    Shared,
    /// Each critic step draws its own batch from a separate shuffled stream.
    Fresh,
}

impl CriticBatches {
    pub fn as_str(self) -> &'static str {
        match self {
            CriticBatches::Shared => "shared",
            CriticBatches::Fresh => "fresh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(CriticBatches::Shared),
            "fresh" => Ok(CriticBatches::Fresh),
            _ => Err(Error::Config(format!("unknown critic batch mode '{s}'"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            beta: 1.0,
            n_critic: 5,
            batch_size: 128,
            lr_predictor: 1e-3,
            lr_critic: 1e-3,
            weight_decay: 1e-4,
            momentum_ema: 0.9,
            max_steps: 1500,
            eval_every: 50,
            patience: 10,
            seed: 0,
            ablation: Ablation::FullCiv,
            lambda_grid: vec![0.1, 1.0, 10.0],
            schedule: Schedule::Cosine { warmup_frac: 0.05 },
            critic_batches: CriticBatches::Fresh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be ≥ 0", self.lambda)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be ≥ 0", self.beta)));
        }
        if self.n_critic == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "n_critic, patience and batch_size must be ≥ 1".into(),
            ));
        }
        if self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("max_steps and eval_every must be ≥ 1".into()));
        }
        if !pos(self.lr_predictor) || !pos(self.lr_critic) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_ema) {
            return Err(Error::Config("momentum_ema must lie in [0, 1)".into()));
        }
        if let Schedule::Cosine { warmup_frac } = self.schedule {
            if !(0.0..1.0).contains(&warmup_frac) {
                return Err(Error::Config("warmup fraction must lie in [0, 1)".into()));
            }
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config("lambda grid values must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        match self.ablation {
            Ablation::Erm => 0.0,
            _ => self.lambda,
        }
    }
}

/// Architecture knobs; data-dependent sizes come from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub use_demographics: bool,
    pub predictor_d_embed_dim: usize,
    pub encoder: EncoderSpec,
    pub critic_z_embed_dim: usize,
    pub critic_d_embed_dim: usize,
    pub critic_hidden_dim: usize,
    pub critic_layers: usize,
    pub critic_output_dim: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PredictorSpec::default();
        let c = CriticSpec::default();
        Self {
            hidden_dims: p.hidden_dims,
            use_demographics: p.use_demographics,
            predictor_d_embed_dim: p.d_embed_dim,
            encoder: p.encoder,
            critic_z_embed_dim: c.z_embed_dim,
            critic_d_embed_dim: c.d_embed_dim,
            critic_hidden_dim: c.hidden_dim,
            critic_layers: c.n_layers,
            critic_output_dim: c.output_dim,
            leaky_slope: p.leaky_slope,
        }
    }
}

/// Sizes read off a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub n_sites: usize,
    pub n_strata: usize,
    pub task_mode: TaskMode,
}

impl DataDims {
    pub fn of(split: &DatasetSplit) -> Self {
        Self {
            feature_dim: split.feature_dim(),
            n_classes: split.n_classes(),
            n_sites: split.provenance.n_sites,
            n_strata: split.provenance.n_strata,
            task_mode: split.provenance.task_mode,
        }
    }
}

impl ModelConfig {
    pub fn specs(&self, dims: DataDims, ablation: Ablation) -> (PredictorSpec, CriticSpec) {
        let predictor = PredictorSpec {
            feature_dim: dims.feature_dim,
            hidden_dims: self.hidden_dims.clone(),
            n_classes: dims.n_classes,
            use_demographics: self.use_demographics,
            n_strata: dims.n_strata,
            d_embed_dim: self.predictor_d_embed_dim,
            task_mode: dims.task_mode,
            leaky_slope: self.leaky_slope,
            encoder: self.encoder,
        };
        let critic = CriticSpec {
            n_sites: dims.n_sites,
            n_strata: if ablation == Ablation::NoCiv {
                1
            } else {
                dims.n_strata
            },
            z_embed_dim: self.critic_z_embed_dim,
            d_embed_dim: self.critic_d_embed_dim,
            hidden_dim: self.critic_hidden_dim,
            n_layers: self.critic_layers,
            output_dim: self.critic_output_dim,
            leaky_slope: self.leaky_slope,
        };
        (predictor, critic)
    }
}

/// A mini-batch built from the observable columns only: features, label,
/// site and stratum. Latent simulator values are never read.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DenseArray,
    pub y: DenseArray,
    pub z: Vec<usize>,
    pub d: Vec<usize>,
    /// Site and stratum ids as presented to the critic after the ablation view.
    pub critic_z: Vec<usize>,
    pub critic_d: Vec<usize>,
}

impl Batch {
    pub fn new(x: DenseArray, y: DenseArray, z: Vec<usize>, d: Vec<usize>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if y.rows() != x.rows() || z.len() != x.rows() || d.len() != x.rows() {
            return Err(Error::dim("batch columns differ in length"));
        }
        Ok(Self {
            x,
            y,
            critic_z: z.clone(),
            critic_d: d.clone(),
            z,
            d,
        })
    }

    pub fn from_split(split: &DatasetSplit, idx: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        let mut z = Vec::with_capacity(idx.len());
        let mut d = Vec::with_capacity(idx.len());
        for &i in idx {
            let r = split
                .records
                .get(i)
                .ok_or_else(|| Error::invalid(format!("record index {i} out of range")))?;
            x.push(r.x.clone());
            y.push(r.y.clone());
            z.push(r.z);
            d.push(r.d);
        }
        Self::new(DenseArray::from_rows(&x)?, DenseArray::from_rows(&y)?, z, d)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub predictor: Predictor,
    pub predictor_params: ParameterStore,
    pub critic: Option<Critic>,
    pub critic_params: ParameterStore,
    pub moments: Option<MomentState>,
    pub step: usize,
    pub val_metric: f64,
}

impl Checkpoint {
    /// Class probabilities for a split, evaluated in chunks.
    pub fn predict(&self, split: &DatasetSplit) -> Result<PredictionLog> {
        predict_split(&self.predictor, &self.predictor_params, split)
    }

    /// Adapter outputs (the predictor's last hidden layer) per record.
    pub fn representations(&self, split: &DatasetSplit) -> Result<DenseArray> {
        let mut rows = Vec::with_capacity(split.len());
        for chunk in (0..split.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
            let b = Batch::from_split(split, chunk)?;
            let tape = self.predictor.forward(&self.predictor_params, &b.x, &b.d)?;
            rows.extend(tape.representation().to_rows());
        }
        DenseArray::from_rows(&rows)
    }
}

const EVAL_CHUNK: usize = 1024;

pub fn predict_split(
    predictor: &Predictor,
    params: &ParameterStore,
    split: &DatasetSplit,
) -> Result<PredictionLog> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let mut scores = Vec::with_capacity(split.len());
    for chunk in (0..split.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let b = Batch::from_split(split, chunk)?;
        let tape = predictor.forward(params, &b.x, &b.d)?;
        scores.extend(tape.probs.to_rows());
    }
    // Softmax rows can drift from 1 by an ulp or two; renormalize so the log
    // validator sees exact probability vectors.
    if predictor.spec.task_mode == TaskMode::SingleLabel {
        for s in &mut scores {
            let t: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= t);
        }
    }
    PredictionLog::new(
        scores,
        split.records.iter().map(|r| r.y.clone()).collect(),
        split.records.iter().map(|r| r.z).collect(),
        split.records.iter().map(|r| r.d).collect(),
        predictor.spec.task_mode,
    )
}

/// Accuracy for single-label tasks, macro-AUROC for multi-label tasks.
pub fn validation_metric(log: &PredictionLog) -> f64 {
    match log.task_mode {
        TaskMode::SingleLabel => {
            (0..log.len()).map(|i| log.correctness(i)).sum::<f64>() / log.len() as f64
        }
        TaskMode::MultiLabel => macro_auroc(log).map_or(f64::NAN, |a| a.macro_auroc),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub l_task: f64,
    /// `‖m̂‖²` seen by the predictor step.
    pub l_gmm: f64,
    pub l_theta: f64,
    pub moment_norm: f64,
    /// `‖m̂‖²` at the last critic step of the iteration.
    pub critic_gmm: f64,
    pub val_metric: Option<f64>,
    pub mu_norms: Vec<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    /// Records with wall-clock zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Vec<HistoryRecord> {
        self.records
            .iter()
            .map(|r| HistoryRecord {
                wall_secs: 0.0,
                ..r.clone()
            })
            .collect()
    }

    /// Deterministic columns only; wall-clock time lives in [`Self::timing_tsv`].
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "step\tl_task\tl_gmm\tl_theta\tmoment_norm\tcritic_gmm\tval_metric\tmu_norms\n",
        );
        for r in &self.records {
            let mu: Vec<String> = r.mu_norms.iter().map(|v| format!("{v:.12e}")).collect();
            out.push_str(&format!(
                "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{}\t{}\n",
                r.step,
                r.l_task,
                r.l_gmm,
                r.l_theta,
                r.moment_norm,
                r.critic_gmm,
                r.val_metric.map_or("-".into(), |v| format!("{v:.12}")),
                mu.join(","),
            ));
        }
        out
    }

    pub fn timing_tsv(&self) -> String {
        let mut out = String::from("step\twall_secs\n");
        for r in &self.records {
            out.push_str(&format!("{}\t{:.6}\n", r.step, r.wall_secs));
        }
        out
    }
}

/// Counts of parameter-changing optimizer updates.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateCounters {
    pub critic_updates: u64,
    pub predictor_updates: u64,
    /// Critic updates since the previous predictor update, logged at each predictor update.
    pub critic_updates_between: Vec<u64>,
    critic_since_last: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_task: f64,
    pub l_gmm: f64,
    pub l_theta: f64,
    pub moment_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: Checkpoint,
    pub history: TrainHistory,
    pub counters: UpdateCounters,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Epoch-wise seeded shuffling; the last batch of an epoch may be short.
#[derive(Debug, Clone)]
struct DataOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl DataOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: seed::rng(seed),
            perm: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, batch_size: usize) -> Vec<usize> {
        if self.pos >= self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + batch_size).min(self.perm.len());
        let out = self.perm[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

#[derive(Debug, Clone)]
struct CriticState {
    critic: Critic,
    params: ParameterStore,
    opt: AdamW,
    moments: MomentState,
}

/// Owns all mutable training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub predictor: Predictor,
    pub predictor_params: ParameterStore,
    predictor_opt: AdamW,
    critic: Option<CriticState>,
    random_z_rng: ChaCha8Rng,
    pub counters: UpdateCounters,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, dims: DataDims) -> Result<Self> {
        Self::build(model, cfg, dims, true)
    }

    /// A trainer with no critic at all: plain ERM on the task loss.
    pub fn without_critic(model: &ModelConfig, cfg: &TrainConfig, dims: DataDims) -> Result<Self> {
        Self::build(model, cfg, dims, false)
    }

    fn build(
        model: &ModelConfig,
        cfg: &TrainConfig,
        dims: DataDims,
        with_critic: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let (pspec, cspec) = model.specs(dims, cfg.ablation);
        let (predictor, predictor_params) =
            Predictor::init(pspec, seed::mix(cfg.seed, &[stream::PREDICTOR_INIT]))?;
        let predictor_opt = AdamW::new(AdamWConfig {
            lr: cfg.lr_predictor,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let critic = if with_critic {
            let (critic, params) =
                Critic::init(cspec.clone(), seed::mix(cfg.seed, &[stream::CRITIC_INIT]))?;
            // Ascent on L_GMM − β·Ω realized as decoupled decay of strength β·wd.
            let opt = AdamW::new(AdamWConfig {
                lr: cfg.lr_critic,
                weight_decay: cfg.beta * cfg.weight_decay,
                ..AdamWConfig::default()
            });
            let moments = MomentState::new(cspec.n_strata, cspec.output_dim, cfg.momentum_ema)?;
            Some(CriticState {
                critic,
                params,
                opt,
                moments,
            })
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            predictor,
            predictor_params,
            predictor_opt,
            critic,
            random_z_rng: seed::rng(seed::mix(cfg.seed, &[stream::RANDOM_Z])),
            counters: UpdateCounters::default(),
            step: 0,
        })
    }

    pub fn critic_params(&self) -> Option<&ParameterStore> {
        self.critic.as_ref().map(|c| &c.params)
    }

    pub fn moment_state(&self) -> Option<&MomentState> {
        self.critic.as_ref().map(|c| &c.moments)
    }

    pub fn critic(&self) -> Option<&Critic> {
        self.critic.as_ref().map(|c| &c.critic)
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Apply the ablation's view of (z, d) for the critic.
    pub fn prepare(&mut self, batch: &mut Batch) {
        batch.critic_z = batch.z.clone();
        batch.critic_d = batch.d.clone();
        match self.cfg.ablation {
            Ablation::NoCiv => batch.critic_d = vec![0; batch.len()],
            Ablation::RandomZ => batch.critic_z.shuffle(&mut self.random_z_rng),
            Ablation::FullCiv | Ablation::Erm => {}
        }
    }

    fn set_learning_rates(&mut self, step: usize) {
        let f = self.cfg.schedule.factor(step, self.cfg.max_steps);
        self.predictor_opt.set_lr(self.cfg.lr_predictor * f);
        if let Some(c) = &mut self.critic {
            c.opt.set_lr(self.cfg.lr_critic * f);
        }
    }

    fn snapshot(&self) -> String {
        let mut s = format!(
            "predictor |θ|²={:.6e}",
            self.predictor_params.squared_norm()
        );
        if let Some(c) = &self.critic {
            s.push_str(&format!(
                ", critic |ω|²={:.6e}, μ norms={:?}",
                c.params.squared_norm(),
                c.moments.norms()
            ));
        }
        s
    }

    fn abort(&self, what: &str) -> Error {
        Error::NumericalAbort {
            step: self.step,
            what: format!("{what} [{}]", self.snapshot()),
        }
    }

    /// One ascent step on the critic. Updates the running means and the
    /// spectral state; the predictor is only read.
    pub fn critic_step(&mut self, batch: &Batch) -> Result<f64> {
        let before = cfg!(debug_assertions).then(|| self.predictor_params.clone());
        let ptape = self
            .predictor
            .forward(&self.predictor_params, &batch.x, &batch.d)?;
        let Some(state) = self.critic.as_mut() else {
            return Err(Error::State(
                "critic step on a trainer without critic".into(),
            ));
        };
        let ctape = state
            .critic
            .forward(&state.params, &batch.critic_z, &batch.critic_d)?;
        state
            .critic
            .commit_spectral_state(&mut state.params, &ctape)?;
        let mb = MomentBatch::compute(
            &batch.y,
            &ptape.probs,
            &ctape.output,
            &batch.critic_d,
            &mut state.moments,
            true,
        )?;
        let loss = mb.loss();
        if !loss.is_finite() {
            return Err(self.abort("non-finite L_GMM in critic step"));
        }
        // μ enters as a constant, so ∂L/∂c = ∂L/∂c̃.
        let grad_c = moment_grad_instruments(&mb.residuals, &gmm_loss_grad(&mb.moment))?;
        state.critic.backward(&mut state.params, &ctape, &grad_c)?;
        state.params.mark_all_grads_ready();
        state.opt.step(&mut state.params, true)?;
        if !state.params.iter().all(|(_, p)| p.value.all_finite()) {
            return Err(self.abort("non-finite critic parameters"));
        }
        self.counters.critic_updates += 1;
        self.counters.critic_since_last += 1;
        if let Some(b) = before {
            debug_assert!(
                same_values(&b, &self.predictor_params),
                "critic step changed predictor"
            );
        }
        Ok(loss)
    }

    /// One descent step on `L_task + λ·L_GMM`. The critic output and running
    /// means are constants; gradient flows to θ only through the residuals.
    pub fn predictor_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        let before = cfg!(debug_assertions)
            .then(|| {
                self.critic
                    .as_ref()
                    .map(|c| (c.params.clone(), c.moments.clone()))
            })
            .flatten();
        let lambda = self.cfg.effective_lambda();
        let c_tilde = match &self.critic {
            Some(state) => {
                let ctape =
                    state
                        .critic
                        .forward(&state.params, &batch.critic_z, &batch.critic_d)?;
                let mut frozen = state.moments.clone();
                Some(
                    center_instruments(&ctape.output, &batch.critic_d, &mut frozen, false)?
                        .centered,
                )
            }
            None => None,
        };
        let losses = predictor_objective(
            &self.predictor,
            &mut self.predictor_params,
            batch,
            c_tilde.as_ref(),
            lambda,
        )?;
        if !losses.l_theta.is_finite() || !losses.l_gmm.is_finite() {
            return Err(self.abort("non-finite L_θ in predictor step"));
        }
        let StepLosses {
            l_task,
            l_gmm,
            l_theta,
            moment_norm,
        } = losses;
        self.predictor_params.mark_all_grads_ready();
        self.predictor_opt.step(&mut self.predictor_params, false)?;
        if !self
            .predictor_params
            .iter()
            .all(|(_, p)| p.value.all_finite())
        {
            return Err(self.abort("non-finite predictor parameters"));
        }
        self.counters.predictor_updates += 1;
        self.counters
            .critic_updates_between
            .push(self.counters.critic_since_last);
        self.counters.critic_since_last = 0;
        if let (Some((p, m)), Some(state)) = (before, &self.critic) {
            debug_assert!(
                same_values(&p, &state.params),
                "predictor step changed critic"
            );
            debug_assert!(m == state.moments, "predictor step changed running means");
        }
        Ok(StepLosses {
            l_task,
            l_gmm,
            l_theta,
            moment_norm,
        })
    }

    /// One training iteration: `n_critic` critic steps then one predictor
    /// step. Critic steps use `critic_batches` in turn when given, otherwise
    /// they reuse the predictor batch.
    pub fn iteration(
        &mut self,
        batch: &mut Batch,
        critic_batches: &mut [Batch],
    ) -> Result<(StepLosses, f64)> {
        self.step += 1;
        self.set_learning_rates(self.step);
        self.prepare(batch);
        let mut critic_gmm = f64::NAN;
        if self.critic.is_some() {
            for k in 0..self.cfg.n_critic {
                critic_gmm = if critic_batches.is_empty() {
                    self.critic_step(batch)?
                } else {
                    let cb = &mut critic_batches[k % critic_batches.len()];
                    self.prepare(cb);
                    self.critic_step(cb)?
                };
            }
        }
        let losses = self.predictor_step(batch)?;
        Ok((losses, critic_gmm))
    }

    /// Snapshot with gradients cleared, so equal weights give equal checkpoints.
    pub fn checkpoint(&self, val_metric: f64) -> Checkpoint {
        let mut predictor_params = self.predictor_params.clone();
        predictor_params.zero_grad();
        let mut critic_params = self
            .critic
            .as_ref()
            .map(|c| c.params.clone())
            .unwrap_or_default();
        critic_params.zero_grad();
        Checkpoint {
            predictor: self.predictor.clone(),
            predictor_params,
            critic: self.critic.as_ref().map(|c| c.critic.clone()),
            critic_params,
            moments: self.critic.as_ref().map(|c| c.moments.clone()),
            step: self.step,
            val_metric,
        }
    }

    /// Train to `max_steps` or until `patience` evaluations pass without a
    /// strict improvement of the validation metric.
    pub fn run(&mut self, train: &DatasetSplit, source_val: &DatasetSplit) -> Result<FitResult> {
        check_roles(train, source_val)?;
        let start = Instant::now();
        let mut order =
            DataOrder::new(train.len(), seed::mix(self.cfg.seed, &[stream::DATA_ORDER]));
        // A separate stream keeps the predictor's batch sequence independent of the critic.
        let mut critic_order = (self.cfg.critic_batches == CriticBatches::Fresh).then(|| {
            DataOrder::new(
                train.len(),
                seed::mix(self.cfg.seed, &[stream::DATA_ORDER, stream::CRITIC_INIT]),
            )
        });
        let mut history = TrainHistory::default();
        let mut best: Option<Checkpoint> = None;
        let mut since_best = 0;
        let mut stopped_early = false;
        while self.step < self.cfg.max_steps {
            let idx = order.next(self.cfg.batch_size);
            let mut batch = Batch::from_split(train, &idx)?;
            let mut critic_batches = Vec::new();
            if let (Some(o), true) = (critic_order.as_mut(), self.critic.is_some()) {
                for _ in 0..self.cfg.n_critic {
                    critic_batches.push(Batch::from_split(train, &o.next(self.cfg.batch_size))?);
                }
            }
            let (losses, critic_gmm) = self.iteration(&mut batch, &mut critic_batches)?;
            let step = self.step;
            let val_metric = if step % self.cfg.eval_every == 0 || step == self.cfg.max_steps {
                let log = predict_split(&self.predictor, &self.predictor_params, source_val)?;
                Some(validation_metric(&log))
            } else {
                None
            };
            history.records.push(HistoryRecord {
                step,
                l_task: losses.l_task,
                l_gmm: losses.l_gmm,
                l_theta: losses.l_theta,
                moment_norm: losses.moment_norm,
                critic_gmm,
                val_metric,
                mu_norms: self.moment_state().map(|m| m.norms()).unwrap_or_default(),
                wall_secs: start.elapsed().as_secs_f64(),
            });
            if let Some(v) = val_metric {
                let improved = best.as_ref().map_or(true, |b| {
                    v > b.val_metric || b.val_metric.is_nan() && !v.is_nan()
                });
                if improved {
                    best = Some(self.checkpoint(v));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= self.cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        Ok(FitResult {
            best: best.expect("at least one evaluation runs"),
            history,
            counters: self.counters.clone(),
            steps_run: self.step,
            stopped_early,
        })
    }
}

/// `L_θ = L_task + λ·‖m̂‖²` for a batch, accumulating `∂L_θ/∂θ` into `params`.
/// `c_tilde` holds the centered critic output, treated as a constant; without
/// it only the task loss is used.
pub fn predictor_objective(
    predictor: &Predictor,
    params: &mut ParameterStore,
    batch: &Batch,
    c_tilde: Option<&DenseArray>,
    lambda: f64,
) -> Result<StepLosses> {
    let tape = predictor.forward(params, &batch.x, &batch.d)?;
    let b = batch.len() as f64;
    let (l_task, mut grad_logits) = match predictor.spec.task_mode {
        TaskMode::SingleLabel => {
            let (l, p) = softmax_ce(&tape.logits, &batch.y)?;
            (l, p.sub(&batch.y)?.scale(1.0 / b))
        }
        TaskMode::MultiLabel => {
            let (l, p) = sigmoid_bce(&tape.logits, &batch.y)?;
            let n = p.len() as f64;
            (l, p.sub(&batch.y)?.scale(1.0 / n))
        }
    };
    let (l_gmm, moment_norm) = match c_tilde {
        Some(c_tilde) => {
            let e = compute_residuals(&batch.y, &tape.probs)?;
            let m_hat = moment_matrix(&e, c_tilde)?;
            // λ = 0 skips the term entirely so the update matches plain ERM bitwise.
            if lambda > 0.0 {
                let g = gmm_loss_grad(&m_hat);
                // e = y − p, so ∂L/∂p = −∂L/∂e.
                let grad_p = moment_grad_residuals(c_tilde, &g)?.scale(-1.0);
                let grad_s = probs_backward(&tape.probs, &grad_p, predictor.spec.task_mode);
                grad_logits.add_assign(&grad_s.scale(lambda))?;
            }
            (gmm_loss(&m_hat), m_hat.frobenius_sq().sqrt())
        }
        None => (0.0, 0.0),
    };
    predictor.backward(params, &tape, &grad_logits)?;
    Ok(StepLosses {
        l_task,
        l_gmm,
        l_theta: l_task + lambda * l_gmm,
        moment_norm,
    })
}

/// `∂L/∂s` from `∂L/∂p` through softmax rows or elementwise sigmoid.
pub fn probs_backward(probs: &DenseArray, grad_p: &DenseArray, mode: TaskMode) -> DenseArray {
    let mut out = grad_p.clone();
    match mode {
        TaskMode::SingleLabel => {
            for i in 0..probs.rows() {
                let (p, g) = (probs.row(i), grad_p.row(i));
                let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                    *o = p[k] * (g[k] - inner);
                }
            }
        }
        TaskMode::MultiLabel => {
            for (o, &p) in out.data_mut().iter_mut().zip(probs.data()) {
                *o *= p * (1.0 - p);
            }
        }
    }
    out
}

pub fn same_values(a: &ParameterStore, b: &ParameterStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, pa), (nb, pb))| {
            na == nb
                && pa.value.shape() == pb.value.shape()
                && pa
                    .value
                    .data()
                    .iter()
                    .zip(pb.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

static HYGIENE_VIOLATIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of split-role contract violations detected in this process.
pub fn hygiene_violations() -> usize {
    HYGIENE_VIOLATIONS.load(Ordering::SeqCst)
}

fn hygiene_error(msg: String) -> Error {
    HYGIENE_VIOLATIONS.fetch_add(1, Ordering::SeqCst);
    Error::Contract(msg)
}

fn check_roles(train: &DatasetSplit, source_val: &DatasetSplit) -> Result<()> {
    if train.role != SplitRole::Train {
        return Err(hygiene_error(format!(
            "training split has role '{}', expected 'train'",
            train.role.as_str()
        )));
    }
    if source_val.role != SplitRole::SourceVal {
        return Err(hygiene_error(format!(
            "validation split has role '{}'; model selection uses source validation only",
            source_val.role.as_str()
        )));
    }
    if train.is_empty() || source_val.is_empty() {
        return Err(Error::invalid(
            "training and validation splits must be nonempty",
        ));
    }
    Ok(())
}

pub fn fit(
    train: &DatasetSplit,
    source_val: &DatasetSplit,
    cfg: &TrainConfig,
    model: &ModelConfig,
) -> Result<FitResult> {
    check_roles(train, source_val)?;
    Trainer::new(model, cfg, DataDims::of(train))?.run(train, source_val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub val_metric: f64,
    pub ood_metric: f64,
    pub ood_wg_accuracy: f64,
    pub selected: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn selected(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.selected)
    }

    pub fn best_ood(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.error.is_none())
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if b.ood_metric >= r.ood_metric => Some(b),
                _ => Some(r),
            })
    }
}

/// Seed for grid point `index` of a sweep.
pub fn sweep_seed(master: u64, index: usize) -> u64 {
    seed::mix(master, &[index as u64])
}

/// One fit per grid value; the selected row maximizes the source-validation
/// metric. The ood split is only evaluated after selection-relevant training.
pub fn lambda_sweep(
    train: &DatasetSplit,
    source_val: &DatasetSplit,
    ood_test: &DatasetSplit,
    cfg: &TrainConfig,
    model: &ModelConfig,
    workers: usize,
) -> Result<SweepTable> {
    if cfg.lambda_grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if ood_test.role != SplitRole::OodTest {
        return Err(hygiene_error(format!(
            "sweep report split has role '{}'",
            ood_test.role.as_str()
        )));
    }
    let jobs: Vec<(usize, f64)> = cfg.lambda_grid.iter().copied().enumerate().collect();
    let mut rows = crate::parallel::map(jobs, workers, |(i, lambda)| {
        let run_cfg = TrainConfig {
            lambda,
            seed: sweep_seed(cfg.seed, i),
            ablation: if lambda == 0.0 {
                Ablation::Erm
            } else {
                cfg.ablation
            },
            ..cfg.clone()
        };
        let outcome = fit(train, source_val, &run_cfg, model).and_then(|r| {
            let ood = r.best.predict(ood_test)?;
            let wg = crate::metrics::accuracy_and_wg(&ood, crate::metrics::Grouping::BySiteLabel)?
                .wg_accuracy;
            Ok((r.best.val_metric, validation_metric(&ood), wg))
        });
        match outcome {
            Ok((v, o, wg)) => SweepRow {
                lambda,
                seed: run_cfg.seed,
                val_metric: v,
                ood_metric: o,
                ood_wg_accuracy: wg,
                selected: false,
                error: None,
            },
            Err(e) => SweepRow {
                lambda,
                seed: run_cfg.seed,
                val_metric: f64::NAN,
                ood_metric: f64::NAN,
                ood_wg_accuracy: f64::NAN,
                selected: false,
                error: Some(e.to_string()),
            },
        }
    });
    select_by_validation(&mut rows);
    Ok(SweepTable { rows })
}

/// Flag the row with the highest validation metric; ties keep the first.
pub fn select_by_validation(rows: &mut [SweepRow]) {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.error.is_some() || r.val_metric.is_nan() {
            continue;
        }
        if best.map_or(true, |b| r.val_metric > rows[b].val_metric) {
            best = Some(i);
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r.selected = Some(i) == best;
    }
}
