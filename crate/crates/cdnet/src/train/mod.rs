//! The two-stage training procedure.
//!
//! Stage one pre-trains in the batch manner: every iteration samples one
//! batch from a randomly selected source domain and minimizes expression plus
//! weighted domain cross-entropy. Stage two fine-tunes episodically: the
//! model walks `episodes * tasks_per_episode` N-way K-shot tasks, minimizing
//! the prototype loss plus domain loss plus the configured regularization
//! against the frozen pre-trained teacher, one optimizer step per task (or
//! per episode, configurable).

mod adam;
mod history;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use history::{History, HistoryEvent, LossRecord, ValRecord};

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, sample_episode, ClassPool, DomainBatch, Episode, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig, Metric, StackNodes, Variant};
use crate::numerics::{Real, Tape, Tensor};
use crate::objectives::{
    finetune_loss, mean_bundle, pretrain_loss, EpisodeForward, LossValues, LossWeights, RegMode,
};
use crate::params::{ParamGrads, ParamId};
use crate::seeds;

/// When the optimizer steps during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepGranularity {
    /// One Adam step per few-shot task (default).
    Task,
    /// Gradients averaged over an episode's tasks, one step per episode.
    Episode,
}

/// Training configuration; defaults are the published hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_iters: usize,
    pub batch_size: usize,
    pub finetune_episodes: usize,
    pub tasks_per_episode: usize,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub reg_mode: RegMode,
    pub weights: LossWeights,
    pub metric: Metric,
    pub adam: AdamConfig,
    pub clip_norm: Option<Real>,
    pub freeze_encoder: bool,
    pub step_granularity: StepGranularity,
    /// Log validation accuracy every this many episodes; 0 disables.
    pub val_check_every: usize,
    pub val_tasks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_iters: 10_000,
            batch_size: 16,
            finetune_episodes: 100,
            tasks_per_episode: 100,
            n: 5,
            k: 5,
            q: 16,
            reg_mode: RegMode::Partial,
            weights: LossWeights::default(),
            metric: Metric::default(),
            adam: AdamConfig::default(),
            clip_norm: None,
            freeze_encoder: false,
            step_granularity: StepGranularity::Task,
            val_check_every: 0,
            val_tasks: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_iters == 0
            || self.batch_size == 0
            || self.finetune_episodes == 0
            || self.tasks_per_episode == 0
            || self.n == 0
            || self.k == 0
            || self.q == 0
        {
            return Err(Error::Config("all training counts must be >= 1".into()));
        }
        self.adam.validate()?;
        self.weights.validate()?;
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive when set".into()));
            }
        }
        Ok(())
    }
}

fn into_diverged(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { context } => {
            Error::Diverged { step, what: format!("non-finite values in {context}") }
        }
        other => other,
    }
}

fn raw_tensor(ds: &SyntheticDataset, idx: usize) -> Result<Tensor> {
    Tensor::vector(ds.sample(idx).raw.clone())
}

/// Forward one pre-training batch and return loss values plus gradients.
fn pretrain_batch_grads(
    model: &Model,
    ds: &SyntheticDataset,
    batch: &DomainBatch,
    cfg: &TrainConfig,
) -> Result<(LossValues, ParamGrads)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let mut bundles = Vec::with_capacity(batch.samples.len());
    for &idx in &batch.samples {
        let raw = raw_tensor(ds, idx)?;
        let fwd = model.forward_sample(&mut tape, &binding, &raw)?;
        let expr = model.expr_logits(&mut tape, &binding, fwd.trace.r_e)?;
        let domain = model.domain_logits(&mut tape, &binding, fwd.trace.r_d)?;
        let sample = ds.sample(idx);
        bundles.push(pretrain_loss(&mut tape, expr, domain, sample.y_e, sample.y_d, &cfg.weights)?);
    }
    let bundle = mean_bundle(&mut tape, &bundles, cfg.weights.lambda_d_p, 0.0)?;
    let values = bundle.values(&tape);
    tape.backward(bundle.total)?;
    let grads = binding.extract_grads(&tape)?;
    Ok((values, grads))
}

/// Batch pre-training (stage one). On divergence the error carries the step;
/// the model is left at its last finite state so callers can checkpoint it.
pub fn pretrain(
    model: &mut Model,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<History> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&model.store, cfg.adam);
    let frozen = HashSet::new();
    let mut history = History::new();
    for it in 1..=cfg.pretrain_iters {
        let step = it as u64;
        let batch = sample_batch(ds, cfg.batch_size, &mut rng)?;
        let (values, mut grads) =
            pretrain_batch_grads(model, ds, &batch, cfg).map_err(|e| into_diverged(e, step))?;
        history.push_loss(step, "pretrain", &values);
        if let Some(max) = cfg.clip_norm {
            clip_grad_norm(&mut grads, max, &frozen);
        }
        adam.step(&mut model.store, &grads, &frozen)?;
    }
    Ok(history)
}

/// Build the full fine-tuning loss graph for one episode on `tape`, reading
/// student parameters from `store` (usually `model.store`, but the gradient
/// checker passes perturbed copies with the same layout).
pub fn build_finetune_graph(
    model: &Model,
    store: &crate::params::ParamStore,
    teacher: Option<&Model>,
    ds: &SyntheticDataset,
    episode: &Episode,
    cfg: &TrainConfig,
    tape: &mut Tape,
) -> Result<(crate::objectives::LossBundle, crate::params::ParamBinding)> {
    let binding = crate::params::ParamBinding::bind_all(store, tape);
    let student_stack = StackNodes::bind(&binding, &model.stack);
    let teacher_stack = match teacher {
        Some(t) if matches!(cfg.reg_mode, RegMode::Partial | RegMode::Full) => {
            // Teacher leaves live on the same tape but are never mapped back
            // to trainable parameters, so the teacher stays frozen.
            let tb = t.bind(tape);
            Some(StackNodes::bind(&tb, &t.stack))
        }
        _ => None,
    };

    let forward_class = |tape: &mut Tape, indices: &[usize]| -> Result<Vec<_>> {
        indices
            .iter()
            .map(|&idx| {
                let raw = raw_tensor(ds, idx)?;
                model.forward_sample(tape, &binding, &raw)
            })
            .collect()
    };
    let mut support = Vec::with_capacity(episode.n);
    for class in &episode.support {
        support.push(forward_class(tape, class)?);
    }
    let mut query = Vec::with_capacity(episode.n);
    for class in &episode.query {
        query.push(forward_class(tape, class)?);
    }
    let ep_fwd = EpisodeForward { support, query };

    let bundle = finetune_loss(
        tape,
        &ep_fwd,
        episode.domain_id,
        |tape, r_d| model.domain_logits(tape, &binding, r_d),
        cfg.reg_mode,
        teacher_stack.as_ref(),
        &student_stack,
        &cfg.weights,
        cfg.metric,
    )?;
    Ok((bundle, binding))
}

/// Forward one fine-tuning task and return loss values plus gradients.
fn finetune_task_grads(
    model: &Model,
    teacher: Option<&Model>,
    ds: &SyntheticDataset,
    episode: &Episode,
    cfg: &TrainConfig,
) -> Result<(LossValues, ParamGrads)> {
    let mut tape = Tape::new();
    let (bundle, binding) =
        build_finetune_graph(model, &model.store, teacher, ds, episode, cfg, &mut tape)?;
    let values = bundle.values(&tape);
    tape.backward(bundle.total)?;
    let grads = binding.extract_grads(&tape)?;
    Ok((values, grads))
}

/// Episodic fine-tuning (stage two).
///
/// `teacher` is the frozen pre-trained model; it is required for partial and
/// full regularization and must be architecture-compatible. The expression
/// head is detached for the whole stage (classification is centroid-based);
/// in fix mode the decomposition block is excluded from updates as well.
pub fn finetune(
    model: &mut Model,
    teacher: Option<&Model>,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<History> {
    cfg.validate()?;
    match cfg.reg_mode {
        RegMode::Partial | RegMode::Full => {
            let t = teacher.ok_or_else(|| {
                Error::Config("partial/full regularization requires a pre-trained teacher".into())
            })?;
            if !t.compatible_with(model) {
                return Err(Error::CheckpointMismatch(format!(
                    "teacher config {:?} does not match student config {:?}",
                    t.config, model.config
                )));
            }
            if matches!(model.stack, crate::model::DecompositionStack::None) {
                return Err(Error::Config(
                    "regularization requires a decomposition stack; the baseline has none".into(),
                ));
            }
        }
        RegMode::Fix => {
            if model.decomposition_param_ids().is_empty() {
                return Err(Error::Config("fix mode requires a decomposition block".into()));
            }
        }
        RegMode::None => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&model.store, cfg.adam);
    let mut frozen: HashSet<ParamId> = model.expr_head_param_ids().into_iter().collect();
    if cfg.reg_mode == RegMode::Fix {
        frozen.extend(model.decomposition_param_ids());
    }
    if cfg.freeze_encoder {
        frozen.extend(model.encoder_param_ids());
    }

    let mut history = History::new();
    let mut step: u64 = 0;
    for ep in 0..cfg.finetune_episodes {
        let mut episode_grads = match cfg.step_granularity {
            StepGranularity::Episode => Some(ParamGrads::zeros_like(&model.store)),
            StepGranularity::Task => None,
        };
        for _ in 0..cfg.tasks_per_episode {
            step += 1;
            let episode = sample_episode(ds, cfg.n, cfg.k, cfg.q, ClassPool::Base, &mut rng)?;
            let (values, mut grads) = finetune_task_grads(model, teacher, ds, &episode, cfg)
                .map_err(|e| into_diverged(e, step))?;
            history.push_loss(step, "finetune", &values);
            match &mut episode_grads {
                Some(acc) => acc.accumulate(&grads)?,
                None => {
                    if let Some(max) = cfg.clip_norm {
                        clip_grad_norm(&mut grads, max, &frozen);
                    }
                    adam.step(&mut model.store, &grads, &frozen)?;
                }
            }
        }
        if let Some(mut acc) = episode_grads {
            acc.scale(1.0 / cfg.tasks_per_episode as Real);
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut acc, max, &frozen);
            }
            adam.step(&mut model.store, &acc, &frozen)?;
        }
        if cfg.val_check_every > 0 && (ep + 1) % cfg.val_check_every == 0 {
            // Validation uses its own derived stream so turning it on or off
            // cannot change the training trajectory.
            let val_seed = seeds::splitmix64(
                seeds::derive(seed, seeds::stream::VALIDATION) ^ (ep as u64 + 1),
            );
            let acc = validation_accuracy(model, ds, cfg, val_seed)?;
            history.push_validation(ep + 1, acc);
        }
    }
    Ok(history)
}

fn validation_accuracy(
    model: &Model,
    ds: &SyntheticDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..cfg.val_tasks.max(1) {
        let episode = sample_episode(ds, cfg.n, cfg.k, cfg.q, ClassPool::Base, &mut rng)?;
        total += crate::eval::episode_accuracy(model, ds, &episode, cfg.metric)?;
    }
    Ok(total / cfg.val_tasks.max(1) as Real)
}

/// The seven rows of the ablation: the prototype-network baseline plus six
/// decomposition variants, each a fixed (module, mechanism, regularization)
/// combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Baseline,
    Single,
    Parallel,
    Decompose,
    CdnetFull,
    CdnetFix,
    Cdnet,
}

impl AblationVariant {
    /// All variants in canonical table order.
    pub fn all() -> [AblationVariant; 7] {
        use AblationVariant::*;
        [Baseline, Single, Parallel, Decompose, CdnetFull, CdnetFix, Cdnet]
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Baseline => "Baseline",
            AblationVariant::Single => "Single",
            AblationVariant::Parallel => "Parallel",
            AblationVariant::Decompose => "Decompose",
            AblationVariant::CdnetFull => "CDNet_Full",
            AblationVariant::CdnetFix => "CDNet_Fix",
            AblationVariant::Cdnet => "CDNet",
        }
    }

    pub fn model_variant(&self) -> Variant {
        match self {
            AblationVariant::Baseline => Variant::Baseline,
            AblationVariant::Single => Variant::SingleTransform,
            AblationVariant::Parallel => Variant::Parallel,
            _ => Variant::Sequential,
        }
    }

    pub fn reg_mode(&self) -> RegMode {
        match self {
            AblationVariant::Baseline | AblationVariant::Decompose => RegMode::None,
            AblationVariant::Single | AblationVariant::CdnetFull => RegMode::Full,
            AblationVariant::CdnetFix => RegMode::Fix,
            AblationVariant::Parallel | AblationVariant::Cdnet => RegMode::Partial,
        }
    }

    /// Whether fine-tuning needs the pre-trained model as a teacher.
    pub fn needs_teacher(&self) -> bool {
        matches!(self.reg_mode(), RegMode::Partial | RegMode::Full)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        let normalized = name.to_ascii_lowercase();
        Self::all()
            .into_iter()
            .find(|v| v.label().to_ascii_lowercase() == normalized)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{name}`; expected one of {}",
                    Self::all().map(|v| v.label()).join(", ")
                ))
            })
    }
}

/// What to train and how, independent of which variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSpec {
    /// Cascade feature dimension.
    pub d: usize,
    /// Cascade depth J (ignored by the baseline).
    pub j: usize,
    pub train: TrainConfig,
    /// Initialize fine-tuning from the pre-trained checkpoint.
    pub pretrained_init: bool,
}

/// Everything a variant run produces.
pub struct VariantRun {
    pub variant: AblationVariant,
    /// Pre-trained checkpoint, when stage one ran.
    pub pretrained: Option<Checkpoint>,
    /// The fine-tuned model.
    pub model: Model,
    pub pretrain_history: Option<History>,
    pub finetune_history: History,
}

/// Model configuration for a variant against a dataset.
pub fn model_config_for(
    variant: AblationVariant,
    spec: &RunSpec,
    ds: &SyntheticDataset,
    master_seed: u64,
) -> ModelConfig {
    let j = match variant.model_variant() {
        Variant::Baseline => 0,
        _ => spec.j,
    };
    ModelConfig {
        raw_dim: ds.config.raw_dim,
        d: spec.d,
        c_e: ds.config.base_classes,
        c_d: ds.config.domains,
        j,
        variant: variant.model_variant(),
        seed: seeds::derive(master_seed, seeds::stream::INIT),
    }
}

/// Train one ablation variant end to end: pre-train when the variant needs a
/// teacher or a pre-trained initialization, then fine-tune with the variant's
/// regularization mode.
pub fn run_variant(
    variant: AblationVariant,
    spec: &RunSpec,
    ds: &SyntheticDataset,
    master_seed: u64,
) -> Result<VariantRun> {
    if variant == AblationVariant::CdnetFix && !spec.pretrained_init {
        return Err(Error::Config(
            "fix mode freezes the PRE-TRAINED decomposition block; it requires pretrained_init"
                .into(),
        ));
    }
    let mut cfg = spec.train.clone();
    cfg.reg_mode = variant.reg_mode();

    let model_cfg = model_config_for(variant, spec, ds, master_seed);
    let needs_pretrain = spec.pretrained_init || variant.needs_teacher();

    let pretrain_seed = seeds::derive(master_seed, seeds::stream::PRETRAIN);
    let finetune_seed = seeds::derive(master_seed, seeds::stream::FINETUNE);

    let (teacher, pretrain_history) = if needs_pretrain {
        let mut m = Model::build(model_cfg)?;
        let h = pretrain(&mut m, ds, &cfg, pretrain_seed)?;
        (Some(m), Some(h))
    } else {
        (None, None)
    };

    let mut student = match (&teacher, spec.pretrained_init) {
        (Some(t), true) => t.clone(),
        _ => Model::build(model_cfg)?,
    };

    let teacher_ref = if variant.needs_teacher() { teacher.as_ref() } else { None };
    let finetune_history = finetune(&mut student, teacher_ref, ds, &cfg, finetune_seed)?;

    Ok(VariantRun {
        variant,
        pretrained: teacher.as_ref().map(Checkpoint::from_model),
        model: student,
        pretrain_history,
        finetune_history,
    })
}
