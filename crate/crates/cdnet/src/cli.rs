//! Configuration schema and subcommand implementations for the `cdnet`
//! binary.
//!
//! Configuration precedence is flags > config file > built-in defaults, and
//! the built-in defaults are the published hyperparameters wherever one
//! exists. Unknown keys in the config file are rejected. Every run writes a
//! `manifest.json` into its output directory recording the exact resolved
//! configuration and derived seeds, which is sufficient to re-run the command
//! and reproduce its outputs bitwise.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{export_dataset, gen_dataset, import_dataset, sample_episode, ClassPool, GenConfig};
use crate::error::{Error, Result};
use crate::eval::{ablation_table, evaluate, j_sweep, render_sweep, EvalConfig};
use crate::model::{Checkpoint, Model};
use crate::numerics::{grad_check, Real};
use crate::seeds;
use crate::train::{
    build_finetune_graph, finetune, model_config_for, pretrain, AblationVariant, RunSpec,
    TrainConfig,
};

/// Model-shape section of the run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Cascade feature dimension.
    pub d: usize,
    /// Number of cascaded LD modules (J). Default 3.
    pub j: usize,
    /// Ablation variant: baseline | single | parallel | decompose |
    /// cdnet_full | cdnet_fix | cdnet.
    pub variant: String,
    /// Initialize fine-tuning from the pre-trained checkpoint.
    pub pretrained_init: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d: 64, j: 3, variant: "cdnet".into(), pretrained_init: true }
    }
}

/// Evaluation section of the run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    /// Number of test tasks (1,000 by default).
    pub tasks: usize,
    pub parallel: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n: 5, k: 5, q: 16, tasks: 1000, parallel: false }
    }
}

/// Cascade-depth sweep section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Depths to sweep; 0 is the baseline by definition.
    pub j_values: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { j_values: vec![0, 1, 2, 3, 4, 5] }
    }
}

/// The whole run configuration file. `master_seed` is the only required
/// field; everything else has a documented default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    #[serde(default)]
    pub data: GenConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn with_seed(master_seed: u64) -> Self {
        RunConfig {
            master_seed,
            data: GenConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn variant(&self) -> Result<AblationVariant> {
        AblationVariant::from_name(&self.model.variant)
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            d: self.model.d,
            j: self.model.j,
            train: self.train.clone(),
            pretrained_init: self.model.pretrained_init,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n: self.eval.n,
            k: self.eval.k,
            q: self.eval.q,
            t: self.eval.tasks,
            seed: self.master_seed,
            metric: self.train.metric,
            parallel: self.eval.parallel,
        }
    }

    pub fn data_seed(&self) -> u64 {
        seeds::derive(self.master_seed, seeds::stream::DATA)
    }
}

/// Synthetic few-shot benchmark for cascaded feature decomposition:
/// generate data, pre-train, fine-tune, evaluate, and run the ablations.
#[derive(Parser, Debug)]
#[command(name = "cdnet", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Run configuration file (TOML). Defaults apply when omitted, in which
    /// case --seed is required.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file's master_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "runs/out")]
    pub out_dir: PathBuf,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let seed = self.seed.ok_or_else(|| {
                    Error::Config("no config file given; --seed is required".into())
                })?;
                RunConfig::with_seed(seed)
            }
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic multi-domain dataset file.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset output path [default: <out-dir>/dataset.ds].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage one: batch pre-training over all base classes.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Override the config's pre-training iteration count [paper: 10000].
        #[arg(long)]
        iters: Option<usize>,
        /// Override the config's variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Stage two: episodic fine-tuning from a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint (teacher, and the initialization unless
        /// --from-scratch). Optional only for variants without
        /// regularization when training from scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Initialize the student freshly instead of from the checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Override support shots K [paper: 1 or 5].
        #[arg(long)]
        k: Option<usize>,
        /// Override fine-tuning episode count [paper: 100].
        #[arg(long)]
        episodes: Option<usize>,
        /// Override tasks per episode [paper: 100].
        #[arg(long)]
        tasks: Option<usize>,
        /// Override the config's variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint on novel-class tasks of the target domain.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Fine-tuned checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override support shots K [paper: 1 or 5].
        #[arg(long)]
        k: Option<usize>,
        /// Override the number of test tasks [paper: 1000].
        #[arg(long)]
        tasks: Option<usize>,
        /// Evaluate tasks in parallel (bitwise identical to sequential).
        #[arg(long)]
        parallel: bool,
    },
    /// Train and evaluate the baseline plus all six variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained initialization: yes, no, or both [default: yes].
        #[arg(long, default_value = "yes")]
        pre: String,
        /// Shot counts to evaluate, repeatable [default: 1 5].
        #[arg(long = "k", num_args = 1..)]
        k_values: Option<Vec<usize>>,
    },
    /// Sweep the number of cascaded LD modules (0 = baseline).
    SweepJ {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Check analytic gradients of the full fine-tuning loss against central
    /// finite differences on a small configuration.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Finite-difference step [default: 1e-6].
        #[arg(long)]
        eps: Option<Real>,
        /// Maximum accepted relative error [default: 1e-5].
        #[arg(long)]
        tol: Option<Real>,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: Vec<String>,
    package: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    derived_seeds: DerivedSeeds,
}

#[derive(Serialize)]
struct DerivedSeeds {
    data: u64,
    init: u64,
    pretrain: u64,
    finetune: u64,
    eval: u64,
}

fn write_manifest(out_dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let manifest = Manifest {
        command: std::env::args().collect(),
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        derived_seeds: DerivedSeeds {
            data: seeds::derive(cfg.master_seed, seeds::stream::DATA),
            init: seeds::derive(cfg.master_seed, seeds::stream::INIT),
            pretrain: seeds::derive(cfg.master_seed, seeds::stream::PRETRAIN),
            finetune: seeds::derive(cfg.master_seed, seeds::stream::FINETUNE),
            eval: seeds::derive(cfg.master_seed, seeds::stream::EVAL),
        },
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest json"),
    )?;
    Ok(())
}

/// Run one parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Gen { common, out } => cmd_gen(&common, out),
        Command::Pretrain { common, data, iters, variant } => {
            cmd_pretrain(&common, &data, iters, variant)
        }
        Command::Finetune { common, data, checkpoint, from_scratch, k, episodes, tasks, variant } => {
            cmd_finetune(&common, &data, checkpoint, from_scratch, k, episodes, tasks, variant)
        }
        Command::Eval { common, data, checkpoint, k, tasks, parallel } => {
            cmd_eval(&common, &data, &checkpoint, k, tasks, parallel)
        }
        Command::Ablate { common, data, pre, k_values } => cmd_ablate(&common, &data, &pre, k_values),
        Command::SweepJ { common, data } => cmd_sweep_j(&common, &data),
        Command::Gradcheck { common, eps, tol } => cmd_gradcheck(&common, eps, tol),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_gen(common: &CommonArgs, out: Option<PathBuf>) -> Result<i32> {
    let cfg = common.resolve()?;
    write_manifest(&common.out_dir, &cfg)?;
    let ds = gen_dataset(&cfg.data, cfg.data_seed())?;
    let out = out.unwrap_or_else(|| common.out_dir.join("dataset.ds"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    export_dataset(&ds, &out)?;
    println!(
        "wrote {} ({} samples, {} base classes x {} source domains, {} novel classes)",
        out.display(),
        ds.samples.len(),
        ds.config.base_classes,
        ds.config.domains,
        ds.config.novel_classes
    );
    Ok(0)
}

fn cmd_pretrain(
    common: &CommonArgs,
    data: &Path,
    iters: Option<usize>,
    variant: Option<String>,
) -> Result<i32> {
    let mut cfg = common.resolve()?;
    if let Some(iters) = iters {
        cfg.train.pretrain_iters = iters;
    }
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    write_manifest(&common.out_dir, &cfg)?;
    let ds = import_dataset(data)?;
    let variant = cfg.variant()?;
    let spec = cfg.run_spec();
    let model_cfg = model_config_for(variant, &spec, &ds, cfg.master_seed);
    let mut model = Model::build(model_cfg)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.reg_mode = variant.reg_mode();
    let seed = seeds::derive(cfg.master_seed, seeds::stream::PRETRAIN);

    match pretrain(&mut model, &ds, &train_cfg, seed) {
        Ok(history) => {
            model.to_checkpoint().save(&common.out_dir.join("pretrain.ckpt"))?;
            history.write_jsonl(&common.out_dir.join("pretrain_history.jsonl"))?;
            let last = history.tail_mean_total(100).unwrap_or(Real::NAN);
            println!(
                "pre-trained {} for {} iterations; mean total loss over last 100 steps: {last:.4}",
                variant.label(),
                train_cfg.pretrain_iters
            );
            Ok(0)
        }
        Err(e @ Error::Diverged { .. }) => {
            // Abort, but keep the last finite state on disk.
            model.to_checkpoint().save(&common.out_dir.join("diverged.ckpt"))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    common: &CommonArgs,
    data: &Path,
    checkpoint: Option<PathBuf>,
    from_scratch: bool,
    k: Option<usize>,
    episodes: Option<usize>,
    tasks: Option<usize>,
    variant: Option<String>,
) -> Result<i32> {
    let mut cfg = common.resolve()?;
    if let Some(k) = k {
        cfg.train.k = k;
    }
    if let Some(e) = episodes {
        cfg.train.finetune_episodes = e;
    }
    if let Some(t) = tasks {
        cfg.train.tasks_per_episode = t;
    }
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    if from_scratch {
        cfg.model.pretrained_init = false;
    }
    write_manifest(&common.out_dir, &cfg)?;
    let ds = import_dataset(data)?;
    let variant = cfg.variant()?;
    let spec = cfg.run_spec();
    let mut train_cfg = cfg.train.clone();
    train_cfg.reg_mode = variant.reg_mode();

    if variant == AblationVariant::CdnetFix && !cfg.model.pretrained_init {
        return Err(Error::Config(
            "fix mode freezes the PRE-TRAINED decomposition block; it cannot run from scratch"
                .into(),
        ));
    }

    let expected = model_config_for(variant, &spec, &ds, cfg.master_seed);
    let teacher = match &checkpoint {
        Some(path) => {
            let loaded = Checkpoint::load(path)?.into_model()?;
            let got = loaded.config;
            if (got.d, got.j, got.variant, got.raw_dim, got.c_e, got.c_d)
                != (expected.d, expected.j, expected.variant, expected.raw_dim, expected.c_e, expected.c_d)
            {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint config {got:?} does not match the requested run {expected:?}"
                )));
            }
            Some(loaded)
        }
        None => None,
    };
    if (cfg.model.pretrained_init || variant.needs_teacher()) && teacher.is_none() {
        return Err(Error::Config(
            "--checkpoint is required unless training an unregularized variant from scratch"
                .into(),
        ));
    }

    let mut student = match (&teacher, cfg.model.pretrained_init) {
        (Some(t), true) => (*t).clone(),
        _ => Model::build(expected)?,
    };
    let teacher_ref = if variant.needs_teacher() { teacher.as_ref() } else { None };
    let seed = seeds::derive(cfg.master_seed, seeds::stream::FINETUNE);
    let history = finetune(&mut student, teacher_ref, &ds, &train_cfg, seed)?;
    student.to_checkpoint().save(&common.out_dir.join("final.ckpt"))?;
    history.write_jsonl(&common.out_dir.join("finetune_history.jsonl"))?;
    println!(
        "fine-tuned {} for {} episodes x {} tasks (k = {})",
        variant.label(),
        train_cfg.finetune_episodes,
        train_cfg.tasks_per_episode,
        train_cfg.k
    );
    Ok(0)
}

fn cmd_eval(
    common: &CommonArgs,
    data: &Path,
    checkpoint: &Path,
    k: Option<usize>,
    tasks: Option<usize>,
    parallel: bool,
) -> Result<i32> {
    let mut cfg = common.resolve()?;
    if let Some(k) = k {
        cfg.eval.k = k;
    }
    if let Some(t) = tasks {
        cfg.eval.tasks = t;
    }
    if parallel {
        cfg.eval.parallel = true;
    }
    write_manifest(&common.out_dir, &cfg)?;
    let ds = import_dataset(data)?;
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let report = evaluate(&model, &ds, &cfg.eval_config())?;
    fs::write(common.out_dir.join("report.json"), report.to_json())?;
    fs::write(common.out_dir.join("report.txt"), report.render_text())?;
    print!("{}", report.render_text());
    Ok(0)
}

fn cmd_ablate(
    common: &CommonArgs,
    data: &Path,
    pre: &str,
    k_values: Option<Vec<usize>>,
) -> Result<i32> {
    let cfg = common.resolve()?;
    write_manifest(&common.out_dir, &cfg)?;
    let ds = import_dataset(data)?;
    let pre_modes: Vec<bool> = match pre {
        "yes" => vec![true],
        "no" => vec![false],
        "both" => vec![false, true],
        other => {
            return Err(Error::Config(format!("--pre must be yes, no or both, got `{other}`")))
        }
    };
    let k_values = k_values.unwrap_or_else(|| vec![1, 5]);
    let table = ablation_table(
        &AblationVariant::all(),
        &pre_modes,
        &k_values,
        &cfg.run_spec(),
        &ds,
        cfg.master_seed,
        &cfg.eval_config(),
    );
    fs::write(
        common.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&table).expect("table json"),
    )?;
    fs::write(common.out_dir.join("ablation.txt"), table.render_text())?;
    print!("{}", table.render_text());
    Ok(0)
}

fn cmd_sweep_j(common: &CommonArgs, data: &Path) -> Result<i32> {
    let cfg = common.resolve()?;
    write_manifest(&common.out_dir, &cfg)?;
    let ds = import_dataset(data)?;
    let points = j_sweep(
        &cfg.sweep.j_values,
        &cfg.run_spec(),
        &ds,
        cfg.master_seed,
        &cfg.eval_config(),
    )?;
    fs::write(common.out_dir.join("sweep.tsv"), render_sweep(&points))?;
    fs::write(
        common.out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&points).expect("sweep json"),
    )?;
    for p in &points {
        println!("J = {}: accuracy {:.4} +/- {:.4}", p.j, p.mean, p.ci95);
    }
    Ok(0)
}

fn cmd_gradcheck(common: &CommonArgs, eps: Option<Real>, tol: Option<Real>) -> Result<i32> {
    // Deliberately tiny: d = 8, J = 3, a 2-way 2-shot 2-query episode, and
    // the full fine-tuning loss in partial mode.
    let cfg = match (&common.config, common.seed) {
        (None, None) => RunConfig::with_seed(12),
        _ => common.resolve()?,
    };
    write_manifest(&common.out_dir, &cfg)?;
    let eps = eps.unwrap_or(1e-6);
    let tol = tol.unwrap_or(1e-5);
    let report = gradcheck_small(cfg.master_seed, eps, tol)?;
    fs::write(common.out_dir.join("gradcheck.txt"), report.render_text())?;
    print!("{}", report.render_text());
    Ok(if report.passed() { 0 } else { 1 })
}

/// The small-configuration gradient check behind `cdnet gradcheck`: the
/// complete fine-tuning objective (prototype + domain + partial
/// regularization) with a teacher differing from the student.
pub fn gradcheck_small(master_seed: u64, eps: Real, tol: Real) -> Result<crate::numerics::GradCheckReport> {
    use crate::model::{ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let data_cfg = GenConfig {
        base_classes: 4,
        domains: 2,
        novel_classes: 2,
        raw_dim: 8,
        samples_per_class: 8,
        separation: 3.0,
        ..Default::default()
    };
    let ds = gen_dataset(&data_cfg, seeds::derive(master_seed, seeds::stream::DATA))?;

    let base = ModelConfig {
        raw_dim: 8,
        d: 8,
        c_e: data_cfg.base_classes,
        c_d: data_cfg.domains,
        j: 3,
        variant: Variant::Sequential,
        seed: seeds::derive(master_seed, seeds::stream::INIT),
    };
    let student = Model::build(base)?;
    let teacher = Model::build(ModelConfig { seed: base.seed ^ 0x5eed, ..base })?;

    let mut train_cfg = TrainConfig { n: 2, k: 2, q: 2, ..TrainConfig::default() };
    train_cfg.reg_mode = crate::objectives::RegMode::Partial;

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(master_seed, seeds::stream::FINETUNE));
    let episode = sample_episode(&ds, train_cfg.n, train_cfg.k, train_cfg.q, ClassPool::Base, &mut rng)?;

    grad_check(
        &student.store,
        |store, tape| {
            let (bundle, binding) =
                build_finetune_graph(&student, store, Some(&teacher), &ds, &episode, &train_cfg, tape)?;
            Ok((bundle.total, binding))
        },
        eps,
        tol,
    )
}
