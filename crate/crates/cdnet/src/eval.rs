//! Episodic evaluation: nearest-centroid prediction on the novel compound
//! classes of the target domain, accuracy aggregation with 95% confidence
//! intervals, the ablation table, and the cascade-depth sweep.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, ClassPool, Episode, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{Metric, Model};
use crate::numerics::{Real, Tape};
use crate::seeds;
use crate::train::{run_variant, AblationVariant, RunSpec, VariantRun};

/// Evaluation parameters. `t` is the number of test tasks (1,000 by
/// default); desk-scale runs may use fewer with correspondingly wider
/// intervals.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub t: usize,
    pub seed: u64,
    pub metric: Metric,
    /// Evaluate tasks in parallel; results are bitwise identical to the
    /// sequential order because every task derives its own seed.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 5,
            k: 5,
            q: 16,
            t: 1000,
            seed: 0,
            metric: Metric::default(),
            parallel: false,
        }
    }
}

/// Identifies exactly what produced a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub t: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
}

/// Evaluation outcome: per-task accuracies plus their mean and normal-
/// approximation 95% confidence interval `1.96 * sd / sqrt(T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task_accuracy: Vec<Real>,
    pub mean: Real,
    pub ci95: Real,
    pub fingerprint: Fingerprint,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report json")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("eval report: {e}")))
    }

    pub fn render_text(&self) -> String {
        format!(
            "tasks {}  n {}  k {}  q {}  seed {}\nmean accuracy {:.4} +/- {:.4} (95% CI)\ncheckpoint {}\n",
            self.fingerprint.t,
            self.fingerprint.n,
            self.fingerprint.k,
            self.fingerprint.q,
            self.fingerprint.seed,
            self.mean,
            self.ci95,
            self.fingerprint.checkpoint_hash,
        )
    }
}

/// Mean and 95% confidence interval of a list of per-task accuracies.
/// The interval uses the sample standard deviation (n-1 divisor); a single
/// task yields a zero-width interval.
pub fn mean_ci95(values: &[Real]) -> (Real, Real) {
    let t = values.len();
    if t == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<Real>() / t as Real;
    if t < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (t as Real - 1.0);
    let sd = var.sqrt();
    (mean, 1.96 * sd / (t as Real).sqrt())
}

/// Index of the nearest center; exact ties break to the lowest class index.
/// The argmin is identical under Euclidean and squared Euclidean.
pub fn nearest_centroid_predict(query: &[Real], centers: &[Vec<Real>], metric: Metric) -> usize {
    let mut best = 0;
    let mut best_dist = Real::INFINITY;
    for (i, center) in centers.iter().enumerate() {
        let sq: Real = query.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
        let dist = match metric {
            Metric::SquaredEuclidean => sq,
            Metric::Euclidean => sq.sqrt(),
        };
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    best
}

/// Accuracy of one already-sampled episode under a frozen model: fraction of
/// the N*Q queries whose nearest support centroid (in `r_e` space) has the
/// right episode-local class.
pub fn episode_accuracy(
    model: &Model,
    ds: &SyntheticDataset,
    episode: &Episode,
    metric: Metric,
) -> Result<Real> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let feature = |tape: &mut Tape, idx: usize| -> Result<Vec<Real>> {
        let raw = crate::numerics::Tensor::vector(ds.sample(idx).raw.clone())?;
        let fwd = model.forward_sample(tape, &binding, &raw)?;
        Ok(tape.value(fwd.trace.r_e).data().to_vec())
    };

    let mut centers = Vec::with_capacity(episode.n);
    for class in &episode.support {
        let mut center = vec![0.0; model.config.d];
        for &idx in class {
            for (c, v) in center.iter_mut().zip(feature(&mut tape, idx)?) {
                *c += v;
            }
        }
        for c in &mut center {
            *c /= class.len() as Real;
        }
        centers.push(center);
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    for (class_idx, class) in episode.query.iter().enumerate() {
        for &idx in class {
            let q = feature(&mut tape, idx)?;
            if nearest_centroid_predict(&q, &centers, metric) == class_idx {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as Real / total as Real)
}

fn run_task(
    model: &Model,
    ds: &SyntheticDataset,
    cfg: &EvalConfig,
    task_index: usize,
) -> Result<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::task_seed(
        seeds::derive(cfg.seed, seeds::stream::EVAL),
        task_index,
    ));
    let episode = sample_episode(ds, cfg.n, cfg.k, cfg.q, ClassPool::Novel, &mut rng)?;
    episode_accuracy(model, ds, &episode, cfg.metric)
}

/// Evaluate a frozen model over `t` novel-class tasks of the target domain.
/// The checkpoint is read, never mutated; task seeds derive from
/// `(seed, task index)` so parallel and sequential runs agree exactly.
pub fn evaluate(model: &Model, ds: &SyntheticDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.t == 0 {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    let per_task_accuracy: Vec<Real> = if cfg.parallel {
        (0..cfg.t)
            .into_par_iter()
            .map(|i| run_task(model, ds, cfg, i))
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..cfg.t).map(|i| run_task(model, ds, cfg, i)).collect::<Result<Vec<_>>>()?
    };
    let (mean, ci95) = mean_ci95(&per_task_accuracy);
    Ok(EvalReport {
        per_task_accuracy,
        mean,
        ci95,
        fingerprint: Fingerprint {
            n: cfg.n,
            k: cfg.k,
            q: cfg.q,
            t: cfg.t,
            seed: cfg.seed,
            checkpoint_hash: model.to_checkpoint().hash(),
        },
    })
}

/// One ablation cell: accuracy of a (variant, K) combination.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub mean: Real,
    pub ci95: Real,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub pretrained_init: bool,
    /// One cell per requested K; `None` marks a failed run (gap), which does
    /// not abort the table.
    pub cells: Vec<Option<AblationCell>>,
}

/// The full ablation table: one row per variant in canonical order, columns
/// per shot count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub k_values: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<12} {:<5}", "Method", "Pre"));
        for k in &self.k_values {
            out.push_str(&format!(" {:>18}", format!("{k}-shot")));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<5}",
                row.variant,
                if row.pretrained_init { "yes" } else { "no" }
            ));
            for cell in &row.cells {
                match cell {
                    Some(c) => out.push_str(&format!(
                        " {:>18}",
                        format!("{:.2} +/- {:.2}", 100.0 * c.mean, 100.0 * c.ci95)
                    )),
                    None => out.push_str(&format!(" {:>18}", "—")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Train and evaluate every requested variant under shared data and seeds.
/// Rows appear in canonical table order; a failed variant leaves an explicit
/// gap and the run continues.
pub fn ablation_table(
    variants: &[AblationVariant],
    pre_modes: &[bool],
    k_values: &[usize],
    spec: &RunSpec,
    ds: &SyntheticDataset,
    master_seed: u64,
    eval_cfg: &EvalConfig,
) -> AblationTable {
    let mut rows = Vec::new();
    for &pre in pre_modes {
        for &variant in variants {
            let mut cells = Vec::with_capacity(k_values.len());
            for &k in k_values {
                let mut spec = spec.clone();
                spec.train.k = k;
                spec.pretrained_init = pre;
                let cell = match run_variant(variant, &spec, ds, master_seed).and_then(|run| {
                    let mut ecfg = *eval_cfg;
                    ecfg.k = k;
                    evaluate(&run.model, ds, &ecfg)
                }) {
                    Ok(report) => Some(AblationCell { mean: report.mean, ci95: report.ci95 }),
                    Err(e) => {
                        warn!("ablation {} (pre={pre}, k={k}) failed: {e}", variant.label());
                        None
                    }
                };
                cells.push(cell);
            }
            rows.push(AblationRow {
                variant: variant.label().to_string(),
                pretrained_init: pre,
                cells,
            });
        }
    }
    AblationTable { k_values: k_values.to_vec(), rows }
}

/// One point of the cascade-depth sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JSweepPoint {
    pub j: usize,
    pub mean: Real,
    pub ci95: Real,
}

/// Train and evaluate across cascade depths under shared seeds. Depth 0 runs
/// the baseline variant by definition; all deeper runs use the sequential
/// variant with partial regularization.
pub fn j_sweep(
    j_values: &[usize],
    spec: &RunSpec,
    ds: &SyntheticDataset,
    master_seed: u64,
    eval_cfg: &EvalConfig,
) -> Result<Vec<JSweepPoint>> {
    let mut points = Vec::with_capacity(j_values.len());
    for &j in j_values {
        let run = j_sweep_run(j, spec, ds, master_seed)?;
        let report = evaluate(&run.model, ds, eval_cfg)?;
        points.push(JSweepPoint { j, mean: report.mean, ci95: report.ci95 });
    }
    Ok(points)
}

/// The training run behind one sweep point (exposed so the depth-0 ==
/// baseline identity can be checked checkpoint-for-checkpoint).
pub fn j_sweep_run(
    j: usize,
    spec: &RunSpec,
    ds: &SyntheticDataset,
    master_seed: u64,
) -> Result<VariantRun> {
    let mut spec = spec.clone();
    let variant = if j == 0 {
        AblationVariant::Baseline
    } else {
        spec.j = j;
        AblationVariant::Cdnet
    };
    run_variant(variant, &spec, ds, master_seed)
}

/// Two-column plot-ready text: depth, accuracy.
pub fn render_sweep(points: &[JSweepPoint]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(&format!("{}\t{:.6}\n", p.j, p.mean));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_query_at_center() {
        let centers = vec![vec![0.0, 0.0], vec![3.0, 0.0]];
        assert_eq!(nearest_centroid_predict(&[3.0, 0.0], &centers, Metric::SquaredEuclidean), 1);
    }

    #[test]
    fn predict_tie_breaks_to_lowest_index() {
        // Centers at indices 1 and 3 are equidistant; 0 and 2 are farther.
        let centers = vec![
            vec![10.0, 0.0],
            vec![1.0, 0.0],
            vec![10.0, 0.0],
            vec![-1.0, 0.0],
        ];
        assert_eq!(nearest_centroid_predict(&[0.0, 0.0], &centers, Metric::SquaredEuclidean), 1);
    }

    #[test]
    fn predict_agrees_under_both_metrics() {
        let centers = vec![vec![0.0, 0.0], vec![3.0, 0.0]];
        let q = [1.0, 0.0];
        assert_eq!(
            nearest_centroid_predict(&q, &centers, Metric::SquaredEuclidean),
            nearest_centroid_predict(&q, &centers, Metric::Euclidean)
        );
        assert_eq!(nearest_centroid_predict(&q, &centers, Metric::SquaredEuclidean), 0);
    }

    #[test]
    fn ci_zero_variance() {
        let (mean, ci) = mean_ci95(&[0.6; 10]);
        assert!((mean - 0.6).abs() < 1e-15);
        assert!(ci.abs() < 1e-12);
    }

    #[test]
    fn ci_hand_case() {
        // {0.5, 0.7}: mean 0.6, sd = sqrt(0.02) ~ 0.1414, ci = 1.96 * 0.1.
        let (mean, ci) = mean_ci95(&[0.5, 0.7]);
        assert!((mean - 0.6).abs() < 1e-12);
        assert!((ci - 0.196).abs() < 1e-12);
    }

    #[test]
    fn single_task_has_zero_interval() {
        let (mean, ci) = mean_ci95(&[0.25]);
        assert_eq!(mean, 0.25);
        assert_eq!(ci, 0.0);
    }
}
