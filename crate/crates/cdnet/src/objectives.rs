//! Loss terms for both training stages.
//!
//! Pre-training: expression cross-entropy on `r_e` plus weighted domain
//! cross-entropy on `r_d`. Fine-tuning: prototype classification loss over
//! query features, the same domain term over all support and query samples,
//! and a regularization term that ties the fine-tuned decomposition block to
//! the frozen pre-trained one (partial), ties whole-LD outputs (full), or is
//! absent (none/fix — fix instead freezes the block in the optimizer).

use crate::error::{Error, Result};
use crate::model::{
    decompose, ld_forward, DecompositionNodes, LdNodes, Metric, SampleForward,
    SingleTransformNodes, StackNodes,
};
use crate::numerics::{NodeId, Real, Tape};
use serde::{Deserialize, Serialize};

/// Balance weights of the two stages.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Domain weight in pre-training.
    pub lambda_d_p: Real,
    /// Domain weight in fine-tuning.
    pub lambda_d_f: Real,
    /// Regularization weight in fine-tuning.
    pub lambda_r_f: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Defaults match the published hyperparameters.
        LossWeights { lambda_d_p: 1.0, lambda_d_f: 0.01, lambda_r_f: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_d_p < 0.0 || self.lambda_d_f < 0.0 || self.lambda_r_f < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Regularization mode of the fine-tuning stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// No regularization term.
    None,
    /// Penalize disagreement between pre-trained and fine-tuned
    /// decomposition blocks only.
    Partial,
    /// Penalize disagreement between whole-LD (or whole fused transform)
    /// outputs.
    Full,
    /// No term; the decomposition block is excluded from updates instead.
    Fix,
}

/// A total loss together with its named components. The total is always the
/// recomputable weighted sum `cls + lambda_d * domain + lambda_r * reg`.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub total: NodeId,
    pub cls: NodeId,
    pub domain: Option<NodeId>,
    pub reg: Option<NodeId>,
}

/// Plain values of a [`LossBundle`], for history records.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossValues {
    pub total: Real,
    pub cls: Real,
    pub domain: Option<Real>,
    pub reg: Option<Real>,
}

impl LossBundle {
    pub fn values(&self, tape: &Tape) -> LossValues {
        LossValues {
            total: tape.value(self.total).as_scalar(),
            cls: tape.value(self.cls).as_scalar(),
            domain: self.domain.map(|d| tape.value(d).as_scalar()),
            reg: self.reg.map(|r| tape.value(r).as_scalar()),
        }
    }
}

fn combine(
    tape: &mut Tape,
    cls: NodeId,
    domain: Option<(Real, NodeId)>,
    reg: Option<(Real, NodeId)>,
) -> Result<LossBundle> {
    let mut terms = vec![(1.0, cls)];
    if let Some((w, d)) = domain {
        terms.push((w, d));
    }
    if let Some((w, r)) = reg {
        terms.push((w, r));
    }
    let total = tape.affine_scalars(&terms)?;
    Ok(LossBundle { total, cls, domain: domain.map(|(_, d)| d), reg: reg.map(|(_, r)| r) })
}

/// Pre-training loss of one sample:
/// `CE(expr_logits, y_e) + lambda_d_p * CE(domain_logits, y_d)`.
/// `domain_logits` is `None` for the baseline (no decomposition, no domain
/// loss).
pub fn pretrain_loss(
    tape: &mut Tape,
    expr_logits: NodeId,
    domain_logits: Option<NodeId>,
    y_e: usize,
    y_d: usize,
    w: &LossWeights,
) -> Result<LossBundle> {
    let cls = tape.softmax_cross_entropy(expr_logits, y_e)?;
    let domain = match domain_logits {
        Some(logits) => Some((w.lambda_d_p, tape.softmax_cross_entropy(logits, y_d)?)),
        None => None,
    };
    combine(tape, cls, domain, None)
}

/// Component-wise mean of per-sample bundles; the batch total is recomposed
/// from the averaged components so total always equals the weighted sum of
/// what is reported.
pub fn mean_bundle(
    tape: &mut Tape,
    bundles: &[LossBundle],
    domain_weight: Real,
    reg_weight: Real,
) -> Result<LossBundle> {
    if bundles.is_empty() {
        return Err(Error::Internal("mean over empty loss bundle list".into()));
    }
    let inv = 1.0 / bundles.len() as Real;
    let cls_terms: Vec<(Real, NodeId)> = bundles.iter().map(|b| (inv, b.cls)).collect();
    let cls = tape.affine_scalars(&cls_terms)?;
    let domain = if bundles.iter().all(|b| b.domain.is_some()) {
        let terms: Vec<(Real, NodeId)> = bundles.iter().map(|b| (inv, b.domain.unwrap())).collect();
        Some((domain_weight, tape.affine_scalars(&terms)?))
    } else {
        None
    };
    let reg = if bundles.iter().all(|b| b.reg.is_some()) {
        let terms: Vec<(Real, NodeId)> = bundles.iter().map(|b| (inv, b.reg.unwrap())).collect();
        Some((reg_weight, tape.affine_scalars(&terms)?))
    } else {
        None
    };
    combine(tape, cls, domain, reg)
}

/// Per-class support centers: `R_n = mean_k feature_k^n`.
pub fn class_centers(tape: &mut Tape, support_features: &[Vec<NodeId>]) -> Result<Vec<NodeId>> {
    let mut centers = Vec::with_capacity(support_features.len());
    for (n, class_features) in support_features.iter().enumerate() {
        if class_features.is_empty() {
            return Err(Error::Sampling(format!("class {n} has no support features")));
        }
        centers.push(tape.mean_tensors(class_features)?);
    }
    Ok(centers)
}

/// Distance node between a feature and a center under the configured metric.
fn distance(tape: &mut Tape, a: NodeId, b: NodeId, metric: Metric) -> Result<NodeId> {
    let sq = tape.squared_l2(a, b)?;
    match metric {
        Metric::SquaredEuclidean => Ok(sq),
        Metric::Euclidean => tape.sqrt(sq),
    }
}

/// Logits of the prototype classifier: negated distances to the N centers.
pub fn proto_logits(
    tape: &mut Tape,
    query: NodeId,
    centers: &[NodeId],
    metric: Metric,
) -> Result<NodeId> {
    let mut dists = Vec::with_capacity(centers.len());
    for &c in centers {
        dists.push(distance(tape, query, c, metric)?);
    }
    let stacked = tape.stack_scalars(&dists)?;
    tape.scale_const(stacked, -1.0)
}

/// Prototype classification loss of one query: cross-entropy of the softmax
/// over negated distances to the class centers.
pub fn proto_episode_loss(
    tape: &mut Tape,
    query: NodeId,
    y_q: usize,
    centers: &[NodeId],
    metric: Metric,
) -> Result<NodeId> {
    if y_q >= centers.len() {
        return Err(Error::LabelOutOfRange { label: y_q, classes: centers.len() });
    }
    let logits = proto_logits(tape, query, centers, metric)?;
    tape.softmax_cross_entropy(logits, y_q)
}

/// Partial regularization for one sample's cascade:
/// `sum_i || D_pre(input_i) - D_fine(input_i) ||^2`.
///
/// The inputs come from the CURRENT fine-tuned forward pass; gradients flow
/// into the fine-tuned block and into the inputs, while the pre-trained block
/// is a frozen teacher (its leaves are never mapped back to trainable
/// parameters).
pub fn partial_reg_loss(
    tape: &mut Tape,
    inputs: &[NodeId],
    teacher: &DecompositionNodes,
    student: &DecompositionNodes,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(inputs.len());
    for &input in inputs {
        let teacher_p = decompose(tape, teacher, input)?;
        let student_p = decompose(tape, student, input)?;
        terms.push((1.0, tape.squared_l2(teacher_p, student_p)?));
    }
    tape.affine_scalars(&terms)
}

/// Full regularization over whole-LD outputs `alpha * p` on the same inputs.
pub fn full_reg_loss(
    tape: &mut Tape,
    inputs: &[NodeId],
    teacher: &LdNodes,
    student: &LdNodes,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(inputs.len());
    for &input in inputs {
        let t = ld_forward(tape, teacher, input)?;
        let s = ld_forward(tape, student, input)?;
        terms.push((1.0, tape.squared_l2(t.output, s.output)?));
    }
    tape.affine_scalars(&terms)
}

/// Full regularization for the fused single-transformation variant, which has
/// no decomposition/weighting split: compares fused outputs.
pub fn full_reg_loss_single(
    tape: &mut Tape,
    inputs: &[NodeId],
    teacher: &SingleTransformNodes,
    student: &SingleTransformNodes,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(inputs.len());
    for &input in inputs {
        let t = single_step(tape, teacher, input)?;
        let s = single_step(tape, student, input)?;
        terms.push((1.0, tape.squared_l2(t, s)?));
    }
    tape.affine_scalars(&terms)
}

fn single_step(tape: &mut Tape, st: &SingleTransformNodes, x: NodeId) -> Result<NodeId> {
    let mx = tape.linear(st.m, x, Some(st.b))?;
    tape.prelu(mx, st.slope)
}

/// Regularization term for one sample under the given mode, dispatching on
/// the stack structure. `None` when the mode has no term.
pub fn sample_reg_loss(
    tape: &mut Tape,
    mode: RegMode,
    trace_inputs: &[NodeId],
    teacher: &StackNodes,
    student: &StackNodes,
) -> Result<Option<NodeId>> {
    match (mode, teacher, student) {
        (RegMode::None | RegMode::Fix, _, _) => Ok(None),
        (RegMode::Partial, StackNodes::Shared(t), StackNodes::Shared(s)) => Ok(Some(
            partial_reg_loss(tape, trace_inputs, &t.decomposition, &s.decomposition)?,
        )),
        (RegMode::Partial, StackNodes::Parallel(ts), StackNodes::Parallel(ss)) => {
            if ts.len() != ss.len() || ts.len() != trace_inputs.len() {
                return Err(Error::Config(
                    "parallel partial regularization: teacher/student module counts differ".into(),
                ));
            }
            // Step i pairs teacher module i with student module i on input_i.
            let mut terms = Vec::with_capacity(ts.len());
            for ((t, s), &input) in ts.iter().zip(ss).zip(trace_inputs) {
                let r = partial_reg_loss(tape, &[input], &t.decomposition, &s.decomposition)?;
                terms.push((1.0, r));
            }
            Ok(Some(tape.affine_scalars(&terms)?))
        }
        (RegMode::Full, StackNodes::Shared(t), StackNodes::Shared(s)) => {
            Ok(Some(full_reg_loss(tape, trace_inputs, t, s)?))
        }
        (RegMode::Full, StackNodes::Parallel(ts), StackNodes::Parallel(ss)) => {
            if ts.len() != ss.len() || ts.len() != trace_inputs.len() {
                return Err(Error::Config(
                    "parallel full regularization: teacher/student module counts differ".into(),
                ));
            }
            let mut terms = Vec::with_capacity(ts.len());
            for ((t, s), &input) in ts.iter().zip(ss).zip(trace_inputs) {
                terms.push((1.0, full_reg_loss(tape, &[input], t, s)?));
            }
            Ok(Some(tape.affine_scalars(&terms)?))
        }
        (RegMode::Full, StackNodes::SingleTransform(t), StackNodes::SingleTransform(s)) => {
            Ok(Some(full_reg_loss_single(tape, trace_inputs, t, s)?))
        }
        (RegMode::Partial, StackNodes::SingleTransform(_), _) => Err(Error::Config(
            "partial regularization requires a two-block LD module; \
             the single-transformation variant supports full regularization only"
                .into(),
        )),
        _ => Err(Error::Config(
            "regularization teacher/student stack structures do not match".into(),
        )),
    }
}

/// Everything the fine-tuning loss needs from one episode's forward passes.
pub struct EpisodeForward {
    /// `[n][k]` support forwards.
    pub support: Vec<Vec<SampleForward>>,
    /// `[n][q]` query forwards.
    pub query: Vec<Vec<SampleForward>>,
}

impl EpisodeForward {
    pub fn all_samples(&self) -> impl Iterator<Item = &SampleForward> {
        self.support.iter().chain(self.query.iter()).flatten()
    }
}

/// Fine-tuning loss of one episode:
/// `L_cls (mean over N*Q queries) + lambda_d_f * L_d (mean over all support
/// and query samples) + lambda_r_f * L_r (mean over all samples)`.
///
/// `domain_logits_of` maps a residual node to domain logits (absent for the
/// baseline); the regularization is evaluated per sample on its cascade
/// inputs and averaged.
pub fn finetune_loss(
    tape: &mut Tape,
    episode: &EpisodeForward,
    domain_label: usize,
    mut domain_logits_of: impl FnMut(&mut Tape, NodeId) -> Result<Option<NodeId>>,
    reg_mode: RegMode,
    teacher: Option<&StackNodes>,
    student: &StackNodes,
    w: &LossWeights,
    metric: Metric,
) -> Result<LossBundle> {
    // Prototype classification over query features.
    let support_features: Vec<Vec<NodeId>> = episode
        .support
        .iter()
        .map(|class| class.iter().map(|sf| sf.trace.r_e).collect())
        .collect();
    let centers = class_centers(tape, &support_features)?;
    let mut query_losses = Vec::new();
    for (class_idx, class_queries) in episode.query.iter().enumerate() {
        for sf in class_queries {
            let l = proto_episode_loss(tape, sf.trace.r_e, class_idx, &centers, metric)?;
            query_losses.push(l);
        }
    }
    if query_losses.is_empty() {
        return Err(Error::Sampling("episode has no query samples".into()));
    }
    let inv_q = 1.0 / query_losses.len() as Real;
    let cls_terms: Vec<(Real, NodeId)> = query_losses.iter().map(|&l| (inv_q, l)).collect();
    let cls = tape.affine_scalars(&cls_terms)?;

    // Domain classification over all support and query samples.
    let mut domain_losses = Vec::new();
    for sf in episode.all_samples() {
        if let Some(logits) = domain_logits_of(tape, sf.trace.r_d)? {
            domain_losses.push(tape.softmax_cross_entropy(logits, domain_label)?);
        }
    }
    let domain = if domain_losses.is_empty() {
        None
    } else {
        let inv = 1.0 / domain_losses.len() as Real;
        let terms: Vec<(Real, NodeId)> = domain_losses.iter().map(|&l| (inv, l)).collect();
        Some((w.lambda_d_f, tape.affine_scalars(&terms)?))
    };

    // Regularization, averaged over all samples of the episode.
    let reg = match reg_mode {
        RegMode::None | RegMode::Fix => None,
        _ => {
            let teacher = teacher.ok_or_else(|| {
                Error::Config("partial/full regularization requires a pre-trained teacher".into())
            })?;
            let mut sample_terms = Vec::new();
            for sf in episode.all_samples() {
                let r = sample_reg_loss(tape, reg_mode, &sf.trace.inputs, teacher, student)?
                    .ok_or_else(|| Error::Internal("reg mode produced no term".into()))?;
                sample_terms.push(r);
            }
            let inv = 1.0 / sample_terms.len() as Real;
            let terms: Vec<(Real, NodeId)> = sample_terms.iter().map(|&r| (inv, r)).collect();
            Some((w.lambda_r_f, tape.affine_scalars(&terms)?))
        }
    };

    combine(tape, cls, domain, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn vec_leaf(tape: &mut Tape, v: &[Real]) -> NodeId {
        tape.leaf(Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn class_centers_hand_cases() {
        let mut t = Tape::new();
        // K = 1: center equals the single support feature.
        let single = vec_leaf(&mut t, &[3.0, -1.0]);
        let centers = class_centers(&mut t, &[vec![single]]).unwrap();
        assert_eq!(t.value(centers[0]).data(), &[3.0, -1.0]);
        // K = 2: features [0,0] and [2,4] -> [1,2].
        let a = vec_leaf(&mut t, &[0.0, 0.0]);
        let b = vec_leaf(&mut t, &[2.0, 4.0]);
        let centers = class_centers(&mut t, &[vec![a, b]]).unwrap();
        assert_eq!(t.value(centers[0]).data(), &[1.0, 2.0]);
        // Permuting the K features leaves the center unchanged.
        let centers_rev = class_centers(&mut t, &[vec![b, a]]).unwrap();
        assert_eq!(t.value(centers_rev[0]).data(), t.value(centers[0]).data());
    }

    #[test]
    fn class_centers_rejects_empty_class() {
        let mut t = Tape::new();
        assert!(class_centers(&mut t, &[vec![]]).is_err());
    }

    #[test]
    fn proto_loss_symmetric_case_is_ln2() {
        let mut t = Tape::new();
        let q = vec_leaf(&mut t, &[0.0, 0.0]);
        let c0 = vec_leaf(&mut t, &[1.0, 0.0]);
        let c1 = vec_leaf(&mut t, &[-1.0, 0.0]);
        let l = proto_episode_loss(&mut t, q, 0, &[c0, c1], Metric::SquaredEuclidean).unwrap();
        assert!((t.value(l).as_scalar() - (2.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn proto_loss_standard_basis_hand_case() {
        // Centers e1, e2, e3 in R^3, query = e1, label 0: distances (0, 2, 2),
        // loss = ln(1 + 2 e^{-2}).
        let mut t = Tape::new();
        let q = vec_leaf(&mut t, &[1.0, 0.0, 0.0]);
        let c0 = vec_leaf(&mut t, &[1.0, 0.0, 0.0]);
        let c1 = vec_leaf(&mut t, &[0.0, 1.0, 0.0]);
        let c2 = vec_leaf(&mut t, &[0.0, 0.0, 1.0]);
        let l = proto_episode_loss(&mut t, q, 0, &[c0, c1, c2], Metric::SquaredEuclidean).unwrap();
        let expected = (1.0 + 2.0 * (-2.0 as Real).exp()).ln();
        assert!((t.value(l).as_scalar() - expected).abs() < 1e-12);
        assert!((expected - 0.23954).abs() < 1e-5);
    }

    #[test]
    fn proto_loss_dominant_margin_is_near_zero() {
        // Distances (0, 100): loss = ln(1 + e^{-100}) ~ 0.
        let mut t = Tape::new();
        let q = vec_leaf(&mut t, &[0.0]);
        let c0 = vec_leaf(&mut t, &[0.0]);
        let c1 = vec_leaf(&mut t, &[10.0]);
        let l = proto_episode_loss(&mut t, q, 0, &[c0, c1], Metric::SquaredEuclidean).unwrap();
        let v = t.value(l).as_scalar();
        assert!(v >= 0.0 && v < 1e-12);
    }

    #[test]
    fn proto_loss_label_out_of_range() {
        let mut t = Tape::new();
        let q = vec_leaf(&mut t, &[0.0]);
        let c0 = vec_leaf(&mut t, &[0.0]);
        assert!(matches!(
            proto_episode_loss(&mut t, q, 1, &[c0], Metric::SquaredEuclidean),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn pretrain_loss_uniform_logits_value() {
        // Zero heads: logits are zero vectors -> ln C_e + lambda * ln C_d.
        let mut t = Tape::new();
        let ze = vec_leaf(&mut t, &[0.0; 7]);
        let zd = vec_leaf(&mut t, &[0.0; 5]);
        let w = LossWeights::default();
        let bundle = pretrain_loss(&mut t, ze, Some(zd), 3, 1, &w).unwrap();
        let v = bundle.values(&t);
        let expected = (7.0 as Real).ln() + (5.0 as Real).ln();
        assert!((v.total - expected).abs() < 1e-12);
        assert!((v.cls - (7.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_loss_zero_domain_weight() {
        let mut t = Tape::new();
        let ze = vec_leaf(&mut t, &[1.0, -1.0]);
        let zd = vec_leaf(&mut t, &[0.5, 0.5]);
        let w = LossWeights { lambda_d_p: 0.0, ..LossWeights::default() };
        let bundle = pretrain_loss(&mut t, ze, Some(zd), 0, 0, &w).unwrap();
        let v = bundle.values(&t);
        assert_eq!(v.total, v.cls);
    }

    #[test]
    fn partial_reg_identical_blocks_is_zero() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(2, 2, vec![0.3, -0.1, 0.7, 1.2]).unwrap());
        let slope = t.leaf(Tensor::scalar(0.25).unwrap());
        let dp = DecompositionNodes { p, slope };
        let x = vec_leaf(&mut t, &[1.0, -2.0]);
        let r = partial_reg_loss(&mut t, &[x], &dp, &dp).unwrap();
        assert_eq!(t.value(r).as_scalar(), 0.0);
    }

    #[test]
    fn partial_reg_hand_case_and_homogeneity() {
        // Outputs [1,0] vs [0,1] -> squared distance 2. Identity transforms
        // with nonnegative inputs make D(x) = x, so pick the inputs directly.
        let mut t = Tape::new();
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p_teacher = t.leaf(eye.clone());
        let p_student = t.leaf(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let slope = t.leaf(Tensor::scalar(0.25).unwrap());
        let teacher = DecompositionNodes { p: p_teacher, slope };
        let student = DecompositionNodes { p: p_student, slope };
        let x = vec_leaf(&mut t, &[1.0, 0.0]);
        // teacher: [1,0]; student swaps coordinates: [0,1].
        let r = partial_reg_loss(&mut t, &[x], &teacher, &student).unwrap();
        assert!((t.value(r).as_scalar() - 2.0).abs() < 1e-12);
        // Doubling the output difference quadruples the loss.
        let x2 = vec_leaf(&mut t, &[2.0, 0.0]);
        let r2 = partial_reg_loss(&mut t, &[x2], &teacher, &student).unwrap();
        assert!((t.value(r2).as_scalar() - 8.0).abs() < 1e-12);
    }
}
