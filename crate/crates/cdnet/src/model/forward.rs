//! Taped forward passes for the encoder, LD module, cascade variants, and
//! classifier heads.
//!
//! Every function takes node handles rather than parameter ids so the same
//! code path serves both the trainable model (nodes from its binding) and a
//! frozen teacher (nodes from a separate binding whose gradients are simply
//! never read back).

use super::{
    DecompositionParams, DecompositionStack, DomainHeadParams, EncoderParams, LdParams, Model,
    SingleTransformParams, Variant, WeightingParams,
};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Real, Tape, Tensor};
use crate::params::ParamBinding;

/// Decomposition block nodes on one tape.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionNodes {
    pub p: NodeId,
    pub slope: NodeId,
}

impl DecompositionNodes {
    pub fn bind(binding: &ParamBinding, dp: &DecompositionParams) -> Self {
        DecompositionNodes { p: binding.node(dp.p), slope: binding.node(dp.slope) }
    }
}

/// Weighting block nodes on one tape.
#[derive(Clone, Copy, Debug)]
pub struct WeightingNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl WeightingNodes {
    pub fn bind(binding: &ParamBinding, wp: &WeightingParams) -> Self {
        WeightingNodes {
            w1: binding.node(wp.w1),
            b1: binding.node(wp.b1),
            w2: binding.node(wp.w2),
            b2: binding.node(wp.b2),
            w3: binding.node(wp.w3),
            b3: binding.node(wp.b3),
        }
    }
}

/// One LD module's nodes.
#[derive(Clone, Copy, Debug)]
pub struct LdNodes {
    pub decomposition: DecompositionNodes,
    pub weighting: WeightingNodes,
}

impl LdNodes {
    pub fn bind(binding: &ParamBinding, ld: &LdParams) -> Self {
        LdNodes {
            decomposition: DecompositionNodes::bind(binding, &ld.decomposition),
            weighting: WeightingNodes::bind(binding, &ld.weighting),
        }
    }
}

/// Fused single-transformation nodes.
#[derive(Clone, Copy, Debug)]
pub struct SingleTransformNodes {
    pub m: NodeId,
    pub b: NodeId,
    pub slope: NodeId,
}

impl SingleTransformNodes {
    pub fn bind(binding: &ParamBinding, st: &SingleTransformParams) -> Self {
        SingleTransformNodes {
            m: binding.node(st.m),
            b: binding.node(st.b),
            slope: binding.node(st.slope),
        }
    }
}

/// Domain head nodes.
#[derive(Clone, Copy, Debug)]
pub struct DomainHeadNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl DomainHeadNodes {
    pub fn bind(binding: &ParamBinding, dh: &DomainHeadParams) -> Self {
        DomainHeadNodes {
            w1: binding.node(dh.w1),
            b1: binding.node(dh.b1),
            w2: binding.node(dh.w2),
            b2: binding.node(dh.b2),
        }
    }
}

/// The whole decomposition stack bound onto one tape.
#[derive(Clone, Debug)]
pub enum StackNodes {
    None,
    Shared(LdNodes),
    Parallel(Vec<LdNodes>),
    SingleTransform(SingleTransformNodes),
}

impl StackNodes {
    pub fn bind(binding: &ParamBinding, stack: &DecompositionStack) -> Self {
        match stack {
            DecompositionStack::None => StackNodes::None,
            DecompositionStack::Shared(ld) => StackNodes::Shared(LdNodes::bind(binding, ld)),
            DecompositionStack::Parallel(lds) => {
                StackNodes::Parallel(lds.iter().map(|ld| LdNodes::bind(binding, ld)).collect())
            }
            DecompositionStack::SingleTransform(st) => {
                StackNodes::SingleTransform(SingleTransformNodes::bind(binding, st))
            }
        }
    }
}

/// One LD application: prototype, weight, and the weighted prototype.
#[derive(Clone, Copy, Debug)]
pub struct LdStep {
    pub prototype: NodeId,
    pub weight: NodeId,
    pub output: NodeId,
}

/// Record of one decomposition forward pass.
///
/// Invariants (checked per pass for the sequential mechanisms):
/// `inputs[0] = x0`, `inputs[i+1] = inputs[i] - outputs[i]`,
/// `r_e = sum(outputs)`, `r_d = x0 - r_e`. The prototype and weight lists are
/// empty for the fused single-transformation variant, which has no such
/// split.
#[derive(Clone, Debug)]
pub struct CascadeTrace {
    pub inputs: Vec<NodeId>,
    pub prototypes: Vec<NodeId>,
    pub weights: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
    pub r_e: NodeId,
    pub r_d: NodeId,
}

/// Encoder forward: `raw -> linear -> relu -> linear`.
pub fn encode(tape: &mut Tape, enc: &EncoderNodes, raw: &Tensor) -> Result<NodeId> {
    let x = tape.leaf(raw.clone());
    let h = tape.linear(enc.w1, x, Some(enc.b1))?;
    let h = tape.relu(h)?;
    tape.linear(enc.w2, h, Some(enc.b2))
}

/// Encoder nodes on one tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl EncoderNodes {
    pub fn bind(binding: &ParamBinding, enc: &EncoderParams) -> Self {
        EncoderNodes {
            w1: binding.node(enc.w1),
            b1: binding.node(enc.b1),
            w2: binding.node(enc.w2),
            b2: binding.node(enc.b2),
        }
    }
}

/// Prototype extraction: `p = PReLU(P x)` (no bias).
pub fn decompose(tape: &mut Tape, dp: &DecompositionNodes, x: NodeId) -> Result<NodeId> {
    let px = tape.linear(dp.p, x, None)?;
    tape.prelu(px, dp.slope)
}

/// Weight computation: three-layer perceptron on the concatenation `[x, p]`,
/// ReLU hiddens, linear scalar output.
pub fn weigh(tape: &mut Tape, wp: &WeightingNodes, x: NodeId, p: NodeId) -> Result<NodeId> {
    let xp = tape.concat(x, p)?;
    let h = tape.linear(wp.w1, xp, Some(wp.b1))?;
    let h = tape.relu(h)?;
    let h = tape.linear(wp.w2, h, Some(wp.b2))?;
    let h = tape.relu(h)?;
    let out = tape.linear(wp.w3, h, Some(wp.b3))?;
    tape.unit_to_scalar(out)
}

/// One LD module forward: `f = alpha * p`.
pub fn ld_forward(tape: &mut Tape, ld: &LdNodes, x: NodeId) -> Result<LdStep> {
    let prototype = decompose(tape, &ld.decomposition, x)?;
    let weight = weigh(tape, &ld.weighting, x, prototype)?;
    let output = tape.scale_by(weight, prototype)?;
    Ok(LdStep { prototype, weight, output })
}

/// Sequential cascade: the SAME LD node set applied `j` times to successive
/// residuals.
pub fn cascade_forward(tape: &mut Tape, ld: &LdNodes, x0: NodeId, j: usize) -> Result<CascadeTrace> {
    run_sequential(tape, x0, j, |tape, x| {
        let step = ld_forward(tape, ld, x)?;
        Ok((step.output, Some((step.prototype, step.weight))))
    })
}

/// Fused single-transformation module cascaded sequentially: each step
/// produces the weighted prototype directly (`f = PReLU(M x + b)`).
pub fn single_transform_forward(
    tape: &mut Tape,
    st: &SingleTransformNodes,
    x0: NodeId,
    j: usize,
) -> Result<CascadeTrace> {
    run_sequential(tape, x0, j, |tape, x| {
        let mx = tape.linear(st.m, x, Some(st.b))?;
        let f = tape.prelu(mx, st.slope)?;
        Ok((f, None))
    })
}

fn run_sequential(
    tape: &mut Tape,
    x0: NodeId,
    j: usize,
    mut step: impl FnMut(&mut Tape, NodeId) -> Result<(NodeId, Option<(NodeId, NodeId)>)>,
) -> Result<CascadeTrace> {
    if j == 0 {
        return Err(Error::Config("cascade depth j must be >= 1".into()));
    }
    let mut inputs = Vec::with_capacity(j);
    let mut prototypes = Vec::new();
    let mut weights = Vec::new();
    let mut outputs = Vec::with_capacity(j);
    let mut x = x0;
    for _ in 0..j {
        inputs.push(x);
        let (f, pw) = step(tape, x)?;
        if let Some((p, w)) = pw {
            prototypes.push(p);
            weights.push(w);
        }
        outputs.push(f);
        x = tape.sub(x, f)?;
    }
    let mut r_e = outputs[0];
    for &f in &outputs[1..] {
        r_e = tape.add(r_e, f)?;
    }
    let r_d = tape.sub(x0, r_e)?;
    check_telescoping(tape, x, r_d)?;
    Ok(CascadeTrace { inputs, prototypes, weights, outputs, r_e, r_d })
}

/// Telescoping invariant: the running residual after the last step must equal
/// `x0 - sum(outputs)` up to float reassociation.
fn check_telescoping(tape: &Tape, telescoped: NodeId, r_d: NodeId) -> Result<()> {
    let a = tape.value(telescoped).data();
    let b = tape.value(r_d).data();
    let scale = a
        .iter()
        .chain(b)
        .fold(1.0 as Real, |acc, &v| acc.max(v.abs()));
    let tol = Real::EPSILON * 256.0 * scale;
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > tol {
            return Err(Error::Internal(format!(
                "telescoping residual mismatch: |{x} - {y}| > {tol}"
            )));
        }
    }
    Ok(())
}

/// Parallel mechanism: `j` independent LD modules all consuming `x0`.
pub fn parallel_forward(tape: &mut Tape, lds: &[LdNodes], x0: NodeId) -> Result<CascadeTrace> {
    if lds.is_empty() {
        return Err(Error::Config("parallel variant requires at least one LD module".into()));
    }
    let mut inputs = Vec::with_capacity(lds.len());
    let mut prototypes = Vec::with_capacity(lds.len());
    let mut weights = Vec::with_capacity(lds.len());
    let mut outputs = Vec::with_capacity(lds.len());
    for ld in lds {
        inputs.push(x0);
        let step = ld_forward(tape, ld, x0)?;
        prototypes.push(step.prototype);
        weights.push(step.weight);
        outputs.push(step.output);
    }
    let mut r_e = outputs[0];
    for &f in &outputs[1..] {
        r_e = tape.add(r_e, f)?;
    }
    let r_d = tape.sub(x0, r_e)?;
    Ok(CascadeTrace { inputs, prototypes, weights, outputs, r_e, r_d })
}

/// Linear expression classifier over `r_e`.
pub fn expr_logits(tape: &mut Tape, w: NodeId, b: NodeId, r_e: NodeId) -> Result<NodeId> {
    tape.linear(w, r_e, Some(b))
}

/// Two-layer domain classifier over `r_d`.
pub fn domain_logits(tape: &mut Tape, dh: &DomainHeadNodes, r_d: NodeId) -> Result<NodeId> {
    let h = tape.linear(dh.w1, r_d, Some(dh.b1))?;
    let h = tape.relu(h)?;
    tape.linear(dh.w2, h, Some(dh.b2))
}

/// All per-sample forward results a loss needs.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub x0: NodeId,
    pub trace: CascadeTrace,
}

impl Model {
    /// Bind every parameter onto a tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        ParamBinding::bind_all(&self.store, tape)
    }

    /// Encoder + decomposition stack for one raw sample.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        raw: &Tensor,
    ) -> Result<SampleForward> {
        let enc = EncoderNodes::bind(binding, &self.encoder);
        let x0 = encode(tape, &enc, raw)?;
        let trace = match &self.stack {
            DecompositionStack::None => {
                // Baseline: r_e = x0, r_d = x0 - x0 = 0 vector.
                let r_d = tape.sub(x0, x0)?;
                CascadeTrace {
                    inputs: Vec::new(),
                    prototypes: Vec::new(),
                    weights: Vec::new(),
                    outputs: Vec::new(),
                    r_e: x0,
                    r_d,
                }
            }
            DecompositionStack::Shared(ld) => {
                let nodes = LdNodes::bind(binding, ld);
                cascade_forward(tape, &nodes, x0, self.config.j)?
            }
            DecompositionStack::Parallel(lds) => {
                let nodes: Vec<LdNodes> = lds.iter().map(|ld| LdNodes::bind(binding, ld)).collect();
                parallel_forward(tape, &nodes, x0)?
            }
            DecompositionStack::SingleTransform(st) => {
                let nodes = SingleTransformNodes::bind(binding, st);
                single_transform_forward(tape, &nodes, x0, self.config.j)?
            }
        };
        Ok(SampleForward { x0, trace })
    }

    /// Expression logits for a feature node.
    pub fn expr_logits(&self, tape: &mut Tape, binding: &ParamBinding, r_e: NodeId) -> Result<NodeId> {
        expr_logits(tape, binding.node(self.heads.expr_w), binding.node(self.heads.expr_b), r_e)
    }

    /// Domain logits for a residual node; `None` for the baseline (it has no
    /// domain head).
    pub fn domain_logits(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        r_d: NodeId,
    ) -> Result<Option<NodeId>> {
        match &self.heads.domain {
            None => Ok(None),
            Some(dh) => {
                let nodes = DomainHeadNodes::bind(binding, dh);
                Ok(Some(domain_logits(tape, &nodes, r_d)?))
            }
        }
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }
}
