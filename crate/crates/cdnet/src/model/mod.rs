//! Model: encoder, learn-to-decompose module, cascade variants, and heads.
//!
//! One LD module is two blocks: a decomposition block (square transform `P`
//! followed by PReLU, no bias) producing a prototype `p`, and a weighting
//! block (three-layer perceptron on `[x, p]`) producing its scalar weight.
//! The sequential cascade applies ONE shared LD parameter set J times to
//! successive residuals; the parallel variant owns J independent sets; the
//! single-transformation variant fuses both blocks into one affine+PReLU map.

mod checkpoint;
mod forward;

pub use checkpoint::{checkpoint_hash, Checkpoint};
pub use forward::{
    cascade_forward, decompose, domain_logits, encode, expr_logits, ld_forward, parallel_forward,
    single_transform_forward, weigh, CascadeTrace, DecompositionNodes, DomainHeadNodes,
    EncoderNodes, LdNodes, LdStep, SampleForward, SingleTransformNodes, StackNodes,
    WeightingNodes,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::params::{ParamId, ParamStore};

/// Structural variant of the decomposition stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No decomposition at all: `r_e = x0`, `r_d = 0` (prototype-network
    /// baseline).
    Baseline,
    /// One fused affine+PReLU transform applied sequentially.
    SingleTransform,
    /// J independent LD modules, all consuming `x0` directly.
    Parallel,
    /// One shared LD module applied sequentially (the real thing).
    Sequential,
}

/// Distance used by prototype classification. Squared Euclidean is the
/// default (smooth everywhere); argmax predictions agree under both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SquaredEuclidean,
    Euclidean,
}

impl Default for Metric {
    fn default() -> Self {
        Metric::SquaredEuclidean
    }
}

/// Everything needed to rebuild a model's parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input dimension of the raw synthetic features.
    pub raw_dim: usize,
    /// Cascade feature dimension (encoder output).
    pub d: usize,
    /// Number of unified base classes (expression head width).
    pub c_e: usize,
    /// Number of source domains (domain head width).
    pub c_d: usize,
    /// Number of cascaded LD applications; 0 for the baseline.
    pub j: usize,
    pub variant: Variant,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raw_dim == 0 || self.d == 0 || self.c_e == 0 {
            return Err(Error::Config("raw_dim, d and c_e must be >= 1".into()));
        }
        match self.variant {
            Variant::Baseline => {
                if self.j != 0 {
                    return Err(Error::Config("baseline variant requires j = 0".into()));
                }
            }
            _ => {
                if self.j == 0 {
                    return Err(Error::Config(format!(
                        "{:?} variant requires j >= 1",
                        self.variant
                    )));
                }
                if self.c_d == 0 {
                    return Err(Error::Config("decomposition variants require c_d >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Encoder: two affine layers `raw_dim -> d -> d` with a ReLU in between.
/// Stands in for the image backbone; any differentiable encoder exercises
/// the cascade.
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Decomposition block: square transform `P` (no bias) and one shared PReLU
/// slope.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionParams {
    pub p: ParamId,
    pub slope: ParamId,
}

/// Weighting block: three affine layers `2d -> d -> d/2 -> 1`, ReLU hidden
/// activations, linear scalar output (the weight is unbounded).
#[derive(Clone, Copy, Debug)]
pub struct WeightingParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// One learn-to-decompose module.
#[derive(Clone, Copy, Debug)]
pub struct LdParams {
    pub decomposition: DecompositionParams,
    pub weighting: WeightingParams,
}

/// Fused single-transformation module: affine `d -> d` plus PReLU.
#[derive(Clone, Copy, Debug)]
pub struct SingleTransformParams {
    pub m: ParamId,
    pub b: ParamId,
    pub slope: ParamId,
}

/// Domain classifier: two affine layers `d -> d/2 -> c_d` with ReLU.
#[derive(Clone, Copy, Debug)]
pub struct DomainHeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Classifier heads: a linear expression classifier and, for decomposition
/// variants, a two-layer domain classifier over the residual.
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub expr_w: ParamId,
    pub expr_b: ParamId,
    pub domain: Option<DomainHeadParams>,
}

/// The decomposition stack owned by a model.
#[derive(Clone, Debug)]
pub enum DecompositionStack {
    None,
    Shared(LdParams),
    Parallel(Vec<LdParams>),
    SingleTransform(SingleTransformParams),
}

/// A full model: parameter store plus typed handles into it.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub stack: DecompositionStack,
    pub heads: HeadParams,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / cols as Real).sqrt();
    let data: Vec<Real> = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

fn near_identity(rng: &mut ChaCha8Rng, d: usize, noise: Real) -> Tensor {
    let mut data = vec![0.0; d * d];
    for (i, v) in data.iter_mut().enumerate() {
        let diag = if i % (d + 1) == 0 { 1.0 } else { 0.0 };
        *v = diag + rng.random_range(-noise..noise);
    }
    Tensor::matrix(d, d, data).expect("finite init")
}

fn zero_vec(d: usize) -> Tensor {
    Tensor::zeros(crate::numerics::Shape::Vector(d))
}

/// Hidden width for the weighting block's second layer and the domain head.
fn half(d: usize) -> usize {
    (d / 2).max(1)
}

const PRELU_INIT: Real = 0.25;
const IDENTITY_NOISE: Real = 0.01;

impl Model {
    /// Build a freshly initialized model. Registration order is fixed and is
    /// the canonical parameter order for optimizer state and checkpoints.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d;

        let encoder = EncoderParams {
            w1: store.register("encoder.w1", kaiming_uniform(&mut rng, d, config.raw_dim)),
            b1: store.register("encoder.b1", zero_vec(d)),
            w2: store.register("encoder.w2", kaiming_uniform(&mut rng, d, d)),
            b2: store.register("encoder.b2", zero_vec(d)),
        };

        let register_ld = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str| LdParams {
            decomposition: DecompositionParams {
                p: store.register(format!("{prefix}.decomp.p"), near_identity(rng, d, IDENTITY_NOISE)),
                slope: store.register(
                    format!("{prefix}.decomp.slope"),
                    Tensor::scalar(PRELU_INIT).expect("finite init"),
                ),
            },
            weighting: WeightingParams {
                w1: store.register(format!("{prefix}.weight.w1"), kaiming_uniform(rng, d, 2 * d)),
                b1: store.register(format!("{prefix}.weight.b1"), zero_vec(d)),
                w2: store.register(format!("{prefix}.weight.w2"), kaiming_uniform(rng, half(d), d)),
                b2: store.register(format!("{prefix}.weight.b2"), zero_vec(half(d))),
                w3: store.register(format!("{prefix}.weight.w3"), kaiming_uniform(rng, 1, half(d))),
                b3: store.register(format!("{prefix}.weight.b3"), zero_vec(1)),
            },
        };

        let stack = match config.variant {
            Variant::Baseline => DecompositionStack::None,
            Variant::Sequential => DecompositionStack::Shared(register_ld(&mut store, &mut rng, "ld.shared")),
            Variant::Parallel => {
                let lds = (0..config.j)
                    .map(|i| register_ld(&mut store, &mut rng, &format!("ld.{i}")))
                    .collect();
                DecompositionStack::Parallel(lds)
            }
            Variant::SingleTransform => DecompositionStack::SingleTransform(SingleTransformParams {
                m: store.register("single.m", near_identity(&mut rng, d, IDENTITY_NOISE)),
                b: store.register("single.b", zero_vec(d)),
                slope: store.register("single.slope", Tensor::scalar(PRELU_INIT).expect("finite init")),
            }),
        };

        let expr_w = store.register("head.expr.w", kaiming_uniform(&mut rng, config.c_e, d));
        let expr_b = store.register("head.expr.b", zero_vec(config.c_e));
        let domain = match config.variant {
            Variant::Baseline => None,
            _ => Some(DomainHeadParams {
                w1: store.register("head.domain.w1", kaiming_uniform(&mut rng, half(d), d)),
                b1: store.register("head.domain.b1", zero_vec(half(d))),
                w2: store.register("head.domain.w2", kaiming_uniform(&mut rng, config.c_d, half(d))),
                b2: store.register("head.domain.b2", zero_vec(config.c_d)),
            }),
        };

        Ok(Model { config, store, encoder, stack, heads: HeadParams { expr_w, expr_b, domain } })
    }

    /// Number of distinct LD parameter sets in the registry: 1 for the
    /// sequential cascade, J for the parallel variant, 0 otherwise.
    pub fn ld_param_set_count(&self) -> usize {
        match &self.stack {
            DecompositionStack::Shared(_) => 1,
            DecompositionStack::Parallel(lds) => lds.len(),
            _ => 0,
        }
    }

    /// Parameter ids of the decomposition block(s) — the part frozen in
    /// `fix` regularization mode.
    pub fn decomposition_param_ids(&self) -> Vec<ParamId> {
        match &self.stack {
            DecompositionStack::None => Vec::new(),
            DecompositionStack::Shared(ld) => vec![ld.decomposition.p, ld.decomposition.slope],
            DecompositionStack::Parallel(lds) => lds
                .iter()
                .flat_map(|ld| [ld.decomposition.p, ld.decomposition.slope])
                .collect(),
            DecompositionStack::SingleTransform(st) => vec![st.m, st.b, st.slope],
        }
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        vec![self.encoder.w1, self.encoder.b1, self.encoder.w2, self.encoder.b2]
    }

    pub fn expr_head_param_ids(&self) -> Vec<ParamId> {
        vec![self.heads.expr_w, self.heads.expr_b]
    }

    /// Whether another model has identical architecture (shape-compatible
    /// parameters in the same order).
    pub fn compatible_with(&self, other: &Model) -> bool {
        let a = self.config;
        let b = other.config;
        a.raw_dim == b.raw_dim
            && a.d == b.d
            && a.c_e == b.c_e
            && a.c_d == b.c_d
            && a.j == b.j
            && a.variant == b.variant
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(variant: Variant, j: usize) -> ModelConfig {
        ModelConfig { raw_dim: 8, d: 8, c_e: 4, c_d: 3, j, variant, seed: 9 }
    }

    #[test]
    fn sequential_registers_exactly_one_ld_set() {
        let m = Model::build(cfg(Variant::Sequential, 3)).unwrap();
        assert_eq!(m.ld_param_set_count(), 1);
        assert!(m.store.id_by_name("ld.shared.decomp.p").is_some());
        assert!(m.store.id_by_name("ld.1.decomp.p").is_none());
    }

    #[test]
    fn parallel_registers_j_ld_sets() {
        let m = Model::build(cfg(Variant::Parallel, 4)).unwrap();
        assert_eq!(m.ld_param_set_count(), 4);
        assert!(m.store.id_by_name("ld.3.weight.w3").is_some());
    }

    #[test]
    fn baseline_exposes_zero_ld_parameters() {
        let m = Model::build(cfg(Variant::Baseline, 0)).unwrap();
        assert_eq!(m.ld_param_set_count(), 0);
        assert!(m.store.iter().all(|(_, name, _)| !name.starts_with("ld.")));
        assert!(m.heads.domain.is_none());
    }

    #[test]
    fn variant_j_consistency_is_validated() {
        assert!(Model::build(cfg(Variant::Baseline, 2)).is_err());
        assert!(Model::build(cfg(Variant::Sequential, 0)).is_err());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = Model::build(cfg(Variant::Sequential, 3)).unwrap();
        let b = Model::build(cfg(Variant::Sequential, 3)).unwrap();
        for (ia, ib) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.get(ia).data(), b.store.get(ib).data());
        }
    }

    #[test]
    fn decomposition_p_initialized_near_identity() {
        let m = Model::build(cfg(Variant::Sequential, 3)).unwrap();
        let ld = match &m.stack {
            DecompositionStack::Shared(ld) => *ld,
            _ => unreachable!(),
        };
        let p = m.store.get(ld.decomposition.p);
        for r in 0..8 {
            for c in 0..8 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((p.at(r, c) - expected).abs() <= IDENTITY_NOISE);
            }
        }
        assert_eq!(m.store.get(ld.decomposition.slope).as_scalar(), PRELU_INIT);
    }
}
