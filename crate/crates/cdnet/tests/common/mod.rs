//! Shared test support: an independent reference implementation of every
//! forward computation and loss, written as plain loops over `Vec<Real>`.
//! These never touch the gradient tape, so they serve as oracles for the
//! taped implementation.

#![allow(dead_code)]

use cdnet::data::{GenConfig, SyntheticDataset};
use cdnet::model::{Model, ModelConfig, Variant};
use cdnet::numerics::{Shape, Tensor};
use cdnet::Real;

pub fn tensor<'m>(model: &'m Model, name: &str) -> &'m Tensor {
    let id = model
        .store
        .id_by_name(name)
        .unwrap_or_else(|| panic!("no parameter named `{name}`"));
    model.store.get(id)
}

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Real>,
}

pub fn mat(model: &Model, name: &str) -> Mat {
    let t = tensor(model, name);
    match t.shape() {
        Shape::Matrix { rows, cols } => Mat { rows, cols, data: t.data().to_vec() },
        other => panic!("{name} is {other}, expected matrix"),
    }
}

pub fn vecp(model: &Model, name: &str) -> Vec<Real> {
    tensor(model, name).data().to_vec()
}

pub fn scalarp(model: &Model, name: &str) -> Real {
    tensor(model, name).as_scalar()
}

pub fn matvec(m: &Mat, x: &[Real]) -> Vec<Real> {
    assert_eq!(m.cols, x.len());
    (0..m.rows)
        .map(|r| {
            let row = &m.data[r * m.cols..(r + 1) * m.cols];
            row.iter().zip(x).map(|(a, b)| a * b).sum()
        })
        .collect()
}

pub fn affine(m: &Mat, x: &[Real], b: &[Real]) -> Vec<Real> {
    matvec(m, x).iter().zip(b).map(|(y, c)| y + c).collect()
}

pub fn relu(x: &[Real]) -> Vec<Real> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn prelu(x: &[Real], a: Real) -> Vec<Real> {
    x.iter().map(|&v| if v > 0.0 { v } else { a * v }).collect()
}

pub fn sub(a: &[Real], b: &[Real]) -> Vec<Real> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[Real], b: &[Real]) -> Vec<Real> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(c: Real, v: &[Real]) -> Vec<Real> {
    v.iter().map(|&x| c * x).collect()
}

pub fn squared_l2(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Stable `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[Real], label: usize) -> Real {
    let m = logits.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse: Real = logits.iter().map(|&z| (z - m).exp()).sum::<Real>().ln() + m;
    lse - logits[label]
}

/// Reference two-layer encoder.
#[derive(Clone, Debug)]
pub struct RefEncoder {
    pub w1: Mat,
    pub b1: Vec<Real>,
    pub w2: Mat,
    pub b2: Vec<Real>,
}

impl RefEncoder {
    pub fn from_model(model: &Model) -> Self {
        RefEncoder {
            w1: mat(model, "encoder.w1"),
            b1: vecp(model, "encoder.b1"),
            w2: mat(model, "encoder.w2"),
            b2: vecp(model, "encoder.b2"),
        }
    }

    pub fn encode(&self, raw: &[Real]) -> Vec<Real> {
        let h = relu(&affine(&self.w1, raw, &self.b1));
        affine(&self.w2, &h, &self.b2)
    }
}

/// Reference LD module parameters.
#[derive(Clone, Debug)]
pub struct RefLd {
    pub p: Mat,
    pub slope: Real,
    pub w1: Mat,
    pub b1: Vec<Real>,
    pub w2: Mat,
    pub b2: Vec<Real>,
    pub w3: Mat,
    pub b3: Vec<Real>,
}

impl RefLd {
    pub fn from_model(model: &Model, prefix: &str) -> Self {
        RefLd {
            p: mat(model, &format!("{prefix}.decomp.p")),
            slope: scalarp(model, &format!("{prefix}.decomp.slope")),
            w1: mat(model, &format!("{prefix}.weight.w1")),
            b1: vecp(model, &format!("{prefix}.weight.b1")),
            w2: mat(model, &format!("{prefix}.weight.w2")),
            b2: vecp(model, &format!("{prefix}.weight.b2")),
            w3: mat(model, &format!("{prefix}.weight.w3")),
            b3: vecp(model, &format!("{prefix}.weight.b3")),
        }
    }

    pub fn decompose(&self, x: &[Real]) -> Vec<Real> {
        prelu(&matvec(&self.p, x), self.slope)
    }

    pub fn weigh(&self, x: &[Real], p: &[Real]) -> Real {
        let mut xp = x.to_vec();
        xp.extend_from_slice(p);
        let h = relu(&affine(&self.w1, &xp, &self.b1));
        let h = relu(&affine(&self.w2, &h, &self.b2));
        affine(&self.w3, &h, &self.b3)[0]
    }

    pub fn forward(&self, x: &[Real]) -> (Vec<Real>, Vec<Real>, Real) {
        let p = self.decompose(x);
        let alpha = self.weigh(x, &p);
        (scale(alpha, &p), p, alpha)
    }
}

/// Literal transcription of the sequential decomposition recurrences: the
/// step input is recomputed from scratch as `x0 - sum_{k<i} alpha_k p_k`
/// rather than carried forward, so the float path differs from the
/// implementation and agreement is to tolerance, not bitwise.
pub struct RefTrace {
    pub inputs: Vec<Vec<Real>>,
    pub prototypes: Vec<Vec<Real>>,
    pub weights: Vec<Real>,
    pub outputs: Vec<Vec<Real>>,
    pub r_e: Vec<Real>,
    pub r_d: Vec<Real>,
}

pub fn ref_cascade(ld: &RefLd, x0: &[Real], j: usize) -> RefTrace {
    let mut prototypes = Vec::new();
    let mut weights = Vec::new();
    let mut outputs: Vec<Vec<Real>> = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..j {
        let mut input = x0.to_vec();
        for output in outputs.iter().take(i) {
            input = sub(&input, output);
        }
        let (f, p, alpha) = ld.forward(&input);
        inputs.push(input);
        prototypes.push(p);
        weights.push(alpha);
        outputs.push(f);
    }
    let mut r_e = vec![0.0; x0.len()];
    for f in &outputs {
        r_e = add(&r_e, f);
    }
    let r_d = sub(x0, &r_e);
    RefTrace { inputs, prototypes, weights, outputs, r_e, r_d }
}

/// Reference single-transformation module.
pub struct RefSingle {
    pub m: Mat,
    pub b: Vec<Real>,
    pub slope: Real,
}

impl RefSingle {
    pub fn from_model(model: &Model) -> Self {
        RefSingle {
            m: mat(model, "single.m"),
            b: vecp(model, "single.b"),
            slope: scalarp(model, "single.slope"),
        }
    }

    pub fn step(&self, x: &[Real]) -> Vec<Real> {
        prelu(&affine(&self.m, x, &self.b), self.slope)
    }
}

pub fn ref_single_cascade(st: &RefSingle, x0: &[Real], j: usize) -> RefTrace {
    let mut outputs: Vec<Vec<Real>> = Vec::new();
    let mut inputs = Vec::new();
    for i in 0..j {
        let mut input = x0.to_vec();
        for output in outputs.iter().take(i) {
            input = sub(&input, output);
        }
        let f = st.step(&input);
        inputs.push(input);
        outputs.push(f);
    }
    let mut r_e = vec![0.0; x0.len()];
    for f in &outputs {
        r_e = add(&r_e, f);
    }
    let r_d = sub(x0, &r_e);
    RefTrace { inputs, prototypes: Vec::new(), weights: Vec::new(), outputs, r_e, r_d }
}

pub fn ref_parallel(lds: &[RefLd], x0: &[Real]) -> RefTrace {
    let mut prototypes = Vec::new();
    let mut weights = Vec::new();
    let mut outputs = Vec::new();
    for ld in lds {
        let (f, p, alpha) = ld.forward(x0);
        prototypes.push(p);
        weights.push(alpha);
        outputs.push(f);
    }
    let mut r_e = vec![0.0; x0.len()];
    for f in &outputs {
        r_e = add(&r_e, f);
    }
    let r_d = sub(x0, &r_e);
    RefTrace { inputs: vec![x0.to_vec(); lds.len()], prototypes, weights, outputs, r_e, r_d }
}

/// Reference domain head.
pub struct RefDomainHead {
    pub w1: Mat,
    pub b1: Vec<Real>,
    pub w2: Mat,
    pub b2: Vec<Real>,
}

impl RefDomainHead {
    pub fn from_model(model: &Model) -> Self {
        RefDomainHead {
            w1: mat(model, "head.domain.w1"),
            b1: vecp(model, "head.domain.b1"),
            w2: mat(model, "head.domain.w2"),
            b2: vecp(model, "head.domain.b2"),
        }
    }

    pub fn logits(&self, r_d: &[Real]) -> Vec<Real> {
        let h = relu(&affine(&self.w1, r_d, &self.b1));
        affine(&self.w2, &h, &self.b2)
    }
}

pub fn assert_close(a: &[Real], b: &[Real], tol: Real, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}: coord {i}: {x} vs {y} (tol {tol})");
    }
}

pub fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, Real::max)
}

/// A small sequential model for forward-oracle comparisons.
pub fn small_model(variant: Variant, j: usize, seed: u64) -> Model {
    Model::build(ModelConfig { raw_dim: 6, d: 4, c_e: 4, c_d: 3, j, variant, seed }).unwrap()
}

/// A small dataset for loss-level and training tests.
pub fn small_dataset(seed: u64) -> SyntheticDataset {
    let cfg = GenConfig {
        base_classes: 4,
        domains: 3,
        novel_classes: 3,
        raw_dim: 6,
        samples_per_class: 12,
        separation: 3.0,
        ..Default::default()
    };
    cdnet::data::gen_dataset(&cfg, seed).unwrap()
}
