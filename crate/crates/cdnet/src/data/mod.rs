//! Synthetic multi-source-domain dataset generation.
//!
//! Base classes are Gaussian clouds around well-separated means in raw space;
//! compound (novel) classes are convex mixtures of two base means, so they
//! are related to — but distinct from — the base classes, which is exactly
//! the structure the transfer method needs. Each source domain applies its
//! own well-conditioned affine transform; a held-out target domain transform
//! provides the cross-domain test split.

mod io;
mod sampling;

pub use io::{export_dataset, import_dataset};
pub use sampling::{sample_batch, sample_episode, ClassPool, DomainBatch, Episode};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Dataset generation parameters. Defaults mirror the reference setting:
/// 7 base classes (one per basic category), 5 source domains (one per source
/// dataset), with a held-out target domain for testing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Number of base classes (`C_e`).
    pub base_classes: usize,
    /// Number of source domains (`C_d`).
    pub domains: usize,
    /// Number of compound (novel) test classes.
    pub novel_classes: usize,
    /// Raw feature dimension.
    pub raw_dim: usize,
    /// Samples per (class, domain) pair.
    pub samples_per_class: usize,
    /// Mean separation in units of the noise scale ("easy" 5.0, "hard" 2.0).
    pub separation: Real,
    /// Gaussian noise scale sigma.
    pub noise_scale: Real,
    /// Strength of the per-domain affine perturbation, in [0, 0.98).
    pub domain_spread: Real,
    /// Strength of the held-out target domain's perturbation.
    pub target_shift: Real,
    /// Compound mixing coefficient range.
    pub mix_low: Real,
    pub mix_high: Real,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            base_classes: 7,
            domains: 5,
            novel_classes: 10,
            raw_dim: 32,
            samples_per_class: 200,
            separation: 5.0,
            noise_scale: 1.0,
            domain_spread: 0.4,
            target_shift: 0.6,
            mix_low: 0.35,
            mix_high: 0.65,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.base_classes < 2 {
            return cfg("need at least 2 base classes".into());
        }
        if self.domains < 1 {
            return cfg("need at least 1 source domain".into());
        }
        if self.base_classes > self.raw_dim {
            return cfg(format!(
                "infeasible geometry: {} base classes cannot be placed on orthogonal directions \
                 in {} raw dimensions",
                self.base_classes, self.raw_dim
            ));
        }
        let max_pairs = self.base_classes * (self.base_classes - 1) / 2;
        if self.novel_classes > max_pairs {
            return cfg(format!(
                "infeasible geometry: {} compound classes requested but only {} distinct base \
                 pairs exist",
                self.novel_classes, max_pairs
            ));
        }
        if !(self.separation > 0.0) {
            return cfg("separation must be positive".into());
        }
        if self.noise_scale < 0.0 {
            return cfg("noise_scale must be non-negative".into());
        }
        if !(0.0..0.98).contains(&self.domain_spread) || !(0.0..0.98).contains(&self.target_shift) {
            return cfg("domain_spread and target_shift must lie in [0, 0.98)".into());
        }
        if !(self.mix_low > 0.0 && self.mix_low <= self.mix_high && self.mix_high < 1.0) {
            return cfg("compound mix range must satisfy 0 < low <= high < 1".into());
        }
        if self.samples_per_class == 0 {
            return cfg("samples_per_class must be >= 1".into());
        }
        Ok(())
    }
}

/// How a class's raw-space mean is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassGenerator {
    /// Base class: an explicit mean vector.
    Base { mean: Vec<Real> },
    /// Compound class: `t * mean(c1) + (1 - t) * mean(c2)`.
    Compound { parents: (usize, usize), mix: Real },
}

/// One class of the benchmark. Base and compound class id ranges are
/// disjoint: base ids are `0..base_classes`, compound ids follow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub name: String,
    pub generator: ClassGenerator,
}

impl ClassSpec {
    pub fn is_base(&self) -> bool {
        matches!(self.generator, ClassGenerator::Base { .. })
    }
}

/// One domain's affine transform `x -> A x + o` plus its noise scale.
/// `A = I + s * G / ||G||_F` with `s < 0.98`, which bounds the condition
/// number by `(1 + s) / (1 - s) < 100`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Row-major `raw_dim x raw_dim` transform.
    pub transform: Vec<Real>,
    pub offset: Vec<Real>,
    pub noise_scale: Real,
}

impl DomainSpec {
    pub fn apply(&self, raw_dim: usize, x: &[Real]) -> Vec<Real> {
        let mut out = self.offset.clone();
        for r in 0..raw_dim {
            let row = &self.transform[r * raw_dim..(r + 1) * raw_dim];
            let mut acc = 0.0;
            for c in 0..raw_dim {
                acc += row[c] * x[c];
            }
            out[r] += acc;
        }
        out
    }
}

/// One labelled sample: raw feature vector, unified class label, domain
/// label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub raw: Vec<Real>,
    pub y_e: usize,
    pub y_d: usize,
}

/// Train/test split tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// The generated benchmark. Train split: base classes across the source
/// domains. Test split: compound classes in the held-out target domain
/// (domain id = `domains`).
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: GenConfig,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub domains: Vec<DomainSpec>,
    /// Per source domain: the domain-local ordering of base class names.
    pub label_tables: Vec<Vec<String>>,
    pub samples: Vec<(Split, Sample)>,
    /// (split, domain, class) -> sample indices.
    index: BTreeMap<(Split, usize, usize), Vec<usize>>,
}

impl SyntheticDataset {
    /// Sample indices for one (split, domain, class) cell.
    pub fn cell(&self, split: Split, domain: usize, class: usize) -> &[usize] {
        self.index.get(&(split, domain, class)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Class ids available with at least one sample in a (split, domain).
    pub fn classes_in(&self, split: Split, domain: usize) -> Vec<usize> {
        self.index
            .keys()
            .filter(|(s, d, _)| *s == split && *d == domain)
            .map(|(_, _, c)| *c)
            .collect()
    }

    pub fn sample(&self, idx: usize) -> &Sample {
        &self.samples[idx].1
    }

    /// Id of the held-out target domain.
    pub fn target_domain(&self) -> usize {
        self.config.domains
    }

    pub fn base_class_count(&self) -> usize {
        self.config.base_classes
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index.clear();
        for (i, (split, sample)) in self.samples.iter().enumerate() {
            self.index.entry((*split, sample.y_d, sample.y_e)).or_default().push(i);
        }
    }
}

/// Unify per-domain label tables against a global ordered name list.
///
/// Returns, per domain, the mapping `local index -> global index`. Each
/// domain's list must be a subset of the global list (domains may lack some
/// classes); unknown names are a configuration error.
pub fn unify_labels(
    global_names: &[String],
    per_domain_tables: &[Vec<String>],
) -> Result<Vec<Vec<usize>>> {
    let mut mappings = Vec::with_capacity(per_domain_tables.len());
    for (domain, table) in per_domain_tables.iter().enumerate() {
        let mut mapping = Vec::with_capacity(table.len());
        for name in table {
            let global = global_names.iter().position(|g| g == name).ok_or_else(|| {
                Error::Config(format!("domain {domain}: unknown class name `{name}`"))
            })?;
            mapping.push(global);
        }
        // Local labels must be unambiguous.
        let mut dedup = mapping.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != mapping.len() {
            return Err(Error::Config(format!("domain {domain}: duplicate class names in table")));
        }
        mappings.push(mapping);
    }
    Ok(mappings)
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<Real> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal directions via Gram-Schmidt on standard normal draws.
fn orthonormal_directions(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Result<Vec<Vec<Real>>> {
    let mut basis: Vec<Vec<Real>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while basis.len() < count {
        attempts += 1;
        if attempts > count * 64 {
            return Err(Error::Config(
                "infeasible geometry: could not orthogonalize class directions".into(),
            ));
        }
        let mut v = normal_vec(rng, d);
        for b in &basis {
            let dot: Real = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm: Real = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    Ok(basis)
}

fn make_domain(rng: &mut ChaCha8Rng, domain_id: usize, strength: Real, cfg: &GenConfig) -> DomainSpec {
    let d = cfg.raw_dim;
    let g = normal_vec(rng, d * d);
    let fro: Real = g.iter().map(|x| x * x).sum::<Real>().sqrt();
    let scale = if fro > 0.0 { strength / fro } else { 0.0 };
    let mut transform = vec![0.0; d * d];
    for (i, t) in transform.iter_mut().enumerate() {
        let diag = if i % (d + 1) == 0 { 1.0 } else { 0.0 };
        *t = diag + scale * g[i];
    }
    let sigma = cfg.noise_scale.max(effective_sigma_floor(cfg));
    let offset: Vec<Real> = normal_vec(rng, d).into_iter().map(|x| x * strength * sigma).collect();
    DomainSpec { domain_id, transform, offset, noise_scale: cfg.noise_scale }
}

/// With sigma = 0 the separation constraint `dist >= separation * sigma` is
/// vacuous; fall back to absolute units so the means still spread out.
fn effective_sigma_floor(cfg: &GenConfig) -> Real {
    if cfg.noise_scale > 0.0 {
        cfg.noise_scale
    } else {
        1.0
    }
}

/// Generate the benchmark. Deterministic: the same `(config, seed)` pair
/// yields a byte-identical dataset.
pub fn gen_dataset(config: &GenConfig, seed: u64) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.raw_dim;
    let sigma = effective_sigma_floor(config);

    // Base means on orthogonal directions at radius separation*sigma/sqrt(2),
    // so every pairwise distance equals separation*sigma exactly.
    let radius = config.separation * sigma / (2.0 as Real).sqrt();
    let directions = orthonormal_directions(&mut rng, config.base_classes, d)?;
    let mut classes: Vec<ClassSpec> = directions
        .into_iter()
        .enumerate()
        .map(|(i, dir)| ClassSpec {
            class_id: i,
            name: format!("base_{i}"),
            generator: ClassGenerator::Base { mean: dir.into_iter().map(|x| x * radius).collect() },
        })
        .collect();

    // Compound classes: distinct base pairs in a fixed enumeration order,
    // shuffled, each with its own mixing coefficient.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for a in 0..config.base_classes {
        for b in (a + 1)..config.base_classes {
            pairs.push((a, b));
        }
    }
    seeded_shuffle(&mut pairs, &mut rng);
    for (i, &(a, b)) in pairs.iter().take(config.novel_classes).enumerate() {
        let mix = rng.random_range(config.mix_low..=config.mix_high);
        classes.push(ClassSpec {
            class_id: config.base_classes + i,
            name: format!("compound_{a}_{b}"),
            generator: ClassGenerator::Compound { parents: (a, b), mix },
        });
    }

    // Source domains plus the held-out target domain.
    let mut domains: Vec<DomainSpec> = (0..config.domains)
        .map(|i| make_domain(&mut rng, i, config.domain_spread, config))
        .collect();
    domains.push(make_domain(&mut rng, config.domains, config.target_shift, config));

    // Per-domain label tables: a seeded permutation of the base class names,
    // unified back to global indices through the mapping function.
    let global_names: Vec<String> =
        classes.iter().take(config.base_classes).map(|c| c.name.clone()).collect();
    let mut label_tables = Vec::with_capacity(config.domains);
    for _ in 0..config.domains {
        let mut table = global_names.clone();
        seeded_shuffle(&mut table, &mut rng);
        label_tables.push(table);
    }
    let mappings = unify_labels(&global_names, &label_tables)?;

    let class_mean = |class: &ClassSpec| -> Vec<Real> {
        match &class.generator {
            ClassGenerator::Base { mean } => mean.clone(),
            ClassGenerator::Compound { parents: (a, b), mix } => {
                let ma = match &classes[*a].generator {
                    ClassGenerator::Base { mean } => mean,
                    _ => unreachable!("compound parents are base classes"),
                };
                let mb = match &classes[*b].generator {
                    ClassGenerator::Base { mean } => mean,
                    _ => unreachable!("compound parents are base classes"),
                };
                ma.iter().zip(mb).map(|(x, y)| mix * x + (1.0 - mix) * y).collect()
            }
        }
    };

    // Train split: base classes through each source domain's local table.
    let mut samples: Vec<(Split, Sample)> = Vec::new();
    for (domain_idx, mapping) in mappings.iter().enumerate() {
        let domain = &domains[domain_idx];
        for &global_class in mapping {
            let mean = class_mean(&classes[global_class]);
            for _ in 0..config.samples_per_class {
                let raw = noisy_transformed(&mut rng, domain, &mean, config);
                samples.push((
                    Split::Train,
                    Sample { raw, y_e: global_class, y_d: domain_idx },
                ));
            }
        }
    }

    // Test split: compound classes in the target domain.
    let target = &domains[config.domains];
    for class in classes.iter().skip(config.base_classes) {
        let mean = class_mean(class);
        for _ in 0..config.samples_per_class {
            let raw = noisy_transformed(&mut rng, target, &mean, config);
            samples.push((
                Split::Test,
                Sample { raw, y_e: class.class_id, y_d: config.domains },
            ));
        }
    }

    let mut dataset = SyntheticDataset {
        config: config.clone(),
        seed,
        classes,
        domains,
        label_tables,
        samples,
        index: BTreeMap::new(),
    };
    dataset.rebuild_index();
    Ok(dataset)
}

fn noisy_transformed(
    rng: &mut ChaCha8Rng,
    domain: &DomainSpec,
    mean: &[Real],
    cfg: &GenConfig,
) -> Vec<Real> {
    let noisy: Vec<Real> = mean
        .iter()
        .map(|&m| {
            let eps: Real = StandardNormal.sample(rng);
            m + cfg.noise_scale * eps
        })
        .collect();
    domain.apply(cfg.raw_dim, &noisy)
}

/// Deterministic Fisher-Yates shuffle (avoids depending on slice adapter
/// traits whose draw pattern might change across rand versions).
pub(crate) fn seeded_shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unify_identity_when_tables_match() {
        let names: Vec<String> = (0..3).map(|i| format!("base_{i}")).collect();
        let mappings = unify_labels(&names, &[names.clone(), names.clone()]).unwrap();
        assert_eq!(mappings, vec![vec![0, 1, 2], vec![0, 1, 2]]);
    }

    #[test]
    fn unify_reversed_table_is_reversing_permutation() {
        let names: Vec<String> = (0..4).map(|i| format!("base_{i}")).collect();
        let mut reversed = names.clone();
        reversed.reverse();
        let mappings = unify_labels(&names, &[reversed]).unwrap();
        assert_eq!(mappings, vec![vec![3, 2, 1, 0]]);
    }

    #[test]
    fn unify_partial_domain_maps_present_classes_only() {
        let names: Vec<String> = (0..7).map(|i| format!("base_{i}")).collect();
        let missing_six: Vec<String> =
            names.iter().filter(|n| *n != "base_6").cloned().collect();
        let mappings = unify_labels(&names, &[missing_six]).unwrap();
        assert_eq!(mappings[0].len(), 6);
        assert!(!mappings[0].contains(&6));
    }

    #[test]
    fn unify_unknown_name_is_config_error() {
        let names = vec!["base_0".to_string()];
        let err = unify_labels(&names, &[vec!["mystery".to_string()]]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn base_means_satisfy_separation() {
        let cfg = GenConfig { base_classes: 5, raw_dim: 16, samples_per_class: 1, ..Default::default() };
        let ds = gen_dataset(&cfg, 3).unwrap();
        let means: Vec<&Vec<Real>> = ds
            .classes
            .iter()
            .filter_map(|c| match &c.generator {
                ClassGenerator::Base { mean } => Some(mean),
                _ => None,
            })
            .collect();
        for i in 0..means.len() {
            for j in (i + 1)..means.len() {
                let dist: Real = means[i]
                    .iter()
                    .zip(means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<Real>()
                    .sqrt();
                assert!(dist >= cfg.separation * cfg.noise_scale - 1e-9);
            }
        }
    }

    #[test]
    fn zero_noise_yields_exact_transformed_means() {
        let cfg = GenConfig {
            noise_scale: 0.0,
            samples_per_class: 3,
            base_classes: 3,
            novel_classes: 2,
            raw_dim: 8,
            ..Default::default()
        };
        let ds = gen_dataset(&cfg, 5).unwrap();
        for domain in 0..cfg.domains {
            for &class in &ds.classes_in(Split::Train, domain) {
                let cell = ds.cell(Split::Train, domain, class);
                let first = &ds.sample(cell[0]).raw;
                for &idx in cell {
                    assert_eq!(&ds.sample(idx).raw, first);
                }
            }
        }
    }

    #[test]
    fn compound_midpoint_matches_affine_midpoint_of_transformed_means() {
        // t = 0.5: the noiseless compound mean must equal the midpoint of the
        // transformed base means (affine maps preserve midpoints).
        let cfg = GenConfig {
            noise_scale: 0.0,
            samples_per_class: 1,
            base_classes: 4,
            novel_classes: 3,
            raw_dim: 8,
            mix_low: 0.5,
            mix_high: 0.5,
            ..Default::default()
        };
        let ds = gen_dataset(&cfg, 11).unwrap();
        let target = ds.target_domain();
        for class in ds.classes.iter().filter(|c| !c.is_base()) {
            let (a, b) = match class.generator {
                ClassGenerator::Compound { parents, .. } => parents,
                _ => unreachable!(),
            };
            let mean_of = |id: usize| match &ds.classes[id].generator {
                ClassGenerator::Base { mean } => mean.clone(),
                _ => unreachable!(),
            };
            let ta = ds.domains[target].apply(cfg.raw_dim, &mean_of(a));
            let tb = ds.domains[target].apply(cfg.raw_dim, &mean_of(b));
            let midpoint: Vec<Real> = ta.iter().zip(&tb).map(|(x, y)| 0.5 * (x + y)).collect();
            let cell = ds.cell(Split::Test, target, class.class_id);
            let sample = &ds.sample(cell[0]).raw;
            for (s, m) in sample.iter().zip(&midpoint) {
                assert!((s - m).abs() < 1e-9, "compound sample differs from affine midpoint");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig { samples_per_class: 4, ..Default::default() };
        let a = gen_dataset(&cfg, 77).unwrap();
        let b = gen_dataset(&cfg, 77).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.domains, b.domains);
    }

    #[test]
    fn infeasible_geometry_is_config_error() {
        let cfg = GenConfig { base_classes: 40, raw_dim: 32, ..Default::default() };
        assert!(matches!(gen_dataset(&cfg, 0), Err(Error::Config(_))));
        let cfg = GenConfig { novel_classes: 1000, ..Default::default() };
        assert!(matches!(gen_dataset(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn base_and_novel_class_ids_are_disjoint() {
        let cfg = GenConfig { samples_per_class: 2, ..Default::default() };
        let ds = gen_dataset(&cfg, 9).unwrap();
        let base_ids: Vec<usize> =
            ds.classes.iter().filter(|c| c.is_base()).map(|c| c.class_id).collect();
        let novel_ids: Vec<usize> =
            ds.classes.iter().filter(|c| !c.is_base()).map(|c| c.class_id).collect();
        assert!(base_ids.iter().all(|id| !novel_ids.contains(id)));
        // No novel class id appears in the train split.
        for (split, sample) in &ds.samples {
            match split {
                Split::Train => assert!(base_ids.contains(&sample.y_e)),
                Split::Test => assert!(novel_ids.contains(&sample.y_e)),
            }
        }
    }

    #[test]
    fn domain_transform_condition_bound_holds() {
        // ||A - I||_2 <= ||A - I||_F = s, so singular values lie in
        // [1 - s, 1 + s] and the condition number is bounded well below 100.
        let cfg = GenConfig::default();
        let ds = gen_dataset(&cfg, 21).unwrap();
        for domain in &ds.domains {
            let d = cfg.raw_dim;
            let mut fro = 0.0;
            for i in 0..d * d {
                let diag = if i % (d + 1) == 0 { 1.0 } else { 0.0 };
                let delta = domain.transform[i] - diag;
                fro += delta * delta;
            }
            let s = (fro as Real).sqrt();
            assert!(s < 0.98, "domain {} perturbation too strong: {s}", domain.domain_id);
            let kappa_bound = (1.0 + s) / (1.0 - s);
            assert!(kappa_bound < 100.0);
        }
    }
}
