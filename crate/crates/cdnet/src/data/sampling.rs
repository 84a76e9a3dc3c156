//! Batch and episode samplers.
//!
//! Both take an explicit RNG so sampling is a pure function of
//! `(dataset, config, rng state)`; parallel callers use independent RNGs.

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{seeded_shuffle, Split, SyntheticDataset};
use crate::error::{Error, Result};

/// A pre-training batch: samples from ONE randomly selected source domain.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain_id: usize,
    /// Indices into the dataset's sample table.
    pub samples: Vec<usize>,
}

/// Which class pool an episode draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassPool {
    /// Base classes of a randomly selected source domain (training).
    Base,
    /// Compound classes of the held-out target domain (testing).
    Novel,
}

/// One N-way K-shot task. Support and query sets are disjoint, every
/// episode-local class has exactly K support and Q query samples, and all
/// samples come from a single domain.
#[derive(Clone, Debug)]
pub struct Episode {
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub domain_id: usize,
    /// Episode-local class index -> global class id.
    pub class_map: Vec<usize>,
    /// `[n][k]` sample indices.
    pub support: Vec<Vec<usize>>,
    /// `[n][q]` sample indices.
    pub query: Vec<Vec<usize>>,
}

/// Draw a batch from one randomly selected source domain. Samples are drawn
/// without replacement when the domain pool is large enough; otherwise with
/// replacement (logged once per call).
pub fn sample_batch(
    dataset: &SyntheticDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DomainBatch> {
    if batch_size == 0 {
        return Err(Error::Sampling("batch_size must be >= 1".into()));
    }
    let domain_id = rng.random_range(0..dataset.config.domains);
    let mut pool: Vec<usize> = Vec::new();
    for class in dataset.classes_in(Split::Train, domain_id) {
        pool.extend_from_slice(dataset.cell(Split::Train, domain_id, class));
    }
    if pool.is_empty() {
        return Err(Error::Sampling(format!("domain {domain_id} has no training samples")));
    }
    let samples = if pool.len() >= batch_size {
        seeded_shuffle(&mut pool, rng);
        pool.truncate(batch_size);
        pool
    } else {
        warn!(
            "domain {domain_id} has only {} samples; batch of {batch_size} drawn with replacement",
            pool.len()
        );
        (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    Ok(DomainBatch { domain_id, samples })
}

/// Sample an N-way K-shot Q-query episode from one domain.
///
/// `Base` episodes pick a random source domain and draw from its base
/// classes; `Novel` episodes draw from the compound classes of the target
/// domain. Classes with fewer than `k + q` samples are an explicit error
/// naming the deficit.
pub fn sample_episode(
    dataset: &SyntheticDataset,
    n: usize,
    k: usize,
    q: usize,
    pool: ClassPool,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if n == 0 || k == 0 || q == 0 {
        return Err(Error::Sampling("episode needs n, k, q >= 1".into()));
    }
    let (split, domain_id) = match pool {
        ClassPool::Base => (Split::Train, rng.random_range(0..dataset.config.domains)),
        ClassPool::Novel => (Split::Test, dataset.target_domain()),
    };
    let mut classes = dataset.classes_in(split, domain_id);
    if classes.len() < n {
        return Err(Error::Sampling(format!(
            "domain {domain_id} offers {} classes, episode needs {n}",
            classes.len()
        )));
    }
    for &class in &classes {
        let have = dataset.cell(split, domain_id, class).len();
        if have < k + q {
            return Err(Error::Sampling(format!(
                "class {class} in domain {domain_id} has {have} samples, episode needs k + q = {}",
                k + q
            )));
        }
    }
    seeded_shuffle(&mut classes, rng);
    classes.truncate(n);

    let mut support = Vec::with_capacity(n);
    let mut query = Vec::with_capacity(n);
    for &class in &classes {
        let mut cell: Vec<usize> = dataset.cell(split, domain_id, class).to_vec();
        seeded_shuffle(&mut cell, rng);
        support.push(cell[..k].to_vec());
        query.push(cell[k..k + q].to_vec());
    }
    Ok(Episode { n, k, q, domain_id, class_map: classes, support, query })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, GenConfig};
    use rand::SeedableRng;

    fn small_dataset() -> SyntheticDataset {
        let cfg = GenConfig {
            samples_per_class: 24,
            base_classes: 7,
            novel_classes: 8,
            raw_dim: 16,
            ..Default::default()
        };
        gen_dataset(&cfg, 42).unwrap()
    }

    #[test]
    fn batch_shares_one_domain_label() {
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&ds, 16, &mut rng).unwrap();
        assert_eq!(batch.samples.len(), 16);
        assert!(batch.samples.iter().all(|&i| ds.sample(i).y_d == batch.domain_id));
    }

    #[test]
    fn batch_without_replacement_has_distinct_indices() {
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&ds, 16, &mut rng).unwrap();
        let mut sorted = batch.samples.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
    }

    #[test]
    fn episode_counts_and_purity() {
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&ds, 5, 1, 16, ClassPool::Base, &mut rng).unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(ep.query.iter().map(Vec::len).sum::<usize>(), 80);
        for class_samples in ep.support.iter().chain(&ep.query) {
            for &idx in class_samples {
                assert_eq!(ds.sample(idx).y_d, ep.domain_id);
            }
        }
        // Episode-local labels map to the right global classes.
        for (local, &global) in ep.class_map.iter().enumerate() {
            for &idx in &ep.support[local] {
                assert_eq!(ds.sample(idx).y_e, global);
            }
        }
    }

    #[test]
    fn episode_infeasible_when_class_too_small() {
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = sample_episode(&ds, 5, 16, 16, ClassPool::Base, &mut rng).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("k + q"), "error should name the deficit: {msg}");
    }

    #[test]
    fn novel_episodes_use_target_domain_and_compound_classes() {
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = sample_episode(&ds, 5, 5, 10, ClassPool::Novel, &mut rng).unwrap();
        assert_eq!(ep.domain_id, ds.target_domain());
        for &global in &ep.class_map {
            assert!(global >= ds.base_class_count());
        }
    }

    #[test]
    fn support_and_query_disjoint_over_one_thousand_episodes() {
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..1000 {
            let pool = if i % 2 == 0 { ClassPool::Base } else { ClassPool::Novel };
            let ep = sample_episode(&ds, 4, 2, 3, pool, &mut rng).unwrap();
            let mut support: Vec<usize> = ep.support.iter().flatten().copied().collect();
            let query: Vec<usize> = ep.query.iter().flatten().copied().collect();
            support.sort_unstable();
            for q in query {
                assert!(support.binary_search(&q).is_err(), "support/query overlap at episode {i}");
            }
        }
    }

    #[test]
    fn domain_choice_is_roughly_uniform() {
        // Over 10,000 draws with 5 domains each count should be within 5
        // binomial standard deviations of 2,000 (sigma = 40).
        let ds = small_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = vec![0usize; ds.config.domains];
        for _ in 0..10_000 {
            let b = sample_batch(&ds, 2, &mut rng).unwrap();
            counts[b.domain_id] += 1;
        }
        for &c in &counts {
            assert!((c as i64 - 2000).abs() <= 200, "domain counts skewed: {counts:?}");
        }
    }

    #[test]
    fn single_domain_dataset_always_chooses_it() {
        let cfg = GenConfig {
            domains: 1,
            samples_per_class: 8,
            base_classes: 4,
            novel_classes: 3,
            raw_dim: 8,
            ..Default::default()
        };
        let ds = gen_dataset(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            assert_eq!(sample_batch(&ds, 4, &mut rng).unwrap().domain_id, 0);
        }
    }
}
