use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// The support set of one few-shot episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub shots: usize,
    pub seed: u64,
    /// Selected dataset indices, one ascending list per class.
    pub indices: Vec<Vec<usize>>,
}

impl EpisodeSpec {
    /// All support indices, class-major.
    pub fn flat(&self) -> Vec<usize> {
        self.indices.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `shots` indices per class without replacement. Class `c` uses its
/// own sample stream, so adding a class never changes another's draw.
pub fn sample_few_shot(labels: &[usize], classes: usize, shots: usize, seed: u64) -> Result<EpisodeSpec> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Validation(format!("label {l} at index {i} >= {classes} classes")));
        }
        by_class[l].push(i);
    }
    let mut indices = Vec::with_capacity(classes);
    for (class, mut pool) in by_class.into_iter().enumerate() {
        if pool.len() < shots {
            return Err(Error::InsufficientData {
                class,
                available: pool.len(),
                requested: shots,
            });
        }
        let mut rng = rng::stream(seed, Purpose::Sample, class as u32);
        rng::shuffle(&mut rng, &mut pool);
        pool.truncate(shots);
        pool.sort_unstable();
        indices.push(pool);
    }
    Ok(EpisodeSpec { shots, seed, indices })
}

/// Endless minibatch stream over a support set, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    support: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u32,
    seed: u64,
}

impl BatchCursor {
    pub fn new(support: Vec<usize>, seed: u64) -> Self {
        Self {
            support,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
            seed,
        }
    }

    /// Next `batch_size` indices; a batch may straddle two epochs.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        if self.support.is_empty() {
            return out;
        }
        while out.len() < batch_size {
            if self.pos == self.order.len() {
                self.order = self.support.clone();
                let mut rng = rng::stream(self.seed, Purpose::Shuffle, self.epoch);
                rng::shuffle(&mut rng, &mut self.order);
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(per_class: usize, classes: usize) -> Vec<usize> {
        (0..per_class * classes).map(|i| i % classes).collect()
    }

    #[test]
    fn one_shot_four_classes_gives_four_samples() {
        let ep = sample_few_shot(&labels(10, 4), 4, 1, 0).unwrap();
        assert_eq!(ep.len(), 4);
    }

    #[test]
    fn full_class_is_a_permutation() {
        let l = labels(5, 3);
        let ep = sample_few_shot(&l, 3, 5, 9).unwrap();
        for (c, idx) in ep.indices.iter().enumerate() {
            let all: Vec<usize> = (0..l.len()).filter(|&i| l[i] == c).collect();
            assert_eq!(idx, &all);
        }
    }

    #[test]
    fn seeded() {
        let l = labels(40, 4);
        let a = sample_few_shot(&l, 4, 4, 1).unwrap();
        assert_eq!(a, sample_few_shot(&l, 4, 4, 1).unwrap());
        assert_ne!(a, sample_few_shot(&l, 4, 4, 2).unwrap());
    }

    #[test]
    fn too_few_samples_names_class() {
        let mut l = labels(8, 3);
        l.retain(|&c| c != 2);
        l.push(2);
        let err = sample_few_shot(&l, 3, 4, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientData {
                class: 2,
                available: 1,
                requested: 4
            }
        ));
    }

    #[test]
    fn cursor_covers_each_epoch_once() {
        let mut cur = BatchCursor::new(vec![3, 5, 7, 9], 4);
        let mut seen: Vec<usize> = (0..2).flat_map(|_| cur.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![3, 5, 7, 9]);
        let mut odd = BatchCursor::new(vec![1, 2, 3], 0);
        let batches: Vec<Vec<usize>> = (0..3).map(|_| odd.next_batch(2)).collect();
        let mut flat: Vec<usize> = batches.concat();
        flat.sort_unstable();
        assert_eq!(flat, vec![1, 1, 2, 2, 3, 3]);
    }

    proptest! {
        #[test]
        fn exact_disjoint_in_bounds(
            per_class in 1usize..20,
            classes in 1usize..6,
            shots in 1usize..20,
            seed in any::<u64>(),
        ) {
            prop_assume!(shots <= per_class);
            let l = labels(per_class, classes);
            let ep = sample_few_shot(&l, classes, shots, seed).unwrap();
            prop_assert_eq!(ep.len(), shots * classes);
            for (c, idx) in ep.indices.iter().enumerate() {
                prop_assert_eq!(idx.len(), shots);
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < l.len() && l[i] == c));
            }
        }
    }
}
