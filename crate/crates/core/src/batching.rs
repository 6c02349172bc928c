//! Aligned `C × K` episodes over both modalities.

use rand::seq::index;
use rand::Rng;

use crate::data::{Dataset, Modality, Split};
use crate::error::{DcaError, Result};

/// One mini-batch: `C` classes with `K` sketches and `K` shapes each.
///
/// Both item lists follow the label layout `[y₁ ×K, y₂ ×K, …, y_C ×K]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeBatch {
    pub class_ids: Vec<usize>,
    pub per_class: usize,
    /// Dataset indices of sketches.
    pub sketch_items: Vec<usize>,
    /// Dataset indices of shapes.
    pub shape_items: Vec<usize>,
}

impl EpisodeBatch {
    pub fn labels(&self) -> Vec<usize> {
        self.class_ids
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, self.per_class))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.class_ids.len() * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Per-class sample pools for episode construction.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    classes_per_batch: usize,
    per_class: usize,
    /// `(label, sketch pool, shape pool)` for every class with at least one
    /// sample of each modality.
    eligible: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

impl EpisodeSampler {
    /// Builds pools from samples tagged `split` (all samples when `None`).
    pub fn new(dataset: &Dataset, split: Option<Split>, classes_per_batch: usize, per_class: usize) -> Result<Self> {
        if classes_per_batch < 2 || per_class < 2 {
            return Err(DcaError::Sampling(format!(
                "episodes need C >= 2 and K >= 2, got C={classes_per_batch}, K={per_class}"
            )));
        }
        let sketches = dataset.by_class(Modality::Sketch, split);
        let shapes = dataset.by_class(Modality::Shape, split);
        let eligible: Vec<_> = sketches
            .into_iter()
            .zip(shapes)
            .enumerate()
            .filter(|(_, (sk, sh))| !sk.is_empty() && !sh.is_empty())
            .map(|(label, (sk, sh))| (label, sk, sh))
            .collect();
        if eligible.len() < classes_per_batch {
            return Err(DcaError::Sampling(format!(
                "only {} classes have both sketches and shapes, need C={classes_per_batch}",
                eligible.len()
            )));
        }
        Ok(EpisodeSampler {
            classes_per_batch,
            per_class,
            eligible,
        })
    }

    pub fn num_eligible(&self) -> usize {
        self.eligible.len()
    }

    fn draw(pool: &[usize], k: usize, rng: &mut impl Rng, out: &mut Vec<usize>) {
        if pool.len() >= k {
            out.extend(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
        } else {
            out.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }

    /// Classes uniformly without replacement; items uniformly without
    /// replacement when a pool holds at least `K`, with replacement
    /// otherwise. Sketches and shapes are drawn independently.
    pub fn sample(&self, rng: &mut impl Rng) -> EpisodeBatch {
        let chosen = index::sample(rng, self.eligible.len(), self.classes_per_batch);
        let n = self.classes_per_batch * self.per_class;
        let mut batch = EpisodeBatch {
            class_ids: Vec::with_capacity(self.classes_per_batch),
            per_class: self.per_class,
            sketch_items: Vec::with_capacity(n),
            shape_items: Vec::with_capacity(n),
        };
        for c in chosen {
            let (label, sketches, shapes) = &self.eligible[c];
            batch.class_ids.push(*label);
            Self::draw(sketches, self.per_class, rng, &mut batch.sketch_items);
            Self::draw(shapes, self.per_class, rng, &mut batch.shape_items);
        }
        batch
    }
}

/// One-off episode draw.
pub fn sample_episode(
    dataset: &Dataset,
    split: Option<Split>,
    classes_per_batch: usize,
    per_class: usize,
    rng: &mut impl Rng,
) -> Result<EpisodeBatch> {
    Ok(EpisodeSampler::new(dataset, split, classes_per_batch, per_class)?.sample(rng))
}
