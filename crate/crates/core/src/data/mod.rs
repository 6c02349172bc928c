//! Two-modality datasets: synthetic generation, feature-file I/O and
//! stratified splitting.

mod io;
mod synthetic;

pub use io::{
    load_features, read_features, read_features_binary, write_features, write_features_binary, FEATURE_HEADER,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{DcaError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Sketch,
    Shape,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Sketch => "sketch",
            Modality::Shape => "shape",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One sketch (a single feature row) or one shape (`N_v` view rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub modality: Modality,
    pub label: usize,
    pub split: Split,
    /// `1 × d` for sketches, `N_v × d` for shapes.
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub n_views: usize,
    /// Label `i` is named `class_names[i]`.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let count = |m| self.samples.iter().filter(|s| s.modality == m).count();
        write!(
            f,
            "{} classes, {} sketches, {} shapes ({} views), input_dim {}",
            self.class_names.len(),
            count(Modality::Sketch),
            count(Modality::Shape),
            self.n_views,
            self.input_dim
        )
    }
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let rows = match s.modality {
                Modality::Sketch => 1,
                Modality::Shape => self.n_views,
            };
            if s.features.shape() != [rows, self.input_dim] {
                return Err(DcaError::Contract(format!(
                    "sample {i}: feature shape {:?}, expected [{rows}, {}]",
                    s.features.shape(),
                    self.input_dim
                )));
            }
            if s.label >= self.class_names.len() {
                return Err(DcaError::Contract(format!("sample {i}: label {} out of range", s.label)));
            }
        }
        Ok(())
    }

    /// Indices of samples matching the filters.
    pub fn indices(&self, modality: Modality, split: Option<Split>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.modality == modality && split.is_none_or(|sp| s.split == sp))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-class index lists for one modality and split.
    pub fn by_class(&self, modality: Modality, split: Option<Split>) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for i in self.indices(modality, split) {
            out[self.samples[i].label].push(i);
        }
        out
    }

    /// Stacks the single rows of the listed sketches into a matrix.
    pub fn sketch_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.samples[i].features.data().to_vec()).collect();
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.input_dim]));
        }
        Tensor::from_rows(&rows)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    fn subset(&self, keep: impl Fn(usize) -> bool, split: Split) -> Dataset {
        Dataset {
            input_dim: self.input_dim,
            n_views: self.n_views,
            class_names: self.class_names.clone(),
            samples: self
                .samples
                .iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, s)| Sample {
                    split,
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Options for [`split`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub train_fraction: f64,
    pub test_fraction: f64,
    /// Require every class to keep at least one sample of each modality in
    /// both parts.
    pub require_both: bool,
}

/// Per-class, per-modality stratified split. Within each group the
/// samples are shuffled and the first `round(n·train_fraction)` go to the
/// training part. Sample order inside each part follows the input order.
pub fn split(dataset: &Dataset, opts: SplitOptions, rng: &mut impl Rng) -> Result<(Dataset, Dataset)> {
    let SplitOptions {
        train_fraction,
        test_fraction,
        require_both,
    } = opts;
    if !(0.0..=1.0).contains(&train_fraction) || ((train_fraction + test_fraction) - 1.0).abs() > 1e-9 {
        return Err(DcaError::Config(format!(
            "split fractions must be in [0,1] and sum to 1, got {train_fraction} and {test_fraction}"
        )));
    }
    let mut to_train = vec![false; dataset.samples.len()];
    for modality in [Modality::Sketch, Modality::Shape] {
        for (label, mut members) in dataset.by_class(modality, None).into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let n = members.len();
            let n_train = (n as f64 * train_fraction).round() as usize;
            if require_both && (n_train == 0 || n_train == n) {
                return Err(DcaError::Split {
                    class: dataset.class_names[label].clone(),
                    reason: format!(
                        "has {n} {} samples, too few for a {train_fraction}/{test_fraction} split",
                        modality.tag()
                    ),
                });
            }
            members.shuffle(rng);
            for &i in &members[..n_train] {
                to_train[i] = true;
            }
        }
    }
    let train = dataset.subset(|i| to_train[i], Split::Train);
    let test = dataset.subset(|i| !to_train[i], Split::Test);
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(per_class: usize) -> Dataset {
        let mut samples = Vec::new();
        for label in 0..2 {
            for k in 0..per_class {
                samples.push(Sample {
                    modality: Modality::Sketch,
                    label,
                    split: Split::Train,
                    features: Tensor::new(vec![1, 1], vec![(label * 1000 + k) as f64]).unwrap(),
                });
            }
        }
        Dataset {
            input_dim: 1,
            n_views: 1,
            class_names: vec!["a".into(), "b".into()],
            samples,
        }
    }

    #[test]
    fn split_fifty_thirty() {
        let ds = toy(80);
        let opts = SplitOptions {
            train_fraction: 0.625,
            test_fraction: 0.375,
            require_both: true,
        };
        let (train, test) = split(&ds, opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for class in 0..2 {
            assert_eq!(train.by_class(Modality::Sketch, None)[class].len(), 50);
            assert_eq!(test.by_class(Modality::Sketch, None)[class].len(), 30);
        }
        assert!(train.samples.iter().all(|s| s.split == Split::Train));
        assert!(test.samples.iter().all(|s| s.split == Split::Test));
    }

    #[test]
    fn split_is_partition() {
        let ds = toy(7);
        let opts = SplitOptions {
            train_fraction: 0.6,
            test_fraction: 0.4,
            require_both: true,
        };
        let (train, test) = split(&ds, opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut values: Vec<f64> = train
            .samples
            .iter()
            .chain(&test.samples)
            .map(|s| s.features.item())
            .collect();
        values.sort_by(f64::total_cmp);
        let mut original: Vec<f64> = ds.samples.iter().map(|s| s.features.item()).collect();
        original.sort_by(f64::total_cmp);
        assert_eq!(values, original);
    }

    #[test]
    fn degenerate_split_all_train() {
        let ds = toy(3);
        let opts = SplitOptions {
            train_fraction: 1.0,
            test_fraction: 0.0,
            require_both: false,
        };
        let (train, test) = split(&ds, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(train.samples.len(), 6);
        assert!(test.samples.is_empty());
        let strict = SplitOptions {
            require_both: true,
            ..opts
        };
        let err = split(&ds, strict, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, DcaError::Split { ref class, .. } if class == "a"));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = toy(10);
        let opts = SplitOptions {
            train_fraction: 0.5,
            test_fraction: 0.5,
            require_both: true,
        };
        let a = split(&ds, opts, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = split(&ds, opts, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }
}
