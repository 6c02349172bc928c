use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Modality, Sample, Split};
use crate::error::{DcaError, Result};
use crate::tensor::Tensor;

/// Parameters of the synthetic two-modality generator.
///
/// Every class has a latent prototype. Sketches are `A¹·(prototype + noise)`
/// and each shape view is `A²·(prototype + noise) + jitter`, where `A¹` and
/// `A²` are independent random linear maps. The two modalities therefore
/// share class structure but live in unrelated coordinate systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub sketches_per_class: usize,
    pub shapes_per_class: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub n_views: usize,
    /// Within-class noise, per latent coordinate.
    pub noise: f64,
    /// Per-view jitter added in input space.
    pub view_jitter: f64,
    pub sketch_map_seed: u64,
    pub shape_map_seed: u64,
    /// Fraction of each class's sketches tagged `train`.
    pub train_fraction: f64,
    pub test_fraction: f64,
    /// Apply the fractions to shapes as well; otherwise every shape is
    /// tagged `train`.
    pub split_shapes: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            sketches_per_class: 40,
            shapes_per_class: 10,
            latent_dim: 8,
            input_dim: 32,
            n_views: 4,
            noise: 0.8,
            view_jitter: 0.1,
            sketch_map_seed: 101,
            shape_map_seed: 202,
            train_fraction: 0.625,
            test_fraction: 0.375,
            split_shapes: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DcaError::Config(format!("synthetic: {m}")));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.sketches_per_class < 2 || self.shapes_per_class < 2 {
            return fail("per-class counts must be >= 2".into());
        }
        if self.latent_dim == 0 || self.input_dim == 0 || self.n_views == 0 {
            return fail("latent_dim, input_dim and n_views must be positive".into());
        }
        if !(self.noise >= 0.0) || !(self.view_jitter >= 0.0) {
            return fail("noise levels must be >= 0".into());
        }
        if self.sketch_map_seed == self.shape_map_seed {
            return fail("sketch and shape maps need distinct seeds".into());
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || ((self.train_fraction + self.test_fraction) - 1.0).abs() > 1e-9
        {
            return fail("train/test fractions must lie in [0,1] and sum to 1".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// `input_dim × latent_dim` map with entries `N(0, 1/latent_dim)`.
fn modality_map(spec: &SyntheticSpec, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (spec.latent_dim as f64).sqrt();
    Tensor::new(
        vec![spec.input_dim, spec.latent_dim],
        gaussian(&mut rng, spec.input_dim * spec.latent_dim, std),
    )
    .expect("shape")
}

fn noisy(rng: &mut impl Rng, proto: &[f64], std: f64) -> Vec<f64> {
    proto
        .iter()
        .zip(gaussian(rng, proto.len(), std))
        .map(|(p, n)| p + n)
        .collect()
}

fn project(map: &Tensor, latent: &[f64]) -> Vec<f64> {
    (0..map.rows())
        .map(|r| map.row(r).iter().zip(latent).map(|(a, b)| a * b).sum())
        .collect()
}

fn split_for(k: usize, n: usize, fraction: f64) -> Split {
    if k < (n as f64 * fraction).round() as usize {
        Split::Train
    } else {
        Split::Test
    }
}

/// Draws a dataset. The modality maps come from their own seeds; the
/// prototypes and noise come from `rng`.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Dataset> {
    spec.validate()?;
    let sketch_map = modality_map(spec, spec.sketch_map_seed);
    let shape_map = modality_map(spec, spec.shape_map_seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| gaussian(rng, spec.latent_dim, 1.0))
        .collect();

    let mut samples = Vec::new();
    for (label, proto) in prototypes.iter().enumerate() {
        for k in 0..spec.sketches_per_class {
            let latent = noisy(rng, proto, spec.noise);
            samples.push(Sample {
                modality: Modality::Sketch,
                label,
                split: split_for(k, spec.sketches_per_class, spec.train_fraction),
                features: Tensor::new(vec![1, spec.input_dim], project(&sketch_map, &latent))?,
            });
        }
    }
    for (label, proto) in prototypes.iter().enumerate() {
        for k in 0..spec.shapes_per_class {
            let latent = noisy(rng, proto, spec.noise);
            let base = project(&shape_map, &latent);
            let mut views = Vec::with_capacity(spec.n_views * spec.input_dim);
            for _ in 0..spec.n_views {
                let jitter = gaussian(rng, spec.input_dim, spec.view_jitter);
                views.extend(base.iter().zip(jitter).map(|(b, j)| b + j));
            }
            let split = if spec.split_shapes {
                split_for(k, spec.shapes_per_class, spec.train_fraction)
            } else {
                Split::Train
            };
            samples.push(Sample {
                modality: Modality::Shape,
                label,
                split,
                features: Tensor::new(vec![spec.n_views, spec.input_dim], views)?,
            });
        }
    }
    let dataset = Dataset {
        input_dim: spec.input_dim,
        n_views: spec.n_views,
        class_names: (0..spec.num_classes).map(|c| format!("class{c:02}")).collect(),
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}
