//! Synthetic benchmark with a controllable support-set bias.
//!
//! Randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`) seeded with
//! `seed_from_u64`, and Gaussian draws from `rand_distr::StandardNormal`.
//! Draw order is fixed: class centers, class biases, support rows, query
//! rows, prompt rows; each block is class-major.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub prompts_per_class: usize,
    pub visual_noise: f64,
    pub textual_noise: f64,
    /// Length of the per-class offset added to support rows only.
    pub support_bias: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            shots: 16,
            queries_per_class: 20,
            prompts_per_class: 5,
            visual_noise: 0.25,
            textual_noise: 0.15,
            support_bias: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.classes < 2 {
            return fail("classes must be at least 2");
        }
        if self.dim < 2 {
            return fail("dim must be at least 2");
        }
        if self.shots < 1 {
            return fail("shots must be at least 1");
        }
        if self.prompts_per_class < 1 {
            return fail("prompts must be at least 1");
        }
        for (name, v) in [
            ("visual_noise", self.visual_noise),
            ("textual_noise", self.textual_noise),
            ("support_bias", self.support_bias),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Generator output. `centers` are the latent class directions, kept for
/// oracle comparisons.
#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub support: EmbeddingSet,
    pub query: EmbeddingSet,
    pub prompts: EmbeddingSet,
    pub centers: Matrix,
}

fn gaussian(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // a zero Gaussian draw has probability zero; fall back to e0 regardless
    if norm == 0.0 {
        v[0] = 1.0;
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn noisy_rows(
    rng: &mut ChaCha20Rng,
    centers: &[Vec<f64>],
    offsets: Option<(&[Vec<f64>], f64)>,
    per_class: usize,
    noise: f64,
) -> (Matrix, Vec<usize>) {
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(centers.len() * per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let eps = gaussian(rng, dim);
            let row: Vec<f64> = (0..dim)
                .map(|d| {
                    let shift = offsets.map_or(0.0, |(b, scale)| scale * b[c][d]);
                    center[d] + shift + noise * eps[d]
                })
                .collect();
            data.extend(unit(row));
            labels.push(c);
        }
    }
    (Matrix::new(labels.len(), dim, data).expect("sized above"), labels)
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticSplit> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit(gaussian(&mut rng, spec.dim))).collect();
    let biases: Vec<Vec<f64>> = (0..spec.classes).map(|_| unit(gaussian(&mut rng, spec.dim))).collect();
    let names: Vec<String> = (0..spec.classes).map(|c| format!("class_{c}")).collect();

    let (support, support_labels) = noisy_rows(
        &mut rng,
        &centers,
        Some((&biases, spec.support_bias)),
        spec.shots,
        spec.visual_noise,
    );
    let (query, query_labels) = noisy_rows(&mut rng, &centers, None, spec.queries_per_class, spec.visual_noise);
    let (prompts, prompt_labels) = noisy_rows(&mut rng, &centers, None, spec.prompts_per_class, spec.textual_noise);

    let set = |m: Matrix, labels: Vec<usize>, modality| {
        EmbeddingSet::new(modality, m, labels, spec.classes, Some(names.clone()))
    };
    Ok(SyntheticSplit {
        support: set(support, support_labels, Modality::Visual)?,
        query: set(query, query_labels, Modality::Visual)?,
        prompts: set(prompts, prompt_labels, Modality::Textual)?,
        centers: Matrix::new(spec.classes, spec.dim, centers.concat())?,
    })
}
