//! Fixtures shared by the benchmarks and the acceptance suite.

use node_adapter::dataset::{synth_generate, SyntheticSpec};
use node_adapter::eval::{ablation_run, Variant};
use node_adapter::field::{FieldConfig, FieldParameters, GradientField, SupportContext};
use node_adapter::prototype::class_means;
use node_adapter::train::TrainConfig;
use node_adapter::{Matrix, Result};

/// The biased synthetic benchmark: 10 classes, 32 dimensions, 16 shots,
/// 20 queries and 5 prompts per class.
pub fn benchmark_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 10,
        dim: 32,
        shots: 16,
        queries_per_class: 20,
        prompts_per_class: 5,
        visual_noise: 0.25,
        textual_noise: 0.15,
        support_bias: 0.3,
        seed,
    }
}

/// A field with its support set and a prototype state to evaluate at.
pub struct FieldFixture {
    pub params: FieldParameters,
    pub support: SupportContext,
    pub p: Matrix,
}

impl FieldFixture {
    pub fn new(spec: &SyntheticSpec, embed_dim: usize) -> Result<Self> {
        let split = synth_generate(spec)?;
        Ok(Self {
            params: FieldParameters::init(FieldConfig::new(spec.dim, embed_dim), spec.seed)?,
            support: SupportContext::from_set(&split.support)?,
            p: class_means(&split.prompts)?,
        })
    }

    pub fn field(&self) -> GradientField<'_> {
        GradientField::new(&self.params, &self.support).expect("fixture shapes agree")
    }
}

/// Trains on each seed of the benchmark and averages query accuracy per
/// variant, in [`Variant::ALL`] order.
pub fn seed_averaged_ablation(seeds: &[u64], cfg: &TrainConfig) -> Result<Vec<(Variant, f64)>> {
    let mut sums = [0.0; 4];
    for &seed in seeds {
        let split = synth_generate(&benchmark_spec(seed))?;
        let cfg = TrainConfig { seed, ..cfg.clone() };
        for (sum, report) in sums.iter_mut().zip(ablation_run(&split.support, &split.prompts, &split.query, &cfg)?) {
            *sum += report.accuracy;
        }
    }
    let n = seeds.len().max(1) as f64;
    Ok(Variant::ALL.into_iter().zip(sums.map(|s| s / n)).collect())
}
