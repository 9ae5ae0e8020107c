//! Query evaluation, the component ablation, binary episodes and episodic
//! runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{cosine_similarities, predict};
use crate::dataset::{sample_episode, EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::prototype::{fuse, fusion_coefficients, FusionParams};
use crate::tensor::Matrix;
use crate::train::{train, TrainConfig, TrainedModel};

/// Which prototypes a report classifies with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Mean prompt features.
    Textual,
    /// Mean support features.
    Visual,
    /// Even fusion of both (`u = 0`).
    Fused,
    /// Fused prototypes refined by the trained field.
    Refined,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Textual, Variant::Visual, Variant::Fused, Variant::Refined];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Textual => "TP",
            Variant::Visual => "VP",
            Variant::Fused => "TP+VP",
            Variant::Refined => "TP+VP+NODE",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected TP, VP, TP+VP or TP+VP+NODE")))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub n_queries: usize,
    pub accuracy: f64,
    /// `None` for classes without queries.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(variant: Variant, seed: u64, classes: usize, labels: &[usize], predicted: &[usize]) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::Mismatch(format!(
                "{} labels but {} predictions",
                labels.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&y, &p) in labels.iter().zip(predicted) {
            if y >= classes || p >= classes {
                return Err(Error::Mismatch(format!("label pair ({y}, {p}) outside {classes} classes")));
            }
            confusion[y][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            variant,
            seed,
            n_queries: labels.len(),
            accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
            per_class_accuracy,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// `true\predicted` header, then one row per true class.
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("true");
        for c in 0..n {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            out.push_str(&c.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Prototypes the model uses for `variant`.
pub fn variant_prototypes(model: &TrainedModel, variant: Variant) -> Result<Matrix> {
    Ok(match variant {
        Variant::Textual => model.textual.clone(),
        Variant::Visual => model.visual.clone(),
        Variant::Fused => {
            let lambda = fusion_coefficients(&model.visual, &FusionParams::zeros(model.dim()))?;
            fuse(&model.textual, &model.visual, &lambda, model.config.solver.t0)?.prototypes
        }
        Variant::Refined => model.refined.clone(),
    })
}

/// Query labels expressed as model class indices. Names are matched when
/// both sides carry them.
fn map_labels(model: &TrainedModel, query: &EmbeddingSet) -> Result<Vec<usize>> {
    if query.dim() != model.dim() {
        return Err(Error::Mismatch(format!(
            "query dimension {} differs from model dimension {}",
            query.dim(),
            model.dim()
        )));
    }
    match (model.class_names.as_deref(), query.class_names()) {
        (Some(model_names), Some(query_names)) => {
            let mut table = Vec::with_capacity(query_names.len());
            for name in query_names {
                let idx = model_names
                    .iter()
                    .position(|m| m == name)
                    .ok_or_else(|| Error::Mismatch(format!("query class {name:?} is unknown to the model")))?;
                table.push(idx);
            }
            Ok(query.labels().iter().map(|&l| table[l]).collect())
        }
        _ => {
            if query.num_classes() > model.num_classes() {
                return Err(Error::Mismatch(format!(
                    "query has {} classes, model has {}",
                    query.num_classes(),
                    model.num_classes()
                )));
            }
            Ok(query.labels().to_vec())
        }
    }
}

pub fn evaluate(model: &TrainedModel, query: &EmbeddingSet, variant: Variant) -> Result<EvalReport> {
    let labels = map_labels(model, query)?;
    let prototypes = variant_prototypes(model, variant)?;
    let predicted = predict(query.features(), &prototypes)?;
    EvalReport::from_predictions(variant, model.config.seed, model.num_classes(), &labels, &predicted)
}

/// One report per variant, in [`Variant::ALL`] order.
pub fn ablation_reports(model: &TrainedModel, query: &EmbeddingSet) -> Result<Vec<EvalReport>> {
    Variant::ALL.iter().map(|&v| evaluate(model, query, v)).collect()
}

/// Trains on `support`/`prompts` and evaluates all variants on `query`.
pub fn ablation_run(support: &EmbeddingSet, prompts: &EmbeddingSet, query: &EmbeddingSet, cfg: &TrainConfig) -> Result<Vec<EvalReport>> {
    let model = train(support, prompts, cfg)?;
    ablation_reports(&model, query)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Positive,
    Negative,
}

/// Cosine margins at or below this resolve to the positive side.
pub const BINARY_TIE_TOLERANCE: f64 = 1e-12;

/// Two-way episode: class 0 is the positive side, class 1 the negative.
/// `prompts` holds the positive then the negative textual feature.
pub fn binary_episode(
    positive: &Matrix,
    negative: &Matrix,
    prompts: &Matrix,
    query: &Matrix,
    cfg: &TrainConfig,
) -> Result<Vec<Side>> {
    if positive.rows() == 0 || negative.rows() == 0 {
        return Err(Error::Capacity("both support sides need at least one row".into()));
    }
    if prompts.rows() != 2 {
        return Err(Error::Mismatch(format!("expected 2 prompt rows, got {}", prompts.rows())));
    }
    let features = positive.concat_rows(negative)?;
    let labels: Vec<usize> = (0..positive.rows()).map(|_| 0).chain((0..negative.rows()).map(|_| 1)).collect();
    let support = EmbeddingSet::from_raw(Modality::Visual, &features, labels, 2, None)?;
    let prompt_set = EmbeddingSet::from_raw(Modality::Textual, prompts, vec![0, 1], 2, None)?;
    let model = train(&support, &prompt_set, cfg)?;
    let scores = cosine_similarities(query, &model.refined)?;
    Ok(scores
        .row_iter()
        .map(|s| if s[1] > s[0] + BINARY_TIE_TOLERANCE { Side::Negative } else { Side::Positive })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    /// Mean accuracy per variant, in [`Variant::ALL`] order.
    pub mean_accuracy: Vec<(Variant, f64)>,
    /// Half-width of the normal 95% interval per variant.
    pub ci95: Vec<(Variant, f64)>,
    /// `reports[e]` holds every variant for episode `e`.
    pub reports: Vec<Vec<EvalReport>>,
}

/// Episode `e` uses seed `spec.seed + e` for sampling and training.
fn run_episode(visual: &EmbeddingSet, textual: &EmbeddingSet, spec: &EpisodeSpec, cfg: &TrainConfig, e: usize) -> Result<Vec<EvalReport>> {
    let seed = spec.seed.wrapping_add(e as u64);
    let episode = sample_episode(visual, textual, spec.way, spec.shot, spec.queries, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    ablation_run(&episode.support, &episode.prompts, &episode.query, &cfg)
}

/// Runs `spec.episodes` episodes on up to `threads` workers; results are
/// merged in episode order.
pub fn run_episodes(
    visual: &EmbeddingSet,
    textual: &EmbeddingSet,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<EpisodeSummary> {
    let workers = threads.clamp(1, spec.episodes.max(1));
    let mut slots: Vec<Option<Result<Vec<EvalReport>>>> = (0..spec.episodes).map(|_| None).collect();
    if workers == 1 {
        for (e, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_episode(visual, textual, spec, cfg, e));
        }
    } else {
        let chunk = spec.episodes.div_ceil(workers);
        std::thread::scope(|scope| {
            for (w, part) in slots.chunks_mut(chunk).enumerate() {
                scope.spawn(move || {
                    for (i, slot) in part.iter_mut().enumerate() {
                        *slot = Some(run_episode(visual, textual, spec, cfg, w * chunk + i));
                    }
                });
            }
        });
    }
    let reports = slots
        .into_iter()
        .map(|s| s.expect("every episode ran"))
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len().max(1) as f64;
    let mut mean_accuracy = Vec::new();
    let mut ci95 = Vec::new();
    for (k, variant) in Variant::ALL.into_iter().enumerate() {
        let accs: Vec<f64> = reports.iter().map(|r| r[k].accuracy).collect();
        let mean = accs.iter().sum::<f64>() / n;
        let var = if accs.len() > 1 {
            accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64
        } else {
            0.0
        };
        mean_accuracy.push((variant, mean));
        ci95.push((variant, 1.96 * (var / n).sqrt()));
    }
    Ok(EpisodeSummary {
        episodes: spec.episodes,
        way: spec.way,
        shot: spec.shot,
        mean_accuracy,
        ci95,
        reports,
    })
}
