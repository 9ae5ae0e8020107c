use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::EmbeddingSet;
use crate::error::{Error, Result};

/// One N-way K-shot task with labels remapped to `0..way`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: EmbeddingSet,
    pub query: EmbeddingSet,
    pub prompts: EmbeddingSet,
    pub way: usize,
    pub shot: usize,
    /// Source class of each remapped label.
    pub classes: Vec<usize>,
}

/// Samples `way` classes, then `shot` support and `queries` query rows per
/// class from `visual`, plus every prompt row of the chosen classes.
pub fn sample_episode(
    visual: &EmbeddingSet,
    textual: &EmbeddingSet,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if way == 0 || way > visual.num_classes() {
        return Err(Error::Capacity(format!(
            "way {way} not in 1..={}",
            visual.num_classes()
        )));
    }
    if textual.num_classes() != visual.num_classes() {
        return Err(Error::Mismatch(format!(
            "visual set has {} classes, textual set {}",
            visual.num_classes(),
            textual.num_classes()
        )));
    }
    if textual.dim() != visual.dim() {
        return Err(Error::Mismatch(format!(
            "visual dimension {} differs from textual {}",
            visual.dim(),
            textual.dim()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..visual.num_classes()).collect();
    classes.shuffle(&mut rng);
    classes.truncate(way);

    let visual_rows = visual.rows_by_class();
    let prompt_rows = textual.rows_by_class();
    let mut support_idx = Vec::with_capacity(way * shot);
    let mut query_idx = Vec::with_capacity(way * queries);
    let mut prompt_idx = Vec::new();
    for &class in &classes {
        let mut rows = visual_rows[class].clone();
        if rows.len() < shot + queries {
            return Err(Error::Capacity(format!(
                "class {class} has {} rows, episode needs {}",
                rows.len(),
                shot + queries
            )));
        }
        if prompt_rows[class].is_empty() {
            return Err(Error::Capacity(format!("class {class} has no prompt rows")));
        }
        rows.shuffle(&mut rng);
        support_idx.extend_from_slice(&rows[..shot]);
        query_idx.extend_from_slice(&rows[shot..shot + queries]);
        prompt_idx.extend_from_slice(&prompt_rows[class]);
    }

    let mut remap = vec![usize::MAX; visual.num_classes()];
    for (new, &old) in classes.iter().enumerate() {
        remap[old] = new;
    }
    let names = visual
        .class_names()
        .or(textual.class_names())
        .map(|n| classes.iter().map(|&c| n[c].clone()).collect::<Vec<_>>());
    let relabel = |l: usize| remap[l];
    Ok(Episode {
        support: visual.subset(&support_idx, relabel, way, names.clone()),
        query: visual.subset(&query_idx, relabel, way, names.clone()),
        prompts: textual.subset(&prompt_idx, relabel, way, names),
        way,
        shot,
        classes,
    })
}
