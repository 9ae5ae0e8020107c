//! Labeled embedding sets, their on-disk formats, the synthetic benchmark,
//! and episode sampling.

mod csv;
mod episode;
mod naeb;
mod synth;

pub use csv::read_csv;
pub use episode::{sample_episode, Episode};
pub use naeb::{read_naeb, read_naeb_bytes, write_naeb, write_naeb_bytes, NAEB_MAGIC, NAEB_VERSION};
pub use synth::{synth_generate, SyntheticSpec, SyntheticSplit};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Allowed deviation of a stored row norm from one.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Visual),
            1 => Some(Modality::Textual),
            _ => None,
        }
    }
}

/// Row-normalized features of one modality with a class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    modality: Modality,
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

impl EmbeddingSet {
    pub fn new(
        modality: Modality,
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape {
                op: "EmbeddingSet::new",
                lhs: features.shape(),
                rhs: (labels.len(), 1),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Mismatch(format!(
                "row {row} has label {label} but the set declares {num_classes} classes"
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::Mismatch(format!(
                    "{} class names for {num_classes} classes",
                    names.len()
                )));
            }
        }
        if let Some((row, norm)) = features
            .row_norms()
            .into_iter()
            .enumerate()
            .find(|(_, n)| (n - 1.0).abs() > UNIT_NORM_TOLERANCE)
        {
            return Err(Error::Degenerate { row, norm });
        }
        Ok(Self {
            modality,
            features,
            labels,
            num_classes,
            class_names,
        })
    }

    /// Normalizes every row before validating.
    pub fn from_raw(
        modality: Modality,
        features: &Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let features = crate::tensor::l2_normalize_rows(features)?;
        Self::new(modality, features, labels, num_classes, class_names)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices grouped by class.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (row, &label) in self.labels.iter().enumerate() {
            out[label].push(row);
        }
        out
    }

    /// One-hot label matrix, `len × num_classes`.
    pub fn one_hot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.num_classes);
        for (r, &l) in self.labels.iter().enumerate() {
            m.set(r, l, 1.0);
        }
        m
    }

    /// Fails unless every class has at least one row.
    pub fn require_all_classes(&self, what: &str) -> Result<()> {
        match self.rows_by_class().iter().position(Vec::is_empty) {
            Some(class) => Err(Error::Capacity(format!("{what}: class {class} has no rows"))),
            None => Ok(()),
        }
    }

    /// Rows `indices` with labels mapped through `relabel`.
    pub(crate) fn subset(
        &self,
        indices: &[usize],
        relabel: impl Fn(usize) -> usize,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Self {
        Self {
            modality: self.modality,
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| relabel(self.labels[i])).collect(),
            num_classes,
            class_names,
        }
    }

    /// A copy with the same rows and a new label vector.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(
            self.modality,
            self.features.clone(),
            labels,
            self.num_classes,
            self.class_names.clone(),
        )
    }
}
