use std::fs;
use std::path::Path;

use super::{EmbeddingSet, Modality};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Reads a debug CSV with header `label,f0,...,f{D-1}`; rows are normalized.
///
/// The class count is one more than the largest label seen.
pub fn read_csv(path: impl AsRef<Path>, modality: Modality) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut lines = text.split_inclusive('\n');
    let header_line = lines.next().unwrap_or("");
    let header = header_line.trim_end();
    let columns: Vec<&str> = header.split(',').collect();
    let dim = columns.len().saturating_sub(1);
    let header_ok = columns.first() == Some(&"label")
        && columns[1..].iter().enumerate().all(|(i, c)| *c == format!("f{i}"));
    if !header_ok || dim == 0 {
        return Err(Error::Format {
            offset,
            message: format!("expected header label,f0,...; got {header:?}"),
        });
    }
    offset = header_line.len() as u64;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for line in lines {
        let start = offset;
        offset += line.len() as u64;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fail = |m: String| Error::Format { offset: start, message: m };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(fail(format!("expected {} fields, found {}", dim + 1, fields.len())));
        }
        labels.push(fields[0].trim().parse::<usize>().map_err(|e| fail(format!("label: {e}")))?);
        for f in &fields[1..] {
            data.push(f.trim().parse::<f64>().map_err(|e| fail(format!("feature: {e}")))?);
        }
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Matrix::new(labels.len(), dim, data)?;
    EmbeddingSet::from_raw(modality, &features, labels, num_classes, None)
}
