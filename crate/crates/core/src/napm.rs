//! NAPM: little-endian container for a [`TrainedModel`].
//!
//! ```text
//! 0..4    magic "NAPM"
//! 4       version (1)
//! 5..9    tensor_count (u32)
//!         per tensor: name (u32 len + UTF-8), rows u32, cols u32,
//!                     rows*cols f64 row-major
//!         JSON blob (u32 len + UTF-8)
//! ```
//!
//! Tensors are the field maps under their [`PARAM_NAMES`], then `fusion.u`
//! and the four prototype matrices. The JSON blob carries the training and
//! field configuration, class names and the per-epoch history.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{put_str, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, FieldParameters, PARAM_NAMES};
use crate::prototype::FusionParams;
use crate::tensor::Matrix;
use crate::train::{EpochRecord, TrainConfig, TrainedModel};

pub const NAPM_MAGIC: &[u8; 4] = b"NAPM";
pub const NAPM_VERSION: u8 = 1;

const FUSION: &str = "fusion.u";
const TEXTUAL: &str = "prototypes.textual";
const VISUAL: &str = "prototypes.visual";
const INITIAL: &str = "prototypes.initial";
const REFINED: &str = "prototypes.refined";

#[derive(Serialize, Deserialize)]
struct Blob {
    train: TrainConfig,
    field: FieldConfig,
    class_names: Option<Vec<String>>,
    history: Vec<EpochRecord>,
}

fn named_tensors(model: &TrainedModel) -> Vec<(&str, Matrix)> {
    let mut out: Vec<(&str, Matrix)> = PARAM_NAMES.iter().copied().zip(model.field.tensors().cloned()).collect();
    out.push((FUSION, model.fusion.as_row()));
    out.push((TEXTUAL, model.textual.clone()));
    out.push((VISUAL, model.visual.clone()));
    out.push((INITIAL, model.initial.clone()));
    out.push((REFINED, model.refined.clone()));
    out
}

pub fn write_napm_bytes(model: &TrainedModel) -> Vec<u8> {
    let tensors = named_tensors(model);
    let mut out = Vec::new();
    out.extend_from_slice(NAPM_MAGIC);
    out.push(NAPM_VERSION);
    put_u32(&mut out, tensors.len());
    for (name, m) in &tensors {
        put_str(&mut out, name);
        put_u32(&mut out, m.rows());
        put_u32(&mut out, m.cols());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob = Blob {
        train: model.config.clone(),
        field: model.field.config().clone(),
        class_names: model.class_names.clone(),
        history: model.history.clone(),
    };
    put_str(&mut out, &serde_json::to_string(&blob).expect("model metadata serializes"));
    out
}

pub fn write_napm(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_napm_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn read_napm(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_napm_bytes(&bytes)
}

struct Entry {
    name: String,
    offset: usize,
    value: Matrix,
}

fn read_tensor(cur: &mut Cursor<'_>) -> Result<Entry> {
    let offset = cur.pos;
    let name = cur.string("tensor name")?.to_owned();
    let rows = cur.u32("tensor rows")? as usize;
    let cols = cur.u32("tensor cols")? as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| cur.fail(offset, format!("tensor {name} shape {rows}x{cols} overflows")))?;
    let start = cur.pos;
    let raw = cur.take(len, &format!("tensor {name}"))?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(cur.fail(start + 8 * i, format!("non-finite value in tensor {name}")));
    }
    Ok(Entry {
        name,
        offset,
        value: Matrix::new(rows, cols, data)?,
    })
}

pub fn read_napm_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut cur = Cursor::new(bytes);
    let head = cur.take(5, "header")?;
    if &head[0..4] != NAPM_MAGIC {
        return Err(cur.fail(0, format!("bad magic {:?}", String::from_utf8_lossy(&head[0..4]))));
    }
    if head[4] != NAPM_VERSION {
        return Err(cur.fail(4, format!("unsupported version {}", head[4])));
    }
    let count = cur.u32("tensor count")? as usize;
    let expected = PARAM_NAMES.len() + 5;
    if count != expected {
        return Err(cur.fail(5, format!("expected {expected} tensors, found {count}")));
    }
    let mut entries: Vec<Entry> = Vec::with_capacity(count);
    for _ in 0..count {
        let entry = read_tensor(&mut cur)?;
        if entries.iter().any(|e| e.name == entry.name) {
            return Err(cur.fail(entry.offset, format!("duplicate tensor {}", entry.name)));
        }
        entries.push(entry);
    }
    let blob_at = cur.pos;
    let text = cur.string("metadata")?;
    let blob: Blob = serde_json::from_str(text).map_err(|e| cur.fail(blob_at, format!("metadata: {e}")))?;
    cur.finish()?;

    let mut take = |name: &str| -> Result<Entry> {
        let i = entries
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| cur.fail(9, format!("missing tensor {name}")))?;
        Ok(entries.swap_remove(i))
    };
    let shapes = blob.field.shapes();
    let mut field_tensors = Vec::with_capacity(PARAM_NAMES.len());
    for (name, want) in PARAM_NAMES.iter().zip(&shapes) {
        let e = take(name)?;
        if e.value.shape() != *want {
            return Err(cur.fail(
                e.offset,
                format!("tensor {name} has shape {:?}, expected {want:?}", e.value.shape()),
            ));
        }
        field_tensors.push(e.value);
    }
    let dim = blob.field.dim;
    let u = take(FUSION)?;
    if u.value.shape() != (1, dim) {
        return Err(cur.fail(u.offset, format!("{FUSION} has shape {:?}, expected (1, {dim})", u.value.shape())));
    }
    let mut protos = Vec::with_capacity(4);
    for name in [TEXTUAL, VISUAL, INITIAL, REFINED] {
        let e = take(name)?;
        if e.value.cols() != dim {
            return Err(cur.fail(e.offset, format!("{name} has {} columns, expected {dim}", e.value.cols())));
        }
        protos.push(e);
    }
    let classes = protos[0].value.rows();
    if let Some(e) = protos.iter().find(|e| e.value.rows() != classes) {
        return Err(cur.fail(e.offset, format!("{} has {} rows, expected {classes}", e.name, e.value.rows())));
    }
    if let Some(names) = &blob.class_names {
        if names.len() != classes {
            return Err(cur.fail(blob_at, format!("{} class names for {classes} prototypes", names.len())));
        }
    }

    let mut protos = protos.into_iter().map(|e| e.value);
    Ok(TrainedModel {
        field: FieldParameters::from_tensors(blob.field, field_tensors)?,
        fusion: FusionParams { u: u.value.into_vec() },
        textual: protos.next().expect("four prototypes"),
        visual: protos.next().expect("four prototypes"),
        initial: protos.next().expect("four prototypes"),
        refined: protos.next().expect("four prototypes"),
        config: blob.train,
        class_names: blob.class_names,
        history: blob.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SyntheticSpec};
    use crate::ode::{SolverConfig, SolverMethod};
    use crate::train::train;

    fn model() -> TrainedModel {
        let split = synth_generate(&SyntheticSpec {
            classes: 3,
            dim: 4,
            shots: 2,
            queries_per_class: 1,
            prompts_per_class: 2,
            seed: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            embed_dim: 8,
            solver: SolverConfig::new(SolverMethod::Euler, 4, 0.0, 4.0).unwrap(),
            ..TrainConfig::default()
        };
        let mut m = train(&split.support, &split.prompts, &cfg).unwrap();
        m.class_names = Some(vec!["a".into(), "b".into(), "ç".into()]);
        m
    }

    fn format_offset(bytes: &[u8]) -> u64 {
        match read_napm_bytes(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_lossless_and_stable() {
        let m = model();
        let bytes = write_napm_bytes(&m);
        let back = read_napm_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_napm_bytes(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = write_napm_bytes(&model());
        assert_eq!(&bytes[0..5], b"NAPM\x01");
        assert_eq!(&bytes[5..9], &19u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &11u32.to_le_bytes());
        assert_eq!(&bytes[13..24], b"gate.weight");
        // gate.weight is 2D x D = 8 x 4
        assert_eq!(&bytes[24..32], &[8, 0, 0, 0, 4, 0, 0, 0]);
    }

    #[test]
    fn corruptions_report_offsets() {
        let good = write_napm_bytes(&model());

        let mut bad = good.clone();
        bad[1] = b'X';
        assert_eq!(format_offset(&bad), 0);

        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(format_offset(&bad), 4);

        let mut bad = good.clone();
        bad[5] = 3;
        assert_eq!(format_offset(&bad), 5);

        let mut bad = good.clone();
        bad[32..40].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(format_offset(&bad), 32);

        let mut bad = good.clone();
        bad[24..28].copy_from_slice(&5u32.to_le_bytes());
        assert!(read_napm_bytes(&bad).is_err());

        match read_napm_bytes(&good[..100]) {
            Err(Error::Format { message, .. }) => assert!(message.contains("truncated"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }

        let mut bad = good.clone();
        bad.push(0);
        assert_eq!(format_offset(&bad), good.len() as u64);

        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] = b'!';
        assert!(matches!(read_napm_bytes(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn renamed_tensor_is_reported_missing() {
        let mut bad = write_napm_bytes(&model());
        bad[13] = b'G';
        match read_napm_bytes(&bad) {
            Err(Error::Format { message, .. }) => assert!(message.contains("missing tensor gate.weight"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
