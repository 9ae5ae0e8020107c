//! NAEB: little-endian binary container for one [`EmbeddingSet`].
//!
//! ```text
//! 0..4    magic "NAEB"
//! 4       version (1)
//! 5       dtype (1 = f32)
//! 6       modality (0 visual, 1 textual)
//! 7       reserved (0)
//! 8..12   rows N (u32)
//! 12..16  dim D (u32)
//! 16..20  classes C (u32)
//!         N u32 labels
//!         N*D f32 features, row-major
//!         u32 name_count (0 or C), then per name: u32 byte length + UTF-8
//! ```

use std::fs;
use std::path::Path;

use super::{EmbeddingSet, Modality, UNIT_NORM_TOLERANCE};
use crate::codec::{put_str, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const NAEB_MAGIC: &[u8; 4] = b"NAEB";
pub const NAEB_VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 20;
/// Rows further than this from unit norm are rejected rather than repaired.
const RENORMALIZE_TOLERANCE: f64 = 1e-3;

pub fn write_naeb_bytes(set: &EmbeddingSet) -> Vec<u8> {
    let (n, d) = set.features().shape();
    let names = set.class_names().unwrap_or(&[]);
    let names_len: usize = names.iter().map(|s| 4 + s.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + n * 4 + n * d * 4 + 4 + names_len);
    out.extend_from_slice(NAEB_MAGIC);
    out.extend_from_slice(&[NAEB_VERSION, DTYPE_F32, set.modality().code(), 0]);
    for v in [n, d, set.num_classes()] {
        put_u32(&mut out, v);
    }
    for &l in set.labels() {
        put_u32(&mut out, l);
    }
    for &v in set.features().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    put_u32(&mut out, names.len());
    for name in names {
        put_str(&mut out, name);
    }
    out
}

pub fn write_naeb(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_naeb_bytes(set)).map_err(|e| Error::io(path, e))
}

pub fn read_naeb(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_naeb_bytes(&bytes)
}

pub fn read_naeb_bytes(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut cur = Cursor::new(bytes);
    let head = cur.take(8, "header")?;
    if &head[0..4] != NAEB_MAGIC {
        return Err(cur.fail(0, format!("bad magic {:?}", String::from_utf8_lossy(&head[0..4]))));
    }
    if head[4] != NAEB_VERSION {
        return Err(cur.fail(4, format!("unsupported version {}", head[4])));
    }
    if head[5] != DTYPE_F32 {
        return Err(cur.fail(5, format!("unsupported dtype {}", head[5])));
    }
    let modality = Modality::from_code(head[6]).ok_or_else(|| cur.fail(6, format!("unknown modality {}", head[6])))?;
    let n = cur.u32("row count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let c = cur.u32("class count")? as usize;

    let payload = n
        .checked_mul(4)
        .and_then(|l| n.checked_mul(d).and_then(|f| f.checked_mul(4)).and_then(|f| f.checked_add(l)))
        .ok_or_else(|| cur.fail(8, "row count and dimension overflow"))?;
    let available = bytes.len() - cur.pos;
    if available < payload {
        return Err(cur.fail(
            cur.pos,
            format!("truncated payload: expected {payload} bytes for {n}x{d}, found {available}"),
        ));
    }

    let label_start = cur.pos;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = cur.u32("labels")? as usize;
        if l >= c {
            return Err(cur.fail(label_start + 4 * i, format!("label {l} out of range for {c} classes")));
        }
        labels.push(l);
    }

    let feature_start = cur.pos;
    let raw = cur.take(n * d * 4, "features")?;
    let mut data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(cur.fail(feature_start + 4 * i, "non-finite feature value"));
    }
    if d > 0 {
        for (r, row) in data.chunks_exact_mut(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let deviation = (norm - 1.0).abs();
            if deviation > RENORMALIZE_TOLERANCE {
                return Err(cur.fail(
                    feature_start + 4 * r * d,
                    format!("row {r} has norm {norm}, not unit"),
                ));
            }
            if deviation > UNIT_NORM_TOLERANCE {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    let features = Matrix::new(n, d, data)?;

    let names_offset = cur.pos;
    let name_count = cur.u32("name table")? as usize;
    if name_count != 0 && name_count != c {
        return Err(cur.fail(names_offset, format!("{name_count} class names for {c} classes")));
    }
    let mut names = Vec::with_capacity(name_count);
    for _ in 0..name_count {
        names.push(cur.string("class name")?.to_owned());
    }
    cur.finish()?;
    let class_names = (name_count > 0).then_some(names);
    EmbeddingSet::new(modality, features, labels, c, class_names)
}
