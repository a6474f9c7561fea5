//! Columnar binary cache for processed datasets.
//!
//! Layout: 8 magic bytes, a little-endian `u32` header length, a JSON header,
//! then each feature column as `n` little-endian `f64`, the labels as `u32`
//! and the groups as `u32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroupedDataset, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FAIRDPC1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    split: Split,
    rows: usize,
    num_classes: usize,
    columns: Vec<Column>,
    group_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Column {
    name: String,
    #[serde(rename = "type")]
    kind: String,
}

pub fn write_cache(path: impl AsRef<Path>, data: &GroupedDataset) -> Result<()> {
    let path = path.as_ref();
    let mut columns: Vec<Column> = data
        .feature_names()
        .iter()
        .map(|n| Column {
            name: n.clone(),
            kind: "f64".into(),
        })
        .collect();
    columns.push(Column {
        name: "label".into(),
        kind: "u32".into(),
    });
    columns.push(Column {
        name: "group".into(),
        kind: "u32".into(),
    });
    let header = serde_json::to_vec(&Header {
        name: data.name.clone(),
        split: data.split,
        rows: data.len(),
        num_classes: data.num_classes(),
        columns,
        group_names: data.group_names().to_vec(),
    })?;
    let n = data.len();
    let dim = data.dim();
    let mut out = Vec::with_capacity(12 + header.len() + n * (dim * 8 + 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let f = data.features();
    for c in 0..dim {
        for i in 0..n {
            out.extend_from_slice(&f[i * dim + c].to_le_bytes());
        }
    }
    for &l in data.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &g in data.groups() {
        out.extend_from_slice(&g.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<GroupedDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(fail("not a dataset cache"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + hlen;
    let header: Header = serde_json::from_slice(
        bytes
            .get(12..body_start)
            .ok_or_else(|| fail("truncated header"))?,
    )?;
    let n = header.rows;
    let dim = header
        .columns
        .len()
        .checked_sub(2)
        .ok_or_else(|| fail("missing label and group columns"))?;
    let expected = body_start + n * dim * 8 + n * 8;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut features = vec![0.0; n * dim];
    let mut at = body_start;
    for c in 0..dim {
        for i in 0..n {
            features[i * dim + c] =
                f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            at += 8;
        }
    }
    let mut read_u32 = |count: usize| {
        let v: Vec<u32> = (0..count)
            .map(|k| {
                u32::from_le_bytes(
                    bytes[at + 4 * k..at + 4 * k + 4]
                        .try_into()
                        .expect("4 bytes"),
                )
            })
            .collect();
        at += 4 * count;
        v
    };
    let labels = read_u32(n);
    let groups = read_u32(n);
    let names = header.columns[..dim]
        .iter()
        .map(|c| c.name.clone())
        .collect();
    Ok(GroupedDataset::new(
        header.name,
        header.split,
        dim,
        features,
        labels,
        groups,
        header.num_classes,
    )?
    .with_group_names(header.group_names)
    .with_feature_names(names))
}
