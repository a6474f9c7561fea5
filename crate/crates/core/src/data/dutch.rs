//! Dutch census data, read from the ARFF release or a CSV export with a
//! header row.
//!
//! Every remaining attribute is categorical and one-hot encoded, with the
//! vocabulary taken from the filtered data.

use std::fs;
use std::path::Path;

use super::{split, GroupedDataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DutchOptions {
    /// Rows whose age is at most this value are dropped.
    pub max_underage: f64,
    /// `economic_status` codes treated as unemployed and dropped.
    pub unemployed_codes: Vec<String>,
    /// Occupation codes mapped to label 0.
    pub low_codes: Vec<String>,
    /// Occupation codes mapped to label 1.
    pub high_codes: Vec<String>,
    /// Value of `sex` assigned to group 1; every other value is group 0.
    pub female_code: String,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DutchOptions {
    fn default() -> Self {
        DutchOptions {
            max_underage: 14.0,
            unemployed_codes: vec!["unemployed".into(), "120".into()],
            low_codes: vec!["4".into(), "5".into(), "9".into()],
            high_codes: vec!["1".into(), "2".into()],
            female_code: "2".into(),
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Header and rows of a delimited table.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
    }
}

fn unquote(s: &str) -> String {
    s.trim().trim_matches(|c| c == '\'' || c == '"').to_string()
}

/// Parse an ARFF file (`@attribute` lines then `@data`) or, when no
/// `@attribute` line exists, a CSV file with a header row.
pub fn read_table(path: &Path) -> Result<RawTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_arff = text.lines().any(|l| {
        l.trim_start()
            .to_ascii_lowercase()
            .starts_with("@attribute")
    });
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    let mut in_data = !is_arff;
    let mut header_pending = !is_arff;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let lower = line.to_ascii_lowercase();
        if !in_data {
            if lower.starts_with("@attribute") {
                let rest = line["@attribute".len()..].trim();
                let name = if let Some(stripped) = rest.strip_prefix('\'') {
                    stripped.split('\'').next().unwrap_or_default().to_string()
                } else {
                    rest.split_whitespace()
                        .next()
                        .unwrap_or_default()
                        .to_string()
                };
                columns.push(name);
            } else if lower.starts_with("@data") {
                in_data = true;
            }
            continue;
        }
        let fields: Vec<String> = line.split(',').map(unquote).collect();
        if header_pending {
            columns = fields;
            header_pending = false;
            continue;
        }
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: lineno + 1,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        rows.push(fields);
    }
    if columns.is_empty() {
        return Err(Error::Format(format!(
            "{}: no header found",
            path.display()
        )));
    }
    Ok(RawTable { columns, rows })
}

/// Apply the row filters and binary occupation label, then encode.
pub fn encode_dutch(
    table: &RawTable,
    opts: &DutchOptions,
    source: &Path,
) -> Result<GroupedDataset> {
    let need = |name: &str| {
        table
            .column(name)
            .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", source.display())))
    };
    let sex = need("sex")?;
    let age = need("age")?;
    let occupation = need("occupation")?;
    let economic = table.column("economic_status");
    let weight = table.column("weight");

    let mut kept = Vec::new();
    for (i, r) in table.rows.iter().enumerate() {
        let a: f64 = r[age].parse().map_err(|_| Error::Parse {
            path: source.to_path_buf(),
            row: i + 1,
            message: format!("age is not numeric: `{}`", r[age]),
        })?;
        if a <= opts.max_underage {
            continue;
        }
        if economic.is_some_and(|c| {
            opts.unemployed_codes
                .iter()
                .any(|u| u.eq_ignore_ascii_case(&r[c]))
        }) {
            continue;
        }
        let occ = r[occupation].as_str();
        let label = if opts.low_codes.iter().any(|c| c == occ) {
            0
        } else if opts.high_codes.iter().any(|c| c == occ) {
            1
        } else {
            continue;
        };
        kept.push((i, label));
    }

    let feature_cols: Vec<usize> = (0..table.columns.len())
        .filter(|&c| c != occupation && Some(c) != weight)
        .collect();
    let vocab: Vec<Vec<String>> = feature_cols
        .iter()
        .map(|&c| {
            let mut v: Vec<String> = kept
                .iter()
                .map(|&(i, _)| table.rows[i][c].clone())
                .collect();
            v.sort();
            v.dedup();
            v
        })
        .collect();
    let mut names = Vec::new();
    for (&c, values) in feature_cols.iter().zip(&vocab) {
        names.extend(values.iter().map(|v| format!("{}={v}", table.columns[c])));
    }
    let dim = names.len();
    let mut features = Vec::with_capacity(kept.len() * dim);
    let mut labels = Vec::with_capacity(kept.len());
    let mut groups = Vec::with_capacity(kept.len());
    for &(i, label) in &kept {
        let r = &table.rows[i];
        for (&c, values) in feature_cols.iter().zip(&vocab) {
            let pos = values.binary_search(&r[c]).expect("value in vocabulary");
            features.extend((0..values.len()).map(|k| (k == pos) as u8 as f64));
        }
        labels.push(label);
        groups.push((r[sex] == opts.female_code) as u32);
    }
    Ok(
        GroupedDataset::new("dutch", Split::Full, dim, features, labels, groups, 2)?
            .with_group_names(vec!["male".into(), "female".into()])
            .with_feature_names(names),
    )
}

/// Load, filter, encode and split. Group 0 is male, group 1 female.
pub fn load_dutch(
    path: impl AsRef<Path>,
    opts: &DutchOptions,
) -> Result<(GroupedDataset, GroupedDataset)> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let full = encode_dutch(&table, opts, path)?;
    split(&full, opts.train_fraction, opts.seed)
}
