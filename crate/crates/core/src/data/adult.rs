//! Adult census income data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{split, GroupedDataset, Split, Standardizer};
use crate::error::{Error, Result};

const COLUMNS: usize = 15;
const NUMERIC: [(usize, &str); 5] = [
    (0, "age"),
    (4, "education_num"),
    (10, "capital_gain"),
    (11, "capital_loss"),
    (12, "hours_per_week"),
];
const CATEGORICAL: [(usize, &str); 6] = [
    (1, "workclass"),
    (3, "education"),
    (5, "marital_status"),
    (6, "occupation"),
    (7, "relationship"),
    (13, "native_country"),
];
const RACE: usize = 8;
const SEX: usize = 9;
const INCOME: usize = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct AdultOptions {
    /// Expected number of rows kept per sex.
    pub per_group: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for AdultOptions {
    fn default() -> Self {
        AdultOptions {
            per_group: 14_000.0,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Parsed rows with all fields trimmed.
fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('|') {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != COLUMNS {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: lineno + 1,
                message: format!("expected {COLUMNS} fields, found {}", fields.len()),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

/// All complete rows of `adult.data` and `adult.test` in `dir`.
pub fn read_adult_rows(dir: &Path) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    for name in ["adult.data", "adult.test"] {
        let path: PathBuf = dir.join(name);
        rows.extend(read_rows(&path)?);
    }
    rows.retain(|r| r.iter().all(|f| f != "?"));
    Ok(rows)
}

/// Encode, balance by sex, split 80/20 and standardize the numeric columns on
/// the training split. Group 0 is male, group 1 female; label 1 is income >50K.
pub fn load_adult(
    dir: impl AsRef<Path>,
    opts: &AdultOptions,
) -> Result<(GroupedDataset, GroupedDataset)> {
    let dir = dir.as_ref();
    let rows = read_adult_rows(dir)?;
    let full = encode(&rows, dir)?;
    let counts = full.group_counts();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let keep: Vec<usize> = (0..full.len())
        .filter(|&i| {
            let n = counts[&full.group(i)] as f64;
            rng.random::<f64>() < (opts.per_group / n).min(1.0)
        })
        .collect();
    let balanced = full.select(&keep, Split::Full);
    let (mut train, mut test) = split(&balanced, opts.train_fraction, opts.seed.wrapping_add(1))?;
    let st = Standardizer::fit(&train, &(0..NUMERIC.len()).collect::<Vec<_>>());
    st.apply(&mut train);
    st.apply(&mut test);
    Ok((train, test))
}

/// Feature layout: 5 numeric, race (white = 1), sex (female = 1), then the
/// one-hot blocks of the six categorical fields.
pub fn encode(rows: &[Vec<String>], source: &Path) -> Result<GroupedDataset> {
    let vocab: Vec<Vec<String>> = CATEGORICAL
        .iter()
        .map(|&(c, _)| {
            let mut v: Vec<String> = rows.iter().map(|r| r[c].clone()).collect();
            v.sort();
            v.dedup();
            v
        })
        .collect();
    let mut names: Vec<String> = NUMERIC.iter().map(|(_, n)| n.to_string()).collect();
    names.push("race_white".into());
    names.push("sex_female".into());
    for ((_, field), values) in CATEGORICAL.iter().zip(&vocab) {
        names.extend(values.iter().map(|v| format!("{field}={v}")));
    }
    let dim = names.len();
    let mut features = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    let mut groups = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: source.to_path_buf(),
            row: i + 1,
            message,
        };
        for &(c, n) in &NUMERIC {
            let v: f64 = r[c]
                .parse()
                .map_err(|_| parse_err(format!("{n} is not numeric: `{}`", r[c])))?;
            features.push(v);
        }
        features.push((r[RACE] == "White") as u8 as f64);
        let female = match r[SEX].as_str() {
            "Male" => 0u32,
            "Female" => 1,
            other => return Err(parse_err(format!("unknown sex `{other}`"))),
        };
        features.push(female as f64);
        for ((c, _), values) in CATEGORICAL.iter().zip(&vocab) {
            let pos = values.binary_search(&r[*c]).expect("value in vocabulary");
            features.extend((0..values.len()).map(|k| (k == pos) as u8 as f64));
        }
        let label = match r[INCOME].trim_end_matches('.') {
            ">50K" => 1,
            "<=50K" => 0,
            other => return Err(parse_err(format!("unknown income `{other}`"))),
        };
        labels.push(label);
        groups.push(female);
    }
    Ok(
        GroupedDataset::new("adult", Split::Full, dim, features, labels, groups, 2)?
            .with_group_names(vec!["male".into(), "female".into()])
            .with_feature_names(names),
    )
}

/// Column ranges of the one-hot blocks, for checking the encoding.
pub fn one_hot_blocks(data: &GroupedDataset) -> Vec<std::ops::Range<usize>> {
    let names = data.feature_names();
    let mut blocks = Vec::new();
    for (_, field) in CATEGORICAL {
        let prefix = format!("{field}=");
        let cols: Vec<usize> = (0..names.len())
            .filter(|&j| names[j].starts_with(&prefix))
            .collect();
        if let (Some(&a), Some(&b)) = (cols.first(), cols.last()) {
            blocks.push(a..b + 1);
        }
    }
    blocks
}
