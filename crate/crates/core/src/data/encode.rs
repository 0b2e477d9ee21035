use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Cell, ColumnKind, DataError, DatasetSchema, LabeledBatch, RawTable, Result};
use crate::autodiff::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2 }
    }
}

impl SplitFractions {
    /// Seeded shuffle-split of `n` rows; the test split takes the remainder.
    pub fn assign(&self, n: usize, seed: u64) -> Vec<Split> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * self.train).round() as usize;
        let n_val = (((n as f64) * self.val).round() as usize).min(n - n_train.min(n));
        let mut split = vec![Split::Test; n];
        for (k, &i) in order.iter().enumerate() {
            split[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        split
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncodedColumn {
    /// z-score with the sample (n - 1) standard deviation; `sd == 0` encodes as 0.
    Numeric { name: String, mean: f64, sd: f64 },
    /// One-hot over the training vocabulary; unseen values encode as all zeros.
    Categorical { name: String, vocab: Vec<String> },
}

impl EncodedColumn {
    pub fn width(&self) -> usize {
        match self {
            EncodedColumn::Numeric { .. } => 1,
            EncodedColumn::Categorical { vocab, .. } => vocab.len(),
        }
    }
}

/// Fitted per-column encoding state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub columns: Vec<EncodedColumn>,
}

impl Encoder {
    pub fn width(&self) -> usize {
        self.columns.iter().map(EncodedColumn::width).sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut out = vec![];
        for c in &self.columns {
            match c {
                EncodedColumn::Numeric { name, .. } => out.push(name.clone()),
                EncodedColumn::Categorical { name, vocab } => out.extend(vocab.iter().map(|v| format!("{name}={v}"))),
            }
        }
        out
    }

    pub fn encode_row(&self, cells: &[Cell], out: &mut Vec<f64>) {
        for (col, cell) in self.columns.iter().zip(cells) {
            match (col, cell) {
                (EncodedColumn::Numeric { mean, sd, .. }, Cell::Num(v)) => {
                    out.push(if *sd > 0.0 { (v - mean) / sd } else { 0.0 });
                }
                (EncodedColumn::Categorical { vocab, .. }, Cell::Cat(v)) => {
                    let hit = vocab.binary_search(v).ok();
                    out.extend((0..vocab.len()).map(|k| if Some(k) == hit { 1.0 } else { 0.0 }));
                }
                (c, _) => out.extend(std::iter::repeat_n(0.0, c.width())),
            }
        }
    }

    /// Inverse of `encode_row`. All-zero one-hot blocks decode to an empty category.
    pub fn decode_row(&self, row: &[f64]) -> Vec<Cell> {
        let mut at = 0;
        let mut out = vec![];
        for col in &self.columns {
            match col {
                EncodedColumn::Numeric { mean, sd, .. } => out.push(Cell::Num(row[at] * sd + mean)),
                EncodedColumn::Categorical { vocab, .. } => {
                    let block = &row[at..at + vocab.len()];
                    let hit = block.iter().position(|&v| v > 0.5);
                    out.push(Cell::Cat(hit.map(|k| vocab[k].clone()).unwrap_or_default()));
                }
            }
            at += col.width();
        }
        out
    }
}

/// Model-ready dataset. Immutable once built.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    /// Row-major `[n, width]` feature matrix.
    pub x: Tensor,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub split: Vec<Split>,
    pub encoder: Encoder,
    pub feature_names: Vec<String>,
    /// Columns holding the one-hot sensitive attribute `[a == 0, a == 1]`, when included as input.
    pub sensitive_cols: Option<(usize, usize)>,
    /// Row pairs identical except for attribute and label (synthetic pair-flip mode).
    pub pairs: Vec<(usize, usize)>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn rows(&self, rows: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            rows: rows.to_vec(),
        }
    }

    pub fn slice(&self, split: Split) -> LabeledBatch {
        self.rows(&self.indices(split))
    }

    /// Copy with the one-hot attribute `[a == 0, a == 1]` appended as two input columns.
    pub fn with_sensitive_inputs(&self) -> Self {
        if self.sensitive_cols.is_some() {
            return self.clone();
        }
        let w = self.width();
        let mut data = Vec::with_capacity(self.len() * (w + 2));
        for i in 0..self.len() {
            data.extend_from_slice(self.x.row(i));
            data.extend([1.0 - self.a[i], self.a[i]]);
        }
        let mut names = self.feature_names.clone();
        names.extend(["sensitive=0".to_string(), "sensitive=1".to_string()]);
        Self {
            x: Tensor::from_vec(&[self.len(), w + 2], data),
            feature_names: names,
            sensitive_cols: Some((w, w + 1)),
            ..self.clone()
        }
    }

    /// SHA-256 over features, targets and split assignment.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.width() as u64).to_le_bytes());
        for v in self.x.data().iter().chain(&self.y).chain(&self.a) {
            h.update(v.to_bits().to_le_bytes());
        }
        for s in &self.split {
            h.update([*s as u8]);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits `table` 60/20/20 with `seed`, fits the encoder on the training rows
/// and encodes every row.
pub fn fit_encode(table: &RawTable, schema: &DatasetSchema, seed: u64) -> Result<EncodedDataset> {
    fit_encode_with(table, schema, seed, SplitFractions::default())
}

pub fn fit_encode_with(
    table: &RawTable,
    schema: &DatasetSchema,
    seed: u64,
    fractions: SplitFractions,
) -> Result<EncodedDataset> {
    let n = table.len();
    let split = fractions.assign(n, seed);
    let train: Vec<usize> = (0..n).filter(|&i| split[i] == Split::Train).collect();
    if train.is_empty() {
        return Err(DataError::EmptySplit("train"));
    }
    let mut columns = Vec::with_capacity(schema.features.len());
    for (j, spec) in schema.features.iter().enumerate() {
        columns.push(match spec.kind {
            ColumnKind::Numeric => {
                let vals: Vec<f64> = train
                    .iter()
                    .map(|&i| match &table.features[i][j] {
                        Cell::Num(v) => *v,
                        Cell::Cat(_) => 0.0,
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let ss = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                let sd = if vals.len() > 1 { (ss / (vals.len() - 1) as f64).sqrt() } else { 0.0 };
                if sd == 0.0 {
                    log::warn!("column `{}` has zero variance on the training split; encoded as 0", spec.name);
                }
                EncodedColumn::Numeric { name: spec.name.clone(), mean, sd }
            }
            ColumnKind::Categorical => {
                let mut vocab: Vec<String> = train
                    .iter()
                    .filter_map(|&i| match &table.features[i][j] {
                        Cell::Cat(v) => Some(v.clone()),
                        Cell::Num(_) => None,
                    })
                    .collect();
                vocab.sort();
                vocab.dedup();
                EncodedColumn::Categorical { name: spec.name.clone(), vocab }
            }
        });
    }
    let encoder = Encoder { columns };
    let base = encoder.width();
    let width = base + if schema.include_sensitive { 2 } else { 0 };
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        encoder.encode_row(&table.features[i], &mut data);
        if schema.include_sensitive {
            let a = table.attributes[i] as f64;
            data.extend([1.0 - a, a]);
        }
    }
    let mut feature_names = encoder.feature_names();
    let sensitive_cols = schema.include_sensitive.then(|| {
        feature_names.push(format!("{}=0", schema.sensitive.column));
        feature_names.push(format!("{}=1", schema.sensitive.column));
        (base, base + 1)
    });
    Ok(EncodedDataset {
        x: Tensor::from_vec(&[n, width], data),
        y: table.labels.iter().map(|&v| v as f64).collect(),
        a: table.attributes.iter().map(|&v| v as f64).collect(),
        split,
        encoder,
        feature_names,
        sensitive_cols,
        pairs: vec![],
    })
}
