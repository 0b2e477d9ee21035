use serde::{Deserialize, Serialize};
use std::path::Path;

use super::{DataError, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// Binary column described by the values that map to 1 and to 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryColumn {
    pub column: String,
    /// Raw values mapped to 1.
    pub positive: Vec<String>,
    /// Raw values mapped to 0. Any other value is rejected.
    pub negative: Vec<String>,
}

impl BinaryColumn {
    pub fn map(&self, raw: &str) -> Option<u8> {
        if self.positive.iter().any(|v| v == raw) {
            Some(1)
        } else if self.negative.iter().any(|v| v == raw) {
            Some(0)
        } else {
            None
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Skip rows containing a missing value and count them.
    #[default]
    Drop,
    /// Reject the file.
    Error,
}

/// Column roles and encodings of a delimited dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Feature columns in the order they are encoded.
    pub features: Vec<ColumnSpec>,
    pub label: BinaryColumn,
    /// Sensitive attribute; `positive` values form group 1.
    pub sensitive: BinaryColumn,
    /// Token marking a missing cell (empty cells are always missing).
    #[serde(default)]
    pub missing_token: Option<String>,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
    /// Also feed the sensitive attribute to the model as a two-column one-hot input.
    #[serde(default)]
    pub include_sensitive: bool,
}

impl DatasetSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Schema(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DataError::Io(path.display().to_string(), e))
    }

    /// Schema of the census-income CSV shipped under `data/adult`.
    pub fn adult() -> Self {
        let num = |n: &str| ColumnSpec { name: n.into(), kind: ColumnKind::Numeric };
        let cat = |n: &str| ColumnSpec { name: n.into(), kind: ColumnKind::Categorical };
        Self {
            features: vec![
                num("age"),
                cat("workclass"),
                num("fnlwgt"),
                cat("education"),
                num("education_num"),
                cat("marital_status"),
                cat("occupation"),
                cat("relationship"),
                cat("race"),
                num("capital_gain"),
                num("capital_loss"),
                num("hours_per_week"),
                cat("native_country"),
            ],
            label: BinaryColumn {
                column: "income".into(),
                positive: vec![">50K".into(), ">50K.".into()],
                negative: vec!["<=50K".into(), "<=50K.".into()],
            },
            sensitive: BinaryColumn { column: "sex".into(), positive: vec!["Male".into()], negative: vec!["Female".into()] },
            missing_token: Some("?".into()),
            missing_policy: MissingPolicy::Drop,
            include_sensitive: false,
        }
    }
}
