use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Binary,
    Regression,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskType::Binary => "binary",
            TaskType::Regression => "regression",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            vocabulary: None,
        }
    }

    pub fn categorical(name: impl Into<String>, vocabulary: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            vocabulary: Some(vocabulary),
        }
    }

    pub fn target(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Target,
            vocabulary: None,
        }
    }
}

/// Kind of one model input column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    /// Indices `0..cardinality` are vocabulary entries; `cardinality` is "unknown".
    Categorical { cardinality: usize },
}

/// Column layout and task of one dataset. This is also the JSON manifest format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub task: TaskType,
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let targets = self
            .columns
            .iter()
            .filter(|c| c.kind == ColumnKind::Target)
            .count();
        if targets != 1 {
            return Err(Error::Data(format!(
                "dataset `{}` must have exactly one target column, found {targets}",
                self.name
            )));
        }
        for c in &self.columns {
            if c.kind == ColumnKind::Categorical
                && c.vocabulary.as_ref().is_none_or(|v| v.is_empty())
            {
                return Err(Error::Data(format!(
                    "categorical column `{}` needs a non-empty vocabulary",
                    c.name
                )));
            }
        }
        let mut names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate column `{}`", w[0])));
        }
        if self.feature_count() == 0 {
            return Err(Error::Data(format!("dataset `{}` has no feature columns", self.name)));
        }
        Ok(())
    }

    pub fn feature_columns(&self) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(|c| c.kind != ColumnKind::Target)
    }

    pub fn target_column(&self) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.kind == ColumnKind::Target)
    }

    pub fn features(&self) -> Vec<FeatureKind> {
        self.feature_columns()
            .map(|c| match c.kind {
                ColumnKind::Categorical => FeatureKind::Categorical {
                    cardinality: c.vocabulary.as_ref().map_or(0, Vec::len),
                },
                _ => FeatureKind::Numeric,
            })
            .collect()
    }

    /// Number of feature columns (N).
    pub fn feature_count(&self) -> usize {
        self.feature_columns().count()
    }

    /// Tokens seen by the model: one per feature plus the classification token.
    pub fn token_count(&self) -> usize {
        self.feature_count() + 1
    }
}

/// Limited-data protocol capping the number of train and validation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Setting {
    Full,
    T200,
    T100,
    T50,
    T20,
}

impl Setting {
    pub const ALL: [Setting; 5] = [
        Setting::Full,
        Setting::T200,
        Setting::T100,
        Setting::T50,
        Setting::T20,
    ];

    /// `(train, valid)` row caps; `None` keeps everything.
    pub fn caps(self) -> Option<(usize, usize)> {
        match self {
            Setting::Full => None,
            Setting::T200 => Some((200, 50)),
            Setting::T100 => Some((100, 25)),
            Setting::T50 => Some((50, 13)),
            Setting::T20 => Some((20, 5)),
        }
    }

    pub fn is_limited(self) -> bool {
        self != Setting::Full
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Full => "T-full",
            Setting::T200 => "T-200",
            Setting::T100 => "T-100",
            Setting::T50 => "T-50",
            Setting::T20 => "T-20",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown setting `{s}` (expected one of T-full, T-200, T-100, T-50, T-20)"
                ))
            })
    }
}

impl TryFrom<String> for Setting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setting> for String {
    fn from(s: Setting) -> String {
        s.to_string()
    }
}
