use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::quantile::{fit_quantile_transform, ColumnTransform, DEFAULT_NOISE};
use super::schema::{Schema, Setting, TaskType};
use crate::error::{Error, Result};

/// Values of one feature column.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    /// Vocabulary indices; the vocabulary length is the reserved "unknown" index.
    Categorical(Vec<usize>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> ColumnData {
        match self {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
            ColumnData::Categorical(v) => {
                ColumnData::Categorical(rows.iter().map(|&r| v[r]).collect())
            }
        }
    }
}

/// Rows handed to the model, column-major in schema feature order.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub columns: Vec<ColumnData>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, ColumnData::len)
    }
}

/// Disjoint train/valid/test row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl Splits {
    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
            SplitKind::Test => &self.test,
        }
    }
}

/// Target standardization parameters fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    /// One entry per feature; `None` for categorical columns.
    pub columns: Vec<Option<ColumnTransform>>,
    pub target: Option<TargetScaler>,
    pub warnings: Vec<String>,
}

/// One dataset: schema, raw rows, splits and fitted preprocessing.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub schema: Schema,
    /// Raw feature columns in schema feature order.
    pub features: Vec<ColumnData>,
    /// Raw targets (0/1 for binary tasks).
    pub targets: Vec<f64>,
    pub splits: Option<Splits>,
    pub preprocessing: Option<Preprocessing>,
    /// Ground-truth mixture weights for synthetic datasets.
    pub mixture_weights: Option<Vec<f64>>,
    /// Categorical values that were not in the vocabulary at load time.
    pub unknown_categories: usize,
    processed: Option<(Vec<ColumnData>, Vec<f64>)>,
}

impl DatasetBundle {
    pub fn new(schema: Schema, features: Vec<ColumnData>, targets: Vec<f64>) -> Result<Self> {
        schema.validate()?;
        if features.len() != schema.feature_count() {
            return Err(Error::Data(format!(
                "dataset `{}`: {} feature columns for a schema with {}",
                schema.name,
                features.len(),
                schema.feature_count()
            )));
        }
        if let Some(c) = features.iter().find(|c| c.len() != targets.len()) {
            return Err(Error::Data(format!(
                "dataset `{}`: column with {} rows vs {} targets",
                schema.name,
                c.len(),
                targets.len()
            )));
        }
        if schema.task == TaskType::Binary {
            if let Some((row, y)) = targets.iter().enumerate().find(|(_, &y)| y != 0.0 && y != 1.0) {
                return Err(Error::Data(format!(
                    "dataset `{}` row {row}: binary target {y} is not 0 or 1",
                    schema.name
                )));
            }
        }
        for (col, kind) in features.iter().zip(schema.features()) {
            if let (ColumnData::Categorical(idx), super::schema::FeatureKind::Categorical { cardinality }) =
                (col, kind)
            {
                if idx.iter().any(|&i| i > cardinality) {
                    return Err(Error::Data("categorical index beyond unknown slot".into()));
                }
            }
        }
        Ok(Self {
            schema,
            features,
            targets,
            splits: None,
            preprocessing: None,
            mixture_weights: None,
            unknown_categories: 0,
            processed: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.schema.name
    }

    pub fn task(&self) -> TaskType {
        self.schema.task
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    pub fn splits(&self) -> Result<&Splits> {
        self.splits
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("dataset `{}` has not been split", self.name())))
    }

    pub fn split_indices(&self, kind: SplitKind) -> Result<&[usize]> {
        Ok(self.splits()?.get(kind))
    }

    /// 80:20 train/test split, then 20% of the remaining train rows for validation.
    /// Sizes use floor; the permutation comes from `seed`.
    pub fn split(&mut self, seed: u64) -> Result<&Splits> {
        self.splits = Some(split_rows(self.rows(), seed)?);
        self.preprocessing = None;
        self.processed = None;
        self.splits()
    }

    /// Subsamples train and valid rows down to the setting's caps; test is untouched.
    pub fn apply_setting(&mut self, setting: Setting, seed: u64) -> Result<()> {
        let splits = self.splits()?.clone();
        self.splits = Some(apply_setting(&splits, setting, seed));
        self.preprocessing = None;
        self.processed = None;
        Ok(())
    }

    /// Fits quantile transforms on the training rows of every numeric column and,
    /// for regression, target standardization. Noise for tie-breaking is seeded.
    pub fn fit_preprocessing(&mut self, seed: u64) -> Result<()> {
        self.fit_preprocessing_with_noise(seed, DEFAULT_NOISE)
    }

    pub fn fit_preprocessing_with_noise(&mut self, seed: u64, noise: f64) -> Result<()> {
        let train = self.split_indices(SplitKind::Train)?.to_vec();
        if train.is_empty() {
            return Err(Error::Data(format!("dataset `{}` has no training rows", self.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut warnings = Vec::new();
        let names: Vec<String> = self.schema.feature_columns().map(|c| c.name.clone()).collect();
        let mut columns = Vec::with_capacity(self.features.len());
        for (col, name) in self.features.iter().zip(&names) {
            match col {
                ColumnData::Numeric(v) => {
                    let values: Vec<f64> = train.iter().map(|&r| v[r]).collect();
                    let (t, warn) = fit_quantile_transform(&values, noise, &mut rng);
                    if let Some(w) = warn {
                        warnings.push(format!("{}: {w}", name));
                    }
                    columns.push(Some(t));
                }
                ColumnData::Categorical(_) => columns.push(None),
            }
        }
        let target = match self.task() {
            TaskType::Regression => Some(standardize_targets(&self.targets, &train)?),
            TaskType::Binary => None,
        };
        let pre = Preprocessing {
            columns,
            target,
            warnings,
        };
        self.processed = Some(self.transform(&pre));
        self.preprocessing = Some(pre);
        Ok(())
    }

    fn transform(&self, pre: &Preprocessing) -> (Vec<ColumnData>, Vec<f64>) {
        let features = self
            .features
            .iter()
            .zip(&pre.columns)
            .map(|(col, t)| match (col, t) {
                (ColumnData::Numeric(v), Some(t)) => {
                    ColumnData::Numeric(v.iter().map(|&x| t.apply(x)).collect())
                }
                (other, _) => other.clone(),
            })
            .collect();
        let targets = match pre.target {
            Some(s) => self.targets.iter().map(|&y| s.apply(y)).collect(),
            None => self.targets.clone(),
        };
        (features, targets)
    }

    /// Split, subsample and fit in one go.
    pub fn prepare(&mut self, split_seed: u64, setting: Setting, setting_seed: u64) -> Result<()> {
        self.split(split_seed)?;
        self.apply_setting(setting, setting_seed)?;
        self.fit_preprocessing(split_seed)
    }

    pub fn is_prepared(&self) -> bool {
        self.processed.is_some()
    }

    fn processed(&self) -> Result<&(Vec<ColumnData>, Vec<f64>)> {
        self.processed.as_ref().ok_or_else(|| {
            Error::Usage(format!("dataset `{}` has no fitted preprocessing", self.name()))
        })
    }

    /// Preprocessed rows and targets for the given row indices.
    pub fn batch(&self, rows: &[usize]) -> Result<(Batch, Vec<f64>)> {
        let (features, targets) = self.processed()?;
        let columns = features.iter().map(|c| c.select(rows)).collect();
        Ok((Batch { columns }, rows.iter().map(|&r| targets[r]).collect()))
    }

    /// Preprocessed targets of every row.
    pub fn processed_targets(&self) -> Result<&[f64]> {
        Ok(&self.processed()?.1)
    }

    pub fn target_scaler(&self) -> Option<TargetScaler> {
        self.preprocessing.as_ref().and_then(|p| p.target)
    }
}

pub fn split_rows(rows: usize, seed: u64) -> Result<Splits> {
    if rows < 5 {
        return Err(Error::Data(format!("need at least 5 rows to split, got {rows}")));
    }
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = rows / 5;
    let n_valid = (rows - n_test) / 5;
    let mut test = perm[..n_test].to_vec();
    let mut valid = perm[n_test..n_test + n_valid].to_vec();
    let mut train = perm[n_test + n_valid..].to_vec();
    test.sort_unstable();
    valid.sort_unstable();
    train.sort_unstable();
    Ok(Splits { train, valid, test })
}

pub fn apply_setting(splits: &Splits, setting: Setting, seed: u64) -> Splits {
    let Some((train_cap, valid_cap)) = setting.caps() else {
        return splits.clone();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e77_1a6e);
    let mut take = |rows: &[usize], cap: usize| {
        let mut v = rows.to_vec();
        if v.len() > cap {
            v.shuffle(&mut rng);
            v.truncate(cap);
            v.sort_unstable();
        }
        v
    };
    let train = take(&splits.train, train_cap);
    let valid = take(&splits.valid, valid_cap);
    Splits {
        train,
        valid,
        test: splits.test.clone(),
    }
}

/// Mean and population standard deviation of the training targets.
pub fn standardize_targets(targets: &[f64], train: &[usize]) -> Result<TargetScaler> {
    let n = train.len() as f64;
    let mean = train.iter().map(|&r| targets[r]).sum::<f64>() / n;
    let var = train.iter().map(|&r| (targets[r] - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Data(
            "regression targets have zero variance on the training split".into(),
        ));
    }
    Ok(TargetScaler { mean, std })
}
