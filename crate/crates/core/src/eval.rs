//! Scores, cross-method rankings, win/tie/loss counts, coefficient export and
//! report assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, SplitKind, TaskType};
use crate::error::{Error, Result};
use crate::model::{Assembly, DatasetId};
use crate::nn::loss_value;
use crate::nn::Tensor;
use crate::training::TrainLog;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 1024;
/// Decimal places compared by [`win_tie_loss`].
pub const TIE_DECIMALS: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    /// Mean squared error on standardized targets.
    Mse,
    /// Task loss, used for the pretraining log.
    Loss,
}

impl Metric {
    pub fn for_task(task: TaskType) -> Self {
        match task {
            TaskType::Binary => Metric::Accuracy,
            TaskType::Regression => Metric::Mse,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Accuracy)
    }

    pub fn orientation(self) -> Orientation {
        if self.higher_is_better() {
            Orientation::HigherBetter
        } else {
            Orientation::LowerBetter
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub metric: Metric,
    pub value: f64,
    /// MSE in the original target units, for regression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_mse: Option<f64>,
}

/// Model outputs for the given rows, evaluated in chunks.
pub fn predict_rows(assembly: &Assembly, id: DatasetId, bundle: &DatasetBundle, rows: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (batch, _) = bundle.batch(chunk)?;
        out.extend(assembly.predict(id, &batch)?);
    }
    Ok(out)
}

/// Accuracy at logit threshold 0, or MSE.
pub fn score_predictions(task: TaskType, predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Usage(format!(
            "cannot score {} predictions against {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = predictions.len() as f64;
    Ok(match task {
        TaskType::Binary => {
            predictions
                .iter()
                .zip(targets)
                .filter(|(&p, &y)| (p > 0.0) == (y == 1.0))
                .count() as f64
                / n
        }
        TaskType::Regression => predictions.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n,
    })
}

pub fn score(assembly: &Assembly, id: DatasetId, bundle: &DatasetBundle, split: SplitKind) -> Result<Score> {
    let rows = bundle.split_indices(split)?;
    if rows.is_empty() {
        return Err(Error::Usage(format!("dataset `{}`: the {split:?} split is empty", bundle.name())));
    }
    let pred = predict_rows(assembly, id, bundle, rows)?;
    let targets: Vec<f64> = {
        let all = bundle.processed_targets()?;
        rows.iter().map(|&r| all[r]).collect()
    };
    let task = bundle.task();
    let value = score_predictions(task, &pred, &targets)?;
    let raw_mse = bundle.target_scaler().map(|s| value * s.std * s.std);
    Ok(Score {
        metric: Metric::for_task(task),
        value,
        raw_mse,
    })
}

/// Mean task loss over the validation split.
pub fn validation_loss(assembly: &Assembly, id: DatasetId, bundle: &DatasetBundle) -> Result<f64> {
    let rows = bundle.split_indices(SplitKind::Valid)?;
    let pred = predict_rows(assembly, id, bundle, rows)?;
    let all = bundle.processed_targets()?;
    let targets: Vec<f64> = rows.iter().map(|&r| all[r]).collect();
    loss_value(&Tensor::from_vec(pred), &targets, bundle.task())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    /// Dataset and setting, e.g. `synth-task-03/T-100`.
    pub task: String,
    pub metric: Metric,
    pub orientation: Orientation,
    pub scores: Vec<f64>,
}

/// Tasks by methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub methods: Vec<String>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<&String> = self.methods.iter().collect();
        if distinct.len() != self.methods.len() {
            return Err(Error::Usage("duplicate method names in score table".into()));
        }
        for r in &self.rows {
            if r.scores.len() != self.methods.len() {
                return Err(Error::Usage(format!(
                    "task `{}` has {} scores for {} methods",
                    r.task,
                    r.scores.len(),
                    self.methods.len()
                )));
            }
            if let Some(i) = r.scores.iter().position(|s| !s.is_finite()) {
                return Err(Error::Usage(format!(
                    "task `{}`: score of `{}` is not finite",
                    r.task, self.methods[i]
                )));
            }
        }
        Ok(())
    }

    fn method(&self, name: &str) -> Result<usize> {
        self.methods
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::Usage(format!("method `{name}` is not in the score table")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub methods: Vec<String>,
    /// Per task, the rank of each method (1 = best, ties averaged).
    pub ranks: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation over tasks.
    pub std: Vec<f64>,
}

/// Average-tie ranks of one row. Exactly equal scores share their positions.
pub fn rank_row(scores: &[f64], orientation: Orientation) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        match orientation {
            Orientation::HigherBetter => ord.reverse(),
            Orientation::LowerBetter => ord,
        }
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_methods(table: &ScoreTable) -> Result<Ranking> {
    table.validate()?;
    if table.methods.len() < 2 {
        return Err(Error::Usage("ranking needs at least two methods".into()));
    }
    if table.rows.is_empty() {
        return Err(Error::Usage("ranking needs at least one task".into()));
    }
    let ranks: Vec<Vec<f64>> = table.rows.iter().map(|r| rank_row(&r.scores, r.orientation)).collect();
    let n = ranks.len() as f64;
    let k = table.methods.len();
    let mean: Vec<f64> = (0..k).map(|m| ranks.iter().map(|r| r[m]).sum::<f64>() / n).collect();
    let std = (0..k)
        .map(|m| (ranks.iter().map(|r| (r[m] - mean[m]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    Ok(Ranking {
        methods: table.methods.clone(),
        ranks,
        mean,
        std,
    })
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

/// Counts tasks where `a` beats, ties or loses to `b`. Scores equal after
/// rounding to `decimals` places are ties.
pub fn win_tie_loss_with(table: &ScoreTable, a: &str, b: &str, decimals: i32) -> Result<WinTieLoss> {
    table.validate()?;
    let (ia, ib) = (table.method(a)?, table.method(b)?);
    let mut out = WinTieLoss {
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for r in &table.rows {
        let (x, y) = (round_to(r.scores[ia], decimals), round_to(r.scores[ib], decimals));
        if x == y {
            out.ties += 1;
        } else if (x > y) == (r.orientation == Orientation::HigherBetter) {
            out.wins += 1;
        } else {
            out.losses += 1;
        }
    }
    Ok(out)
}

pub fn win_tie_loss(table: &ScoreTable, a: &str, b: &str) -> Result<WinTieLoss> {
    win_tie_loss_with(table, a, b, TIE_DECIMALS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientPhase {
    Pretrained,
    Calibrated,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub dataset: String,
    /// 0 is the classification token; feature `j` is token `j + 1`.
    pub token: usize,
    pub token_name: String,
    /// CaLinear index, two per block in forward order.
    pub layer: usize,
    pub phase: CoefficientPhase,
    /// `v_n`; absent in direct-coefficient mode.
    pub context: Option<f64>,
    pub coefficients: Vec<f64>,
}

/// One record per dataset, token and CaLinear.
pub fn coefficient_records(
    assembly: &Assembly,
    ids: &[DatasetId],
    phase: CoefficientPhase,
) -> Result<Vec<CoefficientRecord>> {
    let mut out = Vec::new();
    for &id in ids {
        let parts = assembly.dataset(id)?;
        let names: Vec<String> = std::iter::once("[cls]".to_string())
            .chain(parts.schema.feature_columns().map(|c| c.name.clone()))
            .collect();
        let context = assembly.context(id)?;
        let matrices = assembly.coefficients(id)?;
        for (token, name) in names.iter().enumerate() {
            for (layer, c) in matrices.iter().enumerate() {
                out.push(CoefficientRecord {
                    dataset: parts.name.clone(),
                    token,
                    token_name: name.clone(),
                    layer,
                    phase,
                    context: context.as_ref().map(|v| v[token]),
                    coefficients: c.row(token).to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Writes [`coefficient_records`] as a JSON array.
pub fn export_coefficients(
    assembly: &Assembly,
    ids: &[DatasetId],
    phase: CoefficientPhase,
    path: &Path,
) -> Result<Vec<CoefficientRecord>> {
    let records = coefficient_records(assembly, ids, phase)?;
    fs::write(path, serde_json::to_string_pretty(&records)? + "\n").map_err(|e| Error::io(path, e))?;
    Ok(records)
}

/// Scores of one method, as produced by evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: String,
    pub scores: Vec<TaskScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub dataset: String,
    pub setting: String,
    pub score: Score,
}

impl TaskScore {
    pub fn task(&self) -> String {
        format!("{}/{}", self.dataset, self.setting)
    }
}

/// Merges per-method results into one table per setting, requiring that every
/// method covers the same tasks.
pub fn tables_by_setting(results: &[MethodResults]) -> Result<BTreeMap<String, ScoreTable>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Usage("no results to compare".into()))?;
    let tasks: BTreeSet<String> = first.scores.iter().map(TaskScore::task).collect();
    let mut cells: BTreeMap<String, BTreeMap<String, &TaskScore>> = BTreeMap::new();
    for r in results {
        let mine: BTreeSet<String> = r.scores.iter().map(TaskScore::task).collect();
        if mine != tasks || mine.len() != r.scores.len() {
            let missing: Vec<_> = tasks.symmetric_difference(&mine).cloned().collect();
            return Err(Error::Usage(format!(
                "method `{}` covers a different task set than `{}` (differs in {missing:?})",
                r.method, first.method
            )));
        }
        for s in &r.scores {
            cells.entry(s.task()).or_default().insert(r.method.clone(), s);
        }
    }
    let methods: Vec<String> = results.iter().map(|r| r.method.clone()).collect();
    let mut tables: BTreeMap<String, ScoreTable> = BTreeMap::new();
    for (task, by_method) in &cells {
        let any = by_method.values().next().expect("non-empty");
        let metric = any.score.metric;
        if let Some(bad) = by_method.values().find(|s| s.score.metric != metric) {
            return Err(Error::Usage(format!("task `{task}` mixes metrics ({:?})", bad.score.metric)));
        }
        let table = tables.entry(any.setting.clone()).or_insert_with(|| ScoreTable {
            methods: methods.clone(),
            rows: Vec::new(),
        });
        table.rows.push(ScoreRow {
            task: task.clone(),
            metric,
            orientation: metric.orientation(),
            scores: methods.iter().map(|m| by_method[m].score.value).collect(),
        });
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScoreRow {
    pub task: String,
    pub metric: Metric,
    /// Accuracy, or negated standardized MSE, so that higher is better throughout.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCell {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTableRow {
    pub method: String,
    /// One cell per setting, in `settings` order.
    pub cells: Vec<RankCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinTieLossMatrix {
    pub setting: String,
    pub methods: Vec<String>,
    /// `counts[i][j]` compares method `i` against method `j`.
    pub counts: Vec<Vec<WinTieLoss>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub name: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub dataset: String,
    pub phase: CoefficientPhase,
    pub records: usize,
    /// Mean over tokens of the largest coefficient, a crude specialization measure.
    pub mean_max_coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub methods: Vec<String>,
    pub settings: Vec<String>,
    pub raw_scores: BTreeMap<String, Vec<RawScoreRow>>,
    pub rank_table: Vec<RankTableRow>,
    pub win_tie_loss: Vec<WinTieLossMatrix>,
    pub training: Vec<LogSummary>,
    pub coefficients: Vec<CoefficientSummary>,
}

fn summarize_log(name: &str, log: &TrainLog) -> Option<LogSummary> {
    let last = log.records.last()?;
    let metric = last.metric;
    let best = log.records.iter().fold(None::<&crate::training::EpochRecord>, |acc, r| match acc {
        None => Some(r),
        Some(b) if crate::training::is_better(metric, r.valid_metric, b.valid_metric) => Some(r),
        keep => keep,
    })?;
    Some(LogSummary {
        name: name.to_string(),
        epochs: last.epoch,
        best_epoch: best.epoch,
        best_metric: best.valid_metric,
        metric,
    })
}

/// Assembles the full comparison report. Identical inputs give identical output.
pub fn build_report(
    results: &[MethodResults],
    logs: &[(String, TrainLog)],
    dumps: &[CoefficientRecord],
) -> Result<Report> {
    let tables = tables_by_setting(results)?;
    let methods: Vec<String> = results.iter().map(|r| r.method.clone()).collect();
    let settings: Vec<String> = tables.keys().cloned().collect();
    let mut raw_scores = BTreeMap::new();
    let mut rank_cells: Vec<Vec<RankCell>> = vec![Vec::new(); methods.len()];
    let mut matrices = Vec::new();
    for (setting, table) in &tables {
        raw_scores.insert(
            setting.clone(),
            table
                .rows
                .iter()
                .map(|r| RawScoreRow {
                    task: r.task.clone(),
                    metric: r.metric,
                    values: r
                        .scores
                        .iter()
                        .map(|&s| if r.orientation == Orientation::LowerBetter { -s } else { s })
                        .collect(),
                })
                .collect(),
        );
        if methods.len() >= 2 {
            let ranking = rank_methods(table)?;
            for (m, cells) in rank_cells.iter_mut().enumerate() {
                cells.push(RankCell {
                    mean: ranking.mean[m],
                    std: ranking.std[m],
                });
            }
            let counts = methods
                .iter()
                .map(|a| methods.iter().map(|b| win_tie_loss(table, a, b)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            matrices.push(WinTieLossMatrix {
                setting: setting.clone(),
                methods: methods.clone(),
                counts,
            });
        }
    }
    let rank_table = if methods.len() >= 2 {
        methods
            .iter()
            .zip(rank_cells)
            .map(|(m, cells)| RankTableRow {
                method: m.clone(),
                cells,
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut groups: BTreeMap<(String, String), Vec<&CoefficientRecord>> = BTreeMap::new();
    for r in dumps {
        let phase = serde_json::to_string(&r.phase)?;
        groups.entry((r.dataset.clone(), phase)).or_default().push(r);
    }
    let coefficients = groups
        .values()
        .map(|rs| CoefficientSummary {
            dataset: rs[0].dataset.clone(),
            phase: rs[0].phase,
            records: rs.len(),
            mean_max_coefficient: rs
                .iter()
                .map(|r| r.coefficients.iter().cloned().fold(f64::MIN, f64::max))
                .sum::<f64>()
                / rs.len() as f64,
        })
        .collect();
    Ok(Report {
        methods,
        settings,
        raw_scores,
        rank_table,
        win_tie_loss: matrices,
        training: logs.iter().filter_map(|(n, l)| summarize_log(n, l)).collect(),
        coefficients,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Plain-text rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.methods.iter().map(String::len).max().unwrap_or(6).max(6);
        for (setting, rows) in &self.raw_scores {
            let _ = writeln!(s, "== scores, {setting} (regression cells are -MSE) ==");
            let tw = rows.iter().map(|r| r.task.len()).max().unwrap_or(4).max(4);
            let _ = write!(s, "{:tw$}", "task");
            for m in &self.methods {
                let _ = write!(s, "  {m:>width$}");
            }
            s.push('\n');
            for r in rows {
                let _ = write!(s, "{:tw$}", r.task);
                for v in &r.values {
                    let _ = write!(s, "  {v:>width$.3}");
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if !self.rank_table.is_empty() {
            let _ = writeln!(s, "== mean rank (std) ==");
            let _ = write!(s, "{:width$}", "method");
            for set in &self.settings {
                let _ = write!(s, "  {set:>13}");
            }
            s.push('\n');
            for row in &self.rank_table {
                let _ = write!(s, "{:width$}", row.method);
                for c in &row.cells {
                    let cell = format!("{:.2} ± {:.2}", c.mean, c.std);
                    let _ = write!(s, "  {cell:>13}");
                }
                s.push('\n');
            }
            s.push('\n');
        }
        for m in &self.win_tie_loss {
            let _ = writeln!(s, "== win/tie/loss, {} (row vs column) ==", m.setting);
            let _ = write!(s, "{:width$}", "");
            for name in &m.methods {
                let _ = write!(s, "  {name:>width$}");
            }
            s.push('\n');
            for (name, row) in m.methods.iter().zip(&m.counts) {
                let _ = write!(s, "{name:width$}");
                for c in row {
                    let cell = format!("{}/{}/{}", c.wins, c.ties, c.losses);
                    let _ = write!(s, "  {cell:>width$}");
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if !self.training.is_empty() {
            let _ = writeln!(s, "== training ==");
            for t in &self.training {
                let _ = writeln!(
                    s,
                    "{}: {} epochs, best epoch {} ({:?} {:.4})",
                    t.name, t.epochs, t.best_epoch, t.metric, t.best_metric
                );
            }
        }
        s
    }

    pub fn write(&self, json_path: &Path, text_path: &Path) -> Result<()> {
        fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        fs::write(text_path, self.to_text()).map_err(|e| Error::io(text_path, e))
    }
}
