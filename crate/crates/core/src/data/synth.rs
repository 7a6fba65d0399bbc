//! Synthetic suite of related regression datasets.
//!
//! A fixed set of random two-layer tanh networks `g_1..g_P` plays the role of the
//! shared function family. Every dataset mixes them with its own simplex weights,
//! `y = sum_p w_p g_p(x) + noise`, so tasks differ only in where they sit inside a
//! common function space. Held-out tasks draw fresh weights.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bundle::{ColumnData, DatasetBundle};
use super::csv_io::{load_csv, write_csv};
use super::schema::{ColumnSpec, Schema, TaskType};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSuiteSpec {
    pub seed: u64,
    /// P: number of ground-truth nonlinearities.
    pub basis_functions: usize,
    /// K: number of pretraining datasets.
    pub pretrain_datasets: usize,
    pub heldout_tasks: usize,
    pub rows: usize,
    /// k: input features per dataset.
    pub features: usize,
    pub hidden: usize,
    pub noise_std: f64,
}

impl Default for SynthSuiteSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            basis_functions: 6,
            pretrain_datasets: 16,
            heldout_tasks: 10,
            rows: 2000,
            features: 8,
            hidden: 16,
            noise_std: 0.1,
        }
    }
}

/// Frozen random network `R^k -> R`, shifted and scaled to zero mean and unit
/// variance under standard normal inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFn {
    inputs: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    shift: f64,
    scale: f64,
}

impl GroundTruthFn {
    fn random<R: Rng>(rng: &mut R, inputs: usize, hidden: usize) -> Self {
        let in_scale = 1.5 / (inputs as f64).sqrt();
        let w1 = (0..hidden * inputs)
            .map(|_| in_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b1 = (0..hidden)
            .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w2 = (0..hidden).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut f = Self {
            inputs,
            w1,
            b1,
            w2,
            shift: 0.0,
            scale: 1.0,
        };
        let samples: Vec<f64> = (0..4096)
            .map(|_| {
                let x: Vec<f64> = (0..inputs).map(|_| rng.sample(StandardNormal)).collect();
                f.eval(&x)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        f.shift = mean;
        f.scale = var.sqrt().max(1e-12);
        f
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let k = self.inputs;
        let raw: f64 = self
            .w2
            .iter()
            .enumerate()
            .map(|(h, w)| {
                let pre = self.b1[h]
                    + self.w1[h * k..(h + 1) * k]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                w * pre.tanh()
            })
            .sum();
        (raw - self.shift) / self.scale
    }
}

#[derive(Debug, Clone)]
pub struct SynthSuite {
    pub spec: SynthSuiteSpec,
    pub functions: Vec<GroundTruthFn>,
    pub pretrain: Vec<DatasetBundle>,
    pub heldout: Vec<DatasetBundle>,
}

impl SynthSuite {
    /// Noise-free ground-truth value of a mixture at raw input `x`.
    pub fn oracle(&self, weights: &[f64], x: &[f64]) -> f64 {
        weights
            .iter()
            .zip(&self.functions)
            .map(|(w, g)| w * g.eval(x))
            .sum()
    }

    /// Oracle predictions for raw rows `rows` of `bundle`.
    pub fn oracle_predict(&self, bundle: &DatasetBundle, rows: &[usize]) -> Result<Vec<f64>> {
        let weights = bundle.mixture_weights.as_ref().ok_or_else(|| {
            Error::Usage(format!("dataset `{}` has no mixture weights", bundle.name()))
        })?;
        let cols: Vec<&Vec<f64>> = bundle
            .features
            .iter()
            .map(|c| match c {
                ColumnData::Numeric(v) => Ok(v),
                ColumnData::Categorical(_) => Err(Error::Usage("synthetic data is numeric".into())),
            })
            .collect::<Result<_>>()?;
        Ok(rows
            .iter()
            .map(|&r| {
                let x: Vec<f64> = cols.iter().map(|c| c[r]).collect();
                self.oracle(weights, &x)
            })
            .collect())
    }

    /// Writes every dataset as `<dir>/<name>.csv` plus `<dir>/<name>.json`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for b in self.pretrain.iter().chain(&self.heldout) {
            write_csv(
                b,
                &dir.join(format!("{}.csv", b.name())),
                &dir.join(format!("{}.json", b.name())),
            )?;
        }
        Ok(())
    }
}

pub fn pretrain_name(i: usize) -> String {
    format!("synth-pre-{i:02}")
}

pub fn heldout_name(i: usize) -> String {
    format!("synth-task-{i:02}")
}

/// Loads a suite previously written by [`SynthSuite::export`]. Returns
/// `(pretraining bundles, held-out bundles)`.
pub fn import_suite(dir: &Path, spec: &SynthSuiteSpec) -> Result<(Vec<DatasetBundle>, Vec<DatasetBundle>)> {
    let load = |name: String| {
        load_csv(
            &dir.join(format!("{name}.csv")),
            &dir.join(format!("{name}.json")),
        )
    };
    let pretrain = (0..spec.pretrain_datasets)
        .map(|i| load(pretrain_name(i)))
        .collect::<Result<_>>()?;
    let heldout = (0..spec.heldout_tasks)
        .map(|i| load(heldout_name(i)))
        .collect::<Result<_>>()?;
    Ok((pretrain, heldout))
}

fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn generate_synth_suite(spec: &SynthSuiteSpec) -> Result<SynthSuite> {
    if spec.basis_functions < 2 || spec.pretrain_datasets < 2 {
        return Err(Error::Config(format!(
            "synthetic suite needs P >= 2 and K >= 2 (got P={}, K={})",
            spec.basis_functions, spec.pretrain_datasets
        )));
    }
    if spec.features == 0 || spec.hidden == 0 || spec.rows == 0 || !(spec.noise_std >= 0.0) {
        return Err(Error::Config("synthetic suite extents must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let functions: Vec<GroundTruthFn> = (0..spec.basis_functions)
        .map(|_| GroundTruthFn::random(&mut rng, spec.features, spec.hidden))
        .collect();
    let schema_for = |name: String| Schema {
        name,
        task: TaskType::Regression,
        columns: (0..spec.features)
            .map(|j| ColumnSpec::numeric(format!("x{j}")))
            .chain(std::iter::once(ColumnSpec::target("y")))
            .collect(),
    };
    let make = |name: String, rng: &mut ChaCha8Rng| -> Result<DatasetBundle> {
        let weights = simplex(rng, spec.basis_functions);
        let mut cols = vec![Vec::with_capacity(spec.rows); spec.features];
        let mut targets = Vec::with_capacity(spec.rows);
        let mut x = vec![0.0; spec.features];
        for _ in 0..spec.rows {
            for (j, xj) in x.iter_mut().enumerate() {
                *xj = rng.sample(StandardNormal);
                cols[j].push(*xj);
            }
            let clean: f64 = weights
                .iter()
                .zip(&functions)
                .map(|(w, g)| w * g.eval(&x))
                .sum();
            let noise: f64 = rng.sample(StandardNormal);
            targets.push(clean + spec.noise_std * noise);
        }
        let features = cols.into_iter().map(ColumnData::Numeric).collect();
        let mut b = DatasetBundle::new(schema_for(name), features, targets)?;
        b.mixture_weights = Some(weights);
        Ok(b)
    };
    let pretrain = (0..spec.pretrain_datasets)
        .map(|i| make(pretrain_name(i), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let heldout = (0..spec.heldout_tasks)
        .map(|i| make(heldout_name(i), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthSuite {
        spec: spec.clone(),
        functions,
        pretrain,
        heldout,
    })
}
