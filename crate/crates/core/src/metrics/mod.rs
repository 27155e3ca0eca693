//! Forecast error metrics and the per-horizon benchmark table.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const DEFAULT_EVAL_BATCH: usize = 256;

fn check_shapes(op: &str, pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::contract(format!(
            "{op}: prediction shape {:?} differs from truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract(format!("{op}: empty input")));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_shapes("mse", pred, truth)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}

pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_shapes("mae", pred, truth)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Anything mapping `[B, L, C]` inputs to `[B, T, C_out]` forecasts in
/// inference mode.
pub trait Forecaster {
    fn horizon(&self) -> usize;
    fn forecast(&self, x: &Tensor) -> Result<Tensor>;
}

impl Forecaster for ModelParams {
    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn forecast(&self, x: &Tensor) -> Result<Tensor> {
        self.predict(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub dataset: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
    pub config_hash: String,
}

impl EvalResult {
    /// `MSE, MAE >= 0` and `MAE <= sqrt(MSE)`.
    pub fn check(&self) -> Result<()> {
        let tol = 1e-12 * (1.0 + self.mse.sqrt());
        if self.mse < 0.0 || self.mae < 0.0 || self.mae > self.mse.sqrt() + tol {
            return Err(Error::contract(format!(
                "inconsistent metrics for {} horizon {}: mse {} mae {}",
                self.dataset, self.horizon, self.mse, self.mae
            )));
        }
        Ok(())
    }

    /// One JSON object; non-finite metrics become `null`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain fields serialize")
    }
}

/// Hex SHA-256 of the config's canonical field listing.
pub fn config_hash(config: &ModelConfig) -> String {
    let mut h = Sha256::new();
    for (k, v) in config.fields() {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub horizons: Vec<usize>,
    pub batch_size: usize,
    /// Score in original units instead of standardized ones.
    pub raw_units: bool,
}

impl BenchOptions {
    pub fn new(horizons: Vec<usize>) -> Self {
        Self {
            horizons,
            batch_size: DEFAULT_EVAL_BATCH,
            raw_units: false,
        }
    }
}

/// Scores `model` on every window of `test` for each horizon prefix.
///
/// Horizon `h` compares the first `h` forecast steps with the first `h`
/// target steps of the same windows.
pub fn benchmark<F: Forecaster + ?Sized>(
    model: &F,
    dataset: &str,
    test: &WindowedDataset,
    options: &BenchOptions,
    config_hash: &str,
) -> Result<Vec<EvalResult>> {
    let t = model.horizon();
    if options.horizons.is_empty() {
        return Err(Error::config("bench.horizons", "need at least one horizon"));
    }
    if let Some(&h) = options.horizons.iter().find(|&&h| h == 0 || h > t) {
        return Err(Error::contract(format!(
            "horizon {h} is outside the model's 1..={t}"
        )));
    }
    if options.batch_size == 0 {
        return Err(Error::config("bench.batch_size", "must be at least 1"));
    }
    if test.is_empty() {
        return Err(Error::config("data.split", "test split has no windows"));
    }
    if test.horizon() != t {
        return Err(Error::contract(format!(
            "dataset horizon {} differs from model horizon {t}",
            test.horizon()
        )));
    }
    let cout = test.target_channels().len();
    let targets = test.target_channels().to_vec();
    let mut sq = vec![0.0; options.horizons.len()];
    let mut ab = vec![0.0; options.horizons.len()];
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(options.batch_size) {
        let (x, y) = test.batch(chunk);
        let mut pred = model.forecast(&x)?;
        if pred.shape() != y.shape() {
            return Err(Error::contract(format!(
                "forecast shape {:?} differs from target {:?}",
                pred.shape(),
                y.shape()
            )));
        }
        let mut y = y;
        if options.raw_units {
            test.norm_stats().destandardize(pred.data_mut(), &targets);
            test.norm_stats().destandardize(y.data_mut(), &targets);
        }
        for (p, q) in pred.data().chunks(t * cout).zip(y.data().chunks(t * cout)) {
            for (k, &h) in options.horizons.iter().enumerate() {
                let n = h * cout;
                for (a, b) in p[..n].iter().zip(&q[..n]) {
                    sq[k] += (a - b) * (a - b);
                    ab[k] += (a - b).abs();
                }
            }
        }
    }
    let windows = test.len();
    options
        .horizons
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let n = (windows * h * cout) as f64;
            let r = EvalResult {
                dataset: dataset.to_string(),
                horizon: h,
                mse: sq[k] / n,
                mae: ab[k] / n,
                windows,
                config_hash: config_hash.to_string(),
            };
            r.check()?;
            Ok(r)
        })
        .collect()
}

/// Rows sorted by `(dataset, horizon)`.
pub fn sort_results(results: &mut [EvalResult]) {
    results.sort_by(|a, b| a.dataset.cmp(&b.dataset).then(a.horizon.cmp(&b.horizon)));
}

/// `dataset,horizon,mse,mae,windows,config_hash` table.
pub fn results_csv(results: &[EvalResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(r).expect("in-memory write");
    }
    if results.is_empty() {
        w.write_record(["dataset", "horizon", "mse", "mae", "windows", "config_hash"])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn results_jsonl(results: &[EvalResult]) -> String {
    results.iter().map(|r| r.to_json() + "\n").collect()
}
