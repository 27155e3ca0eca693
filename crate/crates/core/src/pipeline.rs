//! End-to-end commands: train, tune, search, eval and forecast.
//!
//! Each command validates its whole manifest before touching the output
//! directory, so a rejected run writes nothing.

use std::path::{Path, PathBuf};

use crate::data::{load_csv, prepare, DatasetSpec, PreparedData, RawSeries};
use crate::error::{Error, Result};
use crate::hho::{run_hho, HhoResult, TrainingFitness};
use crate::manifest::{ModelSection, RunManifest};
use crate::metrics::{benchmark, config_hash, sort_results, results_csv, results_jsonl, BenchOptions, EvalResult};
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::search::{leaderboard_csv, run_search_with, SearchOutcome, SearchTemplate};
use crate::tensor::{Rng, Tensor};
use crate::trainer::{evaluate_loss, train, TrainReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_MANIFEST_FILE: &str = "manifest.txt";
pub const TUNED_MANIFEST_FILE: &str = "manifest.tuned.txt";
pub const BEST_MANIFEST_FILE: &str = "manifest.best.txt";
pub const HHO_TRACE_FILE: &str = "hho_trace.csv";
pub const LEADERBOARD_FILE: &str = "leaderboard.csv";
pub const RESULTS_CSV_FILE: &str = "results.csv";
pub const RESULTS_JSONL_FILE: &str = "results.jsonl";

/// Horizons reported by `eval` when none are requested, kept when they fit
/// the checkpoint.
pub const STANDARD_HORIZONS: [usize; 4] = [96, 192, 336, 720];

/// Reads and windows the dataset a manifest points at.
pub fn load_dataset(spec: &DatasetSpec) -> Result<PreparedData> {
    if !spec.path.exists() {
        return Err(Error::config(
            "data.path",
            format!("{} does not exist", spec.path.display()),
        ));
    }
    let series = load_csv(&spec.path, spec.has_header, spec.date_column.as_deref())?;
    prepare(
        &series,
        &spec.split,
        spec.lookback,
        spec.horizon,
        spec.target_channels.as_deref(),
        spec.stride,
    )
}

/// Validated manifest, its data and the full model config.
fn resolve(manifest: &RunManifest) -> Result<(PreparedData, ModelConfig)> {
    manifest.validate()?;
    let data = load_dataset(&manifest.data)?;
    let cfg = manifest.model_config(data.channels());
    cfg.validate()?;
    Ok((data, cfg))
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub test_mse: f64,
}

pub fn cmd_train(manifest: &RunManifest) -> Result<TrainOutcome> {
    let (data, cfg) = resolve(manifest)?;
    let tc = manifest.train_config();
    tc.validate()?;
    let mut params = ModelParams::init(&cfg, &mut Rng::substream(manifest.seed, "init"))?;
    let report = train(&mut params, &data.train, &data.val, &tc)?;
    let test_mse = evaluate_loss(&params, &data.test)?;
    let checkpoint = Checkpoint {
        params,
        norm_stats: Some(data.norm_stats.clone()),
        feature_names: data.feature_names.clone(),
    };
    create_out(&manifest.out)?;
    checkpoint.save(&manifest.out.join(CHECKPOINT_FILE))?;
    report.write_log(&manifest.out.join(TRAIN_LOG_FILE))?;
    manifest.save(&manifest.out.join(RESOLVED_MANIFEST_FILE))?;
    log::info!(
        "trained {} epochs, best epoch {} val {:.6} test {:.6}",
        report.epochs(),
        report.best_epoch,
        report.best_val_loss,
        test_mse
    );
    Ok(TrainOutcome {
        checkpoint,
        report,
        test_mse,
    })
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub rate: f64,
    pub result: HhoResult,
    /// Input manifest with only the dropout rate replaced.
    pub manifest: RunManifest,
}

fn tune_with(manifest: &RunManifest, data: &PreparedData, cfg: &ModelConfig) -> Result<TuneOutcome> {
    let hc = manifest.hho_config();
    let fitness = TrainingFitness::new(
        data,
        cfg.clone(),
        manifest.train_config(),
        hc.fitness_epochs,
        manifest.seed,
    );
    let result = run_hho(&fitness, &hc)?;
    let mut tuned = manifest.clone();
    tuned.model.dropout = result.best_rate;
    log::info!(
        "dropout {:.6} with validation loss {:.6} after {} evaluations",
        result.best_rate,
        result.best_fitness,
        result.evaluations
    );
    Ok(TuneOutcome {
        rate: result.best_rate,
        result,
        manifest: tuned,
    })
}

/// Tunes the dropout rate with every structural field frozen.
pub fn cmd_tune(manifest: &RunManifest) -> Result<TuneOutcome> {
    let (data, cfg) = resolve(manifest)?;
    manifest.hho.validate()?;
    let out = tune_with(manifest, &data, &cfg)?;
    create_out(&manifest.out)?;
    write(manifest.out.join(HHO_TRACE_FILE), &out.result.trace_csv())?;
    out.manifest.save(&manifest.out.join(TUNED_MANIFEST_FILE))?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SearchRun {
    pub outcome: SearchOutcome,
    /// Input manifest with the winning structure and optimizer settings.
    pub best: RunManifest,
    pub tuned: Option<TuneOutcome>,
}

/// Structural search; with `two_phase` the winner's dropout rate is then
/// tuned with its structure fixed.
pub fn cmd_search(manifest: &RunManifest, two_phase: bool) -> Result<SearchRun> {
    let (data, cfg) = resolve(manifest)?;
    let mut tc = manifest.train_config();
    if let Some(n) = manifest.search.trial_epochs {
        tc.max_epochs = n;
    }
    let template = SearchTemplate::for_data(cfg, tc, &data);
    let abort = &manifest.search.abort_trials;
    let outcome = run_search_with(
        &data,
        &manifest.search.space,
        &template,
        manifest.search.budget,
        manifest.seed,
        |i| {
            if abort.contains(&i) {
                Err(Error::Input(format!("trial {i} aborted by search.abort_trials")))
            } else {
                Ok(())
            }
        },
    )?;
    let winner = outcome.best();
    let mut best = manifest.clone();
    best.model = ModelSection {
        dropout: manifest.model.dropout,
        ..ModelSection::from_config(&winner.model)
    };
    best.data.lookback = winner.model.lookback;
    best.train.learning_rate = winner.train.learning_rate;
    best.train.batch_size = winner.train.batch_size;

    let tuned = if two_phase {
        let data = if best.data.lookback == data.train.lookback() {
            data
        } else {
            data.with_lookback(best.data.lookback)?
        };
        let cfg = best.model_config(data.channels());
        Some(tune_with(&best, &data, &cfg)?)
    } else {
        None
    };

    create_out(&manifest.out)?;
    write(manifest.out.join(LEADERBOARD_FILE), &leaderboard_csv(&outcome.leaderboard))?;
    best.save(&manifest.out.join(BEST_MANIFEST_FILE))?;
    if let Some(t) = &tuned {
        write(manifest.out.join(HHO_TRACE_FILE), &t.result.trace_csv())?;
        t.manifest.save(&manifest.out.join(TUNED_MANIFEST_FILE))?;
    }
    Ok(SearchRun {
        outcome,
        best,
        tuned,
    })
}

/// Per-horizon test metrics for a checkpoint on the manifest's dataset.
/// `horizons = None` reports the standard horizons that fit the checkpoint,
/// or its full horizon if none do.
pub fn cmd_eval(
    checkpoint_path: &Path,
    manifest: &RunManifest,
    horizons: Option<&[usize]>,
    raw_units: bool,
) -> Result<Vec<EvalResult>> {
    manifest.validate()?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let cfg = &ckpt.params.config;
    let horizons: Vec<usize> = match horizons {
        Some(h) => h.to_vec(),
        None => {
            let fit: Vec<usize> = STANDARD_HORIZONS
                .iter()
                .copied()
                .filter(|&h| h <= cfg.horizon)
                .collect();
            if fit.is_empty() {
                vec![cfg.horizon]
            } else {
                fit
            }
        }
    };
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > cfg.horizon) {
        return Err(Error::contract(format!(
            "horizon {h} exceeds the checkpoint horizon {}",
            cfg.horizon
        )));
    }
    let spec = DatasetSpec {
        lookback: cfg.lookback,
        horizon: cfg.horizon,
        target_channels: Some(cfg.target_channels.clone()),
        ..manifest.data.clone()
    };
    let data = load_dataset(&spec)?;
    if data.channels() != cfg.channels {
        return Err(Error::contract(format!(
            "checkpoint expects {} channels, dataset has {}",
            cfg.channels,
            data.channels()
        )));
    }
    let opts = BenchOptions {
        raw_units,
        ..BenchOptions::new(horizons)
    };
    let mut results = benchmark(&ckpt.params, &manifest.data.name, &data.test, &opts, &config_hash(cfg))?;
    sort_results(&mut results);
    create_out(&manifest.out)?;
    write(manifest.out.join(RESULTS_CSV_FILE), &results_csv(&results))?;
    write(manifest.out.join(RESULTS_JSONL_FILE), &results_jsonl(&results))?;
    Ok(results)
}

/// A forecast in raw units with one named column per target channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub columns: Vec<String>,
    /// `[T, C_out]`.
    pub values: Tensor,
}

impl Forecast {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in self.values.data().chunks(self.columns.len()) {
            w.write_record(row.iter().map(f64::to_string)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

/// Forecasts from a raw-unit `[L, C]` window.
pub fn forecast_window(ckpt: &Checkpoint, window: &Tensor) -> Result<Forecast> {
    let cfg = &ckpt.params.config;
    if window.rank() != 2 || window.shape()[0] != cfg.lookback || window.shape()[1] != cfg.channels {
        return Err(Error::Input(format!(
            "window must have {} rows and {} columns, got {:?}",
            cfg.lookback,
            cfg.channels,
            window.shape()
        )));
    }
    let all: Vec<usize> = (0..cfg.channels).collect();
    let mut x = window.clone();
    if let Some(stats) = &ckpt.norm_stats {
        stats.standardize(x.data_mut(), &all);
    }
    let mut y = ckpt.params.predict(&x)?;
    if let Some(stats) = &ckpt.norm_stats {
        stats.destandardize(y.data_mut(), &cfg.target_channels);
    }
    let columns = cfg
        .target_channels
        .iter()
        .map(|&c| ckpt.feature_names.get(c).cloned().unwrap_or_else(|| format!("f{c}")))
        .collect();
    Ok(Forecast { columns, values: y })
}

/// Reads the last-`L`-rows window from a CSV with a header. A first column
/// that is not one of the checkpoint's features is taken as a date column.
pub fn read_window(ckpt: &Checkpoint, path: &Path) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let c = ckpt.params.config.channels;
    let date = (header.len() == c + 1 && !ckpt.feature_names.contains(&header[0]))
        .then(|| header[0].clone());
    load_csv(path, true, date.as_deref())
}

pub fn cmd_forecast(checkpoint_path: &Path, input: &Path) -> Result<Forecast> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let series = read_window(&ckpt, input)?;
    let l = ckpt.params.config.lookback;
    if series.timesteps() != l {
        return Err(Error::Input(format!(
            "input window has {} rows, expected exactly L = {l}",
            series.timesteps()
        )));
    }
    forecast_window(&ckpt, &series.values)
}
