//! Series ingest, chronological splits, train-only standardization and
//! sliding lookback/horizon windows.

pub mod synthetic;

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw multivariate series, one row per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    /// `[timesteps, features]`
    pub values: Tensor,
    pub feature_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(values: Tensor, feature_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.shape()[1] != feature_names.len() {
            return Err(Error::contract(format!(
                "series shape {:?} does not match {} feature names",
                values.shape(),
                feature_names.len()
            )));
        }
        if values.shape()[0] < 2 {
            return Err(Error::Input("a series needs at least two timesteps".into()));
        }
        if !values.is_finite() {
            return Err(Error::Input("series contains non-finite values".into()));
        }
        Ok(Self {
            values,
            feature_names,
            timestamps: None,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = Vec::new();
        if self.timestamps.is_some() {
            header.push("date".to_string());
        }
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        let c = self.features();
        for (i, row) in self.values.data().chunks(c).enumerate() {
            let mut rec: Vec<String> = Vec::with_capacity(c + 1);
            if let Some(ts) = &self.timestamps {
                rec.push(ts[i].clone());
            }
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Reads a comma-separated series.
///
/// Row numbers in errors count data records from 1 (the header is not
/// counted); column numbers count file columns from 1.
pub fn load_csv(path: &Path, has_header: bool, date_column: Option<&str>) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Option<Vec<String>> = if has_header {
        Some(reader.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let date_idx = match (date_column, &header) {
        (None, _) => None,
        (Some(name), Some(h)) => Some(h.iter().position(|c| c == name).ok_or_else(|| {
            Error::config("data.date_column", format!("no column named `{name}` in header"))
        })?),
        (Some(name), None) => Some(name.parse::<usize>().map_err(|_| {
            Error::config(
                "data.date_column",
                "without a header the date column must be a zero-based index",
            )
        })?),
    };

    let mut width: Option<usize> = header.as_ref().map(Vec::len);
    let mut values = Vec::new();
    let mut timestamps = date_idx.map(|_| Vec::new());
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Ingest {
                row,
                column: record.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == date_idx {
                timestamps.as_mut().unwrap().push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Ingest {
                row,
                column: j + 1,
                message: format!("cannot parse `{cell}` as a real number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    column: j + 1,
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    let width = width.unwrap_or(0);
    let features = width - usize::from(date_idx.is_some());
    let names = match header {
        Some(h) => h
            .into_iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != date_idx)
            .map(|(_, n)| n)
            .collect(),
        None => (0..features).map(|j| format!("f{j}")).collect(),
    };
    let tensor = Tensor::new(vec![rows, features], values)?;
    let mut series = RawSeries::new(tensor, names)?;
    series.timestamps = timestamps;
    Ok(series)
}

/// How a series is cut into train/val/test.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    /// Exclusive end indices of the train, val and test ranges.
    Boundaries { train_end: usize, val_end: usize, test_end: usize },
}

impl SplitSpec {
    pub const DEFAULT: SplitSpec = SplitSpec::Fractions {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    /// 12/4/4 months of hourly samples (30-day months).
    pub fn ett_hourly() -> Self {
        Self::ett_months(24)
    }

    /// 12/4/4 months of 15-minute samples (30-day months).
    pub fn ett_minutely() -> Self {
        Self::ett_months(96)
    }

    fn ett_months(per_day: usize) -> Self {
        let month = 30 * per_day;
        SplitSpec::Boundaries {
            train_end: 12 * month,
            val_end: 16 * month,
            test_end: 20 * month,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SplitSpec::Fractions { train, val, test } => {
                if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) {
                    return Err(Error::config("data.split", "fractions must lie in [0, 1]"));
                }
                if (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(Error::config(
                        "data.split",
                        format!("fractions sum to {}, expected 1", train + val + test),
                    ));
                }
            }
            SplitSpec::Boundaries {
                train_end,
                val_end,
                test_end,
            } => {
                if !(0 < train_end && train_end < val_end && val_end < test_end) {
                    return Err(Error::config("data.split", "boundaries must be strictly increasing"));
                }
            }
        }
        Ok(())
    }

    /// Text form used in manifests: `fractions:0.7,0.1,0.2`,
    /// `indices:8640,11520,14400`, `ett-hourly` or `ett-minutely`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::config("data.split", format!("unrecognized split `{text}`"));
        let text = text.trim();
        match text {
            "ett-hourly" => return Ok(Self::ett_hourly()),
            "ett-minutely" => return Ok(Self::ett_minutely()),
            _ => {}
        }
        let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let spec = match kind {
            "fractions" => {
                let f: Vec<f64> = parts
                    .iter()
                    .map(|p| p.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                SplitSpec::Fractions {
                    train: f[0],
                    val: f[1],
                    test: f[2],
                }
            }
            "indices" => {
                let b: Vec<usize> = parts
                    .iter()
                    .map(|p| p.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                SplitSpec::Boundaries {
                    train_end: b[0],
                    val_end: b[1],
                    test_end: b[2],
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        match self {
            SplitSpec::Fractions { train, val, test } => format!("fractions:{train},{val},{test}"),
            SplitSpec::Boundaries {
                train_end,
                val_end,
                test_end,
            } => format!("indices:{train_end},{val_end},{test_end}"),
        }
    }
}

/// Contiguous, ordered train/val/test index ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Cuts `timesteps` rows into three ranges, each at least `min_len` long.
///
/// Fractions follow the usual convention: train and test lengths are
/// floored, validation takes the remainder.
pub fn chronological_split(timesteps: usize, spec: &SplitSpec, min_len: usize) -> Result<SplitRanges> {
    spec.validate()?;
    let (a, b, c) = match *spec {
        SplitSpec::Fractions { train, test, .. } => {
            let n = timesteps as f64;
            let tr = (n * train + 1e-9).floor() as usize;
            let te = (n * test + 1e-9).floor() as usize;
            let va = timesteps.saturating_sub(tr + te);
            (tr, tr + va, tr + va + te)
        }
        SplitSpec::Boundaries {
            train_end,
            val_end,
            test_end,
        } => {
            if test_end > timesteps {
                return Err(Error::config(
                    "data.split",
                    format!("test boundary {test_end} exceeds series length {timesteps}"),
                ));
            }
            (train_end, val_end, test_end)
        }
    };
    let ranges = SplitRanges {
        train: 0..a,
        val: a..b,
        test: b..c,
    };
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.len() < min_len {
            return Err(Error::config(
                "data.split",
                format!("{name} range has {} steps, need at least {min_len}", r.len()),
            ));
        }
    }
    Ok(ranges)
}

/// Per-feature standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Maps standardized values on `channels` back to raw units, in place.
    /// `values` is row-major with `channels.len()` columns.
    pub fn destandardize(&self, values: &mut [f64], channels: &[usize]) {
        let k = channels.len();
        for row in values.chunks_mut(k) {
            for (v, &c) in row.iter_mut().zip(channels) {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
    }

    pub fn standardize(&self, values: &mut [f64], channels: &[usize]) {
        let k = channels.len();
        for row in values.chunks_mut(k) {
            for (v, &c) in row.iter_mut().zip(channels) {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Z-scores every row with statistics from `train` only. Features whose
/// train standard deviation is zero keep std 1.
pub fn standardize(values: &Tensor, train: Range<usize>) -> Result<(Tensor, NormStats)> {
    if values.rank() != 2 || train.is_empty() || train.end > values.shape()[0] {
        return Err(Error::contract("standardize needs a rank-2 series and a non-empty train range"));
    }
    let c = values.shape()[1];
    let data = values.data();
    let n = train.len() as f64;
    let mut mean = vec![0.0; c];
    for row in data[train.start * c..train.end * c].chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; c];
    for row in data[train.start * c..train.end * c].chunks(c) {
        for j in 0..c {
            std[j] += (row[j] - mean[j]).powi(2);
        }
    }
    for (j, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            warn!("feature {j} is constant over the train range; leaving it unscaled");
            *s = 1.0;
        }
    }
    let stats = NormStats { mean, std };
    let mut out = data.to_vec();
    stats.standardize(&mut out, &(0..c).collect::<Vec<_>>());
    Ok((Tensor::new(values.shape().to_vec(), out)?, stats))
}

/// Sliding windows over one split of a standardized series.
///
/// Windows are index views into a shared matrix; nothing is copied until a
/// window or batch is requested.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    values: Arc<Tensor>,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
    target_channels: Vec<usize>,
    norm_stats: NormStats,
}

pub fn make_windows(
    values: Arc<Tensor>,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    target_channels: &[usize],
    stride: usize,
    norm_stats: NormStats,
) -> Result<WindowedDataset> {
    if lookback == 0 {
        return Err(Error::config("data.lookback", "must be positive"));
    }
    if horizon == 0 {
        return Err(Error::config("data.horizon", "must be positive"));
    }
    if stride == 0 {
        return Err(Error::config("data.stride", "must be positive"));
    }
    let c = values.shape()[1];
    if target_channels.is_empty() || target_channels.iter().any(|&t| t >= c) {
        return Err(Error::config(
            "data.target_channels",
            format!("channels must be a non-empty subset of 0..{c}"),
        ));
    }
    if range.len() < lookback + horizon || range.end > values.shape()[0] {
        return Err(Error::config(
            "data.lookback",
            format!(
                "range of {} steps cannot hold lookback {lookback} + horizon {horizon}",
                range.len()
            ),
        ));
    }
    Ok(WindowedDataset {
        values,
        range,
        lookback,
        horizon,
        stride,
        target_channels: target_channels.to_vec(),
        norm_stats,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        (self.range.len() - self.lookback - self.horizon) / self.stride + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn target_channels(&self) -> &[usize] {
        &self.target_channels
    }

    pub fn norm_stats(&self) -> &NormStats {
        &self.norm_stats
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    /// First raw timestep of window `k`.
    pub fn window_start(&self, k: usize) -> usize {
        self.range.start + k * self.stride
    }

    /// `[L, C]` input of window `k`.
    pub fn input(&self, k: usize) -> Tensor {
        let c = self.channels();
        let s = self.window_start(k);
        let data = self.values.data()[s * c..(s + self.lookback) * c].to_vec();
        Tensor::new(vec![self.lookback, c], data).expect("window shape")
    }

    /// `[T, C_out]` target of window `k`.
    pub fn target(&self, k: usize) -> Tensor {
        let c = self.channels();
        let s = self.window_start(k) + self.lookback;
        let rows = &self.values.data()[s * c..(s + self.horizon) * c];
        let mut data = Vec::with_capacity(self.horizon * self.target_channels.len());
        for row in rows.chunks(c) {
            data.extend(self.target_channels.iter().map(|&t| row[t]));
        }
        Tensor::new(vec![self.horizon, self.target_channels.len()], data).expect("target shape")
    }

    /// Stacked `([B, L, C], [B, T, C_out])` for the given window indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let inputs: Vec<Tensor> = indices.iter().map(|&k| self.input(k)).collect();
        let targets: Vec<Tensor> = indices.iter().map(|&k| self.target(k)).collect();
        (
            Tensor::stack(&inputs.iter().collect::<Vec<_>>()).expect("uniform windows"),
            Tensor::stack(&targets.iter().collect::<Vec<_>>()).expect("uniform windows"),
        )
    }

    /// Same split with a different horizon (and therefore window count).
    pub fn with_horizon(&self, horizon: usize) -> Result<WindowedDataset> {
        make_windows(
            Arc::clone(&self.values),
            self.range.clone(),
            self.lookback,
            horizon,
            &self.target_channels,
            self.stride,
            self.norm_stats.clone(),
        )
    }

    pub fn with_stride(&self, stride: usize) -> Result<WindowedDataset> {
        make_windows(
            Arc::clone(&self.values),
            self.range.clone(),
            self.lookback,
            self.horizon,
            &self.target_channels,
            stride,
            self.norm_stats.clone(),
        )
    }
}

/// Everything needed to describe a dataset run.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub path: std::path::PathBuf,
    pub has_header: bool,
    pub date_column: Option<String>,
    pub split: SplitSpec,
    pub lookback: usize,
    pub horizon: usize,
    /// `None` means every channel.
    pub target_channels: Option<Vec<usize>>,
    pub stride: usize,
}

/// The three windowed splits of one series.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub ranges: SplitRanges,
    pub norm_stats: NormStats,
    pub feature_names: Vec<String>,
}

impl PreparedData {
    pub fn channels(&self) -> usize {
        self.train.channels()
    }

    /// Re-cuts windows for a different lookback without reloading.
    pub fn with_lookback(&self, lookback: usize) -> Result<PreparedData> {
        let values = Arc::clone(&self.train.values);
        let t = self.train.horizon;
        let targets = self.train.target_channels.clone();
        let stride = self.train.stride;
        let cut = |r: &Range<usize>, stride| {
            make_windows(
                Arc::clone(&values),
                r.clone(),
                lookback,
                t,
                &targets,
                stride,
                self.norm_stats.clone(),
            )
        };
        Ok(PreparedData {
            train: cut(&self.ranges.train, stride)?,
            val: cut(&self.ranges.val, self.val.stride)?,
            test: cut(&self.ranges.test, self.test.stride)?,
            ranges: self.ranges.clone(),
            norm_stats: self.norm_stats.clone(),
            feature_names: self.feature_names.clone(),
        })
    }
}

/// Splits, standardizes and windows a raw series. Validation and test
/// windows always use stride 1; `stride` applies to training windows.
pub fn prepare(
    series: &RawSeries,
    split: &SplitSpec,
    lookback: usize,
    horizon: usize,
    target_channels: Option<&[usize]>,
    stride: usize,
) -> Result<PreparedData> {
    if lookback == 0 {
        return Err(Error::config("data.lookback", "must be positive"));
    }
    if horizon == 0 {
        return Err(Error::config("data.horizon", "must be positive"));
    }
    let ranges = chronological_split(series.timesteps(), split, lookback + horizon)?;
    let (std_values, stats) = standardize(&series.values, ranges.train.clone())?;
    let values = Arc::new(std_values);
    let all: Vec<usize> = (0..series.features()).collect();
    let targets = target_channels.unwrap_or(&all);
    let cut = |r: &Range<usize>, stride| {
        make_windows(
            Arc::clone(&values),
            r.clone(),
            lookback,
            horizon,
            targets,
            stride,
            stats.clone(),
        )
    };
    Ok(PreparedData {
        train: cut(&ranges.train, stride)?,
        val: cut(&ranges.val, 1)?,
        test: cut(&ranges.test, 1)?,
        ranges,
        norm_stats: stats,
        feature_names: series.feature_names.clone(),
    })
}
