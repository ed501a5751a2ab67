//! Dataset ingestion, normalization, the consecutive split with gap filling,
//! sequential batching, and the sine-injection synthesizer.
//!
//! Sample indexing convention: a sample is addressed by its anchor `t`, the
//! row index of the first target step. Its look-back window covers rows
//! `[t - L, t)` and its target rows `[t, t + S)`.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A multivariate series: T rows by N channels, with the original timestamp
/// strings preserved for round-tripping.
#[derive(Debug, Clone)]
pub struct TimeSeriesDataset {
    pub timestamps: Vec<String>,
    pub channels: Vec<String>,
    /// T x N
    pub values: Array2<f64>,
}

impl TimeSeriesDataset {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.values.ncols()
    }
}

/// Window geometry plus batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub batch: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize, batch: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 || batch == 0 {
            return Err(Error::Domain(
                "lookback, horizon, and batch size must all be >= 1".to_string(),
            ));
        }
        Ok(Self {
            lookback,
            horizon,
            batch,
        })
    }
}

/// Load a CSV whose first column is a timestamp (kept verbatim, ignored for
/// math) and whose remaining columns are numeric channels.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<TimeSeriesDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            col: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            message: "expected a timestamp column plus at least one channel".to_string(),
        });
    }
    let channels: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let n = channels.len();
    let mut timestamps = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row_no = r + 2; // header is row 1
        let record = record.map_err(|e| Error::Parse {
            row: row_no,
            col: 1,
            message: e.to_string(),
        })?;
        if record.len() != n + 1 {
            return Err(Error::Parse {
                row: row_no,
                col: record.len(),
                message: format!("expected {} fields, found {}", n + 1, record.len()),
            });
        }
        timestamps.push(record[0].to_string());
        for c in 0..n {
            let raw = record[c + 1].trim();
            let value: f64 = raw.parse().map_err(|_| Error::Parse {
                row: row_no,
                col: c + 2,
                message: format!("cannot parse {raw:?} as a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    col: c + 2,
                    message: format!("non-finite value {raw:?}"),
                });
            }
            rows.push(value);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Domain(
            "dataset is empty: the file contains a header but no rows".to_string(),
        ));
    }
    let t = timestamps.len();
    let values = Array2::from_shape_vec((t, n), rows)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(TimeSeriesDataset {
        timestamps,
        channels,
        values,
    })
}

/// Write a dataset back out with the same schema `load_csv` accepts.
pub fn write_csv<P: AsRef<Path>>(dataset: &TimeSeriesDataset, path: P) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut header = vec!["date".to_string()];
    header.extend(dataset.channels.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for (r, ts) in dataset.timestamps.iter().enumerate() {
        let mut record = vec![ts.clone()];
        for c in 0..dataset.num_channels() {
            record.push(format!("{}", dataset.values[[r, c]]));
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    writer.flush()?;
    Ok(())
}

/// Row counts delimiting the chronological train / validation / test regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitBoundaries {
    /// First row after the training region.
    pub train_end: usize,
    /// First row after the validation region.
    pub val_end: usize,
    /// Total number of rows.
    pub len: usize,
}

/// Boundaries from split ratios, rounding each region down to whole rows.
pub fn split_boundaries(len: usize, train_ratio: f64, val_ratio: f64) -> Result<SplitBoundaries> {
    if !(train_ratio > 0.0 && val_ratio > 0.0 && train_ratio + val_ratio < 1.0) {
        return Err(Error::Domain(format!(
            "split ratios must be positive with train + val < 1, got {train_ratio} and {val_ratio}"
        )));
    }
    let train_end = (len as f64 * train_ratio).floor() as usize;
    let val_end = train_end + (len as f64 * val_ratio).floor() as usize;
    if train_end == 0 || val_end >= len {
        return Err(Error::Domain(
            "dataset too short for the requested split ratios".to_string(),
        ));
    }
    Ok(SplitBoundaries {
        train_end,
        val_end,
        len,
    })
}

/// Anchor ranges of the consecutive split. The two gap ranges hold the
/// otherwise unreachable boundary samples; they are forwarded to keep the
/// momentum stream continuous but never contribute to a loss, metric, or
/// model-selection quantity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub gap1: Range<usize>,
    pub val: Range<usize>,
    pub gap2: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    /// The full contiguous anchor interval covered by the five ranges.
    pub fn full(&self) -> Range<usize> {
        self.train.start..self.test.end
    }
}

/// Partition the anchor interval `[L, T - S]` into train, gap, validation,
/// gap, and test ranges according to the boundaries.
pub fn consecutive_split(
    boundaries: SplitBoundaries,
    spec: WindowSpec,
) -> Result<SplitRanges> {
    let (l, s) = (spec.lookback, spec.horizon);
    let SplitBoundaries {
        train_end,
        val_end,
        len,
    } = boundaries;
    if train_end >= val_end || val_end >= len {
        return Err(Error::Domain(format!(
            "split boundaries must satisfy 0 < train_end < val_end < len, got {train_end}, {val_end}, {len}"
        )));
    }
    // anchors: input rows [t-L, t), target rows [t, t+S)
    let first = l;
    let last = len.checked_sub(s).ok_or_else(|| {
        Error::Domain("dataset shorter than the forecast horizon".to_string())
    })?;
    if first > last || l + s > len || train_end < s || val_end < s {
        return Err(Error::Domain(format!(
            "dataset with {len} rows is too short for lookback {l} + horizon {s}"
        )));
    }
    let train = first..(train_end - s + 1).max(first);
    let gap1 = train.end..train_end.max(train.end);
    let val = gap1.end..(val_end - s + 1).max(gap1.end);
    let gap2 = val.end..val_end.max(val.end);
    let test = gap2.end..last + 1;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Domain(
            "window spec leaves an empty train, validation, or test range".to_string(),
        ));
    }
    Ok(SplitRanges {
        train,
        gap1,
        val,
        gap2,
        test,
    })
}

/// Chop an anchor range into consecutive blocks of at most `batch` anchors,
/// in time order; the final block may be short.
pub fn sequential_batches(range: Range<usize>, batch: usize) -> Vec<Range<usize>> {
    if batch == 0 || range.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = range.start;
    while start < range.end {
        let end = (start + batch).min(range.end);
        out.push(start..end);
        start = end;
    }
    out
}

/// One sequential mini-batch of samples.
#[derive(Debug, Clone)]
pub struct ForecastBatch {
    pub anchors: Range<usize>,
    /// B x L x N
    pub inputs: Array3<f64>,
    /// B x S x N
    pub targets: Array3<f64>,
}

/// Materialize the samples for a block of consecutive anchors.
pub fn make_batch(
    dataset: &TimeSeriesDataset,
    spec: WindowSpec,
    anchors: Range<usize>,
) -> Result<ForecastBatch> {
    let (l, s) = (spec.lookback, spec.horizon);
    let n = dataset.num_channels();
    let b = anchors.len();
    if b == 0 {
        return Err(Error::Domain("empty anchor range".to_string()));
    }
    if anchors.start < l || anchors.end + s > dataset.len() + 1 {
        return Err(Error::Domain(format!(
            "anchor range {anchors:?} does not fit a dataset of {} rows with L = {l}, S = {s}",
            dataset.len()
        )));
    }
    let mut inputs = Array3::zeros((b, l, n));
    let mut targets = Array3::zeros((b, s, n));
    for (bi, t) in anchors.clone().enumerate() {
        inputs
            .index_axis_mut(Axis(0), bi)
            .assign(&dataset.values.slice(ndarray::s![t - l..t, ..]));
        targets
            .index_axis_mut(Axis(0), bi)
            .assign(&dataset.values.slice(ndarray::s![t..t + s, ..]));
    }
    Ok(ForecastBatch {
        anchors,
        inputs,
        targets,
    })
}

/// Add one sine wave per channel: amplitude equal to that channel's standard
/// deviation over the whole series, phase drawn uniformly from `[0, 2pi)`
/// using the seed. Deterministic given the seed.
pub fn synthesize_sine(
    dataset: &TimeSeriesDataset,
    period: usize,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if period < 2 {
        return Err(Error::Domain(format!(
            "sine period must be a finite number of steps >= 2, got {period}"
        )));
    }
    let (t, n) = dataset.values.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut out = dataset.values.clone();
    for c in 0..n {
        let col = dataset.values.column(c);
        let mean = col.sum() / t as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let std = var.sqrt();
        if std == 0.0 {
            continue;
        }
        let omega = std::f64::consts::TAU / period as f64;
        for r in 0..t {
            out[[r, c]] += std * (omega * r as f64 + phases[c]).sin();
        }
    }
    Ok(TimeSeriesDataset {
        timestamps: dataset.timestamps.clone(),
        channels: dataset.channels.clone(),
        values: out,
    })
}

/// Per-channel standardization statistics computed from the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STANDARDIZE_EPS: f64 = 1e-8;

/// Standardize every channel with mean and standard deviation estimated from
/// rows `[0, train_end)` only.
pub fn standardize(
    dataset: &TimeSeriesDataset,
    train_end: usize,
) -> Result<(TimeSeriesDataset, NormStats)> {
    let (t, n) = dataset.values.dim();
    if train_end == 0 || train_end > t {
        return Err(Error::Domain(format!(
            "train_end = {train_end} must lie in [1, {t}]"
        )));
    }
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    let mut out = dataset.values.clone();
    for c in 0..n {
        let col = dataset.values.column(c);
        let train = col.slice(ndarray::s![..train_end]);
        let mu = train.sum() / train_end as f64;
        let var = train.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / train_end as f64;
        let sd = var.sqrt();
        let denom = if sd > 0.0 { sd } else { STANDARDIZE_EPS };
        for r in 0..t {
            out[[r, c]] = (dataset.values[[r, c]] - mu) / denom;
        }
        mean[c] = mu;
        std[c] = denom;
    }
    Ok((
        TimeSeriesDataset {
            timestamps: dataset.timestamps.clone(),
            channels: dataset.channels.clone(),
            values: out,
        },
        NormStats { mean, std },
    ))
}

/// Undo [`standardize`] on a matrix in the dataset's channel layout.
pub fn destandardize(values: ArrayView2<'_, f64>, stats: &NormStats) -> Array2<f64> {
    let (t, n) = values.dim();
    let mut out = Array2::zeros((t, n));
    for c in 0..n {
        for r in 0..t {
            out[[r, c]] = values[[r, c]] * stats.std[c] + stats.mean[c];
        }
    }
    out
}
