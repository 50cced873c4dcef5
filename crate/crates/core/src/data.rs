//! Per-unit time-series ingestion: row cleaning, percentile normalization
//! and chronological train/validation/test splitting.
//!
//! CSV layout: a header row of channel names, optionally preceded by a
//! `timestamp` column (ISO-8601 or plain integer index), one sample per
//! row. Missing values are encoded as empty fields and survive parsing as
//! NaN until [`clean`] drops the affected rows.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats::percentile;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct UnitDataset<F> {
    pub unit_id: String,
    timestamps: Option<Vec<i64>>,
    channel_names: Vec<String>,
    values: Vec<F>, // row-major, nrows x channels; may hold NaN before clean()
    nrows: usize,
}

impl<F: Scalar> UnitDataset<F> {
    pub fn new(
        unit_id: impl Into<String>,
        channel_names: Vec<String>,
        rows: Vec<Vec<F>>,
        timestamps: Option<Vec<i64>>,
    ) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 {
            return Err(Error::Data("dataset needs at least one channel".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * c);
        for r in &rows {
            if r.len() != c {
                return Err(Error::Data(format!(
                    "row width {} does not match {} channels",
                    r.len(),
                    c
                )));
            }
            values.extend_from_slice(r);
        }
        let nrows = rows.len();
        if let Some(ts) = &timestamps {
            if ts.len() != nrows {
                return Err(Error::Data("timestamp count differs from row count".into()));
            }
            if ts.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Data("timestamps must be non-decreasing".into()));
            }
        }
        Ok(UnitDataset {
            unit_id: unit_id.into(),
            timestamps,
            channel_names,
            values,
            nrows,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn nchannels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.nchannels();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channel_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    pub fn column(&self, j: usize) -> Vec<F> {
        (0..self.nrows).map(|i| self.row(i)[j]).collect()
    }

    /// Contiguous row slice, keeping timestamps aligned.
    pub fn slice_rows(&self, range: Range<usize>) -> UnitDataset<F> {
        let c = self.nchannels();
        UnitDataset {
            unit_id: self.unit_id.clone(),
            timestamps: self
                .timestamps
                .as_ref()
                .map(|ts| ts[range.clone()].to_vec()),
            channel_names: self.channel_names.clone(),
            values: self.values[range.start * c..range.end * c].to_vec(),
            nrows: range.end - range.start,
        }
    }

    /// Row-wise concatenation; channel names must match exactly.
    pub fn concat(&self, other: &UnitDataset<F>) -> Result<UnitDataset<F>> {
        if self.channel_names != other.channel_names {
            return Err(Error::Data("channel names differ; cannot concatenate".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(UnitDataset {
            unit_id: format!("{}+{}", self.unit_id, other.unit_id),
            timestamps: None,
            channel_names: self.channel_names.clone(),
            values,
            nrows: self.nrows + other.nrows,
        })
    }

    /// Dense matrix view; requires a finite, nonempty dataset.
    pub fn to_tensor(&self) -> Result<Tensor<F>> {
        if self.nrows == 0 {
            return Err(Error::EmptyDataset(self.unit_id.clone()));
        }
        Tensor::new(vec![self.nrows, self.nchannels()], self.values.clone())
    }

    /// Two-channel marginal as an `n x 2` matrix (used for pair selection).
    pub fn marginal2(&self, a: &str, b: &str) -> Result<Tensor<F>> {
        let (ia, ib) = (self.channel_index(a)?, self.channel_index(b)?);
        if self.nrows == 0 {
            return Err(Error::EmptyDataset(self.unit_id.clone()));
        }
        let mut data = Vec::with_capacity(self.nrows * 2);
        for i in 0..self.nrows {
            let r = self.row(i);
            data.push(r[ia]);
            data.push(r[ib]);
        }
        Tensor::new(vec![self.nrows, 2], data)
    }
}

/// Drops every row containing a missing value (NaN) or an exact zero in any
/// channel, preserving order. Zero is not a possible measurement value, so
/// it doubles as a missing-data marker in the source systems.
pub fn clean<F: Scalar>(raw: &UnitDataset<F>) -> Result<UnitDataset<F>> {
    let keep: Vec<usize> = (0..raw.nrows())
        .filter(|&i| raw.row(i).iter().all(|v| v.is_finite() && !v.is_zero()))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "unit {}: all rows removed by cleaning",
            raw.unit_id
        )));
    }
    let rows: Vec<Vec<F>> = keep.iter().map(|&i| raw.row(i).to_vec()).collect();
    let timestamps = raw
        .timestamps
        .as_ref()
        .map(|ts| keep.iter().map(|&i| ts[i]).collect());
    UnitDataset::new(raw.unit_id.clone(), raw.channel_names.clone(), rows, timestamps)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-channel 1st/99th percentiles; applying them maps those anchors to
/// −1 and +1, leaving outliers outside the interval.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationParams<F> {
    entries: Vec<(String, F, F)>, // (channel, p1, p99)
}

impl<F: Scalar> NormalizationParams<F> {
    pub fn channels(&self) -> impl Iterator<Item = (&str, F, F)> {
        self.entries.iter().map(|(n, a, b)| (n.as_str(), *a, *b))
    }

    pub fn lookup(&self, name: &str) -> Result<(F, F)> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, a, b)| (*a, *b))
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    /// Flat key-value serialization: `<channel>.p1 = <value>` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# normalization params v1\n");
        for (name, p1, p99) in &self.entries {
            out.push_str(&format!("{name}.p1 = {p1:?}\n{name}.p99 = {p99:?}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries: Vec<(String, Option<F>, Option<F>)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad params line: {line}")))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad number in: {line}")))?;
            let (name, field) = key
                .rsplit_once('.')
                .ok_or_else(|| Error::Data(format!("bad params key: {key}")))?;
            let slot = match entries.iter_mut().find(|(n, _, _)| n == name) {
                Some(s) => s,
                None => {
                    entries.push((name.to_string(), None, None));
                    entries.last_mut().unwrap()
                }
            };
            match field {
                "p1" => slot.1 = Some(F::cast(value)),
                "p99" => slot.2 = Some(F::cast(value)),
                other => return Err(Error::Data(format!("unknown params field: {other}"))),
            }
        }
        let entries = entries
            .into_iter()
            .map(|(n, a, b)| match (a, b) {
                (Some(a), Some(b)) => Ok((n, a, b)),
                _ => Err(Error::Data(format!("incomplete params for channel {n}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.is_empty() {
            return Err(Error::Data("no channels in params file".into()));
        }
        Ok(NormalizationParams { entries })
    }
}

/// Fits per-channel 1st/99th percentiles on training rows only. Percentiles
/// make the scale insensitive to outliers; constant channels are an error.
pub fn fit_normalization<F: Scalar>(train: &UnitDataset<F>) -> Result<NormalizationParams<F>> {
    fit_normalization_pooled(&[train])
}

/// Same, over the pooled rows of several datasets (channel sets must match).
pub fn fit_normalization_pooled<F: Scalar>(
    sets: &[&UnitDataset<F>],
) -> Result<NormalizationParams<F>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::EmptyDataset("no datasets to fit".into()))?;
    let mut entries = Vec::with_capacity(first.nchannels());
    for (j, name) in first.channel_names().iter().enumerate() {
        let mut col = Vec::new();
        for s in sets {
            if s.channel_names() != first.channel_names() {
                return Err(Error::Data("channel names differ across pooled sets".into()));
            }
            col.extend(s.column(j));
        }
        let p1 = percentile(&col, 1.0)?;
        let p99 = percentile(&col, 99.0)?;
        if !(p1 < p99) {
            return Err(Error::ConstantChannel(name.clone()));
        }
        entries.push((name.clone(), p1, p99));
    }
    Ok(NormalizationParams { entries })
}

/// Affine per-channel map sending p1 to −1 and p99 to +1; values outside
/// the interval are allowed to land outside [−1, 1].
pub fn apply_normalization<F: Scalar>(
    data: &UnitDataset<F>,
    params: &NormalizationParams<F>,
) -> Result<UnitDataset<F>> {
    let two = F::cast(2.0);
    let scales: Vec<(F, F)> = data
        .channel_names()
        .iter()
        .map(|n| params.lookup(n))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<F>> = (0..data.nrows())
        .map(|i| {
            data.row(i)
                .iter()
                .zip(&scales)
                .map(|(&x, &(p1, p99))| two * (x - p1) / (p99 - p1) - F::one())
                .collect()
        })
        .collect();
    UnitDataset::new(
        data.unit_id.clone(),
        data.channel_names().to_vec(),
        rows,
        data.timestamps.clone(),
    )
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// A window expressed either in rows (index-only data) or in seconds
/// (timestamped data).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Window {
    Rows(usize),
    Seconds(i64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimePoint {
    Row(usize),
    Stamp(i64),
}

/// Chronological split specification.
///
/// The validation slice is the tail of the training window: it respects
/// temporal ordering and keeps near-future points out of training. The
/// blackout window before the detection time is excluded from
/// false-positive scoring.
#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub train_window: Window,
    pub validation_fraction: f64,
    pub blackout: Window,
    pub detection_time: Option<TimePoint>,
}

impl SplitSpec {
    /// Two months of training and one month of blackout, for timestamped
    /// data sampled in real time.
    pub fn default_duration() -> Self {
        SplitSpec {
            train_window: Window::Seconds(60 * 86_400),
            validation_fraction: 0.06,
            blackout: Window::Seconds(30 * 86_400),
            detection_time: None,
        }
    }

    pub fn by_rows(train_rows: usize, blackout_rows: usize) -> Self {
        SplitSpec {
            train_window: Window::Rows(train_rows),
            validation_fraction: 0.06,
            blackout: Window::Rows(blackout_rows),
            detection_time: None,
        }
    }
}

/// Disjoint, ordered row ranges. `faulty_test` (and possibly
/// `healthy_test`) may be empty.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub healthy_test: Range<usize>,
    pub faulty_test: Range<usize>,
}

pub struct Splits<F> {
    pub indices: SplitIndices,
    pub train: UnitDataset<F>,
    pub validation: UnitDataset<F>,
    pub healthy_test: UnitDataset<F>,
    pub faulty_test: UnitDataset<F>,
}

fn window_end_row<F: Scalar>(unit: &UnitDataset<F>, w: Window) -> Result<usize> {
    match w {
        Window::Rows(r) => {
            if r > unit.nrows() {
                Err(Error::Data(format!(
                    "training window of {r} rows exceeds {} available",
                    unit.nrows()
                )))
            } else {
                Ok(r)
            }
        }
        Window::Seconds(s) => {
            let ts = unit
                .timestamps()
                .ok_or_else(|| Error::Data("duration window needs timestamps".into()))?;
            let end = ts[0] + s;
            if end > ts[ts.len() - 1] {
                return Err(Error::Data("training window exceeds data span".into()));
            }
            Ok(ts.partition_point(|&t| t < end))
        }
    }
}

pub fn split<F: Scalar>(unit: &UnitDataset<F>, spec: &SplitSpec) -> Result<SplitIndices> {
    let n = unit.nrows();
    let k = window_end_row(unit, spec.train_window)?;
    if k < 2 {
        return Err(Error::Data("training window holds fewer than two rows".into()));
    }
    if !(spec.validation_fraction > 0.0 && spec.validation_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {} outside (0, 1)",
            spec.validation_fraction
        )));
    }
    let v = ((spec.validation_fraction * k as f64).ceil() as usize).clamp(1, k - 1);
    let train = 0..k - v;
    let validation = k - v..k;

    let detect_row = match spec.detection_time {
        None => None,
        Some(TimePoint::Row(r)) => {
            if r < k || r > n {
                return Err(Error::Data(format!(
                    "detection row {r} outside the post-training range {k}..{n}"
                )));
            }
            Some(r)
        }
        Some(TimePoint::Stamp(s)) => {
            let ts = unit
                .timestamps()
                .ok_or_else(|| Error::Data("detection timestamp needs timestamps".into()))?;
            let r = ts.partition_point(|&t| t < s);
            if r < k {
                return Err(Error::Data("detection time inside the training window".into()));
            }
            Some(r)
        }
    };

    let (healthy_end, faulty_start) = match detect_row {
        None => (n, n),
        Some(d) => {
            let blackout_rows = match spec.blackout {
                Window::Rows(r) => r,
                Window::Seconds(s) => {
                    let ts = unit
                        .timestamps()
                        .ok_or_else(|| Error::Data("duration blackout needs timestamps".into()))?;
                    let cutoff = if d < n { ts[d] - s } else { ts[n - 1] - s };
                    d - ts[..d].partition_point(|&t| t < cutoff)
                }
            };
            (d.saturating_sub(blackout_rows).max(k), d)
        }
    };

    Ok(SplitIndices {
        train,
        validation,
        healthy_test: k..healthy_end,
        faulty_test: faulty_start..n,
    })
}

/// Split and materialize the four segments.
pub fn split_dataset<F: Scalar>(unit: &UnitDataset<F>, spec: &SplitSpec) -> Result<Splits<F>> {
    let idx = split(unit, spec)?;
    Ok(Splits {
        train: unit.slice_rows(idx.train.clone()),
        validation: unit.slice_rows(idx.validation.clone()),
        healthy_test: unit.slice_rows(idx.healthy_test.clone()),
        faulty_test: unit.slice_rows(idx.faulty_test.clone()),
        indices: idx,
    })
}

// ---------------------------------------------------------------------------
// CSV I/O
// ---------------------------------------------------------------------------

fn parse_timestamp(s: &str) -> Result<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp());
    }
    Err(Error::Data(format!("unparseable timestamp: {s}")))
}

pub fn read_csv<F: Scalar>(path: &Path, unit_id: impl Into<String>) -> Result<UnitDataset<F>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let has_ts = headers.get(0).map(|h| h.trim() == "timestamp").unwrap_or(false);
    let names: Vec<String> = headers
        .iter()
        .skip(if has_ts { 1 } else { 0 })
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    let mut timestamps = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut fields = record.iter();
        if has_ts {
            let ts = fields
                .next()
                .ok_or_else(|| Error::Data("missing timestamp field".into()))?;
            timestamps.push(parse_timestamp(ts.trim())?);
        }
        let row: Vec<F> = fields
            .map(|f| {
                let f = f.trim();
                if f.is_empty() {
                    Ok(F::nan())
                } else {
                    f.parse::<f64>()
                        .map(F::cast)
                        .map_err(|_| Error::Data(format!("bad numeric field: {f}")))
                }
            })
            .collect::<Result<Vec<F>>>()?;
        if row.len() != names.len() {
            return Err(Error::Data("row width differs from header".into()));
        }
        rows.push(row);
    }
    UnitDataset::new(unit_id, names, rows, if has_ts { Some(timestamps) } else { None })
}

pub fn write_csv<F: Scalar>(ds: &UnitDataset<F>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = Vec::new();
    if ds.timestamps().is_some() {
        header.push("timestamp".into());
    }
    header.extend(ds.channel_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..ds.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        if let Some(ts) = ds.timestamps() {
            rec.push(ts[i].to_string());
        }
        rec.extend(ds.row(i).iter().map(|v| {
            if v.is_finite() {
                format!("{v:?}")
            } else {
                String::new()
            }
        }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
