//! Sparse multichannel series and packing of per-label sample windows.
//!
//! A series carries at most one observation per timestamp. Channels `0..nf`
//! are features and channel `nf` is the label. For every label observation we
//! pack two `nf × w` matrices, both ordered most-recent-first:
//!
//! * the sparse tensor, which looks at the `w` grid steps immediately before
//!   the label (one event per step) and zero-fills features not observed there;
//! * the dense tensor, which holds each feature's last `w` observed values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ByteReader, Matrix};

const DATASET_MAGIC: &[u8; 5] = b"FSTS1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub channel: usize,
    pub value: f64,
}

impl Event {
    pub fn new(time: f64, channel: usize, value: f64) -> Self {
        Self {
            time,
            channel,
            value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSeries {
    pub patient_id: String,
    pub events: Vec<Event>,
}

impl SparseSeries {
    pub fn new(patient_id: impl Into<String>, events: Vec<Event>, nf: usize) -> Result<Self> {
        let s = Self {
            patient_id: patient_id.into(),
            events,
        };
        s.validate(nf)?;
        Ok(s)
    }

    pub fn validate(&self, nf: usize) -> Result<()> {
        for (k, e) in self.events.iter().enumerate() {
            if e.channel > nf {
                return Err(Error::InvalidSeries(format!(
                    "{}: event {k} has channel {} > {nf}",
                    self.patient_id, e.channel
                )));
            }
            if !e.time.is_finite() || !e.value.is_finite() {
                return Err(Error::InvalidSeries(format!(
                    "{}: event {k} is not finite",
                    self.patient_id
                )));
            }
            if k > 0 && self.events[k - 1].time >= e.time {
                return Err(Error::InvalidSeries(format!(
                    "{}: timestamps not strictly increasing at event {k}",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }

    /// Re-maps channels so `label_channel` becomes the label and the remaining
    /// channels become features `0..nf` in their original order.
    pub fn relabel(&self, label_channel: usize, nf: usize) -> Result<Self> {
        if label_channel > nf {
            return Err(Error::InvalidSeries(format!(
                "label channel {label_channel} out of range 0..={nf}"
            )));
        }
        let events = self
            .events
            .iter()
            .map(|e| {
                let channel = match e.channel.cmp(&label_channel) {
                    std::cmp::Ordering::Less => e.channel,
                    std::cmp::Ordering::Equal => nf,
                    std::cmp::Ordering::Greater => e.channel - 1,
                };
                Event { channel, ..*e }
            })
            .collect();
        Ok(Self {
            patient_id: self.patient_id.clone(),
            events,
        })
    }

    fn label_position(&self, nf: usize, label_time: f64) -> Result<usize> {
        let pos = self.events.partition_point(|e| e.time < label_time);
        match self.events.get(pos) {
            Some(e) if e.time == label_time && e.channel == nf => Ok(pos),
            _ => Err(Error::InvalidSeries(format!(
                "{}: no label observation at time {label_time}",
                self.patient_id
            ))),
        }
    }
}

/// One training example packed for a single label observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleWindow {
    pub dense: Matrix,
    pub sparse: Matrix,
    /// Row-major `nf × w`, true where the sparse entry was observed.
    pub mask: Vec<bool>,
    pub label: f64,
    pub t_index: usize,
}

impl SampleWindow {
    pub fn nf(&self) -> usize {
        self.dense.rows()
    }

    pub fn w(&self) -> usize {
        self.dense.cols()
    }

    pub fn mask_at(&self, i: usize, k: usize) -> bool {
        self.mask[i * self.w() + k]
    }
}

/// Packed windows for one series, plus the number of label events skipped
/// for lack of history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub nf: usize,
    pub w: usize,
    pub windows: Vec<SampleWindow>,
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Concatenates per-patient datasets, re-indexing `t_index` contiguously.
    pub fn concat(nf: usize, w: usize, parts: impl IntoIterator<Item = Dataset>) -> Self {
        let mut out = Dataset {
            nf,
            w,
            ..Default::default()
        };
        for part in parts {
            out.skipped += part.skipped;
            for mut win in part.windows {
                win.t_index = out.windows.len();
                out.windows.push(win);
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cells = self.nf * self.w;
        let mut out = Vec::with_capacity(21 + self.windows.len() * (cells * 17 + 16));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.nf as u32).to_le_bytes());
        out.extend_from_slice(&(self.w as u32).to_le_bytes());
        out.extend_from_slice(&(self.windows.len() as u64).to_le_bytes());
        for win in &self.windows {
            for v in win.dense.as_slice().iter().chain(win.sparse.as_slice()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend(win.mask.iter().map(|&m| m as u8));
            out.extend_from_slice(&win.label.to_le_bytes());
            out.extend_from_slice(&(win.t_index as u64).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != DATASET_MAGIC {
            return Err(Error::Decode("bad FSTS1 magic".into()));
        }
        let nf = r.u32()? as usize;
        let w = r.u32()? as usize;
        let count = r.u64()? as usize;
        let cells = nf * w;
        let mut windows = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let dense = Matrix::from_vec(nf, w, r.f64s(cells)?)?;
            let sparse = Matrix::from_vec(nf, w, r.f64s(cells)?)?;
            let mask = r
                .take(cells)?
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(Error::Decode(format!("bad mask byte {b}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let label = r.f64()?;
            let t_index = r.u64()? as usize;
            windows.push(SampleWindow {
                dense,
                sparse,
                mask,
                label,
                t_index,
            });
        }
        if !r.is_empty() {
            return Err(Error::Decode("trailing bytes after FSTS1 data".into()));
        }
        Ok(Self {
            nf,
            w,
            windows,
            skipped: 0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Timestamps of label observations; entry `k` is compacted index `k`.
pub fn compact_labels(series: &SparseSeries, nf: usize) -> Vec<f64> {
    series
        .events
        .iter()
        .filter(|e| e.channel == nf)
        .map(|e| e.time)
        .collect()
}

pub fn pack_sparse(
    series: &SparseSeries,
    nf: usize,
    label_time: f64,
    w: usize,
) -> Result<(Matrix, Vec<bool>)> {
    if w == 0 {
        return Err(Error::Dimension("window size must be at least 1".into()));
    }
    let pos = series.label_position(nf, label_time)?;
    if pos < w {
        return Err(Error::InsufficientHistory(format!(
            "{} grid steps before t={label_time}, need {w}",
            pos
        )));
    }
    let mut values = Matrix::zeros(nf, w);
    let mut mask = vec![false; nf * w];
    for k in 0..w {
        let e = &series.events[pos - 1 - k];
        if e.channel < nf {
            values.set(e.channel, k, e.value);
            mask[e.channel * w + k] = true;
        }
    }
    Ok((values, mask))
}

pub fn pack_dense(series: &SparseSeries, nf: usize, label_time: f64, w: usize) -> Result<Matrix> {
    if w == 0 {
        return Err(Error::Dimension("window size must be at least 1".into()));
    }
    let pos = series.label_position(nf, label_time)?;
    let mut dense = Matrix::zeros(nf, w);
    let mut filled = vec![0usize; nf];
    for e in series.events[..pos].iter().rev() {
        if e.channel < nf && filled[e.channel] < w {
            dense.set(e.channel, filled[e.channel], e.value);
            filled[e.channel] += 1;
        }
    }
    if let Some(i) = filled.iter().position(|&n| n < w) {
        return Err(Error::InsufficientHistory(format!(
            "feature {i} has {} observations before t={label_time}, need {w}",
            filled[i]
        )));
    }
    Ok(dense)
}

/// Packs one window per label observation with enough history.
///
/// Runs a single forward pass keeping the last `w` values of every feature,
/// rather than re-scanning backwards per label.
pub fn build_dataset(series: &SparseSeries, nf: usize, w: usize) -> Result<Dataset> {
    if w == 0 {
        return Err(Error::Dimension("window size must be at least 1".into()));
    }
    series.validate(nf)?;
    let mut history: Vec<Vec<f64>> = vec![Vec::with_capacity(w); nf];
    let mut out = Dataset {
        nf,
        w,
        ..Default::default()
    };
    for (pos, e) in series.events.iter().enumerate() {
        if e.channel < nf {
            let h = &mut history[e.channel];
            if h.len() == w {
                h.remove(0);
            }
            h.push(e.value);
            continue;
        }
        if pos < w || history.iter().any(|h| h.len() < w) {
            out.skipped += 1;
            continue;
        }
        let mut dense = Matrix::zeros(nf, w);
        for (i, h) in history.iter().enumerate() {
            for (k, v) in h.iter().rev().enumerate() {
                dense.set(i, k, *v);
            }
        }
        let mut sparse = Matrix::zeros(nf, w);
        let mut mask = vec![false; nf * w];
        for (k, prev) in series.events[pos - w..pos].iter().rev().enumerate() {
            if prev.channel < nf {
                sparse.set(prev.channel, k, prev.value);
                mask[prev.channel * w + k] = true;
            }
        }
        out.windows.push(SampleWindow {
            dense,
            sparse,
            mask,
            label: e.value,
            t_index: out.windows.len(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles patients with `seed` and splits them by `ratios` (train, valid, test).
///
/// Validation and test sizes are floored (at least one each); the remainder
/// goes to training.
pub fn split_patients<T>(items: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>> {
    let n = items.len();
    if n < 3 {
        return Err(Error::TooFewPatients(n));
    }
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let n_valid = ((n as f64 * va).floor() as usize).max(1);
    let n_test = ((n as f64 * te).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let valid = take(&order[..n_valid]);
    let test = take(&order[n_valid..n_valid + n_test]);
    let train = take(&order[n_valid + n_test..]);
    Ok(Split { train, valid, test })
}

#[derive(Debug, Deserialize, Serialize)]
struct CsvRow {
    patient_id: String,
    time: f64,
    channel: usize,
    value: f64,
}

/// Reads `patient_id,time,channel,value` rows into per-patient series.
///
/// Patients keep their first-appearance order; events are sorted by time.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<SparseSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: HashMap<String, Vec<Event>> = HashMap::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        if !row.time.is_finite() || !row.value.is_finite() {
            return Err(Error::Csv {
                line: 0,
                msg: format!("non-finite value for patient {}", row.patient_id),
            });
        }
        let events = by_patient.entry(row.patient_id.clone()).or_insert_with(|| {
            order.push(row.patient_id.clone());
            Vec::new()
        });
        events.push(Event::new(row.time, row.channel, row.value));
    }
    order
        .into_iter()
        .map(|pid| {
            let mut events = by_patient.remove(&pid).unwrap_or_default();
            events.sort_by(|a, b| a.time.total_cmp(&b.time));
            if let Some(pair) = events.windows(2).find(|p| p[0].time == p[1].time) {
                return Err(Error::TimestampCollision {
                    patient: pid,
                    time: pair[0].time,
                });
            }
            Ok(SparseSeries {
                patient_id: pid,
                events,
            })
        })
        .collect()
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Vec<SparseSeries>> {
    read_csv(std::fs::File::open(path)?)
}

pub fn write_csv<W: Write>(series: &[SparseSeries], writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(["patient_id", "time", "channel", "value"])
        .map_err(|e| Error::Io(e.into()))?;
    for s in series {
        for e in &s.events {
            wtr.serialize(CsvRow {
                patient_id: s.patient_id.clone(),
                time: e.time,
                channel: e.channel,
                value: e.value,
            })
            .map_err(|e| Error::Io(e.into()))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Per-feature z-score statistics fitted on training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = (data.len() * data.w) as f64;
        let mut mean = vec![0.0; data.nf];
        let mut sq = vec![0.0; data.nf];
        for win in &data.windows {
            for (i, (m, s)) in mean.iter_mut().zip(&mut sq).enumerate() {
                for &v in win.dense.row(i) {
                    *m += v;
                    *s += v * v;
                }
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= n;
                let var = (s / n - *m * *m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Scales dense entries and observed sparse entries; unobserved stay 0.
    pub fn apply(&self, data: &mut Dataset) {
        for win in &mut data.windows {
            let w = win.w();
            for i in 0..win.nf() {
                for k in 0..w {
                    let z = |v: f64| (v - self.mean[i]) / self.std[i];
                    win.dense.set(i, k, z(win.dense.get(i, k)));
                    if win.mask[i * w + k] {
                        win.sparse.set(i, k, z(win.sparse.get(i, k)));
                    }
                }
            }
        }
    }
}
