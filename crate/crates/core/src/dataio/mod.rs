//! Load groups, meter series and sample sets, plus ingestion, windowing,
//! the synthetic corpus and on-disk persistence.

mod ingest;
mod store;
mod synth;
mod window;

use std::collections::BTreeMap;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecError, EncodedImage, EncodingLevels};

pub use ingest::{ingest_meters, ingest_temperature, parse_timestamp, resample_temperature, write_meters_csv, write_temperature_csv};
pub use store::{load_set, save_set, MANIFEST};
pub use synth::{synth_corpus, CorpusSpec, SynthCorpus};
pub use window::{profile_pool, window_groups, Profile, ProfilePool, WindowReport, WindowSpec};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("duplicate reading for meter {meter} at {timestamp} (lines {first} and {second})")]
    Duplicate {
        meter: String,
        timestamp: String,
        first: u64,
        second: u64,
    },
    #[error("group {group} has {got} meters, expected {expected}")]
    GroupSize { group: String, got: usize, expected: usize },
    #[error("unknown meter {0}")]
    UnknownMeter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sample set: {0}")]
    Store(String),
    #[error("mixed group shapes: {0:?} and {1:?}")]
    MixedShapes((usize, usize), (usize, usize)),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Generated,
    RandomAssembled,
    NsgNegative,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::Real => 0,
            Provenance::Generated => 1,
            Provenance::RandomAssembled => 2,
            Provenance::NsgNegative => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Provenance::Real,
            1 => Provenance::Generated,
            2 => Provenance::RandomAssembled,
            3 => Provenance::NsgNegative,
            _ => return None,
        })
    }
}

/// Readings of one meter on a uniform grid; `None` marks a gap.
#[derive(Clone, Debug, PartialEq)]
pub struct MeterSeries {
    pub id: String,
    pub start: NaiveDateTime,
    pub cadence_min: u32,
    pub values: Vec<Option<f64>>,
}

impl MeterSeries {
    pub fn time_at(&self, i: usize) -> NaiveDateTime {
        self.start + chrono::Duration::minutes(self.cadence_min as i64 * i as i64)
    }

    /// Grid index of `t`, if `t` lies on this series' grid.
    pub fn index_of(&self, t: NaiveDateTime) -> Option<usize> {
        let mins = (t - self.start).num_minutes();
        let step = self.cadence_min as i64;
        (mins >= 0 && mins % step == 0 && (t - self.start).num_seconds() % 60 == 0)
            .then_some((mins / step) as usize)
    }

    pub fn gaps(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn end(&self) -> NaiveDateTime {
        self.time_at(self.values.len())
    }
}

/// Temperature on the load grid; `None` where no value could be filled.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureSeries {
    pub start: NaiveDateTime,
    pub cadence_min: u32,
    pub values: Vec<Option<f64>>,
}

impl TemperatureSeries {
    pub fn as_meter(&self) -> MeterSeries {
        MeterSeries {
            id: "temperature".into(),
            start: self.start,
            cadence_min: self.cadence_min,
            values: self.values.clone(),
        }
    }
}

/// An `M × N` kW matrix (row = time step, column = household) with its
/// aligned temperature series.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadGroup {
    pub id: String,
    pub start: NaiveDateTime,
    pub cadence_min: u32,
    pub m: usize,
    pub n: usize,
    /// Row-major `M × N`.
    pub kw: Vec<f64>,
    pub temperature: Vec<f64>,
    pub provenance: Provenance,
    pub meters: Vec<String>,
}

impl LoadGroup {
    /// Builds a group from per-household columns.
    pub fn from_columns(
        id: String,
        start: NaiveDateTime,
        cadence_min: u32,
        columns: &[&[f64]],
        temperature: Vec<f64>,
        provenance: Provenance,
        meters: Vec<String>,
    ) -> Result<Self, DataError> {
        let n = columns.len();
        let m = temperature.len();
        if columns.iter().any(|c| c.len() != m) {
            return Err(DataError::Config(format!("columns of {id} differ from M={m}")));
        }
        let mut kw = vec![0.0; m * n];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                kw[i * n + j] = *v;
            }
        }
        Ok(Self {
            id,
            start,
            cadence_min,
            m,
            n,
            kw,
            temperature,
            provenance,
            meters,
        })
    }

    pub fn value(&self, m: usize, n: usize) -> f64 {
        self.kw[m * self.n + n]
    }

    pub fn column(&self, n: usize) -> Vec<f64> {
        (0..self.m).map(|i| self.kw[i * self.n + n]).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|j| self.column(j)).collect()
    }

    /// Transformer-level series: the row sums.
    pub fn aggregate(&self) -> Vec<f64> {
        self.kw.chunks(self.n).map(|row| row.iter().sum()).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.m).map(|i| self.kw[i * self.n + j]).sum::<f64>() / self.m as f64)
            .collect()
    }

    /// Canonical column order: descending mean, ties kept in place.
    pub fn sorted_by_mean(&self) -> LoadGroup {
        let means = self.column_means();
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
        let mut out = self.clone();
        for i in 0..self.m {
            for (j, &src) in order.iter().enumerate() {
                out.kw[i * self.n + j] = self.kw[i * self.n + src];
            }
        }
        if self.meters.len() == self.n {
            out.meters = order.iter().map(|&j| self.meters[j].clone()).collect();
        }
        out
    }

    /// Encodes the canonically ordered group.
    pub fn encode(&self, levels: &EncodingLevels) -> Result<EncodedImage, DataError> {
        let g = self.sorted_by_mean();
        Ok(codec::encode(&g.kw, &g.temperature, g.m, g.n, levels)?.0)
    }

    pub fn end(&self) -> NaiveDateTime {
        self.start + chrono::Duration::minutes(self.cadence_min as i64 * self.m as i64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Unlabeled,
    /// Assigned by a classifier; `confidence` is its score in `[0, 1]`.
    Machine { positive: bool, confidence: f64 },
}

impl Label {
    /// Training target, if the label carries one.
    pub fn target(&self) -> Option<bool> {
        match self {
            Label::Positive => Some(true),
            Label::Negative => Some(false),
            Label::Unlabeled => None,
            Label::Machine { positive, .. } => Some(*positive),
        }
    }

    pub fn is_ground_truth(&self) -> bool {
        matches!(self, Label::Positive | Label::Negative)
    }
}

/// Groups with exactly one label each, plus free-form notes persisted in
/// the manifest (e.g. the criteria that produced a negative set).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub groups: Vec<LoadGroup>,
    pub labels: Vec<Label>,
    pub notes: BTreeMap<String, String>,
}

impl SampleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn labeled(groups: Vec<LoadGroup>, label: Label) -> Self {
        let labels = vec![label; groups.len()];
        Self {
            groups,
            labels,
            notes: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, group: LoadGroup, label: Label) {
        self.groups.push(group);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: SampleSet) {
        self.groups.extend(other.groups);
        self.labels.extend(other.labels);
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LoadGroup, &Label)> {
        self.groups.iter().zip(&self.labels)
    }

    /// Members with the given provenance.
    pub fn with_provenance(&self, provenance: Provenance) -> SampleSet {
        let mut out = SampleSet::new();
        for (g, l) in self.iter().filter(|(g, _)| g.provenance == provenance) {
            out.push(g.clone(), *l);
        }
        out
    }

    /// Common `(M, N)`, or an error naming two differing shapes.
    pub fn shape(&self) -> Result<Option<(usize, usize)>, DataError> {
        let mut shape = None;
        for g in &self.groups {
            match shape {
                None => shape = Some((g.m, g.n)),
                Some(s) if s != (g.m, g.n) => return Err(DataError::MixedShapes(s, (g.m, g.n))),
                _ => {}
            }
        }
        Ok(shape)
    }
}
