//! Party panels: synthetic generation, CSV ingestion, preprocessing,
//! geometry, and aligned window extraction.

mod csv_io;
mod geo;
mod preprocess;
mod synthetic;
mod windows;

pub use csv_io::{load_csv, load_source, write_csv, write_panel_files, CsvSource};
pub use geo::{distance_matrix, GeoIndex};
pub use preprocess::{interpolate_missing, preprocess, split_lengths, ScalerState, SplitRatios};
pub use synthetic::{generate_synthetic, SyntheticConfig};
pub use windows::{prepare, PartyBatch, PreparedData, SplitData, WindowSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic configuration: {0}")]
    InvalidConfig(String),
    #[error("series `{0}` has no observed values")]
    SeriesAllMissing(String),
    #[error("series `{0}` has no location row")]
    MissingLocation(String),
    #[error("location row for unknown series `{0}`")]
    UnknownSeries(String),
    #[error("series `{series}`: timestamp {timestamp} breaks the {rate}-minute sampling grid")]
    TimestampGap {
        series: String,
        timestamp: i64,
        rate: u32,
    },
    #[error("series `{series}`: timestamp {timestamp} is not increasing")]
    NonMonotoneTimestamp { series: String, timestamp: i64 },
    #[error("series `{series}` covers a different time range than `{reference}`")]
    MisalignedSeries { series: String, reference: String },
    #[error("line {line}: expected {expected} feature columns, found {found}")]
    RaggedFeatures {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("series `{0}` shares its coordinates with another series")]
    DuplicateCoordinates(String),
    #[error("line {line}: cannot parse `{value}`")]
    Parse { line: u64, value: String },
    #[error("{0}")]
    Window(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Active,
    Passive,
}

/// One party's geo-distributed multivariate time series.
///
/// Values are stored series-major as `[series][step][feature]`; `NaN` marks a
/// missing observation until [`preprocess`] interpolates it away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPanel {
    pub party_id: usize,
    pub role: Role,
    pub series_ids: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    /// Minutes between consecutive steps.
    pub sampling_minutes: u32,
    /// Timestamp (minutes) of step 0.
    pub start_minute: i64,
    pub n_steps: usize,
    pub n_features: usize,
    /// Feature indices forming the prediction target (active party only).
    pub output_features: Vec<usize>,
    pub values: Vec<f64>,
}

impl TimeSeriesPanel {
    pub fn n_series(&self) -> usize {
        self.series_ids.len()
    }

    fn offset(&self, series: usize, step: usize) -> usize {
        (series * self.n_steps + step) * self.n_features
    }

    pub fn value(&self, series: usize, step: usize, feature: usize) -> f64 {
        self.values[self.offset(series, step) + feature]
    }

    pub fn set(&mut self, series: usize, step: usize, feature: usize, v: f64) {
        let o = self.offset(series, step) + feature;
        self.values[o] = v;
    }

    /// Features of one series at one step.
    pub fn observation(&self, series: usize, step: usize) -> &[f64] {
        let o = self.offset(series, step);
        &self.values[o..o + self.n_features]
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        self.start_minute + step as i64 * self.sampling_minutes as i64
    }

    /// Copy restricted to steps `start..end`.
    pub fn time_slice(&self, start: usize, end: usize) -> TimeSeriesPanel {
        let mut values = Vec::with_capacity(self.n_series() * (end - start) * self.n_features);
        for s in 0..self.n_series() {
            values.extend_from_slice(&self.values[self.offset(s, start)..self.offset(s, end)]);
        }
        TimeSeriesPanel {
            start_minute: self.timestamp(start),
            n_steps: end - start,
            values,
            ..self.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
