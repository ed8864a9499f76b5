use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Role, TimeSeriesPanel};

/// Location of one party's CSV pair and how to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    /// Columns `series_id, timestamp, feat_1..feat_F`; timestamps in minutes.
    pub series: PathBuf,
    /// Columns `series_id, x, y`.
    pub locations: PathBuf,
    pub sampling_minutes: u32,
    #[serde(default)]
    pub output_features: Vec<usize>,
}

/// Orders ids like `s2` before `s10`.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    let split = |s: &str| {
        let digits = s.len() - s.bytes().rev().take_while(u8::is_ascii_digit).count();
        let (head, tail) = s.split_at(digits);
        (head.to_string(), tail.parse::<u128>().ok())
    };
    let (ha, na) = split(a);
    let (hb, nb) = split(b);
    ha.cmp(&hb).then(na.cmp(&nb)).then_with(|| a.cmp(b))
}

fn parse_f64(field: &str, line: u64) -> Result<f64, DataError> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    f.parse().map_err(|_| DataError::Parse {
        line,
        value: field.to_string(),
    })
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

/// Reads one party's panel from a series file and a locations file.
///
/// Series rows may arrive in any series order but must be in increasing time
/// within a series. Empty or `nan` feature cells are treated as missing.
pub fn load_csv(
    series: impl Read,
    locations: impl Read,
    sampling_minutes: u32,
    party_id: usize,
    role: Role,
    output_features: Vec<usize>,
) -> Result<TimeSeriesPanel, DataError> {
    if sampling_minutes == 0 {
        return Err(DataError::InvalidConfig("sampling rate must be positive".into()));
    }
    let mut rows: BTreeMap<String, (Vec<i64>, Vec<f64>)> = BTreeMap::new();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(series);
    let n_features = reader.headers()?.len().saturating_sub(2);
    if n_features == 0 {
        return Err(DataError::RaggedFeatures {
            line: 1,
            expected: 1,
            found: 0,
        });
    }
    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() != n_features + 2 {
            return Err(DataError::RaggedFeatures {
                line,
                expected: n_features,
                found: record.len().saturating_sub(2),
            });
        }
        let id = record[0].trim().to_string();
        let ts: i64 = record[1].trim().parse().map_err(|_| DataError::Parse {
            line,
            value: record[1].to_string(),
        })?;
        let entry = rows.entry(id.clone()).or_default();
        if let Some(&prev) = entry.0.last() {
            if ts <= prev {
                return Err(DataError::NonMonotoneTimestamp {
                    series: id,
                    timestamp: ts,
                });
            }
            if ts - prev != sampling_minutes as i64 {
                return Err(DataError::TimestampGap {
                    series: id,
                    timestamp: ts,
                    rate: sampling_minutes,
                });
            }
        }
        entry.0.push(ts);
        for field in record.iter().skip(2) {
            entry.1.push(parse_f64(field, line)?);
        }
    }

    let mut coords: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut reader = csv::Reader::from_reader(locations);
    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        if record.len() < 3 {
            return Err(DataError::Parse {
                line,
                value: record.iter().collect::<Vec<_>>().join(","),
            });
        }
        let id = record[0].trim().to_string();
        if !rows.contains_key(&id) {
            return Err(DataError::UnknownSeries(id));
        }
        let x = parse_f64(&record[1], line)?;
        let y = parse_f64(&record[2], line)?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(DataError::Parse {
                line,
                value: format!("{},{}", &record[1], &record[2]),
            });
        }
        coords.insert(id, (x, y));
    }

    let mut ids: Vec<String> = rows.keys().cloned().collect();
    ids.sort_by(|a, b| natural_cmp(a, b));
    let Some(first) = ids.first() else {
        return Err(DataError::InvalidConfig("series file has no rows".into()));
    };
    let reference = first.clone();
    let (ref_ts, _) = &rows[&reference];
    let (start_minute, n_steps) = (ref_ts[0], ref_ts.len());

    let mut panel_coords = Vec::with_capacity(ids.len());
    let mut values = Vec::with_capacity(ids.len() * n_steps * n_features);
    for id in &ids {
        let (ts, vals) = &rows[id];
        if ts[0] != start_minute || ts.len() != n_steps {
            return Err(DataError::MisalignedSeries {
                series: id.clone(),
                reference: reference.clone(),
            });
        }
        let c = *coords.get(id).ok_or_else(|| DataError::MissingLocation(id.clone()))?;
        if panel_coords.contains(&c) {
            return Err(DataError::DuplicateCoordinates(id.clone()));
        }
        panel_coords.push(c);
        values.extend_from_slice(vals);
    }
    if output_features.iter().any(|&f| f >= n_features) {
        return Err(DataError::InvalidConfig(format!(
            "output feature index out of range for {n_features} features"
        )));
    }
    Ok(TimeSeriesPanel {
        party_id,
        role,
        series_ids: ids,
        coords: panel_coords,
        sampling_minutes,
        start_minute,
        n_steps,
        n_features,
        output_features,
        values,
    })
}

/// Opens the two files named by `source` and loads them.
pub fn load_source(source: &CsvSource, party_id: usize, role: Role) -> Result<TimeSeriesPanel, DataError> {
    let series = std::fs::File::open(&source.series)?;
    let locations = std::fs::File::open(&source.locations)?;
    load_csv(
        std::io::BufReader::new(series),
        std::io::BufReader::new(locations),
        source.sampling_minutes,
        party_id,
        role,
        source.output_features.clone(),
    )
}

/// Writes a panel in the format [`load_csv`] reads. Missing values become
/// empty cells; floats use the shortest round-trip representation.
pub fn write_csv(panel: &TimeSeriesPanel, series: impl Write, locations: impl Write) -> Result<(), DataError> {
    let fmt = |v: f64| if v.is_finite() { format!("{v:?}") } else { String::new() };
    let mut w = csv::Writer::from_writer(series);
    let mut header = vec!["series_id".to_string(), "timestamp".to_string()];
    header.extend((1..=panel.n_features).map(|f| format!("feat_{f}")));
    w.write_record(&header)?;
    for (s, id) in panel.series_ids.iter().enumerate() {
        for t in 0..panel.n_steps {
            let mut row = vec![id.clone(), panel.timestamp(t).to_string()];
            row.extend(panel.observation(s, t).iter().map(|&v| fmt(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(locations);
    w.write_record(["series_id", "x", "y"])?;
    for (id, &(x, y)) in panel.series_ids.iter().zip(&panel.coords) {
        w.write_record([id.clone(), fmt(x), fmt(y)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<dir>/<stem>_series.csv` and `<dir>/<stem>_locations.csv`.
pub fn write_panel_files(panel: &TimeSeriesPanel, dir: &Path, stem: &str) -> Result<CsvSource, DataError> {
    std::fs::create_dir_all(dir)?;
    let series = dir.join(format!("{stem}_series.csv"));
    let locations = dir.join(format!("{stem}_locations.csv"));
    write_csv(
        panel,
        std::io::BufWriter::new(std::fs::File::create(&series)?),
        std::io::BufWriter::new(std::fs::File::create(&locations)?),
    )?;
    Ok(CsvSource {
        series,
        locations,
        sampling_minutes: panel.sampling_minutes,
        output_features: panel.output_features.clone(),
    })
}
