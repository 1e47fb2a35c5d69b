//! CSV ingestion of meter readings (`timestamp,meter_id,kw`) and weather
//! (`timestamp,temp_f`).

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};

use super::{DataError, MeterSeries, TemperatureSeries, TIMESTAMP_FORMAT};

/// Longest run of missing load steps bridged by linear interpolation.
pub const MAX_INTERPOLATED_STEPS: usize = 4;

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

struct Row {
    t: NaiveDateTime,
    value: f64,
    line: u64,
}

fn read_rows(path: &Path, header: &[&str]) -> Result<BTreeMap<String, Vec<Row>>, DataError> {
    let shown = path.display().to_string();
    let parse_err = |line: u64, msg: String| DataError::Parse {
        path: shown.clone(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(parse_err(1, format!("expected header {}, got {}", header.join(","), got.join(","))));
    }
    let keyed = header.len() == 3;
    let mut out: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, got {}", header.len(), rec.len())));
        }
        let t = parse_timestamp(&rec[0]).ok_or_else(|| parse_err(line, format!("bad timestamp {:?}", &rec[0])))?;
        let raw = &rec[header.len() - 1];
        let value: f64 = raw.parse().map_err(|_| parse_err(line, format!("bad number {raw:?}")))?;
        if !value.is_finite() {
            return Err(parse_err(line, format!("non-finite value {raw:?}")));
        }
        if keyed && value < 0.0 {
            return Err(parse_err(line, format!("negative kW {value}")));
        }
        let key = if keyed { rec[1].to_string() } else { String::new() };
        out.entry(key).or_default().push(Row { t, value, line });
    }
    for (key, rows) in out.iter_mut() {
        rows.sort_by_key(|r| (r.t, r.line));
        if let Some(w) = rows.windows(2).find(|w| w[0].t == w[1].t) {
            return Err(DataError::Duplicate {
                meter: if key.is_empty() { "temperature".into() } else { key.clone() },
                timestamp: w[0].t.format(TIMESTAMP_FORMAT).to_string(),
                first: w[0].line,
                second: w[1].line,
            });
        }
    }
    Ok(out)
}

/// Reads meter readings into one gridded series per meter, sorted by id.
/// Missing or off-grid timestamps become gaps.
pub fn ingest_meters(path: &Path, cadence_min: u32) -> Result<Vec<MeterSeries>, DataError> {
    if cadence_min == 0 {
        return Err(DataError::Config("cadence must be positive".into()));
    }
    let rows = read_rows(path, &["timestamp", "meter_id", "kw"])?;
    let mut out = Vec::with_capacity(rows.len());
    for (id, rows) in rows {
        let start = rows[0].t;
        let mut series = MeterSeries {
            id,
            start,
            cadence_min,
            values: Vec::new(),
        };
        let last = rows.last().expect("non-empty").t;
        let len = (last - start).num_minutes() as usize / cadence_min as usize + 1;
        series.values = vec![None; len];
        let mut off_grid = 0;
        for r in &rows {
            match series.index_of(r.t) {
                Some(i) => series.values[i] = Some(r.value),
                None => off_grid += 1,
            }
        }
        if off_grid > 0 {
            log::warn!("meter {}: {off_grid} readings off the {cadence_min}-minute grid", series.id);
        }
        out.push(series);
    }
    Ok(out)
}

/// Reads weather and resamples it onto the load grid.
pub fn ingest_temperature(path: &Path, cadence_min: u32) -> Result<TemperatureSeries, DataError> {
    let mut rows = read_rows(path, &["timestamp", "temp_f"])?;
    let rows = rows.remove("").unwrap_or_default();
    if rows.is_empty() {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "no temperature rows".into(),
        });
    }
    let readings: Vec<(NaiveDateTime, f64)> = rows.iter().map(|r| (r.t, r.value)).collect();
    resample_temperature(&readings, cadence_min)
}

/// Forward-fills sorted readings within their native interval, then bridges
/// runs of at most [`MAX_INTERPOLATED_STEPS`] missing steps by linear
/// interpolation between the surrounding readings. Longer runs stay `None`.
pub fn resample_temperature(readings: &[(NaiveDateTime, f64)], cadence_min: u32) -> Result<TemperatureSeries, DataError> {
    if cadence_min == 0 || readings.is_empty() {
        return Err(DataError::Config("need readings and a positive cadence".into()));
    }
    let step = Duration::minutes(cadence_min as i64);
    let native = readings
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .filter(|d| *d > Duration::zero())
        .min()
        .unwrap_or(step);
    let start = readings[0].0;
    let end = readings.last().expect("non-empty").0 + native.max(step);
    let len = ((end - start).num_minutes() / cadence_min as i64).max(1) as usize;
    let mut values = vec![None; len];
    // `anchor[i]`: index of the last reading at or before slot i
    let mut anchor = vec![None; len];
    let mut r = 0;
    for (i, slot) in values.iter_mut().enumerate() {
        let t = start + step * i as i32;
        while r + 1 < readings.len() && readings[r + 1].0 <= t {
            r += 1;
        }
        if readings[r].0 <= t {
            anchor[i] = Some(r);
            if t - readings[r].0 < native {
                *slot = Some(readings[r].1);
            }
        }
    }
    let mut i = 0;
    while i < len {
        if values[i].is_some() {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < len && values[i].is_none() {
            i += 1;
        }
        let run = i - run_start;
        let (Some(a), true) = (anchor[run_start], i < len) else { continue };
        if run > MAX_INTERPOLATED_STEPS || a + 1 >= readings.len() {
            continue;
        }
        let (t0, v0) = readings[a];
        let (t1, v1) = readings[a + 1];
        let span = (t1 - t0).num_seconds() as f64;
        for (k, slot) in values.iter_mut().enumerate().take(i).skip(run_start) {
            let t = start + step * k as i32;
            let w = (t - t0).num_seconds() as f64 / span;
            *slot = Some(v0 + w * (v1 - v0));
        }
    }
    Ok(TemperatureSeries {
        start,
        cadence_min,
        values,
    })
}

pub fn write_meters_csv(path: &Path, meters: &[MeterSeries]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "meter_id", "kw"])?;
    for s in meters {
        for (i, v) in s.values.iter().enumerate() {
            if let Some(v) = v {
                let t = s.time_at(i).format(TIMESTAMP_FORMAT).to_string();
                w.write_record([t.as_str(), s.id.as_str(), format!("{v:?}").as_str()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_temperature_csv(path: &Path, temperature: &TemperatureSeries) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "temp_f"])?;
    let series = temperature.as_meter();
    for (i, v) in series.values.iter().enumerate() {
        if let Some(v) = v {
            let t = series.time_at(i).format(TIMESTAMP_FORMAT).to_string();
            w.write_record([t.as_str(), format!("{v:?}").as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}
