//! Cutting gridded series into fixed-length windows.

use std::collections::BTreeMap;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDateTime, NaiveTime, Weekday};
use serde::{Deserialize, Serialize};

use super::{DataError, Label, LoadGroup, MeterSeries, Provenance, SampleSet, TemperatureSeries};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    /// Time steps per window.
    pub m: usize,
    /// Households per group.
    pub n: usize,
    /// Steps between window starts; 0 means `m` (non-overlapping).
    pub stride: usize,
    /// Weekday of the first window start (at midnight).
    pub first_weekday: String,
    pub cadence_min: u32,
}

impl WindowSpec {
    pub fn weekday(&self) -> Result<Weekday, DataError> {
        Weekday::from_str(&self.first_weekday).map_err(|_| DataError::Config(format!("unknown weekday {:?}", self.first_weekday)))
    }

    fn step(&self) -> usize {
        if self.stride == 0 {
            self.m
        } else {
            self.stride
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.m == 0 || self.n == 0 || self.cadence_min == 0 {
            return Err(DataError::Config(format!("M, N and cadence must be positive: {self:?}")));
        }
        self.weekday().map(|_| ())
    }

    /// Window starts covering `[from, to)`.
    fn starts(&self, from: NaiveDateTime, to: NaiveDateTime) -> Result<Vec<NaiveDateTime>, DataError> {
        let wd = self.weekday()?;
        let mut day = from.date();
        if from.time() != NaiveTime::MIN {
            day = day.succ_opt().expect("date in range");
        }
        while day.weekday() != wd {
            day = day.succ_opt().expect("date in range");
        }
        let cad = Duration::minutes(self.cadence_min as i64);
        let (len, step) = (cad * self.m as i32, cad * self.step() as i32);
        let mut t = day.and_time(NaiveTime::MIN);
        let mut out = Vec::new();
        while t + len <= to {
            out.push(t);
            t += step;
        }
        Ok(out)
    }
}

/// Complete window of `series` starting at `t`, if every step is present.
fn slice(series: &MeterSeries, t: NaiveDateTime, m: usize) -> Option<Vec<f64>> {
    let i = series.index_of(t)?;
    if i + m > series.values.len() {
        return None;
    }
    series.values[i..i + m].iter().copied().collect()
}

fn span(series: &[&MeterSeries]) -> Option<(NaiveDateTime, NaiveDateTime)> {
    let from = series.iter().map(|s| s.start).min()?;
    let to = series.iter().map(|s| s.end()).max()?;
    Some((from, to))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowReport {
    pub included: usize,
    pub excluded: usize,
}

/// One labeled-positive group per (group, window) whose meters and
/// temperature are complete over the whole window.
pub fn window_groups(
    meters: &[MeterSeries],
    temperature: &TemperatureSeries,
    assignment: &BTreeMap<String, Vec<String>>,
    spec: &WindowSpec,
) -> Result<(SampleSet, WindowReport), DataError> {
    spec.validate()?;
    let by_id: BTreeMap<&str, &MeterSeries> = meters.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut members = BTreeMap::new();
    for (group, ids) in assignment {
        if ids.len() != spec.n {
            return Err(DataError::GroupSize {
                group: group.clone(),
                got: ids.len(),
                expected: spec.n,
            });
        }
        let series: Vec<&MeterSeries> = ids
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| DataError::UnknownMeter(id.clone())))
            .collect::<Result<_, _>>()?;
        members.insert(group, series);
    }
    let all: Vec<&MeterSeries> = members.values().flatten().copied().collect();
    let mut set = SampleSet::new();
    let mut report = WindowReport::default();
    let Some((from, to)) = span(&all) else { return Ok((set, report)) };
    let temp = temperature.as_meter();
    for t in spec.starts(from, to)? {
        let Some(tw) = slice(&temp, t, spec.m) else {
            report.excluded += members.len();
            continue;
        };
        for (group, series) in &members {
            let cols: Option<Vec<Vec<f64>>> = series.iter().map(|s| slice(s, t, spec.m)).collect();
            let Some(cols) = cols else {
                report.excluded += 1;
                continue;
            };
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            let g = LoadGroup::from_columns(
                format!("{group}@{}", t.format("%Y%m%dT%H%M")),
                t,
                spec.cadence_min,
                &refs,
                tw.clone(),
                Provenance::Real,
                series.iter().map(|s| s.id.clone()).collect(),
            )?;
            set.push(g, Label::Positive);
            report.included += 1;
        }
    }
    Ok((set, report))
}

/// A single meter's complete window.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub meter: String,
    pub start: NaiveDateTime,
    pub kw: Vec<f64>,
    pub temperature: Vec<f64>,
}

impl Profile {
    pub fn mean(&self) -> f64 {
        self.kw.iter().sum::<f64>() / self.kw.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.kw.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Every complete single-meter window, indexed by window start.
#[derive(Clone, Debug, Default)]
pub struct ProfilePool {
    pub m: usize,
    pub cadence_min: u32,
    pub profiles: Vec<Profile>,
    pub by_start: BTreeMap<NaiveDateTime, Vec<usize>>,
}

impl ProfilePool {
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Builds a group from pool profiles sharing one window start.
    pub fn assemble(&self, id: String, picks: &[usize], provenance: Provenance) -> Result<LoadGroup, DataError> {
        let first = self.profiles.get(picks[0]).ok_or_else(|| DataError::Config("empty pick".into()))?;
        let cols: Vec<&[f64]> = picks.iter().map(|&i| self.profiles[i].kw.as_slice()).collect();
        LoadGroup::from_columns(
            id,
            first.start,
            self.cadence_min,
            &cols,
            first.temperature.clone(),
            provenance,
            picks.iter().map(|&i| self.profiles[i].meter.clone()).collect(),
        )
    }
}

pub fn profile_pool(meters: &[MeterSeries], temperature: &TemperatureSeries, spec: &WindowSpec) -> Result<ProfilePool, DataError> {
    spec.validate()?;
    let mut pool = ProfilePool {
        m: spec.m,
        cadence_min: spec.cadence_min,
        ..ProfilePool::default()
    };
    let refs: Vec<&MeterSeries> = meters.iter().collect();
    let Some((from, to)) = span(&refs) else { return Ok(pool) };
    let temp = temperature.as_meter();
    for t in spec.starts(from, to)? {
        let Some(tw) = slice(&temp, t, spec.m) else { continue };
        for s in meters {
            if let Some(kw) = slice(s, t, spec.m) {
                pool.by_start.entry(t).or_default().push(pool.profiles.len());
                pool.profiles.push(Profile {
                    meter: s.id.clone(),
                    start: t,
                    kw,
                    temperature: tw.clone(),
                });
            }
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::tests::ts;

    fn series(id: &str, start: &str, len: usize, f: impl Fn(usize) -> Option<f64>) -> MeterSeries {
        MeterSeries {
            id: id.into(),
            start: ts(start),
            cadence_min: 15,
            values: (0..len).map(f).collect(),
        }
    }

    fn temp(start: &str, len: usize) -> TemperatureSeries {
        TemperatureSeries {
            start: ts(start),
            cadence_min: 15,
            values: vec![Some(55.0); len],
        }
    }

    fn spec(m: usize, n: usize) -> WindowSpec {
        WindowSpec {
            m,
            n,
            stride: 0,
            first_weekday: "monday".into(),
            cadence_min: 15,
        }
    }

    #[test]
    fn weeks_start_on_monday_and_gaps_exclude() {
        // Sunday start: the first Monday is one day in
        let start = "2021-01-03T00:00:00";
        let len = 96 * 22;
        let a = series("a", start, len, |i| Some(i as f64 * 0.01));
        let b = series("b", start, len, |i| if (96 + 700..96 + 708).contains(&i) { None } else { Some(1.0) });
        let assign = BTreeMap::from([("g".to_string(), vec!["a".to_string(), "b".to_string()])]);
        let (set, rep) = window_groups(&[a.clone(), b], &temp(start, len), &assign, &spec(672, 2)).unwrap();
        assert_eq!((rep.included, rep.excluded), (2, 1));
        assert_eq!(set.groups[0].start, ts("2021-01-04T00:00:00"));
        assert_eq!(set.groups[1].start, ts("2021-01-18T00:00:00"));
        assert_eq!(set.groups[0].start.weekday(), Weekday::Mon);
        // lossless over included spans
        let col = set.groups[0].column(0);
        let off = a.index_of(set.groups[0].start).unwrap();
        let src: Vec<f64> = a.values[off..off + 672].iter().map(|v| v.unwrap()).collect();
        assert_eq!(col, src);
    }

    #[test]
    fn group_size_is_checked() {
        let s = series("a", "2021-01-04T00:00:00", 96, |_| Some(1.0));
        let assign = BTreeMap::from([("g".to_string(), vec!["a".to_string()])]);
        let err = window_groups(&[s], &temp("2021-01-04T00:00:00", 96), &assign, &spec(96, 4)).unwrap_err();
        assert!(matches!(err, DataError::GroupSize { got: 1, expected: 4, .. }));
    }

    #[test]
    fn desk_scale_shapes() {
        let start = "2021-01-04T00:00:00";
        let ids = ["a", "b", "c", "d"];
        let ms: Vec<_> = ids.iter().map(|id| series(id, start, 96 * 3, |_| Some(0.5))).collect();
        let assign = BTreeMap::from([("g".to_string(), ids.iter().map(|s| s.to_string()).collect())]);
        let (set, _) = window_groups(&ms, &temp(start, 96 * 3), &assign, &spec(96, 4)).unwrap();
        assert_eq!(set.len(), 3);
        assert!(set.groups.iter().all(|g| (g.m, g.n) == (96, 4)));
        let pool = profile_pool(&ms, &temp(start, 96 * 3), &spec(96, 4)).unwrap();
        assert_eq!(pool.len(), 12);
        assert_eq!(pool.by_start.len(), 3);
    }
}
