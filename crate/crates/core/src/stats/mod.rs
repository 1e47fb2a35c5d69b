//! Statistical realisticness indices, 1-D Fréchet distances and the
//! generator comparison report.

mod plot;
mod report;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::dataio::{DataError, LoadGroup, SampleSet};

pub use plot::{box_svg, curve_svg, write_plots};
pub use report::{build_report, ClassifierBlock, EvalReport, SetScores, StatEntry};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("empty sample set")]
    Empty,
    #[error("invalid statistics configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Peak,
    Mean,
    Ramp,
    Hourly,
    Daily,
}

impl IndexKind {
    pub const ALL: [IndexKind; 5] = [IndexKind::Peak, IndexKind::Mean, IndexKind::Ramp, IndexKind::Hourly, IndexKind::Daily];

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Peak => "peak",
            IndexKind::Mean => "mean",
            IndexKind::Ramp => "ramp",
            IndexKind::Hourly => "hourly",
            IndexKind::Daily => "daily",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Household,
    Transformer,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Household, Level::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Level::Household => "household",
            Level::Transformer => "transformer",
        }
    }
}

/// Day periods (hour ranges) and day classes (weekday names per class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    pub periods: Vec<[u32; 2]>,
    pub day_classes: Vec<Vec<String>>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            periods: vec![[0, 6], [6, 10], [10, 14], [14, 18], [18, 24]],
            day_classes: vec![
                names(&["mon", "tue", "wed", "thu", "fri"]),
                names(&["sat"]),
                names(&["sun"]),
            ],
        }
    }
}

impl StatsConfig {
    fn validate(&self) -> Result<Vec<Vec<Weekday>>, StatsError> {
        let mut covered = [false; 24];
        for &[a, b] in &self.periods {
            if a >= b || b > 24 {
                return Err(StatsError::Config(format!("bad period [{a}, {b})")));
            }
            for h in a..b {
                if std::mem::replace(&mut covered[h as usize], true) {
                    return Err(StatsError::Config(format!("hour {h} in two periods")));
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(StatsError::Config("periods must cover the whole day".into()));
        }
        self.day_classes
            .iter()
            .map(|class| {
                class
                    .iter()
                    .map(|d| d.parse::<Weekday>().map_err(|_| StatsError::Config(format!("unknown weekday {d:?}"))))
                    .collect()
            })
            .collect()
    }

    /// Component labels of an index (one for scalar indices).
    pub fn components(&self, kind: IndexKind) -> Vec<String> {
        match kind {
            IndexKind::Hourly => self.periods.iter().map(|[a, b]| format!("{a:02}-{b:02}")).collect(),
            IndexKind::Daily => self.day_classes.iter().map(|c| c.join("+")).collect(),
            _ => vec![String::new()],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (mean, std) = mean_std(values);
        Self {
            count: values.len(),
            mean,
            std,
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        }
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Fréchet distance between Gaussian fits of two samples:
/// `(μa − μb)² + (σa − σb)²`. NaN if either sample is empty.
pub fn frechet_1d(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    (ma - mb).powi(2) + (sa - sb).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Favorable,
    Neutral,
    Unfavorable,
    Undefined,
}

/// Quotient of the multi-profile and single-profile distances; below 1
/// favors the multi-profile generator.
pub fn ratio(multi_fid: f64, single_fid: f64) -> (Option<f64>, Verdict) {
    if !(single_fid > 0.0) || !multi_fid.is_finite() {
        return (None, Verdict::Undefined);
    }
    let r = multi_fid / single_fid;
    let v = if r < 1.0 {
        Verdict::Favorable
    } else if r == 1.0 {
        Verdict::Neutral
    } else {
        Verdict::Unfavorable
    };
    (Some(r), v)
}

/// Sample values of one index component at one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexDistribution {
    pub kind: IndexKind,
    pub level: Level,
    pub component: String,
    pub values: Vec<f64>,
    pub summary: Summary,
}

/// Energies (kWh) per period for each whole day of a profile, and the day
/// each row belongs to.
fn day_period_energy(series: &[f64], start: NaiveDateTime, cadence_min: u32, periods: &[[u32; 2]]) -> Vec<(Weekday, Vec<f64>)> {
    let step = Duration::minutes(cadence_min as i64);
    let hours = cadence_min as f64 / 60.0;
    let spd = (1440 / cadence_min) as usize;
    let mut out = Vec::new();
    // first index at midnight
    let first = (0..series.len().min(spd)).find(|&i| {
        let t = start + step * i as i32;
        t.hour() == 0 && t.minute() == 0
    });
    let Some(mut i) = first else { return out };
    while i + spd <= series.len() {
        let day_start = start + step * i as i32;
        let mut e = vec![0.0; periods.len()];
        for k in 0..spd {
            let t = day_start + step * k as i32;
            if let Some(p) = periods.iter().position(|&[a, b]| (a..b).contains(&t.hour())) {
                e[p] += series[i + k] * hours;
            }
        }
        out.push((day_start.weekday(), e));
        i += spd;
    }
    out
}

fn profiles(g: &LoadGroup, level: Level) -> Vec<Vec<f64>> {
    match level {
        Level::Household => g.columns(),
        Level::Transformer => vec![g.aggregate()],
    }
}

/// All index distributions of a set at one level, in the order peak, mean,
/// ramp, hourly periods, daily classes.
pub fn compute_indices(samples: &SampleSet, level: Level, cfg: &StatsConfig) -> Result<Vec<IndexDistribution>, StatsError> {
    let classes = cfg.validate()?;
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    samples.shape()?;
    let (mut peak, mut mean, mut ramp) = (Vec::new(), Vec::new(), Vec::new());
    let mut hourly = vec![Vec::new(); cfg.periods.len()];
    let mut daily = vec![Vec::new(); classes.len()];
    for g in &samples.groups {
        for p in profiles(g, level) {
            peak.push(p.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            mean.push(p.iter().sum::<f64>() / p.len() as f64);
            ramp.extend(p.windows(2).map(|w| w[1] - w[0]));
            for (wd, e) in day_period_energy(&p, g.start, g.cadence_min, &cfg.periods) {
                for (k, v) in e.iter().enumerate() {
                    hourly[k].push(*v);
                }
                if let Some(c) = classes.iter().position(|c| c.contains(&wd)) {
                    daily[c].push(e.iter().sum());
                }
            }
        }
    }
    let mk = |kind, component: String, values: Vec<f64>| IndexDistribution {
        kind,
        level,
        component,
        summary: Summary::of(&values),
        values,
    };
    let mut out = vec![
        mk(IndexKind::Peak, String::new(), peak),
        mk(IndexKind::Mean, String::new(), mean),
        mk(IndexKind::Ramp, String::new(), ramp),
    ];
    for (label, values) in cfg.components(IndexKind::Hourly).into_iter().zip(hourly) {
        out.push(mk(IndexKind::Hourly, label, values));
    }
    for (label, values) in cfg.components(IndexKind::Daily).into_iter().zip(daily) {
        out.push(mk(IndexKind::Daily, label, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{Label, Provenance, TIMESTAMP_FORMAT};
    use proptest::prelude::*;

    fn group(cols: &[Vec<f64>], start: &str) -> LoadGroup {
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let m = cols[0].len();
        LoadGroup::from_columns(
            "g".into(),
            NaiveDateTime::parse_from_str(start, TIMESTAMP_FORMAT).unwrap(),
            15,
            &refs,
            vec![50.0; m],
            Provenance::Real,
            vec![],
        )
        .unwrap()
    }

    fn find(d: &[IndexDistribution], kind: IndexKind) -> &IndexDistribution {
        d.iter().find(|x| x.kind == kind).unwrap()
    }

    #[test]
    fn constant_week() {
        let set = SampleSet::labeled(vec![group(&[vec![1.0; 672]], "2021-01-04T00:00:00")], Label::Positive);
        let d = compute_indices(&set, Level::Household, &StatsConfig::default()).unwrap();
        assert_eq!(find(&d, IndexKind::Peak).values, vec![1.0]);
        assert_eq!(find(&d, IndexKind::Mean).values, vec![1.0]);
        let ramp = &find(&d, IndexKind::Ramp).values;
        assert_eq!(ramp.len(), 671);
        assert!(ramp.iter().all(|r| *r == 0.0));
        let daily: Vec<&IndexDistribution> = d.iter().filter(|x| x.kind == IndexKind::Daily).collect();
        assert_eq!(daily.iter().map(|x| x.values.len()).collect::<Vec<_>>(), vec![5, 1, 1]);
        assert!(daily.iter().all(|x| x.values.iter().all(|v| *v == 24.0)));
    }

    #[test]
    fn periods_sum_to_daily_energy() {
        let col: Vec<f64> = (0..96 * 3).map(|i| ((i * 7919) % 97) as f64 / 13.0).collect();
        let g = group(&[col], "2021-01-08T00:00:00");
        let days = day_period_energy(&g.column(0), g.start, 15, &StatsConfig::default().periods);
        assert_eq!(days.len(), 3);
        let set = SampleSet::labeled(vec![g], Label::Positive);
        let d = compute_indices(&set, Level::Household, &StatsConfig::default()).unwrap();
        let hourly: Vec<&IndexDistribution> = d.iter().filter(|x| x.kind == IndexKind::Hourly).collect();
        let daily: Vec<f64> = d.iter().filter(|x| x.kind == IndexKind::Daily).flat_map(|x| x.values.clone()).collect();
        // Fri (weekday), Sat, Sun in class order
        for (day, total) in daily.iter().enumerate() {
            let sum: f64 = hourly.iter().map(|h| h.values[day]).sum();
            assert_eq!(sum, *total);
        }
    }

    #[test]
    fn transformer_peak_is_subadditive() {
        let a: Vec<f64> = (0..96).map(|i| (i as f64 * 0.3).sin() + 1.5).collect();
        let b: Vec<f64> = (0..96).map(|i| (i as f64 * 0.7).cos() + 1.5).collect();
        let set = SampleSet::labeled(vec![group(&[a, b], "2021-01-04T00:00:00")], Label::Positive);
        let cfg = StatsConfig::default();
        let hh = compute_indices(&set, Level::Household, &cfg).unwrap();
        let tr = compute_indices(&set, Level::Transformer, &cfg).unwrap();
        let sum_peaks: f64 = find(&hh, IndexKind::Peak).values.iter().sum();
        assert!(find(&tr, IndexKind::Peak).values[0] <= sum_peaks);
        assert_eq!(find(&hh, IndexKind::Peak).values.len(), 2);
        assert_eq!(find(&tr, IndexKind::Peak).values.len(), 1);
    }

    #[test]
    fn config_must_cover_the_day() {
        let cfg = StatsConfig {
            periods: vec![[0, 12]],
            ..StatsConfig::default()
        };
        assert!(compute_indices(&SampleSet::new(), Level::Household, &cfg).is_err());
    }

    #[test]
    fn ratio_cases() {
        assert_eq!(ratio(2.0, 4.0), (Some(0.5), Verdict::Favorable));
        assert_eq!(ratio(3.0, 3.0), (Some(1.0), Verdict::Neutral));
        assert_eq!(ratio(1.0, 0.0), (None, Verdict::Undefined));
    }

    #[test]
    fn frechet_examples() {
        let a = [0.1, 0.5, 0.9, 0.4];
        assert_eq!(frechet_1d(&a, &a), 0.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + 2.0).collect();
        assert!((frechet_1d(&a, &shifted) - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric_and_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 1..30), b in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let ab = frechet_1d(&a, &b);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, frechet_1d(&b, &a));
        }

        #[test]
        fn household_indices_ignore_column_order(seed in 0u64..1000) {
            let cols: Vec<Vec<f64>> = (0..3).map(|j| (0..96).map(|i| (((i * 31 + j * 17) as u64 * (seed + 3)) % 101) as f64 / 25.0).collect()).collect();
            let rev: Vec<Vec<f64>> = cols.iter().rev().cloned().collect();
            let cfg = StatsConfig::default();
            let mk = |c: &[Vec<f64>]| SampleSet::labeled(vec![group(c, "2021-01-04T00:00:00")], Label::Positive);
            let a = compute_indices(&mk(&cols), Level::Household, &cfg).unwrap();
            let b = compute_indices(&mk(&rev), Level::Household, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let sorted = |v: &[f64]| { let mut v = v.to_vec(); v.sort_by(f64::total_cmp); v };
                prop_assert_eq!(sorted(&x.values), sorted(&y.values));
            }
        }
    }
}
