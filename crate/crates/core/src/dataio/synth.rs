//! Synthetic smart-meter corpus with known group structure.
//!
//! Household load is `base · shape_g(t) · f_g(day) · f_i(day) ·
//! (1 + β_g · hvac(T)) + noise + spikes`, clamped at zero. Households of one
//! group share the daily shape, the daily factor `f_g` and the weather
//! sensitivity `β_g`, which is what makes a real group distinguishable from
//! randomly assembled meters. Pool meters each get their own parameters.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};
use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::{parse_timestamp, window_groups, DataError, MeterSeries, SampleSet, TemperatureSeries, WindowReport, WindowSpec};
use crate::seed::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub groups: usize,
    pub households: usize,
    /// Meters not assigned to any group.
    pub pool_meters: usize,
    pub days: usize,
    pub cadence_min: u32,
    pub start: String,
    /// Median and log-space spread of per-household base load (kW).
    pub base_kw_median: f64,
    pub base_kw_sigma: f64,
    /// Log-space spread of pool meters' base load; a meter database mixes
    /// more kinds of customer than one feeder does.
    pub pool_base_kw_sigma: f64,
    /// Relative noise standard deviation.
    pub noise: f64,
    /// Per-step spike probability and mean spike height (kW).
    pub spike_rate: f64,
    pub spike_kw: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Log-space spread of the shared daily factor.
    pub daily_sigma: f64,
    /// Per meter-day probability of a two-hour gap.
    pub gap_rate: f64,
    pub temp_mean: f64,
    pub temp_seasonal: f64,
    pub temp_diurnal: f64,
    pub temp_weather_sigma: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            groups: 8,
            households: 4,
            pool_meters: 32,
            days: 42,
            cadence_min: 15,
            start: "2021-01-04T00:00:00".into(),
            base_kw_median: 0.9,
            base_kw_sigma: 0.35,
            pool_base_kw_sigma: 0.8,
            noise: 0.08,
            spike_rate: 0.004,
            spike_kw: 1.2,
            beta_min: 0.1,
            beta_max: 0.6,
            daily_sigma: 0.15,
            gap_rate: 0.0,
            temp_mean: 45.0,
            temp_seasonal: 10.0,
            temp_diurnal: 8.0,
            temp_weather_sigma: 5.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<NaiveDateTime, DataError> {
        let bad = |m: &str| Err(DataError::Config(format!("corpus spec: {m}")));
        if self.groups == 0 || self.households == 0 || self.days == 0 {
            return bad("groups, households and days must be positive");
        }
        if self.cadence_min == 0 || 1440 % self.cadence_min != 0 {
            return bad("cadence must divide a day");
        }
        if !(self.base_kw_median > 0.0 && self.base_kw_sigma >= 0.0 && self.pool_base_kw_sigma >= 0.0 && self.noise >= 0.0 && self.spike_kw >= 0.0) {
            return bad("base, noise and spike parameters must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.spike_rate) || !(0.0..=1.0).contains(&self.gap_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if self.beta_min > self.beta_max || self.daily_sigma < 0.0 || self.temp_weather_sigma < 0.0 {
            return bad("need beta_min <= beta_max and non-negative spreads");
        }
        parse_timestamp(&self.start).ok_or_else(|| DataError::Config(format!("bad start {:?}", self.start)))
    }

    fn steps_per_day(&self) -> usize {
        (1440 / self.cadence_min) as usize
    }
}

/// Daily consumption shape: a floor plus morning, midday and evening bumps.
#[derive(Clone, Debug)]
struct Shape {
    floor: f64,
    bumps: [(f64, f64, f64); 3],
    norm: f64,
}

fn circ(d: f64) -> f64 {
    let d = d.rem_euclid(24.0);
    d.min(24.0 - d)
}

impl Shape {
    fn random(rng: &mut Rng) -> Self {
        let mut s = Self {
            floor: rng.random_range(0.3..0.5),
            bumps: [
                (rng.random_range(6.0..9.0), rng.random_range(0.3..1.2), rng.random_range(0.8..2.0)),
                (13.0, rng.random_range(0.0..0.6), 3.0),
                (rng.random_range(17.0..21.0), rng.random_range(0.6..2.0), rng.random_range(0.8..2.0)),
            ],
            norm: 1.0,
        };
        let mean = (0..96).map(|k| s.raw(k as f64 / 4.0, false)).sum::<f64>() / 96.0;
        s.norm = 1.0 / mean;
        s
    }

    fn raw(&self, hour: f64, weekend: bool) -> f64 {
        let mut v = self.floor;
        for (k, &(mu, a, w)) in self.bumps.iter().enumerate() {
            let (mu, a) = match (weekend, k) {
                (true, 0) => (mu + 1.5, a * 0.8),
                (true, 1) => (mu, a * 1.6 + 0.2),
                _ => (mu, a),
            };
            v += a * (-circ(hour - mu).powi(2) / (2.0 * w * w)).exp();
        }
        v
    }

    fn at(&self, hour: f64, weekend: bool) -> f64 {
        self.raw(hour, weekend) * self.norm
    }
}

fn hvac(t: f64) -> f64 {
    (t - 68.0).max(0.0) / 15.0 + (55.0 - t).max(0.0) / 25.0
}

/// Meters, temperature and the group assignment of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub meters: Vec<MeterSeries>,
    pub temperature: TemperatureSeries,
    /// Group id to its member meter ids.
    pub assignment: BTreeMap<String, Vec<String>>,
    /// Meters that belong to no group.
    pub pool: Vec<String>,
}

impl SynthCorpus {
    /// Windows the grouped meters into labeled positives.
    pub fn positives(&self, window: &WindowSpec) -> Result<(SampleSet, WindowReport), DataError> {
        window_groups(&self.meters, &self.temperature, &self.assignment, window)
    }
}

struct Params {
    shape: Shape,
    beta: f64,
    daily: Vec<f64>,
}

impl Params {
    fn random(spec: &CorpusSpec, rng: &mut Rng) -> Self {
        let daily_dist = LogNormal::new(0.0, spec.daily_sigma).expect("validated");
        Self {
            shape: Shape::random(rng),
            beta: rng.random_range(spec.beta_min..=spec.beta_max),
            daily: (0..spec.days).map(|_| daily_dist.sample(rng)).collect(),
        }
    }
}

pub fn synth_corpus(spec: &CorpusSpec, seed: u64) -> Result<SynthCorpus, DataError> {
    let start = spec.validate()?;
    let spd = spec.steps_per_day();
    let len = spd * spec.days;
    let times: Vec<NaiveDateTime> = (0..len)
        .map(|i| start + Duration::minutes(spec.cadence_min as i64 * i as i64))
        .collect();

    let mut rng = seed::rng_for(seed, "synth/temperature");
    let weather = Normal::new(0.0, spec.temp_weather_sigma.max(1e-12)).expect("validated");
    let mut anomaly = 0.0;
    let mut temps = Vec::with_capacity(len);
    for d in 0..spec.days {
        anomaly = 0.7 * anomaly + weather.sample(&mut rng);
        for k in 0..spd {
            let t = times[d * spd + k];
            let hour = t.hour() as f64 + t.minute() as f64 / 60.0;
            let season = (2.0 * PI * (t.ordinal() as f64 - 200.0) / 365.0).cos();
            let v = spec.temp_mean + spec.temp_seasonal * season + spec.temp_diurnal * (2.0 * PI * (hour - 9.0) / 24.0).sin() + anomaly;
            temps.push(v.clamp(0.0, 120.0));
        }
    }

    let base_dist = LogNormal::new(spec.base_kw_median.ln(), spec.base_kw_sigma).expect("validated");
    let pool_base_dist = LogNormal::new(spec.base_kw_median.ln(), spec.pool_base_kw_sigma).expect("validated");
    let house_dist = LogNormal::new(0.0, spec.daily_sigma * 0.5).expect("validated");
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut meters = Vec::new();
    let mut assignment = BTreeMap::new();
    let mut pool = Vec::new();

    let emit = |id: String, params: &Params, base_dist: &LogNormal<f64>, rng: &mut Rng| -> MeterSeries {
        let base = base_dist.sample(rng);
        let mut values = Vec::with_capacity(len);
        for d in 0..spec.days {
            let own = house_dist.sample(rng);
            for k in 0..spd {
                let t = times[d * spd + k];
                let hour = t.hour() as f64 + t.minute() as f64 / 60.0;
                let weekend = matches!(t.weekday(), Weekday::Sat | Weekday::Sun);
                let mut v = base * params.shape.at(hour, weekend) * params.daily[d] * own * (1.0 + params.beta * hvac(temps[d * spd + k]));
                v += spec.noise * base * noise.sample(rng);
                if rng.random_bool(spec.spike_rate) {
                    v += spec.spike_kw * rng.random_range(0.5..1.5);
                }
                values.push(Some(v.max(0.0)));
            }
            if rng.random_bool(spec.gap_rate) {
                let at = rng.random_range(0..spd.saturating_sub(8).max(1));
                for slot in values[d * spd + at..].iter_mut().take(8) {
                    *slot = None;
                }
            }
        }
        MeterSeries {
            id,
            start,
            cadence_min: spec.cadence_min,
            values,
        }
    };

    for g in 0..spec.groups {
        let mut rng = seed::rng_for(seed, &format!("synth/group/{g}"));
        let params = Params::random(spec, &mut rng);
        let group = format!("g{g:02}");
        let mut ids = Vec::new();
        for h in 0..spec.households {
            let id = format!("{group}-h{h}");
            meters.push(emit(id.clone(), &params, &base_dist, &mut rng));
            ids.push(id);
        }
        assignment.insert(group, ids);
    }
    for p in 0..spec.pool_meters {
        let mut rng = seed::rng_for(seed, &format!("synth/pool/{p}"));
        let params = Params::random(spec, &mut rng);
        let id = format!("p{p:03}");
        meters.push(emit(id.clone(), &params, &pool_base_dist, &mut rng));
        pool.push(id);
    }
    Ok(SynthCorpus {
        meters,
        temperature: TemperatureSeries {
            start,
            cadence_min: spec.cadence_min,
            values: temps.into_iter().map(Some).collect(),
        },
        assignment,
        pool,
    })
}
