//! Statistic-based negative samples.
//!
//! Per-profile mean and peak distributions of the positives are split into
//! equal-width bins; the contiguous run of bins holding the most mass is the
//! in-distribution ("red") region and everything else is out of
//! distribution. A negative takes K profiles from the red region and N - K
//! from outside it, sharing one window start when any start can supply
//! them. The difficulty dial sets how far outside, measured in bin widths
//! from the red region's edge.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataio::{DataError, Label, Profile, ProfilePool, Provenance, SampleSet};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum NsgError {
    #[error("no positive samples to fit against")]
    Empty,
    #[error("the {0} distribution occupies a single bin; pick a corpus with more spread")]
    Degenerate(Criterion),
    #[error("invalid negative-sample criteria: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NsgError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Mean,
    Peak,
}

impl Criterion {
    pub fn of(self, profile: &[f64]) -> f64 {
        match self {
            Criterion::Mean => profile.iter().sum::<f64>() / profile.len() as f64,
            Criterion::Peak => profile.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Mean => "mean",
            Criterion::Peak => "peak",
        })
    }
}

/// How far out-of-region picks sit from the red region, in bin widths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    /// At least two bins away.
    VeryNegative,
    /// Between one and two bins away.
    #[default]
    Negative,
    /// The outer half of the adjacent bin.
    SlightlyNegative,
    /// The inner half of the adjacent bin.
    AlmostPositive,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::VeryNegative,
        Difficulty::Negative,
        Difficulty::SlightlyNegative,
        Difficulty::AlmostPositive,
    ];

    /// Accepted distance band `[lo, hi)`; the lower bound is exclusive at 0.
    pub fn band(self) -> (f64, f64) {
        match self {
            Difficulty::VeryNegative => (2.0, f64::INFINITY),
            Difficulty::Negative => (1.0, 2.0),
            Difficulty::SlightlyNegative => (0.5, 1.0),
            Difficulty::AlmostPositive => (0.0, 0.5),
        }
    }

    pub fn accepts(self, distance: f64) -> bool {
        let (lo, hi) = self.band();
        distance > 0.0 && distance >= lo && distance < hi
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NsgCriteria {
    pub use_mean: bool,
    pub use_peak: bool,
    pub bins: usize,
    /// Width of the red region in bins.
    pub red_bins: usize,
    /// Inclusive K range; `None` means `[0, N/2]`.
    pub k_range: Option<[usize; 2]>,
    pub difficulty: Difficulty,
}

impl Default for NsgCriteria {
    fn default() -> Self {
        Self {
            use_mean: true,
            use_peak: true,
            bins: 6,
            red_bins: 2,
            k_range: None,
            difficulty: Difficulty::default(),
        }
    }
}

impl NsgCriteria {
    pub fn mean_only() -> Self {
        Self {
            use_peak: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NsgError::Config(m.into()));
        if !(self.use_mean || self.use_peak) {
            return bad("enable at least one of use_mean and use_peak");
        }
        if self.bins < 2 {
            return bad("bins must be at least 2");
        }
        if self.red_bins == 0 || self.red_bins >= self.bins {
            return bad("red_bins must be in [1, bins)");
        }
        if let Some([lo, hi]) = self.k_range {
            if lo > hi {
                return bad("k_range must be ordered");
            }
        }
        Ok(())
    }

    pub fn k_range(&self, n: usize) -> Result<[usize; 2]> {
        let [lo, hi] = self.k_range.unwrap_or([0, n / 2]);
        if hi >= n {
            return Err(NsgError::Config(format!("K up to {hi} leaves no out-of-region column with N={n}")));
        }
        Ok([lo, hi])
    }

    /// The criterion that sets the difficulty band; the other one, when
    /// enabled, only has to be violated.
    pub fn primary(&self) -> Criterion {
        if self.use_mean {
            Criterion::Mean
        } else {
            Criterion::Peak
        }
    }

    pub fn enabled(&self) -> Vec<Criterion> {
        let mut v = Vec::new();
        if self.use_mean {
            v.push(Criterion::Mean);
        }
        if self.use_peak {
            v.push(Criterion::Peak);
        }
        v
    }

    pub fn fingerprint(&self) -> u64 {
        seed::fingerprint(&serde_json::to_vec(self).expect("criteria serialize"))
    }
}

/// Equal-width histogram with its red region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Inclusive bin range of the red region.
    pub red: [usize; 2],
}

impl Histogram {
    /// Bins `values` over their observed range and marks the `red_bins`
    /// contiguous bins with the largest total count (earliest on ties).
    pub fn fit(values: &[f64], bins: usize, red_bins: usize) -> Option<Self> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return None;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        if counts.iter().filter(|&&c| c > 0).count() < 2 {
            return None;
        }
        let start = (0..=bins - red_bins)
            .max_by_key(|&s| (counts[s..s + red_bins].iter().sum::<usize>(), std::cmp::Reverse(s)))
            .expect("red_bins < bins");
        Some(Self {
            edges,
            counts,
            red: [start, start + red_bins - 1],
        })
    }

    pub fn width(&self) -> f64 {
        (self.edges[self.edges.len() - 1] - self.edges[0]) / self.counts.len() as f64
    }

    pub fn red_interval(&self) -> (f64, f64) {
        (self.edges[self.red[0]], self.edges[self.red[1] + 1])
    }

    /// Distance outside the red region in bin widths; 0 inside it.
    pub fn distance(&self, v: f64) -> f64 {
        let (a, b) = self.red_interval();
        if v < a {
            (a - v) / self.width()
        } else if v > b {
            (v - b) / self.width()
        } else {
            0.0
        }
    }

    pub fn in_red(&self, v: f64) -> bool {
        self.distance(v) == 0.0
    }

    pub fn mass(&self, bin: usize) -> f64 {
        self.counts[bin] as f64 / self.counts.iter().sum::<usize>() as f64
    }
}

/// Mean and peak histograms of the positive profiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub mean: Histogram,
    pub peak: Histogram,
}

impl Reference {
    pub fn histogram(&self, c: Criterion) -> &Histogram {
        match c {
            Criterion::Mean => &self.mean,
            Criterion::Peak => &self.peak,
        }
    }
}

pub fn fit_reference(positives: &SampleSet, criteria: &NsgCriteria) -> Result<Reference> {
    criteria.validate()?;
    if positives.is_empty() {
        return Err(NsgError::Empty);
    }
    let columns: Vec<Vec<f64>> = positives.groups.iter().flat_map(|g| g.columns()).collect();
    let fit = |c: Criterion| {
        let v: Vec<f64> = columns.iter().map(|col| c.of(col)).collect();
        Histogram::fit(&v, criteria.bins, criteria.red_bins).ok_or(NsgError::Degenerate(c))
    };
    Ok(Reference {
        mean: fit(Criterion::Mean)?,
        peak: fit(Criterion::Peak)?,
    })
}

/// Requested versus produced negatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NsgReport {
    pub requested: usize,
    pub produced: usize,
    pub shortfall: usize,
    /// Samples whose picks had to come from several window starts.
    pub mixed_starts: usize,
    /// Chosen K per produced sample.
    pub ks: Vec<usize>,
}

fn in_region(p: &Profile, reference: &Reference, criteria: &NsgCriteria) -> bool {
    criteria.enabled().into_iter().all(|c| reference.histogram(c).in_red(c.of(&p.kw)))
}

fn out_of_region(p: &Profile, reference: &Reference, criteria: &NsgCriteria) -> bool {
    let primary = criteria.primary();
    if !criteria.difficulty.accepts(reference.histogram(primary).distance(primary.of(&p.kw))) {
        return false;
    }
    criteria
        .enabled()
        .into_iter()
        .filter(|&c| c != primary)
        .all(|c| !reference.histogram(c).in_red(c.of(&p.kw)))
}

/// Builds `count` negative groups of `n` profiles from `pool`. A group
/// draws from a single window start when one can supply the drawn K, and
/// otherwise from the whole pool with distinct meters; samples the whole
/// pool cannot supply count as shortfall.
pub fn generate_negatives(pool: &ProfilePool, reference: &Reference, criteria: &NsgCriteria, n: usize, count: usize, seed_value: u64) -> Result<(SampleSet, NsgReport)> {
    criteria.validate()?;
    let [k_lo, k_hi] = criteria.k_range(n)?;
    let mut by_start: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for idx in pool.by_start.values() {
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for &i in idx {
            let p = &pool.profiles[i];
            if in_region(p, reference, criteria) {
                inside.push(i);
            } else if out_of_region(p, reference, criteria) {
                outside.push(i);
            }
        }
        by_start.push((inside, outside));
    }
    let all_in: Vec<usize> = by_start.iter().flat_map(|s| s.0.iter().copied()).collect();
    let all_out: Vec<usize> = by_start.iter().flat_map(|s| s.1.iter().copied()).collect();
    let mut rng = seed::rng_for(seed_value, "nsg/generate");
    let mut set = SampleSet::new();
    let mut report = NsgReport {
        requested: count,
        ..NsgReport::default()
    };
    for i in 0..count {
        let k = rng.random_range(k_lo..=k_hi);
        let eligible: Vec<usize> = (0..by_start.len())
            .filter(|&s| by_start[s].0.len() >= k && by_start[s].1.len() >= n - k)
            .collect();
        let mut picks = if let Some(&s) = eligible.choose(&mut rng) {
            let (inside, outside) = &by_start[s];
            let mut picks: Vec<usize> = inside.choose_multiple(&mut rng, k).copied().collect();
            picks.extend(outside.choose_multiple(&mut rng, n - k).copied());
            picks
        } else {
            let mut picks = Vec::with_capacity(n);
            distinct_meters(pool, &all_in, k, &mut picks, &mut rng);
            distinct_meters(pool, &all_out, n - k, &mut picks, &mut rng);
            if picks.len() < n {
                report.shortfall += 1;
                continue;
            }
            report.mixed_starts += 1;
            picks
        };
        picks.shuffle(&mut rng);
        let group = pool.assemble(format!("nsg-{:08x}-{i:05}", seed_value as u32), &picks, Provenance::NsgNegative)?;
        set.push(group, Label::Negative);
        report.ks.push(k);
    }
    report.produced = set.len();
    if report.shortfall > 0 {
        log::warn!("negative sampling produced {} of {} groups; the pool cannot satisfy the criteria for the rest", report.produced, count);
    }
    set.notes.insert("nsg.criteria".into(), serde_json::to_string(criteria)?);
    set.notes.insert("nsg.fingerprint".into(), format!("{:016x}", criteria.fingerprint()));
    Ok((set, report))
}

/// Appends up to `want` random members of `candidates` whose meters are not
/// yet in `picks`.
fn distinct_meters(pool: &ProfilePool, candidates: &[usize], want: usize, picks: &mut Vec<usize>, rng: &mut seed::Rng) {
    let mut taken = 0;
    for &c in candidates.choose_multiple(rng, candidates.len()) {
        if taken == want {
            break;
        }
        if picks.iter().all(|&p| pool.profiles[p].meter != pool.profiles[c].meter) {
            picks.push(c);
            taken += 1;
        }
    }
}

/// Groups of `n` distinct meters drawn uniformly at one window start.
pub fn random_groups(pool: &ProfilePool, n: usize, count: usize, seed_value: u64, label: Label) -> Result<(SampleSet, usize)> {
    let starts: Vec<&Vec<usize>> = pool.by_start.values().filter(|v| v.len() >= n).collect();
    let mut rng = seed::rng_for(seed_value, "nsg/random");
    let mut set = SampleSet::new();
    if starts.is_empty() {
        return Ok((set, count));
    }
    for i in 0..count {
        let idx = starts.choose(&mut rng).expect("non-empty");
        let picks: Vec<usize> = idx.choose_multiple(&mut rng, n).copied().collect();
        set.push(pool.assemble(format!("rand-{:08x}-{i:05}", seed_value as u32), &picks, Provenance::RandomAssembled)?, label);
    }
    Ok((set, 0))
}

/// Number of columns of each group outside the red region of any enabled
/// criterion, re-measured from the raw values.
pub fn out_of_region_columns(set: &SampleSet, reference: &Reference, criteria: &NsgCriteria) -> Vec<usize> {
    set.groups
        .iter()
        .map(|g| {
            g.columns()
                .iter()
                .filter(|col| criteria.enabled().into_iter().any(|c| !reference.histogram(c).in_red(c.of(col))))
                .count()
        })
        .collect()
}

/// Counts of generated K values.
pub fn k_histogram(report: &NsgReport) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &k in &report.ks {
        *h.entry(k).or_default() += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{profile_pool, synth_corpus, CorpusSpec, LoadGroup, WindowSpec};
    use crate::stats::frechet_1d;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn desk_window() -> WindowSpec {
        WindowSpec {
            m: 96,
            n: 4,
            stride: 0,
            first_weekday: "monday".into(),
            cadence_min: 15,
        }
    }

    fn corpus() -> (SampleSet, ProfilePool) {
        let c = synth_corpus(&CorpusSpec { days: 14, ..CorpusSpec::default() }, 3).unwrap();
        let (pos, _) = c.positives(&desk_window()).unwrap();
        let pool = profile_pool(&c.meters, &c.temperature, &desk_window()).unwrap();
        (pos, pool)
    }

    fn constant_group(levels: &[f64]) -> LoadGroup {
        let cols: Vec<Vec<f64>> = levels.iter().map(|&v| vec![v; 4]).collect();
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let start = NaiveDate::from_ymd_opt(2021, 1, 4).unwrap().and_hms_opt(0, 0, 0).unwrap();
        LoadGroup::from_columns("g".into(), start, 15, &refs, vec![50.0; 4], Provenance::Real, Vec::new()).unwrap()
    }

    #[test]
    fn uniform_means_have_integer_edges() {
        let mut values: Vec<f64> = (0..6000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        values.extend([0.0, 6.0]);
        let h = Histogram::fit(&values, 6, 2).unwrap();
        for (i, e) in h.edges.iter().enumerate() {
            assert!((e - i as f64).abs() < 1e-12, "edge {i} = {e}");
        }
        for b in 0..6 {
            assert!((h.mass(b) - 1.0 / 6.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bin_width_from_range() {
        let h = Histogram::fit(&[0.4, 1.0, 2.8], 6, 2).unwrap();
        assert!((h.width() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn unimodal_red_region_is_the_central_pair() {
        // triangular counts 1,3,6,6,3,1
        let mut values = Vec::new();
        for (bin, &c) in [1, 3, 6, 6, 3, 1].iter().enumerate() {
            values.extend(std::iter::repeat_n(bin as f64 + 0.5, c));
        }
        values.extend([0.0, 6.0]);
        let h = Histogram::fit(&values, 6, 2).unwrap();
        let best = (0..5).max_by_key(|&s| h.counts[s] + h.counts[s + 1]).unwrap();
        assert_eq!(h.red, [best, best + 1]);
        assert_eq!(h.red, [2, 3]);
    }

    #[test]
    fn single_bin_is_degenerate() {
        let set = SampleSet::labeled(vec![constant_group(&[1.0, 1.0, 1.0, 1.0])], Label::Positive);
        assert!(matches!(fit_reference(&set, &NsgCriteria::default()), Err(NsgError::Degenerate(_))));
        assert!(matches!(fit_reference(&SampleSet::new(), &NsgCriteria::default()), Err(NsgError::Empty)));
    }

    #[test]
    fn k_range_defaults_to_half_n() {
        assert_eq!(NsgCriteria::default().k_range(8).unwrap(), [0, 4]);
        let bad = NsgCriteria {
            use_mean: false,
            use_peak: false,
            ..NsgCriteria::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mean_only_fixed_k_splits_columns() {
        let (pos, pool) = corpus();
        let criteria = NsgCriteria {
            k_range: Some([2, 2]),
            ..NsgCriteria::mean_only()
        };
        let reference = fit_reference(&pos, &criteria).unwrap();
        let (set, report) = generate_negatives(&pool, &reference, &criteria, 4, 40, 1).unwrap();
        assert!(report.produced > 0);
        for g in &set.groups {
            let inside = g.columns().iter().filter(|c| reference.mean.in_red(Criterion::Mean.of(c))).count();
            assert_eq!(inside, 2);
        }
        assert!(set.groups.iter().all(|g| g.provenance == Provenance::NsgNegative));
        assert!(set.labels.iter().all(|l| *l == Label::Negative));
    }

    #[test]
    fn very_negative_picks_are_two_bins_out() {
        let (pos, pool) = corpus();
        let criteria = NsgCriteria {
            difficulty: Difficulty::VeryNegative,
            ..NsgCriteria::mean_only()
        };
        let reference = fit_reference(&pos, &criteria).unwrap();
        let (set, report) = generate_negatives(&pool, &reference, &criteria, 4, 30, 2).unwrap();
        let (a, b) = reference.mean.red_interval();
        let w = (reference.mean.edges[6] - reference.mean.edges[0]) / 6.0;
        for (g, k) in set.groups.iter().zip(&report.ks) {
            let out: Vec<f64> = g.columns().iter().map(|c| Criterion::Mean.of(c)).filter(|&m| m < a || m > b).collect();
            assert_eq!(out.len(), 4 - k);
            assert!(out.iter().all(|&m| (a - m).max(m - b) >= 2.0 * w - 1e-12));
        }
    }

    #[test]
    fn every_negative_has_enough_out_of_region_columns() {
        let (pos, pool) = corpus();
        let criteria = NsgCriteria::default();
        let reference = fit_reference(&pos, &criteria).unwrap();
        let (set, report) = generate_negatives(&pool, &reference, &criteria, 4, 60, 3).unwrap();
        assert_eq!(report.produced + report.shortfall, 60);
        for (out, k) in out_of_region_columns(&set, &reference, &criteria).iter().zip(&report.ks) {
            assert!(*out >= 4 - k);
        }
        // both criteria: out picks leave the peak red region too
        for g in &set.groups {
            let peak_out = g.columns().iter().filter(|c| !reference.peak.in_red(Criterion::Peak.of(c))).count();
            let k = g.columns().iter().filter(|c| reference.mean.in_red(Criterion::Mean.of(c))).count();
            assert!(peak_out >= 4 - k);
        }
    }

    #[test]
    fn easier_difficulty_moves_closer_to_positives() {
        let (pos, pool) = corpus();
        let pos_means: Vec<f64> = pos.groups.iter().flat_map(|g| g.column_means()).collect();
        let mut last = f64::INFINITY;
        for d in Difficulty::ALL {
            let criteria = NsgCriteria {
                difficulty: d,
                k_range: Some([0, 0]),
                ..NsgCriteria::mean_only()
            };
            let reference = fit_reference(&pos, &criteria).unwrap();
            let (set, _) = generate_negatives(&pool, &reference, &criteria, 4, 80, 4).unwrap();
            let means: Vec<f64> = set.groups.iter().flat_map(|g| g.column_means()).collect();
            let fd = frechet_1d(&means, &pos_means);
            assert!(fd <= last + 1e-12, "{d:?}: {fd} > {last}");
            last = fd;
        }
    }

    #[test]
    fn exhausted_pool_reports_shortfall() {
        let (pos, mut pool) = corpus();
        let criteria = NsgCriteria::default();
        let reference = fit_reference(&pos, &criteria).unwrap();
        pool.by_start.clear();
        let (set, report) = generate_negatives(&pool, &reference, &criteria, 4, 5, 1).unwrap();
        assert!(set.is_empty());
        assert_eq!(report.shortfall, 5);
    }

    #[test]
    fn random_groups_use_distinct_meters() {
        let (_, pool) = corpus();
        let (set, short) = random_groups(&pool, 4, 50, 9, Label::Unlabeled).unwrap();
        assert_eq!((set.len(), short), (50, 0));
        for g in &set.groups {
            let mut m = g.meters.clone();
            m.sort();
            m.dedup();
            assert_eq!(m.len(), 4);
        }
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let (pos, pool) = corpus();
        let criteria = NsgCriteria::default();
        let reference = fit_reference(&pos, &criteria).unwrap();
        let a = generate_negatives(&pool, &reference, &criteria, 4, 20, 5).unwrap();
        let b = generate_negatives(&pool, &reference, &criteria, 4, 20, 5).unwrap();
        assert_eq!(a, b);
        let h = k_histogram(&a.1);
        assert!(h.keys().all(|k| *k <= 2));
    }

    proptest! {
        #[test]
        fn distance_is_zero_exactly_inside_red(values in prop::collection::vec(0.0f64..10.0, 8..64), probe in -5.0f64..15.0) {
            if let Some(h) = Histogram::fit(&values, 6, 2) {
                let (a, b) = h.red_interval();
                prop_assert_eq!(h.in_red(probe), (a..=b).contains(&probe));
                prop_assert!(h.distance(probe) >= 0.0);
                prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
            }
        }
    }
}
