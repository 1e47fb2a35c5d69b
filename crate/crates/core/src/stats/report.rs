use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{compute_indices, frechet_1d, ratio, IndexDistribution, IndexKind, Level, StatsConfig, Verdict};
use crate::dataio::SampleSet;

/// Classifier metrics of one set; `score_fid` is measured against the real set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetScores {
    pub count: usize,
    /// Percentage of scores above 0.5.
    pub por: f64,
    pub mcl: f64,
    pub score_fid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBlock {
    pub version: u64,
    pub real: SetScores,
    pub multi: SetScores,
    pub single: Option<SetScores>,
}

/// Distances of one index at one level, per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatEntry {
    pub index: IndexKind,
    pub level: Level,
    pub components: Vec<String>,
    pub multi: Vec<Option<f64>>,
    pub single: Option<Vec<Option<f64>>>,
    pub ratio: Option<Vec<Option<f64>>>,
    pub verdict: Option<Vec<Verdict>>,
    /// Sum of multi distances over sum of single distances.
    pub ratio_total: Option<f64>,
    pub verdict_total: Option<Verdict>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub statistics: Vec<StatEntry>,
    pub classifier: Option<ClassifierBlock>,
    pub errors: Vec<String>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn distances(real: &[IndexDistribution], other: &[IndexDistribution], kind: IndexKind) -> Vec<Option<f64>> {
    real.iter()
        .zip(other)
        .filter(|(r, _)| r.kind == kind)
        .map(|(r, o)| finite(frechet_1d(&r.values, &o.values)))
        .collect()
}

/// Index distances of `multi` (and optionally `single`) against `real`.
/// Failures of individual sets or metrics are recorded in `errors`.
pub fn build_report(
    real: &SampleSet,
    multi: &SampleSet,
    single: Option<&SampleSet>,
    cfg: &StatsConfig,
    classifier: Option<ClassifierBlock>,
) -> EvalReport {
    let mut report = EvalReport {
        classifier,
        ..EvalReport::default()
    };
    report.metadata.insert("real_count".into(), real.len().to_string());
    report.metadata.insert("multi_count".into(), multi.len().to_string());
    if let Some(s) = single {
        report.metadata.insert("single_count".into(), s.len().to_string());
    }
    let shapes: Vec<_> = [Some(real), Some(multi), single].into_iter().flatten().map(|s| s.shape().ok().flatten()).collect();
    if shapes.windows(2).any(|w| w[0] != w[1]) {
        report.errors.push(format!("sets differ in shape: {shapes:?}"));
    }
    for level in Level::ALL {
        let mut get = |name: &str, set: &SampleSet| match compute_indices(set, level, cfg) {
            Ok(d) => Some(d),
            Err(e) => {
                report.errors.push(format!("{name} {}: {e}", level.name()));
                None
            }
        };
        let (Some(r), m) = (get("real", real), get("multi", multi)) else { continue };
        let s = single.and_then(|s| get("single", s));
        for kind in IndexKind::ALL {
            let components = cfg.components(kind);
            let md = m.as_ref().map(|m| distances(&r, m, kind)).unwrap_or_else(|| vec![None; components.len()]);
            let sd = s.as_ref().map(|s| distances(&r, s, kind));
            let (mut ratios, mut verdicts, mut ratio_total, mut verdict_total) = (None, None, None, None);
            if let Some(sd) = &sd {
                let pairs: Vec<_> = md.iter().zip(sd).map(|(a, b)| ratio(a.unwrap_or(f64::NAN), b.unwrap_or(f64::NAN))).collect();
                ratios = Some(pairs.iter().map(|p| p.0).collect());
                verdicts = Some(pairs.iter().map(|p| p.1).collect());
                let sum = |v: &[Option<f64>]| v.iter().map(|x| x.unwrap_or(f64::NAN)).sum::<f64>();
                let (t, v) = ratio(sum(&md), sum(sd));
                ratio_total = t;
                verdict_total = Some(v);
            }
            for (c, d) in components.iter().zip(&md) {
                if d.is_none() {
                    report.errors.push(format!("{} {} {c}: distance undefined", kind.name(), level.name()));
                }
            }
            report.statistics.push(StatEntry {
                index: kind,
                level,
                components,
                multi: md,
                single: sd,
                ratio: ratios,
                verdict: verdicts,
                ratio_total,
                verdict_total,
            });
        }
    }
    report
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4e}"))
}

impl EvalReport {
    pub fn entry(&self, index: IndexKind, level: Level) -> Option<&StatEntry> {
        self.statistics.iter().find(|e| e.index == index && e.level == level)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "- {k}: {v}");
        }
        for level in Level::ALL {
            let _ = write!(s, "\n## {} level\n\n| index | component | multi | single | ratio |\n|---|---|---|---|---|\n", level.name());
            for e in self.statistics.iter().filter(|e| e.level == level) {
                for (i, c) in e.components.iter().enumerate() {
                    let single = e.single.as_ref().map_or("n/a".into(), |v| cell(v[i]));
                    let r = e.ratio.as_ref().map_or("n/a".into(), |v| cell(v[i]));
                    let _ = writeln!(s, "| {} | {c} | {} | {single} | {r} |", e.index.name(), cell(e.multi[i]));
                }
                if e.components.len() > 1 {
                    let _ = writeln!(s, "| {} | total | | | {} |", e.index.name(), cell(e.ratio_total));
                }
            }
        }
        s.push_str("\n## Classifier\n\n");
        match &self.classifier {
            None => s.push_str("absent\n"),
            Some(c) => {
                let _ = writeln!(s, "version {}\n\n| set | count | POR % | MCL | score FID |\n|---|---|---|---|---|", c.version);
                let rows = [("real", Some(&c.real)), ("multi", Some(&c.multi)), ("single", c.single.as_ref())];
                for (name, sc) in rows {
                    if let Some(sc) = sc {
                        let _ = writeln!(s, "| {name} | {} | {:.2} | {:.4} | {:.4e} |", sc.count, sc.por, sc.mcl, sc.score_fid);
                    }
                }
            }
        }
        if !self.errors.is_empty() {
            s.push_str("\n## Errors\n\n");
            for e in &self.errors {
                let _ = writeln!(s, "- {e}");
            }
        }
        s
    }
}
