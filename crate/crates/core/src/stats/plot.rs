//! Minimal SVG density curves and box plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{compute_indices, IndexDistribution, Level, StatsConfig, StatsError, Summary};
use crate::dataio::SampleSet;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 4] = ["#000000", "#d62728", "#1f77b4", "#2ca02c"];
const BINS: usize = 40;

fn range(series: &[(&str, &[f64])]) -> (f64, f64) {
    let vals = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/><text x="{PAD}" y="20">{title}</text>"#);
    let _ = writeln!(s, r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##, W - 2.0 * PAD, H - 2.0 * PAD);
    s
}

fn legend(s: &mut String, names: impl Iterator<Item = String>) {
    for (i, name) in names.enumerate() {
        let y = PAD + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}" fill="{}">{name}</text>"#, W - PAD - 90.0, COLORS[i % COLORS.len()]);
    }
}

/// Histogram-density polylines of each series over a shared range.
pub fn curve_svg(title: &str, series: &[(&str, &[f64])]) -> String {
    let (lo, hi) = range(series);
    let width = (hi - lo) / BINS as f64;
    let dens: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, v)| {
            let mut h = vec![0.0; BINS];
            for x in v.iter().filter(|x| x.is_finite()) {
                h[(((x - lo) / width) as usize).min(BINS - 1)] += 1.0;
            }
            let total = v.len().max(1) as f64 * width;
            h.iter().map(|c| c / total).collect()
        })
        .collect();
    let ymax = dens.iter().flatten().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut s = header(title);
    for (k, d) in dens.iter().enumerate() {
        let pts: Vec<String> = d
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let px = PAD + (i as f64 + 0.5) / BINS as f64 * (W - 2.0 * PAD);
                let py = H - PAD - y / ymax * (H - 2.0 * PAD);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, COLORS[k % COLORS.len()], pts.join(" "));
    }
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{lo:.3}</text><text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#, H - PAD + 14.0, W - PAD, H - PAD + 14.0);
    legend(&mut s, series.iter().map(|(n, _)| n.to_string()));
    s.push_str("</svg>\n");
    s
}

/// One box (quartiles, median, min/max whiskers) per series.
pub fn box_svg(title: &str, series: &[(&str, &[f64])]) -> String {
    let (lo, hi) = range(series);
    let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    let mut s = header(title);
    let slot = (W - 2.0 * PAD) / series.len().max(1) as f64;
    for (k, (name, v)) in series.iter().enumerate() {
        let sm = Summary::of(v);
        if sm.count == 0 {
            continue;
        }
        let c = COLORS[k % COLORS.len()];
        let cx = PAD + slot * (k as f64 + 0.5);
        let bw = slot * 0.3;
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{c}"/>"#, y(sm.min), y(sm.max));
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="white" stroke="{c}"/>"#,
            cx - bw,
            y(sm.q3),
            2.0 * bw,
            (y(sm.q1) - y(sm.q3)).max(0.5)
        );
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-width="2"/>"#, cx - bw, y(sm.median), cx + bw, y(sm.median));
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{name}</text>"#, H - PAD + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn stem(d: &IndexDistribution) -> String {
    let mut s = d.kind.name().to_string();
    if !d.component.is_empty() {
        s.push('-');
        s.extend(d.component.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }));
    }
    s
}

/// Writes `<index>_<level>_curve.svg` and `<index>_<level>_box.svg` for
/// every index component, comparing the named sets.
pub fn write_plots(dir: &Path, sets: &[(&str, &SampleSet)], cfg: &StatsConfig) -> Result<Vec<PathBuf>, StatsError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for level in Level::ALL {
        let dists: Vec<Vec<IndexDistribution>> = sets.iter().map(|(_, s)| compute_indices(s, level, cfg)).collect::<Result<_, _>>()?;
        for i in 0..dists[0].len() {
            let series: Vec<(&str, &[f64])> = sets.iter().zip(&dists).map(|((n, _), d)| (*n, d[i].values.as_slice())).collect();
            let name = format!("{}_{}", stem(&dists[0][i]), level.name());
            for (kind, svg) in [("curve", curve_svg(&name, &series)), ("box", box_svg(&name, &series))] {
                let path = dir.join(format!("{name}_{kind}.svg"));
                std::fs::write(&path, svg)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svgs_are_well_formed_for_degenerate_input() {
        let a = [1.0, 1.0, 1.0];
        for svg in [curve_svg("t", &[("a", &a), ("b", &[])]), box_svg("t", &[("a", &a), ("b", &[])])] {
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(!svg.contains("NaN") && !svg.contains("inf"));
        }
    }
}
