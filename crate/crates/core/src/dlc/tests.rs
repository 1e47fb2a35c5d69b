use super::*;
use crate::dataio::Provenance;
use chrono::NaiveDate;
use proptest::prelude::*;
use rand::Rng as _;

fn scores(v: &[f64]) -> ScoreSet {
    ScoreSet {
        ids: (0..v.len()).map(|i| format!("s{i}")).collect(),
        scores: v.to_vec(),
    }
}

fn group(id: String, m: usize, n: usize, level: f64, rng: &mut seed::Rng) -> LoadGroup {
    let cols: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| (level + rng.random_range(-0.3..0.3)).max(0.0)).collect()).collect();
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let start = NaiveDate::from_ymd_opt(2021, 1, 4).unwrap().and_hms_opt(0, 0, 0).unwrap();
    LoadGroup::from_columns(id, start, 15, &refs, vec![50.0; m], Provenance::Real, Vec::new()).unwrap()
}

/// Positives around 3 kW, negatives around 1 kW.
fn separable(count: usize, seed_value: u64) -> (SampleSet, SampleSet) {
    let mut rng = seed::rng(seed_value);
    let pos = (0..count).map(|i| group(format!("p{i}"), 16, 2, 3.0, &mut rng)).collect();
    let neg = (0..count).map(|i| group(format!("n{i}"), 16, 2, 1.0, &mut rng)).collect();
    (SampleSet::labeled(pos, Label::Positive), SampleSet::labeled(neg, Label::Negative))
}

fn toy_config(seed_value: u64) -> ClassifierConfig {
    ClassifierConfig {
        net: classifier_spec(ClassifierPreset::Desk, 16, 2, CHANNELS),
        epochs: 50,
        ..ClassifierConfig::new(16, 2, seed_value)
    }
}

/// Logistic regression on the group mean, by plain gradient descent.
fn logistic_oracle_accuracy(pos: &SampleSet, neg: &SampleSet) -> f64 {
    let data: Vec<(f64, f64)> = pos
        .groups
        .iter()
        .map(|g| (g.kw.iter().sum::<f64>() / g.kw.len() as f64, 1.0))
        .chain(neg.groups.iter().map(|g| (g.kw.iter().sum::<f64>() / g.kw.len() as f64, 0.0)))
        .collect();
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..2000 {
        let (mut gw, mut gb) = (0.0, 0.0);
        for &(x, y) in &data {
            let p = 1.0 / (1.0 + (-(w * x + b)).exp());
            gw += (p - y) * x;
            gb += p - y;
        }
        w -= 0.5 * gw / data.len() as f64;
        b -= 0.5 * gb / data.len() as f64;
    }
    data.iter().filter(|&&(x, y)| ((w * x + b) > 0.0) == (y == 1.0)).count() as f64 / data.len() as f64
}

/// General Fréchet distance between Gaussian fits of d-dimensional samples:
/// |μa − μb|² + tr(Σa + Σb − 2 (Σa Σb)^½), with the matrix square root by
/// Denman–Beavers iteration.
fn frechet_matrix_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let stats = |x: &[Vec<f64>]| {
        let n = x.len() as f64;
        let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut cov = vec![vec![0.0; d]; d];
        for r in x {
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1.0);
                }
            }
        }
        (mu, cov)
    };
    let matmul = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..d).map(|i| (0..d).map(|j| (0..d).map(|k| p[i][k] * q[k][j]).sum()).collect()).collect()
    };
    let inverse = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut aug: Vec<Vec<f64>> = (0..d)
            .map(|i| m[i].iter().copied().chain((0..d).map(|j| f64::from(u8::from(i == j)))).collect())
            .collect();
        for c in 0..d {
            let p = (c..d).max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs())).unwrap();
            aug.swap(c, p);
            let piv = aug[c][c];
            aug[c].iter_mut().for_each(|v| *v /= piv);
            for r in 0..d {
                if r != c {
                    let f = aug[r][c];
                    let row = aug[c].clone();
                    aug[r].iter_mut().zip(row).for_each(|(v, w)| *v -= f * w);
                }
            }
        }
        aug.into_iter().map(|r| r[d..].to_vec()).collect()
    };
    let (mu_a, ca) = stats(a);
    let (mu_b, cb) = stats(b);
    let prod = matmul(&ca, &cb);
    let (mut y, mut z) = (prod.clone(), (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect::<Vec<Vec<f64>>>());
    for _ in 0..60 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny = (0..d).map(|i| (0..d).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz = (0..d).map(|i| (0..d).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        (y, z) = (ny, nz);
    }
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum();
    mean_term + (0..d).map(|i| ca[i][i] + cb[i][i] - 2.0 * y[i][i]).sum::<f64>()
}

#[test]
fn hand_set_metrics() {
    let s = scores(&[0.9, 0.4, 0.6, 0.51]);
    assert_eq!(por(&s).unwrap(), 75.0);
    assert_eq!(mcl(&s).unwrap(), 0.6025);
    let ones = scores(&[1.0; 5]);
    assert_eq!(por(&ones).unwrap(), 100.0);
    assert_eq!(mcl(&ones).unwrap(), 1.0);
    assert!(matches!(por(&ScoreSet::default()), Err(DlcError::Empty)));
    assert!(matches!(mcl(&ScoreSet::default()), Err(DlcError::Empty)));
}

#[test]
fn score_fid_closed_forms() {
    let a = scores(&[0.1, 0.5, 0.3, 0.9]);
    assert_eq!(score_fid(&a, &a).unwrap(), 0.0);
    let shifted = scores(&a.scores.iter().map(|v| v + 1.0).collect::<Vec<_>>());
    assert!((score_fid(&a, &shifted).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn score_fid_matches_matrix_oracle() {
    let mut rng = seed::rng(12);
    for _ in 0..100 {
        let (na, nb) = (rng.random_range(3..40), rng.random_range(3..40));
        let a: Vec<f64> = (0..na).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random::<f64>().powi(2)).collect();
        let got = score_fid(&scores(&a), &scores(&b)).unwrap();
        let rows = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
        let want = frechet_matrix_oracle(&rows(&a), &rows(&b));
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300), "{got} vs {want}");
    }
}

#[test]
fn stratified_split_keeps_class_shares() {
    let (pos, _) = separable(20, 1);
    let (_, neg) = separable(80, 2);
    let machine = SampleSet::labeled(
        pos.groups[..5].to_vec(),
        Label::Machine {
            positive: true,
            confidence: 0.95,
        },
    );
    let unlabeled = SampleSet::labeled(pos.groups[..3].to_vec(), Label::Unlabeled);
    let split = stratified_split(&[&pos, &neg, &machine, &unlabeled], 0.8, 7);
    let count = |v: &[(LoadGroup, bool)], t: bool| v.iter().filter(|(_, y)| *y == t).count();
    assert_eq!(split.test.len(), 20);
    assert_eq!((count(&split.test, true), count(&split.test, false)), (4, 16));
    assert_eq!(split.train.len(), 80 + 5);
    // machine labels never reach the test side
    assert!(split.test.iter().all(|(g, _)| pos.groups.iter().chain(&neg.groups).any(|h| h == g)));
}

#[test]
fn separable_toy_is_learned() {
    let (pos, neg) = separable(60, 3);
    assert_eq!(logistic_oracle_accuracy(&pos, &neg), 1.0);
    let mut clf = Classifier::new(toy_config(1)).unwrap();
    let summary = clf.train(&pos, &neg, None).unwrap();
    assert!(summary.test_accuracy.unwrap() >= 0.98, "{summary:?}");
    assert_eq!(clf.version, 1);
    let s = clf.score(&pos).unwrap();
    assert!(mcl(&s).unwrap() > 0.9);
    assert!(s.scores.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn scoring_is_batch_size_independent_and_survives_a_round_trip() {
    let (pos, neg) = separable(40, 4);
    let mut cfg = toy_config(2);
    cfg.epochs = 2;
    let mut clf = Classifier::new(cfg).unwrap();
    clf.train(&pos, &neg, None).unwrap();
    clf.train(&pos, &neg, None).unwrap();
    assert_eq!(clf.version, 2);
    let all = clf.score(&neg).unwrap();
    for (i, g) in neg.groups.iter().enumerate().take(10) {
        let one = clf.score(&SampleSet::labeled(vec![g.clone()], Label::Negative)).unwrap();
        assert!((one.scores[0] - all.scores[i]).abs() < 1e-12);
    }
    assert!(clf.score(&SampleSet::new()).unwrap().is_empty());
    let dir = tempfile::tempdir().unwrap();
    clf.save(dir.path()).unwrap();
    let back = Classifier::load(dir.path()).unwrap();
    assert_eq!(back.score(&neg).unwrap(), all);
    assert_eq!(back.version, 2);
    let path = dir.path().join("scores.csv");
    all.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("sample_id,score,label_at_0.5\n"));
    assert_eq!(ScoreSet::read_csv(&path).unwrap(), all);
}

#[test]
fn raw_input_variant_trains() {
    let (pos, neg) = separable(30, 5);
    let mut cfg = toy_config(3).with_raw_input();
    cfg.epochs = 3;
    let mut clf = Classifier::new(cfg).unwrap();
    clf.train(&pos, &neg, None).unwrap();
    assert_eq!(clf.score(&pos).unwrap().len(), 30);
}

#[test]
fn one_class_is_rejected() {
    let (pos, _) = separable(5, 6);
    let mut clf = Classifier::new(toy_config(1)).unwrap();
    assert!(matches!(clf.train(&pos, &SampleSet::new(), None), Err(DlcError::MissingClass { .. })));
}

#[test]
fn presets_have_the_documented_depth() {
    let count = |s: &NetSpec, k: crate::nn::LayerKind| s.layers.iter().filter(|l| l.kind == k).count();
    let desk = classifier_spec(ClassifierPreset::for_m(96), 96, 4, CHANNELS);
    assert_eq!((count(&desk, crate::nn::LayerKind::Conv), count(&desk, crate::nn::LayerKind::Dense)), (3, 3));
    let paper = classifier_spec(ClassifierPreset::for_m(672), 672, 8, CHANNELS);
    assert_eq!((count(&paper, crate::nn::LayerKind::Conv), count(&paper, crate::nn::LayerKind::Dense)), (5, 5));
    assert_eq!(paper.output_shape().unwrap(), vec![1]);
}

proptest! {
    #[test]
    fn por_and_mcl_ignore_order(mut v in prop::collection::vec(0.0f64..1.0, 1..50), k in 0usize..50) {
        let a = scores(&v);
        let len = v.len();
        v.rotate_left(k % len);
        let b = scores(&v);
        prop_assert_eq!(por(&a).unwrap(), por(&b).unwrap());
        prop_assert!((mcl(&a).unwrap() - mcl(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn score_fid_is_a_symmetric_nonnegative_distance(a in prop::collection::vec(0.0f64..1.0, 2..30), b in prop::collection::vec(0.0f64..1.0, 2..30)) {
        let (a, b) = (scores(&a), scores(&b));
        let ab = score_fid(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, score_fid(&b, &a).unwrap());
    }
}
