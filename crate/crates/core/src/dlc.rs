//! Realisticness classifier for load groups and its score metrics.
//!
//! A convolution stack with max pooling and a dense tail maps an encoded
//! group to one logit; the score is its sigmoid, the confidence that the
//! group is a real transformer's. Training minimizes binary cross-entropy
//! (computed from logits with softplus) with RMSProp.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, no_grad, Array, AutodiffError, CheckpointHeader, ParameterStore, RmsProp, Tensor};
use crate::codec::{CodecError, EncodingLevels, CHANNELS};
use crate::dataio::{DataError, Label, LoadGroup, SampleSet};
use crate::nn::{Activation, LayerSpec, NetSpec, Network, NnError};
use crate::seed;
use crate::stats::{frechet_1d, SetScores};

#[derive(Debug, thiserror::Error)]
pub enum DlcError {
    #[error("invalid classifier configuration: {0}")]
    Config(String),
    #[error("training needs both classes (got {positives} positives, {negatives} negatives)")]
    MissingClass { positives: usize, negatives: usize },
    #[error("no scores")]
    Empty,
    #[error("checkpoint fingerprint {found:#x} does not match the configured architecture {expected:#x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DlcError> = std::result::Result<T, E>;

/// Scores above this are positive.
pub const THRESHOLD: f64 = 0.5;
/// Class ratios past 1:`IMBALANCE_WARN` get a warning.
pub const IMBALANCE_WARN: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierPreset {
    /// 3 conv + 3 dense layers.
    Desk,
    /// 5 conv + 5 dense layers.
    Paper,
}

impl ClassifierPreset {
    /// Desk below M = 96 and at it, the full stack above.
    pub fn for_m(m: usize) -> Self {
        if m <= 96 {
            ClassifierPreset::Desk
        } else {
            ClassifierPreset::Paper
        }
    }
}

/// Conv (3x3, same padding, ReLU) + 2x1 max pool blocks with growing
/// channel counts, then dense layers of shrinking width and a logit head.
pub fn classifier_spec(preset: ClassifierPreset, m: usize, n: usize, channels: usize) -> NetSpec {
    let (convs, dense): (&[usize], &[usize]) = match preset {
        ClassifierPreset::Desk => (&[8, 16, 32], &[64, 16]),
        ClassifierPreset::Paper => (&[16, 32, 64, 128, 256], &[256, 128, 64, 16]),
    };
    let mut layers = Vec::new();
    for &c in convs {
        layers.push(LayerSpec::conv(c, [3, 3], [1, 1], [1, 1], Activation::Relu));
        layers.push(LayerSpec::max_pool([2, 1], [2, 1]));
    }
    layers.extend(dense.iter().map(|&d| LayerSpec::dense(d, Activation::Relu)));
    layers.push(LayerSpec::dense(1, Activation::Identity));
    NetSpec {
        input: vec![channels, m, n],
        layers,
        leaky_slope: 0.2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub net: NetSpec,
    /// Feeds the kW matrix scaled by `l3` as one channel instead of the
    /// 4-channel image.
    pub raw_input: bool,
    pub levels: EncodingLevels,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Share of ground-truth samples (per class) used for training.
    pub train_fraction: f64,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn new(m: usize, n: usize, seed: u64) -> Self {
        Self {
            net: classifier_spec(ClassifierPreset::for_m(m), m, n, CHANNELS),
            raw_input: false,
            levels: EncodingLevels::default(),
            lr: 1e-3,
            epochs: 20,
            batch: 32,
            train_fraction: 0.8,
            seed,
        }
    }

    pub fn with_raw_input(mut self) -> Self {
        self.raw_input = true;
        self.net.input[0] = 1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DlcError::Config(m));
        if !(self.lr > 0.0) || self.batch == 0 {
            return bad(format!("need lr > 0 and batch > 0 (lr={}, batch={})", self.lr, self.batch));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must be in (0, 1], got {}", self.train_fraction));
        }
        let want = if self.raw_input { 1 } else { CHANNELS };
        if self.net.input.len() != 3 || self.net.input[0] != want {
            return bad(format!("net input {:?} needs {want} channels", self.net.input));
        }
        if self.net.output_shape()? != [1] {
            return bad("the classifier must end in a single logit".into());
        }
        self.levels.validate()?;
        Ok(())
    }
}

/// Ground-truth and machine-labeled samples split for one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<(LoadGroup, bool)>,
    pub test: Vec<(LoadGroup, bool)>,
}

/// Stratified split of the ground-truth labels of `sets`; machine-labeled
/// members join the training side only and unlabeled ones are skipped.
pub fn stratified_split(sets: &[&SampleSet], train_fraction: f64, seed_value: u64) -> Split {
    let mut classes: [Vec<LoadGroup>; 2] = [Vec::new(), Vec::new()];
    let mut split = Split::default();
    for set in sets {
        for (g, l) in set.iter() {
            match (l.is_ground_truth(), l.target()) {
                (true, Some(t)) => classes[usize::from(t)].push(g.clone()),
                (false, Some(t)) => split.train.push((g.clone(), t)),
                (_, None) => {}
            }
        }
    }
    let mut rng = seed::rng_for(seed_value, "dlc/split");
    for (t, mut groups) in classes.into_iter().enumerate() {
        groups.shuffle(&mut rng);
        let k = (train_fraction * groups.len() as f64).round() as usize;
        let test = groups.split_off(k.min(groups.len()));
        split.train.extend(groups.into_iter().map(|g| (g, t == 1)));
        split.test.extend(test.into_iter().map(|g| (g, t == 1)));
    }
    split
}

/// Per-sample confidences in sample-set order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "score", "label_at_0.5"])?;
        for (id, s) in self.ids.iter().zip(&self.scores) {
            let label = if *s > THRESHOLD { "positive" } else { "negative" };
            w.write_record([id.as_str(), &s.to_string(), label])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut out = ScoreSet::default();
        for row in csv::Reader::from_path(path)?.records() {
            let row = row?;
            out.ids.push(row[0].to_string());
            out.scores.push(row[1].parse().map_err(|e| DlcError::Config(format!("{}: bad score: {e}", path.display())))?);
        }
        Ok(out)
    }
}

/// Percentage of scores strictly above 0.5.
pub fn por(scores: &ScoreSet) -> Result<f64> {
    if scores.is_empty() {
        return Err(DlcError::Empty);
    }
    let hits = scores.scores.iter().filter(|&&s| s > THRESHOLD).count();
    Ok(hits as f64 / scores.len() as f64 * 100.0)
}

/// Mean confidence.
pub fn mcl(scores: &ScoreSet) -> Result<f64> {
    if scores.is_empty() {
        return Err(DlcError::Empty);
    }
    Ok(scores.scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Fréchet distance between Gaussian fits of two score distributions.
pub fn score_fid(a: &ScoreSet, b: &ScoreSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DlcError::Empty);
    }
    Ok(frechet_1d(&a.scores, &b.scores))
}

/// POR, MCL and score distance to `real` of one scored set.
pub fn set_scores(scores: &ScoreSet, real: &ScoreSet) -> Result<SetScores> {
    Ok(SetScores {
        count: scores.len(),
        por: por(scores)?,
        mcl: mcl(scores)?,
        score_fid: score_fid(scores, real)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_count: usize,
    pub test_count: usize,
    /// Held-out accuracy; absent when the test split is empty.
    pub test_accuracy: Option<f64>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    net: Network,
    pub params: ParameterStore,
    /// Number of completed training runs.
    pub version: u64,
    pub last: Option<TrainSummary>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ClassifierConfig,
    version: u64,
    last: Option<TrainSummary>,
}

pub const CHECKPOINT_FILE: &str = "classifier.ckpt";
pub const META_FILE: &str = "classifier.json";

impl Classifier {
    pub fn new(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.net.clone(), "c")?;
        let mut params = ParameterStore::new();
        net.init(&mut params, &mut seed::rng_for(config.seed, "dlc/init"));
        Ok(Self {
            config,
            net,
            params,
            version: 0,
            last: None,
        })
    }

    pub fn test_accuracy(&self) -> Option<f64> {
        self.last.as_ref().and_then(|s| s.test_accuracy)
    }

    fn input(&self, g: &LoadGroup) -> Result<Vec<f64>> {
        let shape = &self.config.net.input;
        if (g.m, g.n) != (shape[1], shape[2]) {
            return Err(DlcError::Config(format!("group {} is {}x{}, classifier expects {}x{}", g.id, g.m, g.n, shape[1], shape[2])));
        }
        if self.config.raw_input {
            let l3 = self.config.levels.l3;
            return Ok(g.kw.iter().map(|v| v / l3).collect());
        }
        Ok(g.encode(&self.config.levels)?.data)
    }

    fn batch_input(&self, groups: &[&LoadGroup]) -> Result<Array> {
        let mut shape = vec![groups.len()];
        shape.extend(&self.config.net.input);
        let mut data = Vec::with_capacity(shape.iter().product());
        for g in groups {
            data.extend(self.input(g)?);
        }
        Ok(Array::new(shape, data)?)
    }

    fn logits(&self, x: Array) -> Result<Vec<f64>> {
        no_grad(|| {
            let params = self.params.bind_frozen();
            Ok(self.net.forward(&params, &self.params, &Tensor::constant(x), false)?.out.value().data().to_vec())
        })
    }

    /// Trains on `positives`, `negatives` and optionally machine-labeled
    /// samples, continuing from the current parameters, then measures
    /// accuracy on the held-out ground-truth split.
    pub fn train(&mut self, positives: &SampleSet, negatives: &SampleSet, machine: Option<&SampleSet>) -> Result<TrainSummary> {
        let gt = |s: &SampleSet, want: bool| s.labels.iter().filter(|l| l.is_ground_truth() && l.target() == Some(want)).count();
        let (p, n) = (gt(positives, true), gt(negatives, false));
        if p == 0 || n == 0 {
            return Err(DlcError::MissingClass { positives: p, negatives: n });
        }
        if (p.max(n) as f64) > IMBALANCE_WARN * p.min(n) as f64 {
            log::warn!("class ratio {p}:{n} is more skewed than 1:{IMBALANCE_WARN}");
        }
        let run_seed = seed::derive(self.config.seed, &format!("dlc/train/{}", self.version));
        let mut sets = vec![positives, negatives];
        sets.extend(machine);
        let split = stratified_split(&sets, self.config.train_fraction, run_seed);
        let mut rng = seed::rng_for(run_seed, "dlc/batches");
        let mut summary = TrainSummary {
            train_count: split.train.len(),
            test_count: split.test.len(),
            ..TrainSummary::default()
        };
        let inputs: Vec<Vec<f64>> = split.train.iter().map(|(g, _)| self.input(g)).collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        let step = RmsProp::new(self.config.lr);
        for _ in 0..self.config.epochs {
            let before = self.params.clone();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(self.config.batch) {
                let mut shape = vec![chunk.len()];
                shape.extend(&self.config.net.input);
                let x = Array::new(shape, chunk.iter().flat_map(|&i| inputs[i].iter().copied()).collect())?;
                let y = Array::new(vec![chunk.len(), 1], chunk.iter().map(|&i| f64::from(u8::from(split.train[i].1))).collect())?;
                let params = self.params.bind();
                let z = self.net.forward(&params, &self.params, &Tensor::constant(x), true)?.out;
                // softplus(z) - y z is the cross-entropy of sigmoid(z)
                let loss = z.softplus().sub(&z.mul(&Tensor::constant(y))?)?.sum_to(&[1, 1])?.scale(1.0 / chunk.len() as f64);
                let value = loss.item();
                if !value.is_finite() {
                    log::warn!("classifier loss became non-finite; keeping the previous epoch");
                    self.params = before;
                    summary.diverged = true;
                    break;
                }
                total += value * chunk.len() as f64;
                let grads = params.collect_grads(&backward(&loss, false)?);
                self.params.rmsprop_step(&grads, step)?;
            }
            if summary.diverged {
                break;
            }
            summary.losses.push(total / order.len().max(1) as f64);
        }
        if !split.test.is_empty() {
            let groups: Vec<&LoadGroup> = split.test.iter().map(|(g, _)| g).collect();
            let scores = self.score_groups(&groups)?;
            let hits = scores.iter().zip(&split.test).filter(|(s, (_, t))| (**s > THRESHOLD) == *t).count();
            summary.test_accuracy = Some(hits as f64 / split.test.len() as f64);
        }
        self.version += 1;
        self.last = Some(summary.clone());
        Ok(summary)
    }

    fn score_groups(&self, groups: &[&LoadGroup]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(groups.len());
        for chunk in groups.chunks(64) {
            out.extend(self.logits(self.batch_input(chunk)?)?.into_iter().map(|z| 1.0 / (1.0 + (-z).exp())));
        }
        Ok(out)
    }

    pub fn score(&self, samples: &SampleSet) -> Result<ScoreSet> {
        let groups: Vec<&LoadGroup> = samples.groups.iter().collect();
        Ok(ScoreSet {
            ids: samples.groups.iter().map(|g| g.id.clone()).collect(),
            scores: self.score_groups(&groups)?,
        })
    }

    /// Copies `samples` with machine labels from this classifier.
    pub fn label(&self, samples: &SampleSet) -> Result<SampleSet> {
        let scores = self.score(samples)?;
        let mut out = SampleSet::new();
        for (g, s) in samples.groups.iter().zip(&scores.scores) {
            out.push(
                g.clone(),
                Label::Machine {
                    positive: *s > THRESHOLD,
                    confidence: *s,
                },
            );
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join(CHECKPOINT_FILE), CheckpointHeader::new(self.config.net.fingerprint(), self.config.seed))?;
        let meta = Meta {
            config: self.config.clone(),
            version: self.version,
            last: self.last.clone(),
        };
        std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        let mut model = Self::new(meta.config)?;
        let (header, params) = ParameterStore::load(&dir.join(CHECKPOINT_FILE))?;
        let expected = model.config.net.fingerprint();
        if header.fingerprint != expected {
            return Err(DlcError::Fingerprint {
                expected,
                found: header.fingerprint,
            });
        }
        model.params = params;
        model.version = meta.version;
        model.last = meta.last;
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
