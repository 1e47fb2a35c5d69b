//! Iterative automatic data augmentation.
//!
//! Each step draws unlabeled groups from the generator and from random
//! meter assembly, labels them with the previous classifier, retrains the
//! classifier on ground truth plus those machine labels, harvests random
//! assemblies the new classifier scores above the confidence cut, and
//! continues generator training with the harvest mixed into the real pool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::EncodingLevels;
use crate::dataio::{save_set, DataError, Label, ProfilePool, Provenance, SampleSet};
use crate::dlc::{mcl, por, score_fid, Classifier, DlcError};
use crate::ganmodels::{GanError, GanModel};
use crate::nsg::{random_groups, NsgError};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum AdaError {
    #[error("invalid augmentation settings: {0}")]
    Config(String),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Dlc(#[from] DlcError),
    #[error(transparent)]
    Nsg(#[from] NsgError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AdaError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaConfig {
    /// Harvest threshold on the retrained classifier's score.
    pub cut: f64,
    /// Accuracy change below which a step counts as saturated.
    pub eps_acc: f64,
    pub max_steps: usize,
    /// Generator epochs per step as a share of its configured epochs.
    pub gan_epoch_fraction: f64,
    /// Generated and randomly assembled unlabeled groups per step; `None`
    /// uses the number of positives.
    pub gan_count: Option<usize>,
    pub rand_count: Option<usize>,
    /// Generated groups scored for the step metrics; `None` uses the
    /// number of positives.
    pub eval_count: Option<usize>,
}

impl Default for AdaConfig {
    fn default() -> Self {
        Self {
            cut: 0.9,
            eps_acc: 0.005,
            max_steps: 5,
            gan_epoch_fraction: 0.2,
            gan_count: None,
            rand_count: None,
            eval_count: None,
        }
    }
}

impl AdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cut > 0.5 && self.cut <= 1.0) {
            return Err(AdaError::Config(format!("cut must be in (0.5, 1], got {}", self.cut)));
        }
        if !(self.eps_acc >= 0.0 && self.gan_epoch_fraction >= 0.0) {
            return Err(AdaError::Config("eps_acc and gan_epoch_fraction must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub cls_acc: f64,
    /// Percentages of real and generated groups scored positive.
    pub por_real: f64,
    pub por_gen: f64,
    pub mcl_gen: f64,
    pub score_fid: f64,
    pub harvested: usize,
    /// Random groups missing because the pool could not supply them.
    pub rand_shortfall: usize,
}

/// Classifier view of a generator against the real positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub por_real: f64,
    pub por_gen: f64,
    pub mcl_gen: f64,
    pub score_fid: f64,
}

pub fn measure(gan: &GanModel, classifier: &Classifier, positives: &SampleSet, count: usize, seed_value: u64, levels: &EncodingLevels) -> Result<Measurement> {
    let real = classifier.score(positives)?;
    let (generated, _) = gan.sample_groups(count, seed_value, levels)?;
    let gen = classifier.score(&generated)?;
    Ok(Measurement {
        por_real: por(&real)?,
        por_gen: por(&gen)?,
        mcl_gen: mcl(&gen)?,
        score_fid: score_fid(&gen, &real)?,
    })
}

/// Generated groups plus randomly assembled ones, all unlabeled. Returns
/// the set and the random-portion shortfall.
pub fn make_unlabeled(gan: &GanModel, pool: &ProfilePool, counts: (usize, usize), seed_value: u64, levels: &EncodingLevels) -> Result<(SampleSet, usize)> {
    let (mut set, _) = gan.sample_groups(counts.0, seed::derive(seed_value, "ada/gan"), levels)?;
    let (rand, short) = random_groups(pool, gan.config.n, counts.1, seed::derive(seed_value, "ada/rand"), Label::Unlabeled)?;
    if short > 0 {
        log::warn!("random assembly supplied {} of {} groups", counts.1 - short, counts.1);
    }
    set.extend(rand);
    Ok((set, short))
}

/// Random assemblies scoring above `cut`.
pub fn harvest(classifier: &Classifier, unlabeled: &SampleSet, cut: f64) -> Result<(SampleSet, Vec<f64>)> {
    let rand = unlabeled.with_provenance(Provenance::RandomAssembled);
    let scores = classifier.score(&rand)?;
    let mut out = SampleSet::new();
    let mut kept = Vec::new();
    for (g, s) in rand.groups.iter().zip(&scores.scores) {
        if *s > cut {
            out.push(g.clone(), Label::Machine { positive: true, confidence: *s });
            kept.push(*s);
        }
    }
    Ok((out, kept))
}

/// The data a run trains against; none of it is modified.
pub struct AdaInputs<'a> {
    pub positives: &'a SampleSet,
    pub negatives: &'a SampleSet,
    pub pool: &'a ProfilePool,
    pub levels: EncodingLevels,
    pub seed: u64,
    /// Per-step artifacts go under `dir/stepNN`.
    pub dir: Option<PathBuf>,
}

pub struct AdaState {
    pub step: usize,
    pub gan: GanModel,
    pub classifier: Classifier,
    pub config: AdaConfig,
    pub metrics: Vec<StepMetrics>,
}

impl AdaState {
    pub fn new(gan: GanModel, classifier: Classifier, config: AdaConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            step: 0,
            gan,
            classifier,
            config,
            metrics: Vec::new(),
        })
    }

    /// One full augmentation step; appends a metrics row.
    pub fn step(&mut self, inputs: &AdaInputs) -> Result<&StepMetrics> {
        let t = self.step + 1;
        let step_seed = seed::derive(inputs.seed, &format!("ada/step/{t}"));
        let base = inputs.positives.len();
        let counts = (self.config.gan_count.unwrap_or(base), self.config.rand_count.unwrap_or(base));
        let (unlabeled, rand_shortfall) = make_unlabeled(&self.gan, inputs.pool, counts, step_seed, &inputs.levels)?;
        let labeled = self.classifier.label(&unlabeled)?;
        let summary = self.classifier.train(inputs.positives, inputs.negatives, Some(&labeled))?;
        let (aug, _) = harvest(&self.classifier, &unlabeled, self.config.cut)?;
        if aug.is_empty() {
            log::warn!("step {t}: no random group scored above {}; the generator continues without augmentation", self.config.cut);
        }
        let epochs = (self.config.gan_epoch_fraction * self.gan.config.epochs as f64).ceil() as usize;
        let augment = (!aug.is_empty()).then_some(&aug);
        self.gan.train_epochs(inputs.positives, augment, &inputs.levels, epochs, None)?;
        let eval = self.config.eval_count.unwrap_or(base);
        let m = measure(&self.gan, &self.classifier, inputs.positives, eval, seed::derive(step_seed, "eval"), &inputs.levels)?;
        if let Some(dir) = &inputs.dir {
            let d = dir.join(format!("step{t:02}"));
            save_set(&d.join("unlabeled"), &unlabeled)?;
            save_set(&d.join("labeled"), &labeled)?;
            save_set(&d.join("augment"), &aug)?;
            self.classifier.save(&d.join("classifier"))?;
            self.gan.save(&d.join("gan"))?;
        }
        self.step = t;
        self.metrics.push(StepMetrics {
            step: t,
            cls_acc: summary.test_accuracy.unwrap_or(f64::NAN),
            por_real: m.por_real,
            por_gen: m.por_gen,
            mcl_gen: m.mcl_gen,
            score_fid: m.score_fid,
            harvested: aug.len(),
            rand_shortfall,
        });
        if let Some(dir) = &inputs.dir {
            write_metrics_csv(&dir.join("ada_metrics.csv"), &self.metrics)?;
        }
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Steps until the classifier's accuracy changes by less than `eps_acc`
    /// twice in a row, or `max_steps` is reached.
    pub fn run(mut self, inputs: &AdaInputs) -> Result<Self> {
        let mut prev = self.classifier.test_accuracy().unwrap_or(f64::NAN);
        let mut calm = 0;
        while self.metrics.len() < self.config.max_steps {
            let acc = self.step(inputs)?.cls_acc;
            calm = if (acc - prev).abs() < self.config.eps_acc { calm + 1 } else { 0 };
            prev = acc;
            if calm >= 2 {
                break;
            }
        }
        Ok(self)
    }
}

pub fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "cls_acc", "por_real", "por_gen", "mcl_gen", "score_fid"])?;
    for m in metrics {
        w.write_record([
            m.step.to_string(),
            m.cls_acc.to_string(),
            m.por_real.to_string(),
            m.por_gen.to_string(),
            m.mcl_gen.to_string(),
            m.score_fid.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
