//! Run configuration: preset defaults, user overrides and the resolved file.
//!
//! A user file is merged key by key over the defaults of the selected
//! preset. Keys that the defaults do not know are collected and reported
//! together instead of being dropped.

use std::path::{Path, PathBuf};

use loadgroup_core::ada::AdaConfig;
use loadgroup_core::codec::EncodingLevels;
use loadgroup_core::dataio::{CorpusSpec, WindowSpec};
use loadgroup_core::dlc::ClassifierConfig;
use loadgroup_core::ganmodels::{GanConfig, LossKind, Mode, Preset};
use loadgroup_core::nsg::NsgCriteria;
use loadgroup_core::stats::StatsConfig;
use serde::{Deserialize, Serialize};

/// Keys that may be absent from the resolved defaults.
const OPTIONAL_KEYS: &[&str] = &["nsg.criteria.k_range", "ada.gan_count", "ada.rand_count", "ada.eval_count"];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: Box<toml::de::Error> },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Deserialize(#[from] toml::de::Error),
}

/// Adversarial training knobs; the network stacks come from the preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSection {
    pub lr_d: f64,
    pub lr_g: f64,
    pub lambda: f64,
    pub loss: LossKind,
    pub clip: f64,
    pub batch: usize,
    pub epochs: usize,
    pub critic_steps: usize,
    pub checkpoint_every: usize,
    pub critic_batchnorm: bool,
    pub free_temperature: bool,
    pub permute_columns: bool,
}

impl GanSection {
    fn of(c: &GanConfig) -> Self {
        Self {
            lr_d: c.lr_d,
            lr_g: c.lr_g,
            lambda: c.lambda,
            loss: c.loss,
            clip: c.clip,
            batch: c.batch,
            epochs: c.epochs,
            critic_steps: c.critic_steps,
            checkpoint_every: c.checkpoint_every,
            critic_batchnorm: c.critic_batchnorm,
            free_temperature: c.free_temperature,
            permute_columns: c.permute_columns,
        }
    }

    fn apply(&self, c: GanConfig) -> GanConfig {
        GanConfig {
            lr_d: self.lr_d,
            lr_g: self.lr_g,
            lambda: self.lambda,
            loss: self.loss,
            clip: self.clip,
            batch: self.batch,
            epochs: self.epochs,
            critic_steps: self.critic_steps,
            checkpoint_every: self.checkpoint_every,
            critic_batchnorm: self.critic_batchnorm,
            free_temperature: self.free_temperature,
            permute_columns: self.permute_columns,
            ..c
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NsgMethod {
    /// Statistic-guided negatives.
    Guided,
    /// Distinct meters drawn at random from one window start.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsgSection {
    pub method: NsgMethod,
    /// Negatives per positive.
    pub ratio: usize,
    pub criteria: NsgCriteria,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub train_fraction: f64,
    pub raw_input: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    /// Groups drawn per generator; 0 draws one per positive.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    /// `timestamp,meter_id,kw` readings.
    pub meters: String,
    /// `timestamp,temp_f` readings.
    pub temperature: String,
    /// `group_id,meter_id` rows.
    pub assignment: String,
}

/// Artifact locations; empty strings mean the default place under `--out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    pub data: String,
    pub negatives: String,
    pub classifier: String,
    pub gan_multi: String,
    pub gan_single: String,
    /// Real set to evaluate against; defaults to the data positives.
    pub real_set: String,
    /// Pre-drawn sets to evaluate instead of sampling the generators.
    pub multi_set: String,
    pub single_set: String,
    pub report: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub window: WindowSpec,
    pub levels: EncodingLevels,
    pub ingest: IngestSection,
    pub inputs: InputsSection,
    pub gan_multi: GanSection,
    pub gan_single: GanSection,
    pub nsg: NsgSection,
    pub classifier: ClassifierSection,
    pub generate: SampleSection,
    pub evaluate: SampleSection,
    pub ada: AdaConfig,
    pub stats: StatsConfig,
}

impl RunConfig {
    pub fn for_preset(preset: Preset, seed: u64) -> Self {
        let (m, n) = (preset.m(), preset.n());
        let corpus = match preset {
            Preset::Desk => CorpusSpec::default(),
            Preset::Paper => CorpusSpec {
                households: n,
                days: 364,
                ..CorpusSpec::default()
            },
        };
        let window = WindowSpec {
            m,
            n,
            stride: 0,
            first_weekday: "monday".into(),
            cadence_min: corpus.cadence_min,
        };
        let clf = ClassifierConfig::new(m, n, 0);
        Self {
            preset,
            seed,
            corpus,
            window,
            levels: EncodingLevels::default(),
            ingest: IngestSection {
                meters: "meters.csv".into(),
                temperature: "temperature.csv".into(),
                assignment: "assignment.csv".into(),
            },
            inputs: InputsSection::default(),
            gan_multi: GanSection::of(&preset.gan_config(Mode::Multi, 0)),
            gan_single: GanSection::of(&preset.gan_config(Mode::Single, 0)),
            nsg: NsgSection {
                method: NsgMethod::Guided,
                ratio: 3,
                criteria: NsgCriteria::default(),
            },
            classifier: ClassifierSection {
                lr: clf.lr,
                epochs: clf.epochs,
                batch: clf.batch,
                train_fraction: clf.train_fraction,
                raw_input: clf.raw_input,
            },
            generate: SampleSection { count: 0 },
            evaluate: SampleSection { count: 0 },
            ada: AdaConfig::default(),
            stats: StatsConfig::default(),
        }
    }

    /// Loads `path` (if any) over the preset defaults. `preset` and `seed`
    /// override the file's values.
    pub fn load(path: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<Self, ConfigError> {
        let user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                text.parse::<toml::Table>().map_err(|source| ConfigError::Parse {
                    path: p.display().to_string(),
                    source: Box::new(source),
                })?
            }
            None => toml::Table::new(),
        };
        let preset = match (preset, user.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.clone().try_into()?,
            (None, None) => Preset::default(),
        };
        let mut tree = toml::Table::try_from(Self::for_preset(preset, 0))?;
        let mut unknown = Vec::new();
        merge(&mut tree, user, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        tree.insert("preset".into(), toml::Value::try_from(preset)?);
        if let Some(s) = seed {
            let s = i64::try_from(s).map_err(|_| ConfigError::Invalid(format!("seed {s} exceeds {}", i64::MAX)))?;
            tree.insert("seed".into(), toml::Value::Integer(s));
        }
        let mut cfg: RunConfig = tree.try_into()?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Expands data-dependent defaults and checks cross-section constraints.
    fn resolve(&mut self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.window.cadence_min != self.corpus.cadence_min {
            return bad(format!(
                "window cadence {} differs from corpus cadence {}",
                self.window.cadence_min, self.corpus.cadence_min
            ));
        }
        if self.corpus.households != self.window.n {
            return bad(format!("corpus households {} differ from window n {}", self.corpus.households, self.window.n));
        }
        if self.nsg.ratio == 0 {
            return bad("nsg.ratio must be positive".into());
        }
        if self.nsg.criteria.k_range.is_none() {
            let r = self.nsg.criteria.k_range(self.window.n).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            self.nsg.criteria.k_range = Some(r);
        }
        self.nsg.criteria.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ada.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.levels.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Seed of a pipeline stage, independent of the order stages run in.
    pub fn seed_for(&self, label: &str) -> u64 {
        loadgroup_core::seed::derive(self.seed, label)
    }

    /// Generator configuration of `mode`; the window must match the preset's
    /// network sizes.
    pub fn gan_config(&self, mode: Mode) -> Result<GanConfig, ConfigError> {
        if (self.window.m, self.window.n) != (self.preset.m(), self.preset.n()) {
            return Err(ConfigError::Invalid(format!(
                "generator stacks of the {:?} preset need a {}x{} window, got {}x{}",
                self.preset,
                self.preset.m(),
                self.preset.n(),
                self.window.m,
                self.window.n
            )));
        }
        let (section, label) = match mode {
            Mode::Multi => (&self.gan_multi, "gan/multi"),
            Mode::Single => (&self.gan_single, "gan/single"),
        };
        let cfg = section.apply(self.preset.gan_config(mode, self.seed_for(label)));
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        let mut c = ClassifierConfig::new(self.window.m, self.window.n, self.seed_for("dlc"));
        if self.classifier.raw_input {
            c = c.with_raw_input();
        }
        ClassifierConfig {
            levels: self.levels,
            lr: self.classifier.lr,
            epochs: self.classifier.epochs,
            batch: self.classifier.batch,
            train_fraction: self.classifier.train_fraction,
            ..c
        }
    }

    /// `explicit` if set, else `default` under `out`.
    pub fn input(&self, explicit: &str, out: &Path, default: &str) -> PathBuf {
        if explicit.is_empty() {
            out.join(default)
        } else {
            PathBuf::from(explicit)
        }
    }
}

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str, unknown: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path, unknown),
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(key, v);
            }
            (None, _) => unknown.push(path),
        }
    }
}
