//! One function per subcommand. Every command reads its inputs from the run
//! directory (or the paths named under `[inputs]`) and replaces only the
//! outputs it owns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use loadgroup_core::ada::{AdaInputs, AdaState};
use loadgroup_core::dataio::{
    ingest_meters, ingest_temperature, load_set, profile_pool, save_set, synth_corpus, window_groups, write_meters_csv,
    write_temperature_csv, Label, MeterSeries, ProfilePool, SampleSet, TemperatureSeries,
};
use loadgroup_core::dlc::{self, Classifier};
use loadgroup_core::ganmodels::{self, write_history_csv, GanModel, Mode};
use loadgroup_core::nsg::{fit_reference, generate_negatives, random_groups};
use loadgroup_core::stats::{build_report, write_plots, ClassifierBlock, EvalReport};
use serde_json::json;

use crate::config::{NsgMethod, RunConfig};

pub const DATA: &str = "data";
pub const POSITIVES: &str = "positives";
pub const NEGATIVES: &str = "negatives";
pub const CLASSIFIER: &str = "classifier";
pub const GAN_MULTI: &str = "gan_multi";
pub const GAN_SINGLE: &str = "gan_single";
pub const GENERATED: &str = "generated";
pub const EVALUATED: &str = "evaluate";
pub const SCORES: &str = "scores";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_DIR: &str = "report";
pub const ADA: &str = "ada";

const METERS_CSV: &str = "meters.csv";
const TEMPERATURE_CSV: &str = "temperature.csv";
const ASSIGNMENT_CSV: &str = "assignment.csv";

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn input(&self, explicit: &str, default: &str) -> PathBuf {
        self.cfg.input(explicit, &self.out, default)
    }

    fn data_dir(&self) -> PathBuf {
        self.input(&self.cfg.inputs.data, DATA)
    }

    fn positives(&self) -> Result<SampleSet> {
        let dir = self.data_dir().join(POSITIVES);
        load_set(&dir).with_context(|| format!("loading positives from {}", dir.display()))
    }

    fn negatives(&self) -> Result<SampleSet> {
        let dir = self.input(&self.cfg.inputs.negatives, NEGATIVES);
        load_set(&dir).with_context(|| format!("loading negatives from {}", dir.display()))
    }

    fn series(&self) -> Result<(Vec<MeterSeries>, TemperatureSeries)> {
        let dir = self.data_dir();
        let cadence = self.cfg.window.cadence_min;
        let meters = ingest_meters(&dir.join(METERS_CSV), cadence).with_context(|| format!("reading meters under {}", dir.display()))?;
        let temperature =
            ingest_temperature(&dir.join(TEMPERATURE_CSV), cadence).with_context(|| format!("reading temperature under {}", dir.display()))?;
        Ok((meters, temperature))
    }

    fn pool(&self) -> Result<ProfilePool> {
        let (meters, temperature) = self.series()?;
        Ok(profile_pool(&meters, &temperature, &self.cfg.window)?)
    }

    fn gan_dir(&self, mode: Mode) -> PathBuf {
        match mode {
            Mode::Multi => self.input(&self.cfg.inputs.gan_multi, GAN_MULTI),
            Mode::Single => self.input(&self.cfg.inputs.gan_single, GAN_SINGLE),
        }
    }

    fn load_gan(&self, mode: Mode) -> Result<GanModel> {
        let dir = self.gan_dir(mode);
        GanModel::load(&dir).with_context(|| format!("loading generator from {}", dir.display()))
    }

    fn classifier_dir(&self) -> PathBuf {
        self.input(&self.cfg.inputs.classifier, CLASSIFIER)
    }
}

/// Empties `dir` so stale files of an earlier run cannot survive.
fn fresh(dir: &Path) -> Result<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Multi => "multi",
        Mode::Single => "single",
    }
}

fn write_data(ctx: &Ctx, meters: &[MeterSeries], temperature: &TemperatureSeries, assignment: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let dir = ctx.out.join(DATA);
    fresh(&dir)?;
    write_meters_csv(&dir.join(METERS_CSV), meters)?;
    write_temperature_csv(&dir.join(TEMPERATURE_CSV), temperature)?;
    let mut w = csv::Writer::from_path(dir.join(ASSIGNMENT_CSV))?;
    w.write_record(["group_id", "meter_id"])?;
    for (group, ids) in assignment {
        for id in ids {
            w.write_record([group, id])?;
        }
    }
    w.flush()?;
    let (positives, report) = window_groups(meters, temperature, assignment, &ctx.cfg.window)?;
    save_set(&dir.join(POSITIVES), &positives)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "meters": meters.len(),
            "groups": assignment.len(),
            "positives": positives.len(),
            "excluded_windows": report.excluded,
        }),
    )?;
    log::info!("{} meters, {} groups, {} positives ({} windows excluded)", meters.len(), assignment.len(), positives.len(), report.excluded);
    Ok(())
}

pub fn synth_data(ctx: &Ctx) -> Result<()> {
    let corpus = synth_corpus(&ctx.cfg.corpus, ctx.cfg.seed_for("synth"))?;
    write_data(ctx, &corpus.meters, &corpus.temperature, &corpus.assignment)
}

fn read_assignment(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).with_context(|| format!("{}: missing column {name}", path.display()));
    let (g, m) = (col("group_id")?, col("meter_id")?);
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        out.entry(row[g].to_string()).or_default().push(row[m].to_string());
    }
    Ok(out)
}

pub fn ingest(ctx: &Ctx) -> Result<()> {
    let s = &ctx.cfg.ingest;
    let cadence = ctx.cfg.window.cadence_min;
    let meters = ingest_meters(Path::new(&s.meters), cadence).with_context(|| format!("ingesting {}", s.meters))?;
    let temperature = ingest_temperature(Path::new(&s.temperature), cadence).with_context(|| format!("ingesting {}", s.temperature))?;
    let assignment = read_assignment(Path::new(&s.assignment))?;
    write_data(ctx, &meters, &temperature, &assignment)
}

pub fn nsg(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let positives = ctx.positives()?;
    let pool = ctx.pool()?;
    let count = cfg.nsg.ratio * positives.len();
    let seed = cfg.seed_for("nsg");
    let (set, summary) = match cfg.nsg.method {
        NsgMethod::Guided => {
            let reference = fit_reference(&positives, &cfg.nsg.criteria)?;
            let (set, r) = generate_negatives(&pool, &reference, &cfg.nsg.criteria, cfg.window.n, count, seed)?;
            let summary = json!({
                "method": "guided",
                "requested": r.requested,
                "produced": r.produced,
                "shortfall": r.shortfall,
                "mixed_starts": r.mixed_starts,
                "reference": reference,
            });
            (set, summary)
        }
        NsgMethod::Random => {
            let (set, shortfall) = random_groups(&pool, cfg.window.n, count, seed, Label::Negative)?;
            let summary = json!({
                "method": "random",
                "requested": count,
                "produced": set.len(),
                "shortfall": shortfall,
            });
            (set, summary)
        }
    };
    let dir = ctx.out.join(NEGATIVES);
    fresh(&dir)?;
    save_set(&dir, &set)?;
    write_json(&ctx.out.join("nsg_report.json"), &summary)?;
    if summary["shortfall"].as_u64().unwrap_or(0) > 0 {
        log::warn!("produced {} of {count} negatives", set.len());
    }
    log::info!("{} negatives for {} positives", set.len(), positives.len());
    Ok(())
}

pub fn train_dlc(ctx: &Ctx) -> Result<()> {
    let positives = ctx.positives()?;
    let negatives = ctx.negatives()?;
    let mut clf = Classifier::new(ctx.cfg.classifier_config())?;
    let summary = clf.train(&positives, &negatives, None)?;
    let dir = ctx.out.join(CLASSIFIER);
    fresh(&dir)?;
    clf.save(&dir)?;
    if summary.diverged {
        log::warn!("classifier loss diverged; kept the last finite epoch");
    }
    match summary.test_accuracy {
        Some(acc) => log::info!("held-out accuracy {acc:.4} on {} groups", summary.test_count),
        None => log::warn!("no held-out groups; accuracy unavailable"),
    }
    Ok(())
}

fn train_gan(ctx: &Ctx, mode: Mode) -> Result<()> {
    let positives = ctx.positives()?;
    let config = ctx.cfg.gan_config(mode)?;
    let dir = ctx.out.join(match mode {
        Mode::Multi => GAN_MULTI,
        Mode::Single => GAN_SINGLE,
    });
    fresh(&dir)?;
    let checkpoints = (config.checkpoint_every > 0).then(|| dir.join("checkpoints"));
    let mut gan = GanModel::new(config)?;
    let report = gan.train(&positives, None, &ctx.cfg.levels, checkpoints.as_deref())?;
    gan.save(&dir)?;
    write_history_csv(&dir.join("history.csv"), &gan.history)?;
    if let Some(reason) = &report.diverged {
        log::warn!("{} training stopped early: {reason}", mode_name(mode));
    }
    log::info!(
        "{} generator: {} epochs, {} critic and {} generator steps",
        mode_name(mode),
        report.epochs,
        report.critic_steps,
        report.generator_steps
    );
    Ok(())
}

pub fn train_multi(ctx: &Ctx) -> Result<()> {
    train_gan(ctx, Mode::Multi)
}

pub fn train_single(ctx: &Ctx) -> Result<()> {
    train_gan(ctx, Mode::Single)
}

fn sample(ctx: &Ctx, gan: &GanModel, count: usize, label: &str) -> Result<SampleSet> {
    let (set, report) = gan.sample_groups(count, ctx.cfg.seed_for(label), &ctx.cfg.levels)?;
    log::info!("{label}: {} groups, {} entries off the color curve", set.len(), report.off_curve);
    Ok(set)
}

pub fn generate(ctx: &Ctx) -> Result<()> {
    let mut drawn = 0;
    for mode in [Mode::Multi, Mode::Single] {
        if !ctx.gan_dir(mode).join(ganmodels::META_FILE).exists() {
            continue;
        }
        let gan = ctx.load_gan(mode)?;
        let count = match ctx.cfg.generate.count {
            0 => ctx.positives()?.len(),
            c => c,
        };
        let set = sample(ctx, &gan, count, &format!("generate/{}", mode_name(mode)))?;
        let dir = ctx.out.join(GENERATED).join(mode_name(mode));
        fresh(&dir)?;
        save_set(&dir, &set)?;
        log::info!("drew {} {} groups", set.len(), mode_name(mode));
        drawn += 1;
    }
    if drawn == 0 {
        bail!("no trained generator under {} or {}", ctx.gan_dir(Mode::Multi).display(), ctx.gan_dir(Mode::Single).display());
    }
    Ok(())
}

/// The set named by `explicit`, else draws from the generator of `mode` if
/// it exists (required for the multi-load model).
fn evaluated_set(ctx: &Ctx, explicit: &str, mode: Mode, count: usize) -> Result<Option<SampleSet>> {
    if !explicit.is_empty() {
        return Ok(Some(load_set(Path::new(explicit)).with_context(|| format!("loading {explicit}"))?));
    }
    if mode == Mode::Single && !ctx.gan_dir(mode).join(ganmodels::META_FILE).exists() {
        log::warn!("no single-load generator at {}; the report has no single column", ctx.gan_dir(mode).display());
        return Ok(None);
    }
    let gan = ctx.load_gan(mode)?;
    Ok(Some(sample(ctx, &gan, count, &format!("evaluate/{}", mode_name(mode)))?))
}

pub fn evaluate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let real = if cfg.inputs.real_set.is_empty() {
        ctx.positives()?
    } else {
        load_set(Path::new(&cfg.inputs.real_set)).with_context(|| format!("loading {}", cfg.inputs.real_set))?
    };
    let count = match cfg.evaluate.count {
        0 => real.len(),
        c => c,
    };
    let multi = evaluated_set(ctx, &cfg.inputs.multi_set, Mode::Multi, count)?.expect("multi set is required");
    let single = evaluated_set(ctx, &cfg.inputs.single_set, Mode::Single, count)?;

    let sets_dir = ctx.out.join(EVALUATED);
    fresh(&sets_dir)?;
    save_set(&sets_dir.join("multi"), &multi)?;
    if let Some(s) = &single {
        save_set(&sets_dir.join("single"), s)?;
    }

    let clf_dir = ctx.classifier_dir();
    let block = if clf_dir.join(dlc::META_FILE).exists() {
        let clf = Classifier::load(&clf_dir).with_context(|| format!("loading classifier from {}", clf_dir.display()))?;
        let scores_dir = ctx.out.join(SCORES);
        fresh(&scores_dir)?;
        let rs = clf.score(&real)?;
        let ms = clf.score(&multi)?;
        rs.write_csv(&scores_dir.join("real.csv"))?;
        ms.write_csv(&scores_dir.join("multi.csv"))?;
        let single_scores = match &single {
            Some(s) => {
                let ss = clf.score(s)?;
                ss.write_csv(&scores_dir.join("single.csv"))?;
                Some(dlc::set_scores(&ss, &rs)?)
            }
            None => None,
        };
        Some(ClassifierBlock {
            version: clf.version,
            real: dlc::set_scores(&rs, &rs)?,
            multi: dlc::set_scores(&ms, &rs)?,
            single: single_scores,
        })
    } else {
        log::warn!("no classifier at {}; the report has no classifier block", clf_dir.display());
        None
    };

    let mut report = build_report(&real, &multi, single.as_ref(), &cfg.stats, block);
    report.metadata.insert("preset".into(), format!("{:?}", cfg.preset).to_lowercase());
    report.metadata.insert("seed".into(), cfg.seed.to_string());
    for e in &report.errors {
        log::warn!("{e}");
    }
    std::fs::write(ctx.out.join(REPORT_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(ctx.out.join(REPORT_MD), report.to_markdown())?;
    log::info!("report over {} real, {} multi groups", real.len(), multi.len());
    Ok(())
}

pub fn ada(ctx: &Ctx) -> Result<()> {
    let positives = ctx.positives()?;
    let negatives = ctx.negatives()?;
    let pool = ctx.pool()?;
    let gan = ctx.load_gan(Mode::Multi)?;
    let clf_dir = ctx.classifier_dir();
    let classifier = Classifier::load(&clf_dir).with_context(|| format!("loading classifier from {}", clf_dir.display()))?;
    let dir = ctx.out.join(ADA);
    fresh(&dir)?;
    let inputs = AdaInputs {
        positives: &positives,
        negatives: &negatives,
        pool: &pool,
        levels: ctx.cfg.levels,
        seed: ctx.cfg.seed_for("ada"),
        dir: Some(dir.clone()),
    };
    let state = AdaState::new(gan, classifier, ctx.cfg.ada.clone())?.run(&inputs)?;
    state.gan.save(&dir.join("final").join("gan"))?;
    state.classifier.save(&dir.join("final").join("classifier"))?;
    for m in &state.metrics {
        log::info!(
            "step {}: acc {:.4}, POR real {:.1} gen {:.1}, score FID {:.4e}, {} harvested",
            m.step,
            m.cls_acc,
            m.por_real,
            m.por_gen,
            m.score_fid,
            m.harvested
        );
    }
    Ok(())
}

pub fn report(ctx: &Ctx) -> Result<()> {
    let path = ctx.input(&ctx.cfg.inputs.report, REPORT_JSON);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let real = ctx.positives()?;
    let sets_dir = ctx.out.join(EVALUATED);
    let multi = load_set(&sets_dir.join("multi")).with_context(|| format!("loading evaluated sets under {}", sets_dir.display()))?;
    let single = sets_dir.join("single").exists().then(|| load_set(&sets_dir.join("single"))).transpose()?;

    let dir = ctx.out.join(REPORT_DIR);
    fresh(&dir)?;
    std::fs::write(dir.join(REPORT_MD), report.to_markdown())?;
    let mut sets = vec![("real", &real), ("multi", &multi)];
    if let Some(s) = &single {
        sets.push(("single", s));
    }
    let plots = write_plots(&dir.join("plots"), &sets, &ctx.cfg.stats)?;
    log::info!("wrote {} plots under {}", plots.len(), dir.display());
    Ok(())
}
