use std::path::Path;
use std::process::{Command, Output};

use loadgroup_core::dataio::load_set;
use loadgroup_core::stats::EvalReport;

fn loadgroup(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loadgroup"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = loadgroup(args, out);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

/// A small corpus and one-epoch generators so each command runs in seconds.
fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "seed = 11\n[corpus]\ndays = 7\n[gan_multi]\nepochs = 1\n[gan_single]\nepochs = 1\n[classifier]\nepochs = 1\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_config_keys_fail_with_their_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seeed = 1\n[gan_multi]\nepochz = 3\n").unwrap();
    let o = loadgroup(&["synth-data", "--config", cfg.to_str().unwrap()], &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gan_multi.epochz") && err.contains("seeed"), "{err}");
    assert!(!dir.path().join("run").join("data").exists());
}

#[test]
fn missing_artifacts_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = loadgroup(&["train-dlc"], &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: loading positives"));
}

#[test]
fn evaluating_the_real_set_against_itself_gives_zero_distances() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = small_config(dir.path());
    ok(&["synth-data", "--config", &cfg], &run);
    let real = run.join("data").join("positives");
    let eval_cfg = dir.path().join("eval.toml");
    let text = std::fs::read_to_string(&cfg).unwrap() + &format!("[inputs]\nmulti_set = {:?}\n", real.to_str().unwrap());
    std::fs::write(&eval_cfg, text).unwrap();
    ok(&["evaluate", "--config", eval_cfg.to_str().unwrap()], &run);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.statistics.len(), 10);
    for e in &report.statistics {
        for d in &e.multi {
            assert_eq!(*d, Some(0.0), "{:?} {:?}", e.index, e.level);
        }
        assert!(e.single.is_none());
    }
    assert!(report.classifier.is_none());
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        ok(&["synth-data", "--config", &cfg], run);
        ok(&["train-multi", "--config", &cfg], run);
    }
    for f in ["generator.ckpt", "critic.ckpt", "gan.json", "history.csv"] {
        let read = |r: &Path| std::fs::read(r.join("gan_multi").join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f}");
    }
    // rerunning in place replaces the outputs with the same bytes
    let before = std::fs::read(a.join("gan_multi").join("generator.ckpt")).unwrap();
    ok(&["train-multi", "--config", &cfg], &a);
    assert_eq!(std::fs::read(a.join("gan_multi").join("generator.ckpt")).unwrap(), before);
}

#[test]
fn resolved_config_replays_and_seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth-data", "--config", &cfg], &a);
    let resolved = a.join("synth-data.resolved.toml");
    let text = std::fs::read_to_string(&resolved).unwrap();
    assert!(text.contains("seed = 11") && text.contains("k_range"));
    ok(&["synth-data", "--config", resolved.to_str().unwrap()], &b);
    ok(&["synth-data", "--config", &cfg, "--seed", "12"], &c);
    let meters = |r: &Path| std::fs::read(r.join("data").join("meters.csv")).unwrap();
    assert_eq!(meters(&a), meters(&b));
    assert_ne!(meters(&a), meters(&c));
}

#[test]
fn ingesting_written_csvs_reproduces_the_positives() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth-data", "--config", &cfg], &a);
    let data = a.join("data");
    let ingest_cfg = dir.path().join("ingest.toml");
    let text = std::fs::read_to_string(&cfg).unwrap()
        + &format!(
            "[ingest]\nmeters = {:?}\ntemperature = {:?}\nassignment = {:?}\n",
            data.join("meters.csv").to_str().unwrap(),
            data.join("temperature.csv").to_str().unwrap(),
            data.join("assignment.csv").to_str().unwrap()
        );
    std::fs::write(&ingest_cfg, text).unwrap();
    ok(&["ingest", "--config", ingest_cfg.to_str().unwrap()], &b);
    let pa = load_set(&data.join("positives")).unwrap();
    let pb = load_set(&b.join("data").join("positives")).unwrap();
    assert_eq!(pa.len(), 56);
    assert_eq!(pa, pb);
}

#[test]
fn desk_commands_chain_through_ada_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("chain.toml");
    std::fs::write(
        &cfg,
        "seed = 4\n[corpus]\ndays = 7\n[gan_multi]\nepochs = 5\n[gan_single]\nepochs = 1\n[classifier]\nepochs = 2\n[ada]\nmax_steps = 1\n[generate]\ncount = 6\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    for c in ["synth-data", "nsg", "train-dlc", "train-multi", "train-single", "generate", "evaluate", "ada", "report"] {
        ok(&[c, "--config", cfg], &run);
        assert!(run.join(format!("{c}.resolved.toml")).exists());
    }
    assert_eq!(load_set(&run.join("generated").join("multi")).unwrap().len(), 6);
    assert_eq!(load_set(&run.join("negatives")).unwrap().len(), 3 * 56);
    let metrics = std::fs::read_to_string(run.join("ada").join("ada_metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,cls_acc,por_real,por_gen,mcl_gen,score_fid"));
    assert_eq!(metrics.lines().count(), 2);
    assert!(run.join("ada").join("step01").join("augment").join("manifest.json").exists());
    assert!(run.join("report").join("plots").join("peak_household_curve.svg").exists());
    let scores = std::fs::read_to_string(run.join("scores").join("multi.csv")).unwrap();
    assert!(scores.starts_with("sample_id,score,label_at_0.5"));
}
