use std::path::Path;
use std::process::{Command, Output};

fn wplda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wplda"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const SEPARABLE: &str = "a b 2.0 target\na c 3.0 target\nb c 0.0 nontarget\nc d 1.0 nontarget\n";

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(wplda(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(
        wplda(dir.path(), &["eval", "--scores", "x", "--bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        wplda(
            dir.path(),
            &["train", "--ivectors", "a.ivec", "--labels", "a.labels"]
        )
        .status
        .code(),
        Some(2),
        "missing --out"
    );
    assert_eq!(
        wplda(dir.path(), &["--threads", "0", "eval", "--scores", "x"])
            .status
            .code(),
        Some(2)
    );
    let missing = wplda(dir.path(), &["eval", "--scores", "nope.scores"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("nope.scores"));

    write(dir.path(), "s.scores", SEPARABLE);
    assert_eq!(
        wplda(dir.path(), &["--quiet", "eval", "--scores", "s.scores"])
            .status
            .code(),
        Some(0)
    );
}

#[test]
fn help_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let top = stdout(&wplda(dir.path(), &["--help"]));
    for sub in ["synth", "weaklabel", "train", "score", "eval", "experiment"] {
        assert!(top.contains(sub), "{sub} missing from help");
    }
    let synth = stdout(&wplda(dir.path(), &["synth", "--help"]));
    assert!(synth.contains("[default: 50]"));
    assert!(synth.contains("[default: off]"));
    assert!(synth.contains("--seed"));
    let train = stdout(&wplda(dir.path(), &["train", "--help"]));
    assert!(train.contains("[default: full]"));
    assert!(train.contains("[default: 20]"));
}

#[test]
fn eval_separable_fixture() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "s.scores", SEPARABLE);
    let out = wplda(
        dir.path(),
        &[
            "--quiet", "eval", "--scores", "s.scores", "--det", "det.csv",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["eer"], 0.0);
    assert_eq!(report["n_target"], 2);
    let det = std::fs::read_to_string(dir.path().join("det.csv")).unwrap();
    assert!(det.starts_with("threshold,false_alarm_rate,miss_rate\n"));
    assert_eq!(det.lines().count(), 5);
}

#[test]
fn eval_joins_trials() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "s.scores", "a b 0.0\na c 1.0\nb c 2.0\n");
    write(
        dir.path(),
        "t.trials",
        "a b target\na c nontarget\nb c nontarget\n",
    );
    let out = wplda(
        dir.path(),
        &[
            "--quiet", "eval", "--scores", "s.scores", "--trials", "t.trials",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["eer"], 1.0);
}

#[test]
fn config_supplies_required_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "good.scores", SEPARABLE);
    write(
        dir.path(),
        "bad.scores",
        "a b 0.0 target\na c 1.0 target\nb c 2.0 nontarget\nc d 3.0 nontarget\n",
    );
    write(
        dir.path(),
        "c.json",
        r#"{"scores": "bad.scores", "quiet": true}"#,
    );

    let from_config = wplda(dir.path(), &["--config", "c.json", "eval"]);
    assert!(from_config.status.success(), "{}", stderr(&from_config));
    let r: serde_json::Value = serde_json::from_str(&stdout(&from_config)).unwrap();
    assert_eq!(r["eer"], 1.0);

    let overridden = wplda(
        dir.path(),
        &["--config", "c.json", "eval", "--scores", "good.scores"],
    );
    assert!(overridden.status.success(), "{}", stderr(&overridden));
    let r: serde_json::Value = serde_json::from_str(&stdout(&overridden)).unwrap();
    assert_eq!(r["eer"], 0.0);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "s.scores", SEPARABLE);
    write(
        dir.path(),
        "unknown.json",
        r#"{"scores": "s.scores", "frobnicate": 3}"#,
    );
    let o = wplda(dir.path(), &["--config", "unknown.json", "eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frobnicate"));

    write(dir.path(), "broken.json", "{ not json");
    let o = wplda(dir.path(), &["--config", "broken.json", "eval"]);
    assert_eq!(o.status.code(), Some(1));

    let o = wplda(dir.path(), &["--config", "absent.json", "eval"]);
    assert_eq!(o.status.code(), Some(1));
}

fn small_synth(dir: &Path) {
    let o = wplda(
        dir,
        &[
            "--quiet",
            "--seed",
            "5",
            "synth",
            "--out-dir",
            "data",
            "--sessions",
            "200",
            "--strong-speakers",
            "120",
            "--eval-speakers",
            "30",
            "--dim",
            "12",
            "--rank",
            "5",
            "--channel-rank",
            "3",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    for f in [
        "corpus.ivec",
        "corpus.csv",
        "strong.ivec",
        "strong.csv",
        "strong.labels",
        "eval.ivec",
        "eval.trials",
        "truth.json",
        "synth.json",
    ] {
        assert!(dir.path().join("data").join(f).is_file(), "{f} missing");
    }
    let trials = std::fs::read_to_string(dir.path().join("data/eval.trials")).unwrap();
    let n_target = trials.lines().filter(|l| l.ends_with(" target")).count();
    assert_eq!(n_target, 30 * 6);
    assert_eq!(trials.lines().count(), 30 * 6 + 30 * 6 * 29);
}

#[test]
fn weaklabel_report() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let o = wplda(
        dir.path(),
        &[
            "--quiet",
            "weaklabel",
            "--metadata",
            "data/corpus.csv",
            "--out",
            "w.labels",
            "--channel",
            "serv",
            "--report",
            "r.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["purity"], 1.0);
    assert!(r["split_rate"].as_f64().unwrap() > 0.0);
    assert!(r["n_true_speakers"].as_u64().unwrap() < 200);
    assert_eq!(r["n_weak_speakers"], 200);

    let o = wplda(
        dir.path(),
        &[
            "weaklabel",
            "--metadata",
            "data/corpus.csv",
            "--out",
            "w.labels",
            "--channel",
            "nobody",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_score_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let o = wplda(
        dir.path(),
        &[
            "--quiet",
            "train",
            "--ivectors",
            "data/strong.ivec",
            "--labels",
            "data/strong.labels",
            "--rank",
            "5",
            "--iters",
            "7",
            "--out",
            "m.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let lls: Vec<f64> = stdout(&o).lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(lls.len(), 7);
    assert!(lls.windows(2).all(|w| w[1] >= w[0] - w[0].abs() * 1e-6));

    let o = wplda(
        dir.path(),
        &[
            "--quiet",
            "score",
            "--model",
            "m.json",
            "--trials",
            "data/eval.trials",
            "--ivectors",
            "data/eval.ivec",
            "--flags",
            "--out",
            "s.scores",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = wplda(dir.path(), &["--quiet", "eval", "--scores", "s.scores"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let eer = r["eer"].as_f64().unwrap();
    assert!(eer > 0.0 && eer < 0.3, "eer {eer}");

    let o = wplda(
        dir.path(),
        &[
            "score",
            "--cosine",
            "--model",
            "m.json",
            "--trials",
            "data/eval.trials",
            "--ivectors",
            "data/eval.ivec",
            "--out",
            "c.scores",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "--cosine conflicts with --model");
}

#[test]
fn train_rejects_labels_without_vectors() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "v.ivec", "u1 1.0 0.0\nu2 0.0 1.0\n");
    write(dir.path(), "l.labels", "u1\ts1\nu3\ts2\n");
    let o = wplda(
        dir.path(),
        &[
            "train",
            "--ivectors",
            "v.ivec",
            "--labels",
            "l.labels",
            "--rank",
            "1",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("u3"));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn experiment_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = wplda(
        dir.path(),
        &[
            "--quiet",
            "experiment",
            "--name",
            "table2",
            "--seeds",
            "0,1",
            "--strong",
            "80",
            "--weak",
            "80",
            "--dim",
            "12",
            "--synth-rank",
            "5",
            "--rank",
            "5",
            "--iters",
            "4",
            "--eval-speakers",
            "20",
            "--out",
            "out",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let names: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "Cosine",
            "STRONG",
            "WEAK-customer",
            "WEAK-service",
            "WEAK-mix"
        ]
    );
    for f in ["results.csv", "summary.csv", "manifest.json", "table.txt"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f} missing");
    }
    let results = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 5 * 2);
}
