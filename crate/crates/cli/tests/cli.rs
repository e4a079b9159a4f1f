use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_counsel-arena"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let o = run(args, cwd);
    assert_eq!(o.status.code(), Some(0), "{args:?} failed: {}", stderr(&o));
    o
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// gen, simulate, tournament, rate and report into `dir/<tag>`.
fn pipeline(dir: &Path, tag: &str, seed: &str) {
    let w = format!("{tag}/w");
    let cfg = format!("{w}/config.toml");
    ok(&["--seed", "3", "gen", "--models", "4", "--clients", "4", "--out", &w], dir);
    let common = ["--config", cfg.as_str(), "--seed", seed];
    let with = |rest: &[&str]| -> Vec<String> { common.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |rest: &[&str]| {
        let args = with(rest);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs, dir)
    };
    call(&["simulate", "--out", &format!("{tag}/transcripts.jsonl")]);
    call(&[
        "tournament",
        "--transcripts",
        &format!("{tag}/transcripts.jsonl"),
        "--rounds",
        "2",
        "--out",
        &format!("{tag}/battles.jsonl"),
    ]);
    call(&["rate", "--battles", &format!("{tag}/battles.jsonl"), "--out", &format!("{tag}/ratings.jsonl")]);
    call(&[
        "report",
        "--ratings",
        &format!("{tag}/ratings.jsonl"),
        "--battles",
        &format!("{tag}/battles.jsonl"),
        "--format",
        "csv",
        "--out",
        &format!("{tag}/report.csv"),
    ]);
}

#[test]
fn validate_accepts_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--clients", "3", "--out", "g"], dir.path());
    let o = ok(&["validate", "--script", "g/scripts.jsonl", "--profiles", "g/profiles.jsonl"], dir.path());
    assert!(stdout(&o).contains("0 violations"));
}

#[test]
fn validate_reports_violations_as_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--clients", "2", "--out", "g"], dir.path());
    let scripts = String::from_utf8(read(&dir.path().join("g/scripts.jsonl"))).unwrap();
    let broken = scripts.replacen("\"client_id\":\"c000\"", "\"client_id\":\"nobody\"", 1);
    std::fs::write(dir.path().join("g/bad.jsonl"), broken).unwrap();
    let o = run(&["validate", "--script", "g/bad.jsonl", "--profiles", "g/profiles.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("1 violations"), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["rate", "--bogus"][..], &["report", "--ratings", "x", "--format", "pdf"][..]] {
        let o = run(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(stderr(&o).contains("--help"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn empty_battles_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let o = run(&["rate", "--battles", "empty.jsonl", "--out", "r.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no battles"));
}

#[test]
fn pipeline_is_byte_identical_and_records_its_config() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "a", "7");
    pipeline(dir.path(), "b", "7");
    for f in ["transcripts.jsonl", "battles.jsonl", "ratings.jsonl", "report.csv", "standings.jsonl"] {
        assert_eq!(read(&dir.path().join("a").join(f)), read(&dir.path().join("b").join(f)), "{f}");
    }
    let report = String::from_utf8(read(&dir.path().join("a/report.csv"))).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(report.starts_with("Rank,Model,Elo,Win Rate,Empathy"));

    let record: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("a/tournament.effective-config.json"))).unwrap();
    assert_eq!(record["command"], "tournament");
    assert_eq!(record["config"]["seed"], 7);
    assert_eq!(record["seeds"]["root"], 7);
    assert!(record["seeds"]["judge"].is_u64());
    assert_eq!(record["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_override_changes_the_battles() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "a", "7");
    pipeline(dir.path(), "c", "8");
    assert_ne!(read(&dir.path().join("a/battles.jsonl")), read(&dir.path().join("c/battles.jsonl")));
    let digest = |tag: &str| -> String {
        let v: serde_json::Value =
            serde_json::from_slice(&read(&dir.path().join(tag).join("rate.effective-config.json"))).unwrap();
        v["sha256"].as_str().unwrap().to_string()
    };
    assert_ne!(digest("a"), digest("c"));
}

#[test]
fn report_formats_agree_and_bias_prints_shares() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "a", "1");
    let md = stdout(&ok(&["report", "--ratings", "a/ratings.jsonl", "--format", "md"], dir.path()));
    let csv = stdout(&ok(&["report", "--ratings", "a/ratings.jsonl", "--format", "csv"], dir.path()));
    let md_rows: Vec<String> = md
        .lines()
        .filter(|l| !l.starts_with("|---"))
        .map(|l| l.trim_matches('|').split('|').map(str::trim).collect::<Vec<_>>().join(","))
        .collect();
    let csv_rows: Vec<String> = csv.lines().map(str::to_string).collect();
    assert_eq!(md_rows, csv_rows);
    let o = ok(&["bias", "--battles", "a/battles.jsonl"], dir.path());
    assert!(stdout(&o).contains("position shares first"));
    assert!(stdout(&o).contains("swap consistency"));
}

#[test]
fn agree_with_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "a", "1");
    ok(&["agree", "--battles-x", "a/battles.jsonl", "--battles-y", "a/battles.jsonl", "--out", "a/kappa.csv"], dir.path());
    let csv = String::from_utf8(read(&dir.path().join("a/kappa.csv"))).unwrap();
    let comprehensive = csv.lines().nth(1).unwrap();
    assert!(comprehensive.starts_with("Comprehensive,"), "{comprehensive}");
    assert!(comprehensive.ends_with(",1.000000"), "{comprehensive}");
    assert_eq!(csv.lines().count(), 14);
}

#[test]
fn preference_learning_chain_runs() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "a", "2");
    let cfg = "a/w/config.toml";
    ok(&["--config", cfg, "prefs", "--battles", "a/battles.jsonl", "--transcripts", "a/transcripts.jsonl", "--out", "a/pairs.jsonl"], dir.path());
    ok(&["--config", cfg, "train-rm", "--pairs", "a/pairs.jsonl", "--out", "a/rm.json"], dir.path());
    let train_grpo = ["--config", cfg, "grpo", "--rm", "a/rm.json", "--queries", "a/w/profiles.jsonl"];
    let mut args = train_grpo.to_vec();
    args.extend(["--snapshot", "a/before.json", "--out", "a/policy.json"]);
    ok(&args, dir.path());
    ok(&["gen", "--clients", "5", "--id-offset", "100", "--out", "held"], dir.path());
    let eval = |queries: &str| {
        run(
            &[
                "--config",
                cfg,
                "eval-heldout",
                "--before",
                "a/before.json",
                "--after",
                "a/policy.json",
                "--queries",
                queries,
                "--train-queries",
                "a/w/profiles.jsonl",
                "--out",
                "a/tally.json",
            ],
            dir.path(),
        )
    };
    let o = eval("held/profiles.jsonl");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("over 10 battles"), "{}", stdout(&o));
    let o = eval("a/w/profiles.jsonl");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("overlap"));
}

#[test]
fn synthcheck_writes_convergence_csv() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synthcheck", "--models", "4", "--cases", "3", "--seeds", "2", "--out", "s/results.csv"], dir.path());
    let csv = String::from_utf8(read(&dir.path().join("s/results.csv"))).unwrap();
    assert!(csv.starts_with("seed,mode,round,spearman"));
    assert_eq!(csv.lines().filter(|l| l.contains(",final,")).count(), 4);
    assert!(dir.path().join("s/synthcheck.effective-config.json").exists());
}
