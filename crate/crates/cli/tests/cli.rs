use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn avq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avq"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AVQ_ADMIN_TOKEN")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = avq(args, cwd);
    assert!(
        out.status.success(),
        "avq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let expected: &[(&str, &[&str])] = &[
        (
            "sample",
            &[
                "--pool",
                "--synthetic-pool",
                "--out",
                "--report",
                "--alpha",
                "--bins",
                "--intermediate-n",
                "--final-n",
                "--seed",
                "--ratios",
                "--no-balancing",
                "--config",
            ],
        ),
        ("serve", &["--store", "--bind", "--admin-token-var"]),
        ("init-stages", &["--catalog", "--study-config", "--store"]),
        ("filter", &["<STAGE>", "--store", "--server", "--admin-token-var", "--out"]),
        ("qualify", &["--store", "--server", "--admin-token-var"]),
        ("export", &["--store", "--server", "--admin-token-var", "--out"]),
        (
            "simulate",
            &["--cohort", "--plan", "--seed", "--out", "--server", "--truth", "--admin-token-var", "--emit-catalog"],
        ),
        ("analyze", &["<MOS>", "--out"]),
    ];
    for (sub, flags) in expected {
        let help = ok(&[sub, "--help"], dir.path());
        for flag in *flags {
            let line = help
                .lines()
                .find(|l| l.trim_start().starts_with(flag) || l.contains(&format!(" {flag} ")))
                .unwrap_or_else(|| panic!("{sub} --help lacks {flag}:\n{help}"));
            let described = line.split_whitespace().count() > 2
                || help.lines().skip_while(|l| *l != line).nth(1).is_some_and(|n| n.starts_with("          "));
            assert!(described, "{sub} {flag} has no description:\n{help}");
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(avq(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(avq(&["filter", "pretest", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(avq(&["filter", "warmup"], dir.path()).status.code(), Some(2));
    let missing = avq(&["filter", "pretest", "--store", "nope.jsonl"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));
    let no_token = avq(&["qualify", "--server", "http://127.0.0.1:9"], dir.path());
    assert_eq!(no_token.status.code(), Some(1));
}

#[test]
fn empty_pretest_filter_and_idempotent_init() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["simulate", "--emit-catalog", "study", "--seed", "4"], d);
    let init = ["init-stages", "--catalog", "study/catalog.csv", "--study-config", "study/study.toml", "--store", "s.jsonl"];
    ok(&init, d);
    let journal = std::fs::read(d.join("s.jsonl")).unwrap();
    assert!(ok(&init, d).contains("nothing to do"));
    assert_eq!(std::fs::read(d.join("s.jsonl")).unwrap(), journal);

    let out = ok(&["filter", "pretest", "--store", "s.jsonl", "--out", "pre.csv"], d);
    assert!(out.contains("0 submissions"), "{out}");
    let report = std::fs::read_to_string(d.join("pre.csv")).unwrap();
    assert_eq!(report.lines().count(), 1, "{report}");
    assert!(report.starts_with("submission_id,"));

    ok(&["export", "--store", "s.jsonl", "--out", "exp"], d);
    let mos = std::fs::read_to_string(d.join("exp/mos.csv")).unwrap();
    assert_eq!(mos.lines().count(), 1);

    // a qualification filter needs the pretest MOS, which is empty but present
    assert_eq!(avq(&["qualify", "--store", "s.jsonl"], d).status.code(), Some(0));
}

#[test]
fn sample_is_byte_identical_and_alpha_zero_is_proportional() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = ["sample", "--synthetic-pool", "3000", "--intermediate-n", "1000", "--final-n", "300", "--seed", "9"];
    let run = |extra: &[&str], out: &str| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out]);
        ok(&args, d);
        std::fs::read(d.join(out)).unwrap()
    };
    let a = run(&["--report", "r1.json"], "a.csv");
    let b = run(&["--report", "r2.json"], "b.csv");
    assert_eq!(a, b);
    assert_eq!(std::fs::read(d.join("r1.json")).unwrap(), std::fs::read(d.join("r2.json")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 301);

    let zero = run(&["--alpha", "0"], "zero.csv");
    let plain = run(&["--no-balancing"], "plain.csv");
    assert_eq!(zero, plain);
    assert_ne!(zero, a);

    std::fs::write(d.join("avq.toml"), "[sampler]\nalpha = 0.0\n").unwrap();
    let from_config = run(&["--config", "avq.toml"], "cfg.csv");
    assert_eq!(from_config, zero);
    let flag_wins = run(&["--config", "avq.toml", "--alpha", "0.3"], "flag.csv");
    assert_eq!(flag_wins, a);
}

#[test]
fn simulate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["simulate", "--cohort", "faithful:20", "--seed", "2", "--out", "r.json"], d);
    assert!(!out.is_empty());
    let text = std::fs::read_to_string(d.join("r.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["workers"], 20);
    assert_eq!(report["seed"], 2);
    ok(&["simulate", "--cohort", "faithful:20", "--seed", "2", "--out", "r2.json"], d);
    assert_eq!(text, std::fs::read_to_string(d.join("r2.json")).unwrap());
    assert_eq!(avq(&["simulate", "--cohort", "telepathic:3"], d).status.code(), Some(1));
}

#[test]
fn analyze_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut csv = String::from("sequence_id,mos_avqa,mos_av_vqa,mos_av_aqa,mean_audio_attention_pct,n_ratings,category\n");
    for i in 0..12 {
        let v = 1.5 + 0.25 * i as f64;
        let a = 1.2 + 0.3 * ((i * 7) % 12) as f64;
        let cat = if i % 2 == 0 { "speech" } else { "music" };
        csv.push_str(&format!("s{i:02},{v},{},{a},{},30,{cat}\n", v - 0.1, 40 + i));
    }
    std::fs::write(d.join("mos.csv"), csv).unwrap();
    ok(&["analyze", "mos.csv", "--out", "rep"], d);
    for f in ["modality.csv", "modality.json", "distribution.json", "plot_data.json", "correlation.json", "attention_by_category.json"] {
        assert!(d.join("rep").join(f).exists(), "{f} missing");
    }
    let first = std::fs::read(d.join("rep/modality.json")).unwrap();
    ok(&["analyze", "mos.csv", "--out", "rep"], d);
    assert_eq!(first, std::fs::read(d.join("rep/modality.json")).unwrap());
}

struct Serve(Child);

impl Drop for Serve {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn simulation_against_a_live_server() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("plan.toml"), "formal_groups = 2\npretest_share = 0.5\n").unwrap();
    ok(&["simulate", "--plan", "plan.toml", "--emit-catalog", "study", "--seed", "5"], d);
    ok(
        &["init-stages", "--catalog", "study/catalog.csv", "--study-config", "study/study.toml", "--store", "s.jsonl"],
        d,
    );

    let mut child = Command::new(env!("CARGO_BIN_EXE_avq"))
        .args(["serve", "--store", "s.jsonl", "--bind", "127.0.0.1:0", "--admin-token-var", "TEST_AVQ_TOKEN"])
        .current_dir(d)
        .env("TEST_AVQ_TOKEN", "tok")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let server = Serve(child);
    let url = line.trim().strip_prefix("listening on ").expect(&line).to_owned();

    let remote = Command::new(env!("CARGO_BIN_EXE_avq"))
        .args(["simulate", "--plan", "plan.toml", "--cohort", "faithful(0.3):12,random:4", "--seed", "5"])
        .args(["--server", &url, "--truth", "study/truth.json", "--out", "live.json"])
        .args(["--admin-token-var", "TEST_AVQ_TOKEN"])
        .current_dir(d)
        .env("TEST_AVQ_TOKEN", "tok")
        .output()
        .unwrap();
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("live.json")).unwrap()).unwrap();
    assert_eq!(report["workers"], 16);
    assert_eq!(report["audit_findings"], 0);

    let export = Command::new(env!("CARGO_BIN_EXE_avq"))
        .args(["export", "--server", &url, "--out", "exp", "--admin-token-var", "TEST_AVQ_TOKEN"])
        .current_dir(d)
        .env("TEST_AVQ_TOKEN", "tok")
        .output()
        .unwrap();
    assert!(export.status.success(), "{}", String::from_utf8_lossy(&export.stderr));
    drop(server);

    // the journal replays to the same export
    ok(&["export", "--store", "s.jsonl", "--out", "exp2"], d);
    for f in ["catalog.csv", "mos.csv", "filter_report.csv"] {
        assert_eq!(
            std::fs::read(d.join("exp").join(f)).unwrap(),
            std::fs::read(d.join("exp2").join(f)).unwrap(),
            "{f}"
        );
    }
    let mos = std::fs::read_to_string(d.join("exp/mos.csv")).unwrap();
    assert!(mos.lines().count() > 1);
}
