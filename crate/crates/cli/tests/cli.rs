use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn embwalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embwalk"))
        .args(args)
        .env_remove("EMBWALK_THREADS")
        .output()
        .expect("spawn embwalk")
}

fn ok(args: &[&str]) -> String {
    let out = embwalk(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small encoder-decoder bundle and a 12-instance task.
fn fixture(dir: &Path) -> (String, String) {
    let bundle = dir.join("bundle");
    let task = dir.join("task.jsonl");
    ok(&[
        "synth",
        "--arch",
        "t5",
        "--vocab",
        "40",
        "--dmodel",
        "16",
        "--heads",
        "2",
        "--layers",
        "2",
        "--seed",
        "3",
        "--out",
        p(&bundle),
        "--task",
        p(&task),
        "--instances",
        "12",
    ]);
    (p(&bundle).to_owned(), p(&task).to_owned())
}

#[test]
fn verify_refactor_prints_three_deltas() {
    let out = ok(&["verify-refactor", "--seed", "4"]);
    for key in ["refactor max delta", "merge max delta", "permutation max delta"] {
        let line = out
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("{out}"));
        let v: f32 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(v <= 1e-5, "{line}");
    }
    ok(&["verify-refactor", "--dmodel", "12", "--heads", "4", "--cases", "10"]);
}

#[test]
fn baseline_eval_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, task) = fixture(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        ok(&[
            "eval",
            "--bundle",
            &bundle,
            "--task",
            &task,
            "--test",
            "baseline",
            "--out",
            p(out),
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
    assert_eq!(rec["n"], 12);
    assert_eq!(rec["normalized"], 1.0);

    let t1 = ok(&[
        "eval",
        "--bundle",
        &bundle,
        "--task",
        &task,
        "--test",
        "test1",
        "--baseline",
        p(&a),
        "--threads",
        "2",
    ]);
    let rec: serde_json::Value = serde_json::from_str(t1.trim()).unwrap();
    assert_eq!(
        rec["acc"],
        serde_json::from_slice::<serde_json::Value>(&fs::read(&a).unwrap()).unwrap()["acc"]
    );
}

#[test]
fn sweep_resume_after_interrupt_matches_a_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, task) = fixture(dir.path());
    let grid = dir.path().join("grid.json");
    fs::write(
        &grid,
        r#"{"encoding_scheme": ["concat_all_examples", "segment_each_example"],
            "NORM": ["None", "L2"], "SIMILARITY_FUNC": ["dot", "cosine"],
            "EXAMPLE_AGG_SCHEME": ["mean", "soft_cluster"]}"#,
    )
    .unwrap();
    let sweep = |results: &Path, resume: bool| {
        let mut args = vec![
            "sweep",
            "--bundle",
            &bundle,
            "--task",
            &task,
            "--test",
            "test2",
            "--grid",
            p(&grid),
            "--results",
            p(results),
        ];
        if resume {
            args.push("--resume");
        }
        ok(&args)
    };
    let fresh = dir.path().join("fresh");
    sweep(&fresh, false);
    let lines = fs::read_to_string(fresh.join("results.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16);

    let cut = dir.path().join("cut");
    fs::create_dir_all(&cut).unwrap();
    let keep: String = lines.lines().take(7).map(|l| format!("{l}\n")).collect();
    let partial = &lines.lines().nth(7).unwrap()[..20];
    fs::write(cut.join("results.jsonl"), format!("{keep}{partial}")).unwrap();
    sweep(&cut, true);
    for f in ["results.jsonl", "index.json", "summary.csv"] {
        assert_eq!(fs::read(fresh.join(f)).unwrap(), fs::read(cut.join(f)).unwrap(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(cut.join("timings.jsonl")).unwrap().lines().count(),
        9
    );
}

#[test]
fn analysis_outputs_are_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, task) = fixture(dir.path());
    let run = |tag: &str| {
        let d = dir.path().join(tag);
        fs::create_dir_all(&d).unwrap();
        let o = |name: &str| p(&d.join(name)).to_owned();
        ok(&[
            "trace-walk",
            "--bundle",
            &bundle,
            "--ids",
            "3,4,5,6",
            "--position",
            "2",
            "--out",
            &o("walk.csv"),
        ]);
        ok(&[
            "simmap",
            "--bundle",
            &bundle,
            "--task",
            &task,
            "--instance",
            "1",
            "--tag",
            "NormSA",
            "--layer",
            "1",
            "--metric",
            "normed_inner",
            "--out",
            &o("map.csv"),
        ]);
        ok(&[
            "pos-kernels",
            "--bundle",
            &bundle,
            "--stack",
            "dec",
            "--K",
            "64",
            "--out",
            &o("kernels.csv"),
        ]);
        ok(&[
            "attn-maps",
            "--bundle",
            &bundle,
            "--ids",
            "1,2,3",
            "--stack",
            "dec",
            "--cross",
            "--layer",
            "1",
            "--head",
            "1",
            "--out-prefix",
            &o("attn"),
        ]);
        ok(&[
            "decode",
            "--bundle",
            &bundle,
            "--ids",
            "7,8",
            "--steps",
            "6",
            "--policy",
            "sample",
            "--seed",
            "5",
            "--trace",
            &o("decode.csv"),
        ]);
        ok(&[
            "export-vectors",
            "--bundle",
            &bundle,
            "--what",
            "walk",
            "--ids",
            "3,4",
            "--out",
            &o("walk_vectors.csv"),
        ]);
        ok(&[
            "export-vectors",
            "--bundle",
            &bundle,
            "--what",
            "vocab",
            "--space",
            "output",
            "--out",
            &o("vocab.csv"),
        ]);
        let mut files: Vec<_> = fs::read_dir(&d).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
            .into_iter()
            .map(|f| {
                (
                    f.file_name().unwrap().to_string_lossy().into_owned(),
                    fs::read(&f).unwrap(),
                )
            })
            .collect::<Vec<_>>()
    };
    let a = run("a");
    assert_eq!(a.len(), 10);
    assert_eq!(a, run("b"));
    let map = String::from_utf8(a.iter().find(|(n, _)| n == "map.csv").unwrap().1.clone()).unwrap();
    assert!(map.starts_with("# metric=normed_inner"), "{map}");
}

#[test]
fn self_bias_reports_a_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, _) = fixture(dir.path());
    let out = ok(&["self-bias", "--bundle", &bundle, "--window", "8"]);
    let last: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    let f = last["negative_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn exit_codes_separate_usage_from_domain_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, task) = fixture(dir.path());
    let code = |args: &[&str]| embwalk(args).status.code();
    assert_eq!(code(&["eval", "--bogus"]), Some(2));
    assert_eq!(
        code(&["eval", "--bundle", "/nonexistent/bundle", "--task", &task]),
        Some(2)
    );
    assert_eq!(
        code(&["eval", "--bundle", &bundle, "--task", "/nonexistent/task.jsonl"]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "eval",
            "--bundle",
            &bundle,
            "--task",
            &task,
            "--test",
            "test1",
            "--scheme",
            "encoding_scheme=concat_all_examples,EXAMPLE_AGG_SCHEME=soft_cluster"
        ]),
        Some(1)
    );
    assert_eq!(
        code(&[
            "trace-walk",
            "--bundle",
            &bundle,
            "--ids",
            "1,2",
            "--position",
            "5",
            "--out",
            p(&dir.path().join("w.csv"))
        ]),
        Some(1)
    );
    let learned = dir.path().join("gpt");
    ok(&[
        "synth",
        "--arch",
        "gpt2",
        "--vocab",
        "20",
        "--dmodel",
        "8",
        "--heads",
        "2",
        "--layers",
        "1",
        "--out",
        p(&learned),
    ]);
    assert_eq!(
        code(&[
            "pos-kernels",
            "--bundle",
            p(&learned),
            "--out",
            p(&dir.path().join("k.csv"))
        ]),
        Some(1)
    );
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, task) = fixture(dir.path());
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_embwalk"))
            .args(["eval", "--bundle", &bundle, "--task", &task, "--test", "baseline"])
            .env("EMBWALK_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run("1"), run("3"));
}
