use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gradval_core::lab::{generate_world, Redundancy};
use gradval_core::store::save_gradient_set;

fn gradval(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradval"))
        .args(args)
        .env_remove("GRADVAL_THREADS")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn input(dir: &Path) -> String {
    let world = generate_world(5, 6, Redundancy::Independent, 1).unwrap();
    let path = dir.join("in.gdvx");
    save_gradient_set(&world.set, &path).unwrap();
    path.display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn worked_example_kmm_matches_hand_solution() {
    let o = gradval(&[
        "score",
        "--preset",
        "paper-example",
        "--method",
        "kmm",
        "--k-budget",
        "1.9",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("name,score"));
    let rows: Vec<(String, f64)> = lines
        .map(|l| {
            let (n, s) = l.split_once(',').unwrap();
            (n.to_string(), s.parse().unwrap())
        })
        .collect();
    assert_eq!(rows[0].0, "g3");
    assert!((rows[0].1 - 0.9).abs() < 1e-6);
    let pair: f64 = rows[1..].iter().map(|r| r.1).sum();
    assert!((pair - 1.0).abs() < 1e-6);
    // summary goes to stderr when the CSV is on stdout
    assert!(!stderr(&o).is_empty());
}

#[test]
fn worked_example_one_step_scores() {
    let o = gradval(&["score", "--preset", "paper-example", "--method", "one-step"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = stdout(&o);
    assert!(
        csv.contains("g1,1.1\n") && csv.contains("g2,1.1\n") && csv.contains("g3,1\n"),
        "{csv}"
    );
}

#[test]
fn usage_errors_exit_two() {
    let cases: &[&[&str]] = &[
        &[
            "score",
            "--preset",
            "paper-example",
            "--method",
            "kmm",
            "--gamma",
            "0",
        ],
        &["score", "--preset", "paper-example", "--method", "kmm"],
        &[
            "score",
            "--preset",
            "paper-example",
            "--method",
            "kmm",
            "--k-budget",
            "-1",
        ],
        &[
            "score",
            "--preset",
            "paper-example",
            "--method",
            "kmm",
            "--gamma",
            "1",
            "--k-budget",
            "1",
        ],
        &["score", "--preset", "nope", "--method", "one-step"],
        &["score", "--method", "one-step"],
        &[
            "score",
            "--preset",
            "paper-example",
            "--method",
            "datamodel-uniform",
            "--rho",
            "1.5",
        ],
        &["score", "--preset", "paper-example", "--method", "bogus"],
        &["lab", "protocol", "--steps", "0"],
        &["lab", "protocol", "--world", "spiral"],
        &["lab", "stability", "--preset", "huge"],
        &["lab", "bound", "--delta", "2"],
        &["frobnicate"],
    ];
    for args in cases {
        let o = gradval(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error"), "{args:?}: {}", stderr(&o));
        assert!(o.stdout.is_empty(), "{args:?}");
    }
}

#[test]
fn data_errors_exit_one_with_error_name() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.gdvx").display().to_string();
    let o = gradval(&["score", "--input", &missing, "--method", "one-step"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("IoError: "), "{}", stderr(&o));

    let garbage = write(dir.path(), "bad.gdvx", "GDVX but not really");
    let o = gradval(&[
        "score",
        "--input",
        garbage.to_str().unwrap(),
        "--method",
        "one-step",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("FormatError: "), "{}", stderr(&o));

    let o = gradval(&["lab", "faithfulness", "--n", "40", "--k", "20"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("BudgetError: "), "{}", stderr(&o));
}

#[test]
fn select_writes_ranked_selection() {
    let dir = tempfile::tempdir().unwrap();
    let scores = write(dir.path(), "s.csv", "name,score\na,0.5\nb,-1\nc,2\n");
    let o = gradval(&[
        "select",
        "--scores",
        scores.to_str().unwrap(),
        "--k-grid",
        "1,3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("k,rank,name,mixing_weight"));
    // only positively scored datasets are selected
    assert!(!csv.contains(",b,"));
    assert!(csv.contains("1,1,c,1\n"), "{csv}");
    assert!(csv.contains("3,2,a,0.5\n"), "{csv}");
}

#[test]
fn out_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let input = input(dir.path());
    let out = dir.path().join("scores.csv");
    let o = gradval(&[
        "score",
        "--input",
        &input,
        "--method",
        "one-step",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(fs::read_to_string(&out)
        .unwrap()
        .starts_with("name,score\n"));
    let manifest = fs::read_to_string(dir.path().join("scores.csv.manifest.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(json["command"], "score");
    assert_eq!(json["config"]["method"], "one-step");
    assert_eq!(json["timestamp"], "2023-11-14T22:13:20Z");
    let digest = json["inputs"][&input].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(json["version"].is_string());
}

#[test]
fn config_file_supplies_defaults_that_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "run.conf",
        "# bound settings\nn = 20\nm = 4096\n",
    );
    let from_config = gradval(&["lab", "bound", "--config", config.to_str().unwrap()]);
    let explicit = gradval(&["lab", "bound", "--n", "20", "--m", "4096"]);
    assert_eq!(
        from_config.status.code(),
        Some(0),
        "{}",
        stderr(&from_config)
    );
    assert_eq!(stdout(&from_config), stdout(&explicit));
    let overridden = gradval(&[
        "lab",
        "bound",
        "--config",
        config.to_str().unwrap(),
        "--n",
        "10",
        "--m",
        "1024",
    ]);
    assert_eq!(stdout(&overridden), stdout(&gradval(&["lab", "bound"])));

    let broken = write(dir.path(), "broken.conf", "n 20\n");
    let o = gradval(&["lab", "bound", "--config", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bound_prints_plug_in_value() {
    let o = gradval(&["lab", "bound"]);
    assert_eq!(o.status.code(), Some(0));
    let value: f64 = stdout(&o).trim().parse().unwrap();
    assert!(value > 0.0 && value.is_finite());
    let larger_m: f64 = stdout(&gradval(&["lab", "bound", "--m", "1048576"]))
        .trim()
        .parse()
        .unwrap();
    assert!(larger_m < value);
}

#[test]
fn thread_count_does_not_change_results() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_gradval"))
            .args([
                "lab",
                "stability",
                "--preset",
                "quick",
                "--replicas",
                "4",
                "--seed",
                "3",
            ])
            .env("GRADVAL_THREADS", threads)
            .output()
            .unwrap()
    };
    let one = run("1");
    let four = run("4");
    assert_eq!(one.status.code(), Some(0), "{}", stderr(&one));
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(run("lots").status.code(), Some(2));
}

#[test]
fn evaluate_compares_score_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = input(dir.path());
    let good = dir.path().join("good.csv");
    let o = gradval(&[
        "score",
        "--input",
        &input,
        "--method",
        "one-step",
        "--out",
        good.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let rand = dir.path().join("rand.csv");
    gradval(&[
        "score",
        "--input",
        &input,
        "--method",
        "random",
        "--out",
        rand.to_str().unwrap(),
    ]);
    let both = format!("{},{}", good.display(), rand.display());
    let o = gradval(&[
        "evaluate", "--input", &input, "--scores", &both, "--k-grid", "1,2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("method,k,metric,borda,best_k"));
    assert!(csv.lines().any(|l| l.starts_with("good,1,")));
    assert!(csv.lines().any(|l| l.starts_with("rand,2,")));
}

#[test]
fn gram_dump_lists_beta_and_kernel() {
    let o = gradval(&["gram-dump", "--preset", "paper-example"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "name,beta,g1,g2,g3");
    assert_eq!(lines[3], "g3,1,0.1,0.1,1");
}

#[test]
fn lab_commands_write_csv_only_with_out() {
    let dir = tempfile::tempdir().unwrap();
    let o = gradval(&[
        "lab",
        "faithfulness",
        "--world",
        "paper-example",
        "--k",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!stdout(&o).contains("subset,utility"));
    let out = dir.path().join("faith.csv");
    let o = gradval(&[
        "lab",
        "faithfulness",
        "--world",
        "paper-example",
        "--k",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(out).unwrap();
    assert!(csv.starts_with("subset,utility,"), "{csv}");
    assert!(csv.contains("g1+g3,0.995"), "{csv}");
}

#[test]
fn faithfulness_accepts_preset_spelling() {
    let o = gradval(&[
        "lab",
        "faithfulness",
        "--preset",
        "paper-example",
        "--k",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        o.stdout,
        gradval(&[
            "lab",
            "faithfulness",
            "--world",
            "paper-example",
            "--k",
            "2"
        ])
        .stdout
    );
    assert!(stdout(&o).contains("one_step_corrected"), "{}", stdout(&o));
}

#[test]
fn select_caps_at_positive_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = write(dir.path(), "s.csv", "name,score\na,1\nb,1\nc,-0.5\n");
    let o = gradval(&[
        "select",
        "--scores",
        scores.to_str().unwrap(),
        "--k-grid",
        "1,3,5",
        "--softmax-temp",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    let count = |k: &str| {
        csv.lines()
            .skip(1)
            .filter(|l| l.split(',').next() == Some(k))
            .count()
    };
    assert_eq!((count("1"), count("3"), count("5")), (1, 2, 2));
    assert!(
        csv.contains("3,1,a,0.5\n") && csv.contains("3,2,b,0.5\n"),
        "{csv}"
    );

    let missing = dir.path().join("none.csv");
    let o = gradval(&[
        "select",
        "--scores",
        missing.to_str().unwrap(),
        "--k-grid",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn random_scores_are_reproducible() {
    let a = gradval(&[
        "score",
        "--preset",
        "paper-example",
        "--method",
        "random",
        "--seed",
        "7",
    ]);
    let b = gradval(&[
        "score",
        "--preset",
        "paper-example",
        "--method",
        "random",
        "--seed",
        "7",
    ]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}
