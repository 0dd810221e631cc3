//! End-to-end tests of the `m25d` command surface, driven in-process.

use std::fs;
use std::path::Path;

use clap::Parser;
use malleable25d::cli::{self, Cli, CliError};

fn m25d(args: &[&str]) -> i32 {
    let mut full = vec!["m25d"];
    full.extend_from_slice(args);
    cli::run(full)
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const TINY_SCENES: [&str; 6] = ["--set", "scene.height=10", "--set", "scene.width=10", "--set", "scene.scenes=6"];

const TINY_NET: [&str; 12] = [
    "--set",
    "train.iterations=4",
    "--set",
    "train.batch=2",
    "--set",
    "train.log_every=1",
    "--set",
    "net.blocks=2",
    "--set",
    "net.channels=3",
    "--set",
    "net.strided=1",
];

#[test]
fn budget_reports_nine_extra_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    assert_eq!(m25d(&["budget", "--out", &s(&out)]), cli::EXIT_OK);
    let csv = fs::read_to_string(out.join("budget.csv")).unwrap();
    let params = |kind: &str| -> u64 {
        let row = csv.lines().find(|l| l.starts_with(kind)).unwrap();
        row.split(',').nth(5).unwrap().parse().unwrap()
    };
    assert_eq!(params("malleable,") - params("hard25d,"), 9, "{csv}");
    assert!(out.join(cli::RESOLVED_CONFIG).is_file());
    let manifest = fs::read_to_string(out.join(cli::RUN_MANIFEST)).unwrap();
    assert!(manifest.lines().any(|l| l.starts_with("budget.csv ")));

    let cli = Cli::try_parse_from(["m25d", "budget", "--out", &s(&tmp.path().join("c"))]).unwrap();
    assert_eq!(cli::execute(&cli).unwrap(), cli::Outcome::Ok);
    let sweep = fs::read_to_string(tmp.path().join("c/budget_sweep.csv")).unwrap();
    for (k, line) in sweep.lines().skip(1).enumerate() {
        let overhead: u64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(overhead, 2 * (k as u64 + 1) + 3, "{line}");
    }
}

#[test]
fn zero_trials_is_a_usage_error_and_leaves_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    assert_eq!(m25d(&["gradcheck", "--out", &s(&out), "--set", "gradcheck.trials=0"]), cli::EXIT_USAGE);
    assert!(!out.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn injected_fault_fails_and_names_the_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    let code = m25d(&[
        "gradcheck",
        "--out",
        &s(&out),
        "--set",
        "gradcheck.trials=2",
        "--inject-fault",
        "flip-a",
    ]);
    assert_eq!(code, cli::EXIT_CHECK);
    let report = fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert!(report.contains("FAIL"), "{report}");
    assert!(report.contains("da"), "{report}");
}

#[test]
fn clean_gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    assert_eq!(m25d(&["gradcheck", "--out", &s(&out), "--set", "gradcheck.trials=2"]), cli::EXIT_OK);
    let report = fs::read_to_string(out.join("gradcheck.txt")).unwrap();
    assert!(!report.contains("FAIL"), "{report}");
}

#[test]
fn missing_manifest_is_an_io_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere/manifest.txt");
    let set = format!("data.manifest={}", s(&missing));
    let out = tmp.path().join("t");
    let cli = Cli::try_parse_from(["m25d", "train", "--out", &s(&out), "--set", &set]).unwrap();
    let err = cli::execute(&cli).unwrap_err();
    assert_eq!(err.exit_code(), cli::EXIT_IO);
    assert!(err.to_string().contains(&s(&missing)), "{err}");
    assert!(!out.exists());
    assert_eq!(m25d(&["train", "--out", &s(&out), "--set", &set]), cli::EXIT_IO);
}

#[test]
fn unknown_keys_and_bad_values_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(&tmp.path().join("x"));
    assert_eq!(m25d(&["budget", "--out", &out, "--set", "budget.nope=1"]), cli::EXIT_USAGE);
    assert_eq!(m25d(&["budget", "--out", &out, "--set", "noequals"]), cli::EXIT_USAGE);
    assert_eq!(m25d(&["budget", "--out", &out, "--set", "budget.kernels=abc"]), cli::EXIT_USAGE);
    assert_eq!(m25d(&["train", "--out", &out, "--set", "gradcheck.trials=3"]), cli::EXIT_USAGE);
    assert_eq!(m25d(&["frobnicate"]), cli::EXIT_USAGE);
    let cli = Cli::try_parse_from(["m25d", "budget", "--out", &out, "--set", "budget.nope=1"]).unwrap();
    assert!(matches!(cli::execute(&cli), Err(CliError::Usage(_))));
    assert!(!Path::new(&out).exists());
}

#[test]
fn help_lists_every_key() {
    let mut cmd = cli::command();
    for name in cli::SUBCOMMANDS {
        let sub = cmd.find_subcommand_mut(name).unwrap();
        let help = sub.render_long_help().to_string();
        for (key, _) in cli::schema(name).unwrap().entries() {
            assert!(help.contains(key), "`{name} --help` does not mention {key}");
        }
    }
    assert_eq!(m25d(&["--help"]), cli::EXIT_OK);
}

#[test]
fn non_empty_out_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("busy");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    assert_eq!(m25d(&["budget", "--out", &s(&out)]), cli::EXIT_USAGE);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);

    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(m25d(&["budget", "--out", &s(&empty)]), cli::EXIT_OK);
}

#[test]
fn resolved_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("one");
    assert_eq!(
        m25d(&["budget", "--out", &s(&first), "--set", "budget.kernels=6", "--set", "budget.c_in=7"]),
        cli::EXIT_OK
    );
    let second = tmp.path().join("two");
    let config = first.join(cli::RESOLVED_CONFIG);
    assert_eq!(m25d(&["budget", "--out", &s(&second), "--config", &s(&config)]), cli::EXIT_OK);
    for file in [cli::RESOLVED_CONFIG, "budget.csv", "budget_sweep.csv", cli::RUN_MANIFEST] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
    let resolved = fs::read_to_string(&config).unwrap();
    assert!(resolved.contains("budget.kernels = 6") || resolved.contains("budget.kernels=6"), "{resolved}");
}

#[test]
fn seed_flag_sets_every_seed_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let out = s(&out);
    let args: Vec<&str> = ["train", "--out", &out, "--seed", "41"]
        .into_iter()
        .chain(TINY_SCENES)
        .chain(TINY_NET)
        .collect();
    let cli = Cli::try_parse_from(std::iter::once("m25d").chain(args.iter().copied())).unwrap();
    let kv = cli::resolve("train", cli.command.common()).unwrap();
    let seeds: Vec<_> = kv.entries().iter().filter(|(k, _)| k.ends_with(".seed")).collect();
    assert!(seeds.len() >= 3, "{seeds:?}");
    assert!(seeds.iter().all(|(_, v)| v == "41"), "{seeds:?}");

    let set = cli::resolve(
        "train",
        &cli::Common {
            seed: Some(41),
            sets: vec!["net.seed=5".into()],
            ..cli.command.common().clone()
        },
    )
    .unwrap();
    assert_eq!(set.get("net.seed"), Some("5"));
    assert_eq!(set.get("train.seed"), Some("41"));
}

#[test]
fn synth_then_train_then_analyses() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let data_dir = s(&data);
    let args: Vec<&str> = ["synth", "--out", &data_dir].into_iter().chain(TINY_SCENES).collect();
    assert_eq!(m25d(&args), cli::EXIT_OK);
    let manifest = data.join("manifest.txt");
    assert!(manifest.is_file());

    let data_set = format!("data.manifest={}", s(&manifest));
    let train = root.join("train");
    let train_dir = s(&train);
    let args: Vec<&str> = ["train", "--out", &train_dir, "--set", &data_set].into_iter().chain(TINY_NET).collect();
    assert_eq!(m25d(&args), cli::EXIT_OK);
    for f in ["checkpoint/net.txt", "log.csv", "eval.txt"] {
        assert!(train.join(f).is_file(), "{f}");
    }
    let eval = fs::read_to_string(train.join("eval.txt")).unwrap();
    assert!(eval.contains("mean_rf_width"), "{eval}");

    let ck = s(&train.join("checkpoint"));
    let rf = root.join("rf");
    assert_eq!(m25d(&["export-rf", "--out", &s(&rf), "--set", &format!("rf.checkpoint={ck}")]), cli::EXIT_OK);
    assert!(rf.join("rf_widths.csv").is_file());

    let hist = root.join("hist");
    let code = m25d(&["assign-hist", "--out", &s(&hist), "--set", &format!("hist.checkpoint={ck}"), "--set", &data_set]);
    assert_eq!(code, cli::EXIT_OK);
    assert!(hist.join("assign_hist.csv").is_file());

    let dump = root.join("dump");
    let code = m25d(&["dump-features", "--out", &s(&dump), "--set", &format!("dump.checkpoint={ck}"), "--set", &data_set]);
    assert_eq!(code, cli::EXIT_OK);
    for f in ["kernel0.t4", "kernel2.t4", "output.t4"] {
        assert!(dump.join(f).is_file(), "{f}");
    }
}

#[test]
fn ablation_keeps_frozen_columns_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ab");
    let out_dir = s(&out);
    let args: Vec<&str> = ["ablate", "--out", &out_dir]
        .into_iter()
        .chain(TINY_SCENES)
        .chain(TINY_NET)
        .collect();
    assert_eq!(m25d(&args), cli::EXIT_OK);
    assert!(out.join("ablation.csv").is_file());

    let read = |dir: &str| -> (Vec<String>, Vec<Vec<String>>) {
        let text = fs::read_to_string(out.join(dir).join("log.csv")).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap().split(',').map(String::from).collect();
        let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        (header, rows)
    };
    let rfield_cols = |header: &[String]| -> Vec<usize> {
        header
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("block"))
            .map(|(i, _)| i)
            .collect()
    };

    let (header, rows) = read("freeze-a-t-b");
    let cols = rfield_cols(&header);
    assert!(!cols.is_empty() && rows.len() >= 2);
    for &c in &cols {
        assert!(rows.iter().all(|r| r[c] == rows[0][c]), "{} changed while frozen", header[c]);
    }

    let (header, rows) = read("freeze-none");
    let cols = rfield_cols(&header);
    assert!(
        cols.iter().any(|&c| rows.iter().any(|r| r[c] != rows[0][c])),
        "nothing moved without freezing"
    );
}
