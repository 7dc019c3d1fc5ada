use std::path::Path;
use std::process::{Command, Output};

use filter_triage::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_filter-triage"))
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn run(args: &[&str]) -> String {
    ok(bin().args(args).output().unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn file_based_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = ExperimentConfig::smoke();
    cfg.finetune.train_sizes = vec![10];
    cfg.finetune.seeds = vec![1];
    let cfg_path = dir.join("exp.toml");
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let base = dir.join("base");

    let said = run(&[
        "train-baseline",
        "--config",
        p(&cfg_path),
        "--out-dir",
        p(&base),
        "--threads",
        "1",
    ]);
    assert!(said.contains("baseline clean test accuracy"));
    let ckpt = base.join("baseline.ftrg");
    let stats = base.join("stats.json");
    for f in [
        "baseline.ftrg",
        "stats.json",
        "train.ftds",
        "val.ftds",
        "test.ftds",
        "baseline_history.csv",
    ] {
        assert!(base.join(f).is_file(), "{f}");
    }

    let noisy_train = dir.join("train_awgn.ftds");
    let noisy_test = dir.join("test_awgn.ftds");
    for (i, o) in [
        (base.join("train.ftds"), &noisy_train),
        (base.join("test.ftds"), &noisy_test),
    ] {
        run(&[
            "distort",
            "--input",
            p(&i),
            "--output",
            p(o),
            "--kind",
            "awgn",
            "--sigma",
            "15",
            "--seed",
            "3",
        ]);
    }

    let assoc = dir.join("assoc");
    let model = ["--checkpoint", p(&ckpt), "--stats", p(&stats)];
    let mut args = vec!["rank-assoc"];
    args.extend(model);
    let clean_train = base.join("train.ftds");
    args.extend([
        "--clean",
        p(&clean_train),
        "--distorted",
        p(&noisy_train),
        "--layer",
        "1",
        "--pairs",
        "20",
        "--out-dir",
        p(&assoc),
    ]);
    run(&args);
    let ranking = assoc.join("ranking_layer1.csv");
    assert!(std::fs::read_to_string(&ranking)
        .unwrap()
        .starts_with("rank,filter_index,borda_score,mean_distance\n"));
    assert_eq!(
        std::fs::read_to_string(assoc.join("distances_layer1.csv"))
            .unwrap()
            .lines()
            .count(),
        21
    );

    let non = dir.join("nonassoc");
    let mut args = vec!["rank-nonassoc"];
    args.extend(model);
    args.extend([
        "--clean",
        p(&clean_train),
        "--noisy",
        p(&noisy_train),
        "--layer",
        "1",
        "--out-dir",
        p(&non),
    ]);
    assert!(run(&args).contains("exemplars"));
    assert!(non.join("exemplars_layer1.json").is_file());

    let cmp = run(&[
        "compare-rankings",
        "--a",
        p(&ranking),
        "--b",
        p(&non.join("ranking_layer1.csv")),
    ]);
    assert!(cmp.starts_with("layer,filters,k,overlap,chance_mean\n1,32,8,"), "{cmp}");

    let ft = dir.join("ft");
    let rank_arg = format!("1={}", p(&ranking));
    let mut args = vec!["finetune", "--config", p(&cfg_path)];
    args.extend(model);
    args.extend([
        "--ranking",
        &rank_arg,
        "--noisy-train",
        p(&noisy_train),
        "--train-size",
        "12",
        "--out-dir",
        p(&ft),
    ]);
    run(&args);
    let tuned = ft.join("finetuned.ftrg");
    assert!(tuned.is_file() && ft.join("finetune_history.csv").is_file());

    let cv = dir.join("curve");
    let test = base.join("test.ftds");
    let mut args = vec!["curve", "--config", p(&cfg_path)];
    args.extend(model);
    args.extend([
        "--ranking",
        &rank_arg,
        "--noisy-train",
        p(&noisy_train),
        "--clean-test",
        p(&test),
        "--noisy-test",
        p(&noisy_test),
        "--out-dir",
        p(&cv),
    ]);
    run(&args);
    assert_eq!(
        std::fs::read_to_string(cv.join("curve.csv")).unwrap().lines().count(),
        1 + 3
    );

    let inv = dir.join("inv");
    let mut args = vec!["invariance"];
    args.extend(model);
    args.extend([
        "--tuned",
        p(&tuned),
        "--clean",
        p(&test),
        "--noisy",
        p(&noisy_test),
        "--layer",
        "2",
        "--images",
        "3",
        "--out-dir",
        p(&inv),
    ]);
    let table = run(&args);
    assert_eq!(table.lines().count(), 4);
    assert!(inv.read_dir().unwrap().count() >= 7);
}

#[test]
fn smoke_run_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("smoke");
    let said = run(&["run", "--smoke", "--out-dir", p(&out)]);
    assert!(said.contains("artifacts"));
    assert!(out.join("manifest.json").is_file());

    let threaded = tmp.path().join("threaded");
    run(&["--threads", "3", "run", "--smoke", "--out-dir", p(&threaded)]);
    for f in [
        "baseline.ftrg",
        "ranking_layer1.csv",
        "ranking_layer2.csv",
        "curve.csv",
        "invariance.csv",
    ] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(threaded.join(f)).unwrap(),
            "{f}"
        );
    }

    let missing = bin().args(["run", "--out-dir", p(&out)]).output().unwrap();
    assert!(!missing.status.success());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let e = bin().args(["run", "--config", p(&bad)]).output().unwrap();
    assert!(!e.status.success());
    assert!(String::from_utf8_lossy(&e.stderr).contains("no_such_key"));
}
