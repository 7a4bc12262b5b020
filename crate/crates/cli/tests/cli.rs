use std::fs;
use std::path::{Path, PathBuf};

use lambda_maml::episodes::encode_cifar_records;
use lambda_maml_cli::error::{EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_USAGE};
use lambda_maml_cli::{execute, run, CliError, Outcome};

fn exec(args: &[&str]) -> Result<Outcome, CliError> {
    let mut argv = vec!["lambda-maml"];
    argv.extend_from_slice(args);
    execute(argv)
}

fn code(args: &[&str]) -> i32 {
    let mut argv = vec!["lambda-maml"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 14] = [
    "--synthetic", "--synth-classes", "12", "--synth-split", "6,3,3", "--synth-images", "20",
    "--filters", "4", "--n-way", "2", "--k-query", "5", "--seed",
];

fn tiny(extra: &[&str], out: &Path) -> Vec<String> {
    extra
        .iter()
        .chain(&TINY)
        .chain(&["3", "--out-dir", s(out)])
        .map(|a| a.to_string())
        .collect()
}

fn exec_owned(args: &[String]) -> Result<Outcome, CliError> {
    exec(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let out = tempfile::tempdir().unwrap();
    let err = exec(&["eval", "--out-dir", s(out.path())]).err().unwrap();
    assert_eq!(err.code, EXIT_USAGE);
    assert!(err.message.contains("--checkpoint"), "{}", err.message);
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
    assert!(exec(&["report"]).err().unwrap().message.contains("--records"));
}

#[test]
fn errors_map_to_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&["train", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(code(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(code(&["train", "--pattern", "1,1", "--out-dir", out]), EXIT_CONFIG);
    assert_eq!(code(&["train", "--pattern", "0,0,0,0,0", "--out-dir", out]), EXIT_CONFIG);
    assert_eq!(code(&["train", "--steps", "1,2", "--out-dir", out]), EXIT_CONFIG);
    assert_eq!(code(&["train", "--synth-split", "1,2", "--out-dir", out]), EXIT_CONFIG);
    assert_eq!(code(&["search", "--reference-steps", "7", "--out-dir", out]), EXIT_CONFIG);
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&["report", "--records", s(&missing), "--out-dir", out]), EXIT_IO);
    let cfg = dir.path().join("missing.toml");
    assert_eq!(code(&["train", "--config", s(&cfg), "--out-dir", out]), EXIT_IO);

    let cifar = dir.path().join("cifar");
    fs::create_dir(&cifar).unwrap();
    let e = exec(&["train", "--cifar", s(&cifar), "--out-dir", out]).err().unwrap();
    assert_eq!(e.code, EXIT_CONFIG);
    assert!(e.message.contains("--manifest"), "{}", e.message);
    let manifest = dir.path().join("split.txt");
    fs::write(&manifest, "train:\napple\n").unwrap();
    assert_eq!(code(&["train", "--cifar", s(&cifar), "--manifest", s(&manifest), "--out-dir", out]), EXIT_DATA);

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"LMAMLCKP not really a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&bad), "--out-dir", out]), EXIT_CHECKPOINT);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[meta]\nseed = 11\nepochs = 1\ntasks_per_epoch = 2\nmeta_batch = 2\nval_episodes = 2\nsteps = 1\n\
         [model]\nfilters = 2\n[episode]\nn_way = 2\nk_query = 2\n\
         [data]\nclasses = 8\nsplit = [4, 2, 2]\nimages_per_class = 6\n",
    )
    .unwrap();
    let out = exec(&["train", "--config", s(&cfg), "--filters", "3", "--out-dir", s(dir.path())]).unwrap();
    let resolved: toml::Value = toml::from_str(&fs::read_to_string(out.run_dir.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved["model"]["filters"].as_integer(), Some(3));
    assert_eq!(resolved["meta"]["seed"].as_integer(), Some(11));
    assert_eq!(resolved["command"].as_str(), Some("train"));
    assert!(out.run_dir.starts_with(dir.path()));
    assert!(out.run_dir.file_name().unwrap().to_str().unwrap().starts_with("train-"));

    for bad in ["[meta]\nunknown_knob = 1\n", "mystery = true\n", "[meta]\nsteps = \"ten\"\n"] {
        fs::write(&cfg, bad).unwrap();
        let err = exec(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]).err().unwrap();
        assert_eq!(err.code, EXIT_CONFIG, "{bad}");
    }
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("from-env");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("out_dir = {:?}\n", s(&dir.path().join("from-file")))).unwrap();
    // the only test in this binary that leaves --out-dir unset
    std::env::set_var(lambda_maml_cli::OUT_DIR_ENV, &root);
    let records = dir.path().join("sweep.csv");
    fs::write(&records, "steps,pattern,a,time_ms,flop_cost\n1,\"1,1,1,1,1\",0.5,2.0,10\n").unwrap();
    let out = exec(&["report", "--records", s(&records), "--reference-steps", "1", "--config", s(&cfg)]).unwrap();
    std::env::remove_var(lambda_maml_cli::OUT_DIR_ENV);
    assert!(out.run_dir.starts_with(&root), "{}", out.run_dir.display());
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let args = tiny(&["train", "--epochs", "2", "--tasks-per-epoch", "4", "--meta-batch", "2", "--val-episodes", "3", "--steps", "1"], dir.path());
    let out = exec_owned(&args).unwrap();
    for f in ["model.ckpt", "train_log.csv", "config.toml"] {
        assert!(out.run_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.run_dir.join("train_log.csv")).unwrap().lines().count(), 3);
    assert!(out.summary.starts_with("train: 2 epochs"), "{}", out.summary);

    // eval in both precisions, and a second run lands in a separate directory
    let ckpt = out.run_dir.join("model.ckpt");
    let e64 = exec_owned(&tiny(&["eval", "--checkpoint", s(&ckpt), "--episodes", "4", "--steps", "1"], dir.path())).unwrap();
    let e32 = exec_owned(&tiny(
        &["eval", "--checkpoint", s(&ckpt), "--episodes", "4", "--steps", "1", "--precision", "f32"],
        dir.path(),
    ))
    .unwrap();
    assert_ne!(e64.run_dir, e32.run_dir);
    let rows = fs::read_to_string(e64.run_dir.join("eval.csv")).unwrap();
    assert_eq!(rows.lines().count(), 5);

    // a checkpoint for 32x32 inputs does not fit 16x16 data
    let mismatch = exec_owned(&tiny(&["eval", "--checkpoint", s(&ckpt), "--image-size", "32"], dir.path()));
    assert_eq!(mismatch.err().unwrap().code, EXIT_CONFIG);
}

const GRID: &str = "steps,pattern,1-shot 2-way,5-shot 2-way,1-shot 5-way,5-shot 5-way,time_ms,flop_cost
3,\"0,1,1,1,1\",0.747,0.832,0.493,0.697,13.3,3
3,\"1,0,1,1,1\",0.766,0.859,0.493,0.698,13.9,3
3,\"1,1,1,1,1\",0.766,0.872,0.493,0.7,15,3
5,\"0,1,1,1,1\",0.752,0.839,0.515,0.699,20,5
5,\"1,0,1,1,1\",0.769,0.862,0.514,0.701,21.1,5
5,\"1,1,1,1,1\",0.77,0.874,0.516,0.702,22.6,5
10,\"0,1,1,1,1\",0.754,0.846,0.517,0.701,36.1,10
10,\"1,0,1,1,1\",0.771,0.866,0.517,0.701,38.6,10
10,\"1,1,1,1,1\",0.772,0.876,0.517,0.703,41.5,10
";

#[test]
fn search_from_records() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("sweep.csv");
    fs::write(&records, GRID).unwrap();
    let out = exec(&["search", "--threshold", "0.07", "--steps", "1,3,5,10", "--records", s(&records), "--out-dir", s(dir.path())]).unwrap();
    assert!(out.summary.contains("9 of 9 records admissible"), "{}", out.summary);
    let md = fs::read_to_string(out.run_dir.join("search.md")).unwrap();
    assert!(md.contains("| 3 | 1,0,1,1,1 | 76.6 | 85.9 | 49.3 | 69.8 | 13.9 | 3.0 |"), "{md}");

    let floors = exec(&["search", "--records", s(&records), "--floors", "0.76,0,0,0", "--out-dir", s(dir.path())]).unwrap();
    assert!(floors.summary.contains("selected 1,0,1,1,1 at P=3"), "{}", floors.summary);

    // only the listed step counts take part
    let narrow = exec(&["search", "--records", s(&records), "--steps", "5,10", "--out-dir", s(dir.path())]).unwrap();
    assert!(narrow.summary.contains("selected 0,1,1,1,1 at P=5"), "{}", narrow.summary);
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = exec_owned(&tiny(
        &["sweep", "--episodes", "2", "--patterns", "full;trivial", "--steps", "1,2", "--warmup", "0", "--ways", "2", "--shots", "1,2"],
        dir.path(),
    ))
    .unwrap();
    let csv = fs::read_to_string(sweep.run_dir.join("sweep.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "steps,pattern,1-shot 2-way,2-shot 2-way,time_ms,flop_cost");
    assert_eq!(csv.lines().count(), 1 + 2 * 6);

    let records = sweep.run_dir.join("sweep.csv");
    let report = exec(&["report", "--records", s(&records), "--reference-steps", "2", "--out-dir", s(dir.path())]).unwrap();
    let md = fs::read_to_string(report.run_dir.join("search.md")).unwrap();
    assert!(md.lines().count() >= 3);
    assert!(report.run_dir.join("best_one_step.csv").is_file());
}

#[test]
fn bench_writes_timings() {
    let dir = tempfile::tempdir().unwrap();
    let out = exec_owned(&tiny(
        &["bench", "--episodes", "3", "--warmup", "1", "--patterns", "1,0,1,1,1;full", "--steps", "1,3", "--precision", "f32"],
        dir.path(),
    ))
    .unwrap();
    let timing = fs::read_to_string(out.run_dir.join("timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 5);
    assert!(timing.lines().skip(1).all(|l| l.ends_with(",false")));
}

fn fake_cifar(dir: &Path) -> PathBuf {
    let cifar = dir.join("cifar");
    fs::create_dir(&cifar).unwrap();
    let mut images = Vec::new();
    for fine in 0..8u8 {
        for i in 0..6u8 {
            let v: Vec<u8> = (0..3072).map(|k| (k as u8).wrapping_mul(fine + 1).wrapping_add(i)).collect();
            images.push((0u8, fine, v));
        }
    }
    let refs: Vec<(u8, u8, &[u8])> = images.iter().map(|(c, f, v)| (*c, *f, v.as_slice())).collect();
    fs::write(cifar.join("train.bin"), encode_cifar_records(&refs)).unwrap();
    cifar
}

#[test]
fn cifar_source_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cifar = fake_cifar(dir.path());
    let manifest = dir.path().join("split.txt");
    fs::write(&manifest, "train:\napple\naquarium_fish\nbaby\nbear\nval:\nbeaver\nbed\n# held out\ntest:\nbee\nbeetle\n").unwrap();
    let out = exec(&[
        "train", "--cifar", s(&cifar), "--manifest", s(&manifest), "--filters", "2", "--n-way", "2",
        "--k-query", "2", "--epochs", "1", "--tasks-per-epoch", "2", "--meta-batch", "2", "--val-episodes", "2",
        "--steps", "1", "--out-dir", s(dir.path()),
    ])
    .unwrap();
    let resolved = fs::read_to_string(out.run_dir.join("config.toml")).unwrap();
    assert!(resolved.contains("source = \"cifar\""));
    let ckpt = out.run_dir.join("model.ckpt");
    let eval = exec(&[
        "eval", "--cifar", s(&cifar), "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--k-query", "2",
        "--episodes", "3", "--steps", "1", "--out-dir", s(dir.path()),
    ])
    .unwrap();
    assert!(eval.summary.contains("3 episodes"), "{}", eval.summary);
}
