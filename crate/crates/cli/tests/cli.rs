use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use simclr_s2_core::model::{load_checkpoint, Stage};
use simclr_s2_core::raster::{DatasetManifest, Label, ManifestEntry, Split};

const SUBCOMMANDS: [&str; 12] = [
    "synth",
    "stats",
    "split",
    "pretrain",
    "finetune",
    "distill",
    "train-supervised",
    "evaluate",
    "predict",
    "study-precision",
    "study-recall",
    "report",
];

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_simclr-s2"));
    cmd.env_remove("SIMCLR_S2_OUT");
    cmd
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().expect("spawn")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let output = run(out, args);
    assert!(output.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&output.stderr));
    String::from_utf8(output.stdout).unwrap()
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

fn p(path: PathBuf) -> String {
    path.to_string_lossy().into_owned()
}

#[test]
fn help_on_every_subcommand() {
    let top = bin().arg("--help").output().unwrap();
    assert_eq!(code(&top), 0);
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in SUBCOMMANDS {
        assert!(text.contains(sub), "top-level help lists {sub}");
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(code(&out), 0, "{sub} --help");
        let help = String::from_utf8_lossy(&out.stdout);
        for flag in ["--out", "--seed", "--config"] {
            assert!(help.contains(flag), "{sub} --help documents {flag}");
        }
    }
    let pretrain = String::from_utf8(bin().args(["pretrain", "--help"]).output().unwrap().stdout).unwrap();
    for flag in
        ["--manifest", "--encoder", "--epochs", "--batch-size", "--lr", "--optimizer", "--temperature", "--proj-dim"]
    {
        assert!(pretrain.contains(flag), "pretrain --help documents {flag}");
    }
}

#[test]
fn invalid_requests_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin().arg("frobnicate").output().unwrap()), 1);
    assert_eq!(code(&bin().args(["synth", "--unknown-flag"]).output().unwrap()), 1);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "seed = 1\n[pretrain]\nepochz = 3\n").unwrap();
    let out = run(dir.path(), &["--config", &p(config), "synth"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&run(dir.path(), &["synth", "--labeled", "5"])), 1);
    assert_eq!(code(&run(dir.path(), &["pretrain"])), 1, "no manifest given");
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ckpt");
    std::fs::write(&bogus, b"not a checkpoint").unwrap();
    let manifest = dir.path().join("m.tsv");
    DatasetManifest::new(vec![ManifestEntry::labeled("missing.msc", Label::Irrigated)])
        .unwrap()
        .save(&manifest)
        .unwrap();
    let out = run(dir.path(), &["evaluate", "--manifest", &p(manifest), "--checkpoint", &p(bogus)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["--seed", "7", "synth", "--unlabeled", "20", "--labeled", "10", "--size", "8"];
    let (x, y) = (ok(a.path(), &args), ok(b.path(), &args));
    assert!(x.starts_with("digest="));
    assert_eq!(x, y);
    let z = ok(c.path(), &["--seed", "8", "synth", "--unlabeled", "20", "--labeled", "10", "--size", "8"]);
    assert_ne!(x, z);
    let manifest = DatasetManifest::load(&a.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.len(), 30);
    let listed = std::fs::read_to_string(a.path().join("artifacts.sha256")).unwrap();
    assert_eq!(listed.lines().count(), 31);
}

#[test]
fn split_one_percent_of_full_pool() {
    let dir = tempfile::tempdir().unwrap();
    let entries = (0..19024)
        .map(|i| {
            ManifestEntry::labeled(
                format!("chips/c{i}.msc"),
                if i % 2 == 0 { Label::Irrigated } else { Label::NotIrrigated },
            )
        })
        .collect();
    let manifest = dir.path().join("data").join("manifest.tsv");
    std::fs::create_dir_all(manifest.parent().unwrap()).unwrap();
    DatasetManifest::new(entries).unwrap().save(&manifest).unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&out, &["split", "--manifest", &p(manifest), "--fraction", "0.01"]);
    assert!(stdout.contains("train=190"), "{stdout}");
    let train = DatasetManifest::load(&out.join("train.tsv")).unwrap();
    assert_eq!(train.len(), 190);
    assert_eq!(train.entries.iter().filter(|e| e.label == Some(Label::Irrigated)).count(), 95);
    assert!(train.entries.iter().all(|e| e.split == Some(Split::Train) && e.path.starts_with("../data/chips/")));
}

/// synth -> stats -> split -> pretrain -> finetune -> distill ->
/// train-supervised -> evaluate/predict -> studies -> report, into `out`.
fn pipeline(out: &Path) -> String {
    ok(
        out,
        &[
            "--seed",
            "3",
            "synth",
            "--unlabeled",
            "48",
            "--labeled",
            "32",
            "--size",
            "16",
            "--class-signal",
            "0.9",
            "--regions",
            "north,south",
        ],
    );
    let manifest = p(out.join("manifest.tsv"));
    ok(out, &["stats", "--manifest", &manifest]);
    ok(out, &["split", "--manifest", &manifest, "--fraction", "0.5", "--holdout-fraction", "0.4"]);
    let (train, holdout) = (p(out.join("train.tsv")), p(out.join("holdout.tsv")));
    let stats = p(out.join("band_stats.tsv"));
    let stage = ["--epochs", "2", "--batch-size", "16", "--lr", "0.002"];
    let mut args = vec![
        "--seed",
        "3",
        "pretrain",
        "--manifest",
        &manifest,
        "--encoder",
        "micro",
        "--stats",
        &stats,
        "--proj-dim",
        "8",
    ];
    args.extend(stage);
    ok(out, &args);
    let pre = p(out.join("pretrain.ckpt"));
    let mut args = vec!["--seed", "3", "finetune", "--manifest", &train, "--checkpoint", &pre];
    args.extend(stage);
    ok(out, &args);
    let ft = p(out.join("finetune.ckpt"));
    let mut args = vec!["--seed", "3", "distill", "--manifest", &manifest, "--teacher", &ft];
    args.extend(stage);
    ok(out, &args);
    let mut args =
        vec!["--seed", "3", "train-supervised", "--manifest", &train, "--encoder", "micro", "--stats", &stats];
    args.extend(stage);
    ok(out, &args);
    let sup = p(out.join("supervised.ckpt"));
    let dist = p(out.join("distill.ckpt"));
    let metrics = ok(out, &["evaluate", "--manifest", &holdout, "--checkpoint", &dist]);
    assert!(metrics.starts_with("precision="), "{metrics}");
    ok(out, &["predict", "--manifest", &holdout, "--checkpoint", &ft]);
    let pair = format!("16={ft},{sup}");
    let table = ok(out, &["study-recall", "--manifest", &holdout, "--pair", &pair]);
    assert!(table.contains("| Country | Training data (num records) |"), "{table}");
    assert!(table.contains("| north | 16 |"), "{table}");
    let rendered = ok(out, &["report", "--input", &p(out.join("study_recall.csv")), "--format", "csv"]);
    assert_eq!(rendered, std::fs::read_to_string(out.join("study_recall.csv")).unwrap());
    ok(out, &["report", "--input", &p(out.join("study_recall.csv")), "--note", "synthetic", "--output", "recall.md"]);
    std::fs::read_to_string(out.join("artifacts.sha256")).unwrap()
}

#[test]
fn end_to_end_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    assert_eq!(first, pipeline(b.path()), "identical seeds give identical artifact digests");

    let load = |name: &str| load_checkpoint(&a.path().join(name)).unwrap();
    let (pre, ft, dist, sup) =
        (load("pretrain.ckpt"), load("finetune.ckpt"), load("distill.ckpt"), load("supervised.ckpt"));
    assert_eq!(pre.provenance().lineage, [Stage::Pretrain]);
    assert_eq!(ft.provenance().lineage, [Stage::Pretrain, Stage::Finetune]);
    assert_eq!(ft.provenance().source.as_deref(), Some(pre.id().as_str()));
    assert_eq!(dist.provenance().lineage, [Stage::Pretrain, Stage::Finetune, Stage::Distill]);
    assert_eq!(dist.provenance().source.as_deref(), Some(ft.id().as_str()));
    assert_eq!(sup.provenance().lineage, [Stage::Supervised]);

    for line in first.lines() {
        let (digest, path) = line.split_once("  ").unwrap();
        let bytes = std::fs::read(a.path().join(path)).unwrap();
        assert_eq!(digest, hex::encode(Sha256::digest(&bytes)), "{path}");
    }
    for name in ["metrics_distill.csv", "predictions_finetune.csv", "study_recall.md", "recall.md", "pretrain_loss.csv"]
    {
        assert!(first.contains(&format!("  {name}\n")), "{name} recorded");
    }
    let metrics = std::fs::read_to_string(a.path().join("metrics_distill.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\n"));
    assert!(std::fs::read_to_string(a.path().join("recall.md")).unwrap().ends_with("synthetic\n"));
}

#[test]
fn finetune_rejects_non_pretrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["synth", "--unlabeled", "8", "--labeled", "8", "--size", "8"]);
    let manifest = p(out.join("manifest.tsv"));
    ok(out, &["train-supervised", "--manifest", &manifest, "--encoder", "micro", "--epochs", "1"]);
    let res = run(
        out,
        &["finetune", "--manifest", &manifest, "--checkpoint", &p(out.join("supervised.ckpt")), "--epochs", "1"],
    );
    assert_eq!(code(&res), 1, "{}", String::from_utf8_lossy(&res.stderr));
}
