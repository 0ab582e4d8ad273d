//! End-to-end checks of the `atinet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use atinet::checkpoint;
use atinet::datamodel::{generate_synthetic, write_dataset, DatasetSpec, Split};
use atinet::metrics::CSV_HEADER;
use atinet::models::{Model, ModelConfig, ModelKind};
use atinet::nn::Adam;
use atinet::trainer::{RunLog, TrainConfig};

fn atinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atinet"))
        .args(args)
        .env("ATINET_NUM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn synth(dir: &Path, n: usize, seed: u64) {
    let out = atinet(&[
        "synth",
        "--n",
        &n.to_string(),
        "--hw",
        "32x32",
        "--classes",
        "5",
        "--seed",
        &seed.to_string(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_writes_four_files_per_sample_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 8, 7);
    let first = dir_bytes(&d);
    assert_eq!(first.len(), 1 + 4 * 8);
    assert!(first.iter().any(|(n, _)| n == "manifest.json"));
    synth(&d, 8, 7);
    assert_eq!(dir_bytes(&d), first);
}

#[test]
fn synth_rejects_full_missing_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let out = atinet(&[
        "synth",
        "--n",
        "2",
        "--missing",
        "1.0",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("--missing"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 2, 1);
    let out = atinet(&["train", "--model", "resnet", "--data", d.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("resnet"));
    let out = atinet(&[
        "train",
        "--data",
        tmp.path().join("nothing").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = atinet(&[
        "train",
        "--data",
        d.to_str().unwrap(),
        "--set",
        "colour=red",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("colour"));
    let out = atinet(&["params", "--config", "no_such_preset"]);
    assert_eq!(out.status.code(), Some(2));
    let out = atinet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_documents_every_flag() {
    let out = atinet(&["train", "--help"]);
    assert!(out.status.success());
    let help = text(&out.stdout);
    for flag in [
        "--config",
        "--model",
        "--data",
        "--val",
        "--epochs",
        "--batch",
        "--lr",
        "--seed",
        "--out",
        "--distill-mode",
        "--checkpoint-every",
        "--set",
        "--resume",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    assert!(text(&atinet(&["--help"]).stdout).contains("ATINET_NUM_THREADS"));
}

fn loss_columns(csv: &str, rows: usize) -> Vec<Vec<String>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("loss_"))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(cols.len(), 4);
    lines
        .take(rows)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            cols.iter().map(|&i| f[i].to_string()).collect()
        })
        .collect()
}

#[test]
fn train_writes_run_outputs_and_shares_first_phase_with_mtan() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    synth(&d, 4, 3);
    let run = |model: &str| {
        let out_dir = tmp.path().join(model);
        let out = atinet(&[
            "train",
            "--model",
            model,
            "--data",
            d.to_str().unwrap(),
            "--epochs",
            "8",
            "--batch",
            "2",
            "--seed",
            "5",
            "--quiet",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        out_dir
    };
    let ati = run("atinet");
    let csv = fs::read_to_string(ati.join("runlog.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    for f in ["runlog.json", "final.ckpt", "loss_curve.svg", "config.txt"] {
        assert!(ati.join(f).is_file(), "{f}");
    }
    let resolved = fs::read_to_string(ati.join("config.txt")).unwrap();
    assert!(resolved.contains("model = atinet") && resolved.contains("epochs = 8"));

    // Distillation switches on at epoch 4, so epochs 1..=3 are the
    // first phase where atinet must reproduce mtan exactly.
    let mtan = run("mtan");
    let mtan_csv = fs::read_to_string(mtan.join("runlog.csv")).unwrap();
    assert_eq!(loss_columns(&csv, 3), loss_columns(&mtan_csv, 3));
    assert_ne!(loss_columns(&csv, 8), loss_columns(&mtan_csv, 8));
}

#[test]
fn eval_prints_table_columns_and_scores_a_perfect_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(tmp.path().join("d"), Split::Val, 32, 32, 4);
    let mut samples = generate_synthetic(3, &spec, 11, 0.0).unwrap();
    for s in &mut samples {
        s.labels.iter_mut().for_each(|l| *l = 2);
    }
    write_dataset(&spec, &samples).unwrap();

    // A segmentation network whose head ignores its input and always
    // scores class 2 highest.
    let kind = ModelKind::OneTask(atinet::datamodel::TaskId::Segmentation);
    let mut model = Model::build(&ModelConfig::tiny(kind, 4), 0).unwrap();
    let head = model.heads.convs.0[0].clone().unwrap();
    head.zero(&mut model.store);
    model.store.param_mut(head.bias).value_mut().data_mut()[2] = 5.0;
    let ck = tmp.path().join("perfect.ckpt");
    let n = model.store.len();
    checkpoint::save(
        &ck,
        &model,
        &TrainConfig::with_epochs(1),
        &Adam::new(n),
        None,
        &RunLog::default(),
        1,
    )
    .unwrap();

    let csv_out = tmp.path().join("report.csv");
    let out = atinet(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        spec.root_path.to_str().unwrap(),
        "--out",
        csv_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(
        CSV_HEADER,
        "mIoU,PixAcc,AbsErr,RelErr,Mean,Median,11.25,22.5,30"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "1.000000");
    assert_eq!(row[1], "1.000000");
    assert_eq!(fs::read_to_string(&csv_out).unwrap(), stdout);

    let out = atinet(&[
        "eval",
        "--checkpoint",
        tmp.path().join("missing.ckpt").to_str().unwrap(),
        "--data",
        spec.root_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn params_table_reports_ratios_against_mtan() {
    let out = atinet(&["params", "--config", "nyuv2_default"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    let ratio = |label: &str| -> String {
        table
            .lines()
            .find(|l| l.split_whitespace().next() == Some(label))
            .unwrap_or_else(|| panic!("no {label} row in\n{table}"))
            .split_whitespace()
            .last()
            .unwrap()
            .to_string()
    };
    assert_eq!(ratio("mtan"), "1.000");
    let ati: f64 = ratio("atinet").parse().unwrap();
    assert!((ati - 1.033).abs() < 0.01, "atinet ratio {ati}");
    assert_eq!(ratio("atinet").split('.').nth(1).unwrap().len(), 3);

    let tiny = atinet(&["params", "--config", "tiny"]);
    assert!(tiny.status.success());
    for line in text(&tiny.stdout).lines().skip(1) {
        let f: Vec<u64> = line
            .split_whitespace()
            .skip(1)
            .take(5)
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(f[0], f[1..].iter().sum::<u64>(), "{line}");
    }
}
