use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn apn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn apn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_line(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).trim().to_string()
}

const SMALL_DATA: &str = "n_classes = 8\nn_unseen = 2\nn_val = 1\nk_attrs = 8\nl_groups = 4\n\
image_size = 32\nimgs_per_class = 10\n";

const SMALL_TRAIN: &str = "epochs = 1\nbatch_size = 16\nf64 = true\n";

fn small_bundle(root: &Path) -> std::path::PathBuf {
    let cfg = root.join("synth.cfg");
    fs::write(&cfg, SMALL_DATA).unwrap();
    let data = root.join("data");
    let o = apn(&[
        "gen-synth",
        "--out",
        s(&data),
        "--seed",
        "3",
        "--config",
        s(&cfg),
    ]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    data
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("synth.cfg");
    fs::write(&cfg, SMALL_DATA).unwrap();
    let (a, b) = (tmp.path().join("d"), tmp.path().join("d2"));
    for dir in [&a, &b] {
        let o = apn(&[
            "gen-synth",
            "--out",
            s(dir),
            "--seed",
            "7",
            "--config",
            s(&cfg),
        ]);
        assert!(o.status.success(), "{}", stderr_line(&o));
    }
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = gen-synth"));
    assert!(manifest.contains("seed = 7"));
    assert!(manifest.contains("version = "));
}

#[test]
fn negative_gamma_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = apn(&[
        "eval",
        "--mode",
        "gzsl",
        "--gamma",
        "-1",
        "--data",
        "nowhere",
        "--ckpt",
        "none",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr_line(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("usage:"), "{err}");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(apn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        apn(&["gen-synth", "--out", "x", "--bogus"]).status.code(),
        Some(1)
    );
    assert_eq!(
        apn(&["eval", "--mode", "sideways", "--data", "a", "--ckpt", "b", "--out", "c"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(apn(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = apn(&[
        "train",
        "--data",
        s(&tmp.path().join("absent")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr_line(&o));
    assert!(stderr_line(&o).starts_with("data:"));
}

#[test]
fn bad_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = small_bundle(tmp.path());
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, "epochs = 1\nmomentum = 0.9\n").unwrap();
    let o = apn(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr_line(&o).contains("momentum"));
}

#[test]
fn train_eval_localize_pcp_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = small_bundle(tmp.path());
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, SMALL_TRAIN).unwrap();
    let run = tmp.path().join("run");
    let o = apn(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&run),
        "--threads",
        "1",
        "--f64",
        "--no-ad",
    ]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let ckpt = run.join("checkpoint.apn");
    assert!(ckpt.exists());
    let log = fs::read_to_string(run.join("runlog.tsv")).unwrap();
    assert!(log.starts_with("epoch\tlr\t"));
    assert_eq!(log.lines().count(), 2);
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(
        manifest.contains("ad = false") && manifest.contains("reg = true"),
        "{manifest}"
    );

    for mode in ["zsl", "gzsl", "gfsl"] {
        let out = tmp.path().join(mode);
        let o = apn(&[
            "eval",
            "--mode",
            mode,
            "--data",
            s(&data),
            "--ckpt",
            s(&ckpt),
            "--out",
            s(&out),
            "--f64",
            "--threads",
            "1",
        ]);
        assert!(o.status.success(), "{mode}: {}", stderr_line(&o));
        let report = fs::read_to_string(out.join("report.tsv")).unwrap();
        assert!(!report.is_empty());
        assert!(out.join("manifest.txt").exists());
    }
    let out = tmp.path().join("fsl");
    let o = apn(&[
        "eval",
        "--mode",
        "fsl",
        "--way",
        "2",
        "--shots",
        "1",
        "--episodes",
        "5",
        "--query",
        "3",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out),
        "--f64",
    ]);
    assert!(o.status.success(), "fsl: {}", stderr_line(&o));

    let out = tmp.path().join("loc");
    let o = apn(&[
        "localize",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out),
        "--attr",
        "1",
        "--attr",
        "3",
        "--f64",
    ]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let names: Vec<String> = read_dir_bytes(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names.iter().filter(|n| n.ends_with(".pgm")).count(),
        2,
        "{names:?}"
    );
    assert_eq!(
        names.iter().filter(|n| n.ends_with(".ppm")).count(),
        2,
        "{names:?}"
    );
    let pgm = fs::read(out.join(names.iter().find(|n| n.ends_with(".pgm")).unwrap())).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));

    let o = apn(&[
        "localize",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out),
        "--attr",
        "99",
        "--f64",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let out = tmp.path().join("pcp");
    let o = apn(&[
        "pcp",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--out",
        s(&out),
        "--f64",
    ]);
    assert!(o.status.success(), "{}", stderr_line(&o));
    let table = fs::read_to_string(out.join("pcp.tsv")).unwrap();
    assert_eq!(
        table
            .lines()
            .filter(|l| l.starts_with(char::is_numeric))
            .count(),
        4
    );
    assert!(table.contains("\nchance\t"));
}

#[test]
fn training_is_deterministic_in_f64_single_thread() {
    let tmp = TempDir::new().unwrap();
    let data = small_bundle(tmp.path());
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, SMALL_TRAIN).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let o = apn(&[
            "train",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--out",
            s(&dir),
            "--seed",
            "5",
            "--f64",
            "--threads",
            "1",
        ]);
        assert!(o.status.success(), "{}", stderr_line(&o));
        let eval = tmp.path().join(format!("{run}-eval"));
        let o = apn(&[
            "eval",
            "--mode",
            "gzsl",
            "--data",
            s(&data),
            "--ckpt",
            s(&dir.join("checkpoint.apn")),
            "--out",
            s(&eval),
            "--f64",
            "--threads",
            "1",
        ]);
        assert!(o.status.success(), "{}", stderr_line(&o));
        outputs.push((
            fs::read(dir.join("checkpoint.apn")).unwrap(),
            fs::read(eval.join("report.tsv")).unwrap(),
        ));
    }
    assert!(outputs[0] == outputs[1]);
}

#[test]
fn gradcheck_prints_passing_table() {
    let tmp = TempDir::new().unwrap();
    let o = apn(&["gradcheck", "--trials", "3", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr_line(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("check\ttrials\t"));
    assert!(table.contains("\njoint_loss\t"));
    assert!(!table.contains("FAIL"));
    assert_eq!(table.lines().count(), 21);
    assert!(tmp.path().join("gradcheck.tsv").exists());
}
