//! End-to-end checks of the `ant` binary: argument handling, exit codes,
//! and the train / eval / export / inspect round trip on a small synthetic
//! image dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ant"))
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// IDX pair of n 28x28 images whose bright row-band encodes the label.
fn write_idx_pair(dir: &Path, stem: &str, n: usize) -> (PathBuf, PathBuf) {
    use std::io::Write as _;
    let images = dir.join(format!("{stem}-images"));
    let labels = dir.join(format!("{stem}-labels"));
    let mut img = std::fs::File::create(&images).unwrap();
    img.write_all(&[0, 0, 8, 3]).unwrap();
    for d in [n as u32, 28, 28] {
        img.write_all(&d.to_be_bytes()).unwrap();
    }
    let mut lab_bytes = Vec::new();
    let mut state = 0xdeadbeefu32;
    for i in 0..n {
        let y = i % 10;
        lab_bytes.push(y as u8);
        let mut px = vec![0u8; 784];
        for (j, p) in px.iter_mut().enumerate() {
            state = state.wrapping_mul(1664525).wrapping_add(1013904223);
            *p = if j / 28 / 3 == y { 220 } else { (state >> 26) as u8 };
        }
        img.write_all(&px).unwrap();
    }
    let mut lab = std::fs::File::create(&labels).unwrap();
    lab.write_all(&[0, 0, 8, 1]).unwrap();
    lab.write_all(&(n as u32).to_be_bytes()).unwrap();
    lab.write_all(&lab_bytes).unwrap();
    (images, labels)
}

/// Tiny-budget training config over the fixture pair.
fn write_cfg(dir: &Path) -> PathBuf {
    let (ti, tl) = write_idx_pair(dir, "train", 60);
    let (ei, el) = write_idx_pair(dir, "test", 20);
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        format!(
            "\
[dataset]
kind = mnist
train_images = {}
train_labels = {}
test_images = {}
test_labels = {}
val_fraction = 0.2
preprocess = mean_subtract

[modules]
router = conv5-5,relu,gap,fc8,relu,fc1,sigmoid
transformer = conv5-5,relu
solver = lc
downsample_freq = 2

[training]
batch_size = 16
patience = 1
refine_epochs = 1
max_epochs_per_phase = 2
max_growth_decisions = 1
seed = 9

[run]
out_dir = {}
",
            ti.display(),
            tl.display(),
            ei.display(),
            el.display(),
            dir.join("out").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn all_presets_pass_a_dry_run() {
    let presets = workspace().join("presets");
    let mut seen = 0;
    for entry in std::fs::read_dir(&presets).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().map(|e| e != "cfg").unwrap_or(true) {
            continue;
        }
        let out = bin()
            .current_dir(workspace())
            .args(["train", "--dry-run", "--config"])
            .arg(&p)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}: {}", p.display(), stderr(&out));
        assert!(stdout(&out).contains("config ok"), "{}: {}", p.display(), stdout(&out));
        seen += 1;
    }
    assert_eq!(seen, 7, "expected the seven shipped presets");
}

#[test]
fn train_eval_export_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let out_dir = dir.path().join("out");

    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0, "train: {}", stderr(&out));
    assert!(stdout(&out).contains("run complete"));
    for artifact in ["model.json", "growth_history.json", "train_log.jsonl", "config.cfg", "report.txt"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    let model = out_dir.join("model.json");
    let data = format!(
        "{},{}",
        dir.path().join("test-images").display(),
        dir.path().join("test-labels").display()
    );

    let out = bin().args(["inspect", "--model"]).arg(&model).output().unwrap();
    assert_eq!(code(&out), 0, "inspect: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("classification"), "inspect output: {text}");
    assert!(text.contains("leaves"), "inspect output: {text}");

    for mode in ["multi", "single"] {
        let out = bin()
            .args(["eval", "--mode", mode, "--model"])
            .arg(&model)
            .args(["--data", &data])
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "eval {mode}: {}", stderr(&out));
        assert!(stdout(&out).contains("error_multi ="), "eval {mode}: {}", stdout(&out));
    }

    // sampled routing is deterministic in the seed
    let run_sampled = |seed: &str| {
        let out = bin()
            .args(["eval", "--mode", "sampled", "--seed", seed, "--model"])
            .arg(&model)
            .args(["--data", &data])
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "eval sampled: {}", stderr(&out));
        stdout(&out)
    };
    assert_eq!(run_sampled("7"), run_sampled("7"));

    // two copies of the same model average to an ensemble
    let out = bin()
        .args(["eval", "--model"])
        .arg(&model)
        .arg("--model")
        .arg(&model)
        .args(["--data", &data])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "ensemble eval: {}", stderr(&out));
    assert!(stdout(&out).contains("ensemble of 2 models"), "{}", stdout(&out));

    // DOT export to stdout and to a file, with and without pruning
    let out = bin()
        .args(["export", "--model"])
        .arg(&model)
        .args(["--data", &data])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "export: {}", stderr(&out));
    let dot = stdout(&out);
    assert!(dot.starts_with("digraph"), "export output: {dot}");
    assert!(dot.contains("visit"), "export output: {dot}");

    let dot_file = dir.path().join("tree.dot");
    let out = bin()
        .args(["export", "--model"])
        .arg(&model)
        .args(["--data", &data, "--prune-below", "0.0", "--out"])
        .arg(&dot_file)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "export --out: {}", stderr(&out));
    assert!(std::fs::read_to_string(&dot_file).unwrap().starts_with("digraph"));
}

#[test]
fn train_honors_seed_and_out_dir_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let alt = dir.path().join("alt");
    let out = bin()
        .args(["train", "--seed", "123", "--max-steps", "1", "--out-dir"])
        .arg(&alt)
        .args(["--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "train override: {}", stderr(&out));
    assert!(alt.join("model.json").exists());
    let stored = std::fs::read_to_string(alt.join("config.cfg")).unwrap();
    assert!(stored.contains("seed = 123"), "stored config: {stored}");
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["train"],                                  // missing --config
        vec!["no-such-command"],                        // unknown subcommand
        vec!["eval", "--model", "x", "--data", "y", "--mode", "bogus"],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(code(&out), 1, "args {:?}: {}", args, stderr(&out));
    }
    let out = bin().args(["train", "--config", "/nonexistent.cfg"]).output().unwrap();
    assert_eq!(code(&out), 1, "missing config: {}", stderr(&out));
    assert!(stderr(&out).contains("nonexistent.cfg"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();

    let out = bin()
        .args(["eval", "--model", "/no/such/model.json", "--data", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    // unsupported model format version is reported by number
    let future = dir.path().join("future.json");
    std::fs::write(&future, "{\"format_version\": 99}\n").unwrap();
    let out = bin()
        .args(["eval", "--model"])
        .arg(&future)
        .args(["--data", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("99") && err.contains("version"), "stderr: {err}");

    // valid model, missing dataset file
    let cfg = write_cfg(dir.path());
    let out = bin()
        .args(["train", "--max-steps", "1", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "fixture train: {}", stderr(&out));
    let model = dir.path().join("out/model.json");
    let out = bin()
        .args(["eval", "--model"])
        .arg(&model)
        .args(["--data", "/no/such/images,/no/such/labels"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("/no/such"), "stderr: {}", stderr(&out));
}

#[test]
fn help_and_version_exit_zero() {
    for args in [vec!["--help"], vec!["--version"], vec!["train", "--help"]] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(code(&out), 0, "args {:?}", args);
    }
    let out = bin().args(["--help"]).output().unwrap();
    assert!(stdout(&out).contains("train"));
    assert!(stdout(&out).contains("eval"));
}
