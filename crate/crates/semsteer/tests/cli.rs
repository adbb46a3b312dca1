use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semsteer::checkpoint::Checkpoint;
use semsteer::config::RunConfig;
use semsteer::io::{decode_png, encode_png, read_dataset};
use semsteer::pipeline::seed_latent;
use semsteer_core::evaluation::SteerReport;
use semsteer_core::models::ClassLabel;
use semsteer_core::shapeworld::AttributeId;

fn semsteer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsteer")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A tempdir holding a smoke config whose out_dir points inside it.
fn workspace() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::smoke();
    cfg.out_dir = dir.path().join("run");
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg.to_json()).unwrap()).unwrap();
    let out = cfg.out_dir.clone();
    (dir, cfg_path, out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_all(cfg: &Path) {
    for args in [
        vec!["train-generator"],
        vec!["train-scorer"],
        vec!["train-direction", "--attribute", "evil"],
    ] {
        let mut full = vec!["--config", s(cfg)];
        full.extend(args);
        let out = semsteer(&full);
        assert_eq!(code(&out), 0, "{full:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&semsteer(&["--bogus"])), 1);
    assert_eq!(code(&semsteer(&["frobnicate"])), 1);
    assert_eq!(code(&semsteer(&["train-direction"])), 1);
    assert_eq!(code(&semsteer(&["gen-data", "--attribute", "spooky", "--out", "x"])), 1);
    assert_eq!(code(&semsteer(&["--set", "steering.stpes=3", "verify"])), 1);
    assert_eq!(code(&semsteer(&["--set", "steering.steps=0", "verify"])), 1);
    assert_eq!(code(&semsteer(&["--help"])), 0);
}

#[test]
fn verify_passes_on_a_correct_build() {
    let out = semsteer(&["verify"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{text}");
}

#[test]
fn gen_data_writes_pgm_files_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = semsteer(&["gen-data", "--attribute", "minimal", "--count", "5", "--seed", "3", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("minimal_00004.pgm").exists());
    let data = read_dataset(dir.path()).unwrap();
    assert_eq!(data.len(), 5);
    assert!(data.iter().all(|d| d.attribute == AttributeId::Minimal && d.pixels.width() == 32));

    // Same seed, same bytes.
    let again = tempfile::tempdir().unwrap();
    semsteer(&["gen-data", "--attribute", "minimal", "--count", "5", "--seed", "3", "--out", s(again.path())]);
    for name in ["minimal_00000.pgm", "minimal_00004.pgm", "index.json"] {
        assert_eq!(std::fs::read(dir.path().join(name)).unwrap(), std::fs::read(again.path().join(name)).unwrap());
    }
}

#[test]
fn stages_from_a_pgm_directory() {
    let (dir, cfg, run) = workspace();
    let data = dir.path().join("data");
    let out = semsteer(&["--config", s(&cfg), "gen-data", "--count", "12", "--size", "16", "--out", s(&data)]);
    assert_eq!(code(&out), 0);
    let out = semsteer(&["--config", s(&cfg), "train-generator", "--data", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("reconstruction mse"));
    let out = semsteer(&["--config", s(&cfg), "train-scorer", "--data", s(&data), "--shuffled-control"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("backbone holdout accuracy") && text.contains("shuffled-label holdout accuracy"), "{text}");
    assert!(text.contains("backbone unchanged by head retraining: true"), "{text}");
    let g = Checkpoint::load(&run.join("generator.smst")).unwrap();
    // The config echo is the effective run configuration.
    assert_eq!(g.meta.config["out_dir"], s(&run));
    assert_eq!(g.meta.config["steering"]["steps"], 5);
}

#[test]
fn train_render_and_evaluate() {
    let (_dir, cfg, run) = workspace();
    train_all(&cfg);
    let direction = run.join("direction_evil.smst");
    let strip = run.join("strip.png");
    let out = semsteer(&[
        "--config",
        s(&cfg),
        "render-strip",
        "--direction",
        s(&direction),
        "--class",
        "star",
        "--seed",
        "9",
        "--alphas",
        "-0.4,0,0.4",
        "--out",
        s(&strip),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = decode_png(&std::fs::read(&strip).unwrap()).unwrap();
    assert_eq!((img.width(), img.height()), (3 * 16 + 2, 16));

    // A single α = 0 panel is the raw sample.
    let single = run.join("single.png");
    let out = semsteer(&[
        "--config",
        s(&cfg),
        "render-strip",
        "--direction",
        s(&direction),
        "--class",
        "2",
        "--seed",
        "9",
        "--alphas",
        "0",
        "--out",
        s(&single),
    ]);
    assert_eq!(code(&out), 0);
    let g = Checkpoint::load(&run.join("generator.smst")).unwrap().to_generator().unwrap();
    let raw = g.forward(&seed_latent(&g, 9, 2.0).unwrap(), ClassLabel(2)).unwrap();
    assert_eq!(std::fs::read(&single).unwrap(), encode_png(&raw));

    let report_path = run.join("report.json");
    let curves = run.join("curves.csv");
    let out = semsteer(&[
        "--config",
        s(&cfg),
        "evaluate",
        "--direction",
        s(&direction),
        "--seeds",
        "5",
        "--out",
        s(&report_path),
        "--curves",
        s(&curves),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: SteerReport = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report.attribute, AttributeId::Evil);
    assert_eq!(report.seed_count, 5);
    assert_eq!(report.curves.len(), 5);
    let csv = std::fs::read_to_string(&curves).unwrap();
    assert!(csv.starts_with("alpha,seed_0,seed_1,seed_2,seed_3,seed_4\n"));

    // Without --out the report goes to stdout, byte for byte.
    let out = semsteer(&["--config", s(&cfg), "evaluate", "--direction", s(&direction), "--seeds", "5"]);
    assert_eq!(out.stdout, std::fs::read(&report_path).unwrap());
}

#[test]
fn reruns_are_byte_identical() {
    let (_dir, cfg, run) = workspace();
    train_all(&cfg);
    let first: Vec<Vec<u8>> = ["generator.smst", "scorer.smst", "direction_evil.smst"]
        .iter()
        .map(|n| std::fs::read(run.join(n)).unwrap())
        .collect();
    train_all(&cfg);
    for (n, bytes) in ["generator.smst", "scorer.smst", "direction_evil.smst"].iter().zip(first) {
        assert_eq!(std::fs::read(run.join(n)).unwrap(), bytes, "{n}");
    }
}

#[test]
fn incompatible_checkpoints_exit_three() {
    let (dir, cfg, run) = workspace();
    train_all(&cfg);
    let other = dir.path().join("other.smst");
    let out = semsteer(&[
        "--config",
        s(&cfg),
        "--set",
        "generator_training.seed=99",
        "train-generator",
        "--out",
        s(&other),
    ]);
    assert_eq!(code(&out), 0);
    let direction = run.join("direction_evil.smst");
    let out = semsteer(&[
        "--config",
        s(&cfg),
        "render-strip",
        "--direction",
        s(&direction),
        "--generator",
        s(&other),
        "--class",
        "disc",
        "--seed",
        "1",
        "--alphas",
        "0",
        "--out",
        s(&dir.path().join("x.png")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("generator"));
    let out = semsteer(&[
        "--config",
        s(&cfg),
        "evaluate",
        "--direction",
        s(&direction),
        "--generator",
        s(&other),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn missing_checkpoints_fail_with_a_message() {
    let (_dir, cfg, _run) = workspace();
    let out = semsteer(&["--config", s(&cfg), "train-direction", "--attribute", "dense"]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("generator.smst"));
}

#[test]
fn run_writes_every_artifact() {
    let (_dir, cfg, run) = workspace();
    let out = semsteer(&["--config", s(&cfg), "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for a in AttributeId::ALL {
        for name in [
            format!("direction_{a}.smst"),
            format!("report_{a}.json"),
            format!("curves_{a}.csv"),
            format!("strip_{a}_0.png"),
            format!("strip_{a}_1.png"),
        ] {
            assert!(run.join(&name).exists(), "{name}");
        }
    }
    let echoed: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, Checkpoint::load(&run.join("scorer.smst")).unwrap().meta.config);
}
