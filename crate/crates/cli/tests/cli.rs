use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stoic_core::training::{Checkpoint, FINAL_CHECKPOINT};

const TINY: &str = "\
[model]
embed_dim = 16
num_blocks = 1
height = 4
width = 4

[diffusion]
steps = 50

[train]
batch_size = 8
steps = 0
lr = 3e-3

[data]
count = 64
";

fn stoic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stoic"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_tiny(dir: &Path, text: &str) -> PathBuf {
    let cfg = write_config(dir, "run.cfg", text);
    let out = dir.join("run");
    let o = stoic(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn help_documents_flags_and_keys() {
    let o = stoic(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in [
        "train",
        "sample",
        "analyze",
        "gradcheck",
        "inspect",
        "STOIC_THREADS",
        "embed_dim",
        "cond_dropout",
        "sde_beta_max",
    ] {
        assert!(text.contains(needle), "--help lacks {needle}");
    }
    let o = stoic(&["sample", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--checkpoint",
        "--sampler",
        "--steps",
        "--guidance",
        "--count",
        "--seed",
        "--out",
    ] {
        assert!(text.contains(flag), "sample --help lacks {flag}");
    }
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    let o = stoic(&[
        "train",
        "--config",
        s(&missing),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.cfg"));
}

#[test]
fn unknown_config_key_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.cfg",
        "[model]\nembed_dim = 16\nwidht = 4\n",
    );
    let o = stoic(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn zero_step_run_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), TINY);
    assert!(out.join(FINAL_CHECKPOINT).exists());
    assert_eq!(
        fs::read_to_string(out.join("metrics.csv")).unwrap(),
        "step,loss\n"
    );
}

#[test]
fn toy_run_lowers_the_logged_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &TINY.replace("steps = 0", "steps = 200"));
    let log = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 200);
    assert!(
        losses[199] < losses[0],
        "first {} last {}",
        losses[0],
        losses[199]
    );
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("steps = 0", "steps = 6\ncheckpoint_every = 3");
    let out = train_tiny(dir.path(), &text);
    let resumed = dir.path().join("resumed");
    let o = stoic(&[
        "train",
        "--resume",
        s(&out.join("checkpoint_00000003.ckpt")),
        "--out",
        s(&resumed),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(out.join(FINAL_CHECKPOINT)).unwrap(),
        fs::read(resumed.join(FINAL_CHECKPOINT)).unwrap()
    );
}

#[test]
fn sampling_is_deterministic_and_writes_ppm() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &TINY.replace("steps = 0", "steps = 2"));
    let ckpt = out.join(FINAL_CHECKPOINT);
    let run = |name: &str, extra: &[&str]| {
        let dest = dir.path().join(name);
        let mut args = vec![
            "sample",
            "--checkpoint",
            s(&ckpt),
            "--count",
            "3",
            "--seed",
            "5",
            "--out",
            s(&dest),
        ];
        args.extend_from_slice(extra);
        let o = stoic(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        dest
    };
    let a = run("a", &[]);
    let b = run("b", &["--chunk", "2"]);
    for i in 0..3 {
        let name = format!("sample_{i:05}.ppm");
        let bytes = fs::read(a.join(&name)).unwrap();
        assert!(bytes.starts_with(b"P6\n4 4\n255\n"));
        assert_eq!(bytes, fs::read(b.join(&name)).unwrap());
    }
    assert!(!a.join("sample_00003.ppm").exists());
    let em = run("em", &["--sampler", "em", "--steps", "20"]);
    assert!(em.join("sample_00002.ppm").exists());
}

#[test]
fn step_sweep_700_and_1000_both_complete() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("steps = 50", "steps = 1000")
        .replace("height = 4\nwidth = 4", "height = 2\nwidth = 2");
    let out = train_tiny(dir.path(), &text);
    for steps in ["700", "1000"] {
        let dest = dir.path().join(steps);
        let o = stoic(&[
            "sample",
            "--checkpoint",
            s(&out.join(FINAL_CHECKPOINT)),
            "--steps",
            steps,
            "--count",
            "1",
            "--out",
            s(&dest),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let bytes = fs::read(dest.join("sample_00000.ppm")).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 12);
    }
}

#[test]
fn count_zero_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), TINY);
    let dest = dir.path().join("none");
    let o = stoic(&[
        "sample",
        "--checkpoint",
        s(&out.join(FINAL_CHECKPOINT)),
        "--count",
        "0",
        "--out",
        s(&dest),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(&dest).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn incompatible_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), TINY);
    let mut ckpt = Checkpoint::load(&out.join(FINAL_CHECKPOINT)).unwrap();
    ckpt.config_text = ckpt.config_text.replace("embed_dim = 16", "embed_dim = 32");
    let bad = dir.path().join("bad.ckpt");
    ckpt.save(&bad).unwrap();
    let o = stoic(&[
        "sample",
        "--checkpoint",
        s(&bad),
        "--count",
        "1",
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), TINY);
    let path = out.join(FINAL_CHECKPOINT);
    let mut bytes = fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 40] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let o = stoic(&[
        "sample",
        "--checkpoint",
        s(&path),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn analyze_single_config_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "a.cfg",
        "[model]\nheight = 32\nwidth = 32\nchannels = 3\n",
    );
    let single = dir.path().join("single.csv");
    assert_eq!(
        code(&stoic(&[
            "analyze",
            "--config",
            s(&cfg),
            "--out",
            s(&single)
        ])),
        0
    );
    assert_eq!(fs::read_to_string(&single).unwrap().lines().count(), 2);

    let sweep = dir.path().join("sweep.csv");
    let o = stoic(&[
        "analyze",
        "--config",
        s(&cfg),
        "--sweep",
        "L=256,512;N=12,24,32",
        "--out",
        s(&sweep),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&sweep).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "stride,L,N,params,gmacs");
    let gmacs: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(gmacs[0] < gmacs[1] && gmacs[1] < gmacs[2]);
    assert!(gmacs[3] < gmacs[4] && gmacs[4] < gmacs[5]);

    for bad in ["L=256;Q=3", "L=abc", "L=", "L=0", "256"] {
        let o = stoic(&[
            "analyze",
            "--config",
            s(&cfg),
            "--sweep",
            bad,
            "--out",
            s(&dir.path().join("bad.csv")),
        ]);
        assert_eq!(code(&o), 2, "sweep `{bad}`");
    }
}

#[test]
fn gradcheck_passes_and_detects_a_broken_backward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.cfg", "");
    let o = stoic(&[
        "gradcheck",
        "--config",
        s(&cfg),
        "--precision",
        "64",
        "--coords",
        "2",
    ]);
    assert_eq!(
        code(&o),
        0,
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    let o = stoic(&["gradcheck", "--config", s(&cfg), "--coords", "2", "--fault"]);
    assert_eq!(code(&o), 5);
    let wide = write_config(dir.path(), "w.cfg", "[model]\nheight = 4\nwidth = 6\n");
    let o = stoic(&["gradcheck", "--config", s(&wide), "--coords", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1x4x6"));
    assert_eq!(
        code(&stoic(&[
            "gradcheck",
            "--config",
            s(&cfg),
            "--precision",
            "32"
        ])),
        2
    );
}

#[test]
fn inspect_describes_checkpoints_and_configs() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), TINY);
    let o = stoic(&["inspect", "--checkpoint", s(&out.join(FINAL_CHECKPOINT))]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("step: 0") && text.contains("parameters:"));
    let cfg = write_config(dir.path(), "i.cfg", TINY);
    assert_eq!(code(&stoic(&["inspect", "--config", s(&cfg)])), 0);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.cfg", TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_stoic"))
        .args(["inspect", "--config", s(&cfg)])
        .env("STOIC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_stoic"))
        .args(["inspect", "--config", s(&cfg)])
        .env("STOIC_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}
