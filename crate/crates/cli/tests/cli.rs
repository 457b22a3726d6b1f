use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "version": 1,
  "model": {
    "height": 16, "width": 16, "frames": 3, "classes": 3, "audio_dim": 4,
    "dims": [4, 4, 4], "groups": [6, 3, 1], "heads": 2,
    "decoder_dim": 4, "temporal_heads": 2,
    "steps": 12, "eval_every": 6, "lr": 0.003
  },
  "synth": {
    "height": 16, "width": 16, "frames": 3, "classes": 3, "audio_dim": 4,
    "min_radius": 2.0, "max_radius": 3.5
  },
  "clips": 20
}"#;

fn avseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.json");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let out = avseg(&[
        "synth",
        "--config",
        s(&config),
        "--out",
        s(&data),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    Fixture {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn train(fx: &Fixture, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let ckpt = fx.root.join(name);
    let mut args = vec![
        "train",
        "--config",
        s(&fx.config),
        "--data",
        s(&fx.data),
        "--out",
        s(&ckpt),
    ];
    args.extend_from_slice(extra);
    let out = avseg(&args);
    (ckpt, out)
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |p: &Path| {
        avseg(&[
            "synth",
            "--clips",
            "100",
            "--mix",
            "0.4,0.3,0.3",
            "--seed",
            "7",
            "--out",
            s(p),
        ])
    };
    let out = run(&a);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("100 clips"), "{}", stdout(&out));
    assert!(stdout(&out).contains("easy 40 case1 30 case2 30"));
    assert!(a.join("manifest.json").exists());
    assert_eq!(code(&run(&b)), 0);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn synth_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = avseg(&["synth", "--clips", "5", "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 10 clips"));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"learning_rate": 1}}"#).unwrap();
    let out = avseg(&[
        "synth",
        "--config",
        s(&bad),
        "--out",
        s(&dir.path().join("y")),
    ]);
    assert_eq!(code(&out), 2);
    let out = avseg(&[
        "synth",
        "--mix",
        "0.5,0.5",
        "--out",
        s(&dir.path().join("z")),
    ]);
    assert_eq!(code(&out), 2);
    let out = avseg(&["frobnicate"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_groups_uncmap() {
    let fx = fixture();
    let (ckpt, out) = train(&fx, "full", &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let loss = std::fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 12);
    assert!(loss.starts_with("step,total,seg,cst\n"));
    assert!(ckpt.join("val_report.json").exists());

    // Same seed, same curve and parameters.
    let (again, _) = train(&fx, "full_again", &[]);
    assert_eq!(tree_bytes(&ckpt), tree_bytes(&again));

    let report = fx.root.join("report.json");
    let out = avseg(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&fx.data),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("case1") || stdout(&out).contains("case2"));
    let first = std::fs::read(&report).unwrap();
    avseg(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&fx.data),
        "--report",
        s(&report),
    ]);
    assert_eq!(first, std::fs::read(&report).unwrap());

    let maps = fx.root.join("maps");
    let out = avseg(&[
        "groups",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&fx.data),
        "--clip",
        "0",
        "--frame",
        "1",
        "--level",
        "2",
        "--out",
        s(&maps),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.starts_with("token_index\tlabel\tdensity\tis_peak\n"));
    assert_eq!(text.lines().filter(|l| l.ends_with("\t1")).count(), 3);
    assert!(text.contains("4 tokens, 3 groups"));
    let pgm = std::fs::read(maps.join("groups_clip00000_t1_l2.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n2 2\n255\n"));

    for bad in [
        ["--frame", "3", "--level", "1"],
        ["--frame", "0", "--level", "4"],
    ] {
        let out = avseg(&[
            "groups",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&fx.data),
            "--clip",
            "0",
            bad[0],
            bad[1],
            bad[2],
            bad[3],
            "--out",
            s(&maps),
        ]);
        assert_eq!(code(&out), 2);
    }
    let out = avseg(&[
        "groups",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&fx.data),
        "--clip",
        "99",
        "--frame",
        "0",
        "--level",
        "1",
    ]);
    assert_eq!(code(&out), 2);

    let unc = fx.root.join("unc");
    let out = avseg(&[
        "uncmap",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&fx.data),
        "--clip",
        "2",
        "--out",
        s(&unc),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        stdout(&out)
            .lines()
            .filter(|l| l.contains("mean_delta_norm"))
            .count(),
        3
    );
    for t in 0..3 {
        let bytes = std::fs::read(unc.join(format!("clip00002_t{t}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
    }
}

#[test]
fn ablations_and_artifact_errors() {
    let fx = fixture();
    let (no_ue, out) = train(&fx, "no_ue", &["--ablate", "no-ue", "--steps", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("variant +sgsm+cst"));
    let out = avseg(&[
        "uncmap",
        "--checkpoint",
        s(&no_ue),
        "--data",
        s(&fx.data),
        "--clip",
        "0",
        "--out",
        s(&fx.root),
    ]);
    assert_eq!(code(&out), 2);

    let (no_sgsm, out) = train(&fx, "no_sgsm", &["--ablate", "no-sgsm", "--steps", "3"]);
    assert_eq!(code(&out), 0);
    let loss = std::fs::read_to_string(no_sgsm.join("loss.csv")).unwrap();
    assert!(loss.lines().skip(1).all(|l| l.ends_with(",0")));

    let out = avseg(&[
        "eval",
        "--checkpoint",
        s(&fx.root.join("missing")),
        "--data",
        s(&fx.data),
    ]);
    assert_eq!(code(&out), 3);

    // A checkpoint whose config disagrees with the data.
    let other = fx.root.join("other_data");
    let out = avseg(&["synth", "--clips", "10", "--out", s(&other)]);
    assert_eq!(code(&out), 0);
    let out = avseg(&["eval", "--checkpoint", s(&no_ue), "--data", s(&other)]);
    assert_eq!(code(&out), 5);

    // A parameter file with the wrong shape.
    let w = no_ue.join("seg.w.avtk");
    std::fs::copy(no_ue.join("seg.b.avtk"), &w).unwrap();
    let out = avseg(&["eval", "--checkpoint", s(&no_ue), "--data", s(&fx.data)]);
    assert_eq!(code(&out), 5);
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let out = avseg(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for name in [
        "contrastive",
        "seg_loss",
        "ama_block",
        "temporal_attention",
        "full_model",
    ] {
        assert!(text.contains(name));
    }
    assert_eq!(text, stdout(&avseg(&["gradcheck", "--seed", "1"])));
    let out = avseg(&["gradcheck", "--seed", "1", "--corrupt-adjoint"]);
    assert_eq!(code(&out), 4);
    assert!(stdout(&out).contains("FAIL"));
}
