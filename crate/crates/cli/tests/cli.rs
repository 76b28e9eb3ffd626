use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_unihema"));
    c.env("UNIHEMA_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "gen-data",
        "--out",
        p(dir),
        "--per-task",
        "4",
        "--eval-per-task",
        "2",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

const TINY_CONFIG: &str = r#"{
  "model": {"backbone_channels": [4, 6, 8], "model_dim": 8, "text_dim": 8, "heads": 2,
            "encoder_layers": 1, "decoder_layers": 1, "text_encoder_layers": 1,
            "text_decoder_layers": 1, "top_k": 6, "fusion_queries": 3, "upsampler_channels": 2},
  "steps_per_stage": [2, 2, 2, 2, 2, 2],
  "seed": 3
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    config: PathBuf,
    stage1: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gen(&data, &[]).status.success());
    let config = dir.path().join("train.json");
    fs::write(&config, TINY_CONFIG).unwrap();
    let stage1 = dir.path().join("s1.uhck");
    let o = run(&[
        "train",
        "--config",
        p(&config),
        "--stage",
        "1",
        "--data",
        p(&data),
        "--out",
        p(&stage1),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    Fixture {
        _dir: dir,
        data,
        config,
        stage1,
    }
}

#[test]
fn every_verb_has_help() {
    for verb in ["gen-data", "train", "eval", "infer", "inspect"] {
        let o = run(&[verb, "--help"]);
        assert!(o.status.success(), "{verb}");
        assert!(stdout(&o).contains("Usage"), "{verb}");
    }
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_and_filterable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = gen(&a, &["--seed", "5"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("config digest: "));
    assert!(gen(&b, &["--seed", "5"]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let tasks: Vec<&String> = manifest["tasks"].as_object().unwrap().keys().collect();
    assert_eq!(tasks, ["cls", "det", "mlm", "seg", "vqa"]);
    let mut files = Vec::new();
    for sub in ["", "annotations", "images"] {
        for e in fs::read_dir(a.join(sub)).unwrap() {
            let path = e.unwrap().path();
            if path.is_file() {
                files.push(path.strip_prefix(&a).unwrap().to_path_buf());
            }
        }
    }
    assert!(files.len() > 30);
    for f in files {
        assert_eq!(
            fs::read(a.join(&f)).unwrap(),
            fs::read(b.join(&f)).unwrap(),
            "{}",
            f.display()
        );
    }
    let det = dir.path().join("det");
    assert!(gen(&det, &["--tasks", "det"]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(det.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["tasks"].as_object().unwrap().len(), 1);
    assert!(manifest["tasks"]["det"].is_object());
    assert_eq!(gen(&det, &["--tasks", "det"]).status.code(), Some(2));
    assert!(gen(&det, &["--tasks", "det", "--force"]).status.success());
    assert_eq!(
        gen(&dir.path().join("x"), &["--tasks", "foo"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn training_order_eval_infer_inspect() {
    let f = fixture();
    assert!(f.stage1.exists());
    let log = fs::read_to_string(format!("{}.log.csv", f.stage1.display())).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,stage,task,loss");
    assert!(lines.len() > 1 && lines[1].starts_with("1,1,cls,"));

    let dir = f.stage1.parent().unwrap();
    let s4 = dir.join("s4.uhck");
    let o = run(&[
        "train",
        "--config",
        p(&f.config),
        "--stage",
        "4",
        "--data",
        p(&f.data),
        "--out",
        p(&s4),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = run(&[
        "train",
        "--config",
        p(&f.config),
        "--stage",
        "4",
        "--resume",
        p(&f.stage1),
        "--data",
        p(&f.data),
        "--out",
        p(&s4),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(!s4.exists());
    let s2 = dir.join("s2.uhck");
    let o = run(&[
        "train",
        "--config",
        p(&f.config),
        "--stage",
        "2",
        "--resume",
        p(&f.stage1),
        "--data",
        p(&f.data),
        "--out",
        p(&s2),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    for (task, metric) in [
        ("det", "mAP50"),
        ("seg", "Dice"),
        ("cls", "F1"),
        ("vqa", "BLEU-4"),
        ("mlm", "BLEU-4"),
    ] {
        let report = dir.join(format!("{task}.json"));
        let o = run(&[
            "eval",
            "--ckpt",
            p(&s2),
            "--data",
            p(&f.data),
            "--task",
            task,
            "--report",
            p(&report),
        ]);
        assert!(o.status.success(), "{task}: {}", stderr(&o));
        let r: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r["metric"], metric);
        assert_eq!(r["samples"], 2);
        let v = r["value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
        if task == "vqa" {
            assert!(r["secondary"]["exact_match"].is_number());
        }
    }

    let image = f.data.join("images/det-eval-00000.uhtn");
    let mask = dir.join("mask.uhtn");
    let o = run(&[
        "infer",
        "--ckpt",
        p(&s2),
        "--image",
        p(&image),
        "--mask",
        p(&mask),
        "--prompt",
        "This image is for the detection of malaria of cells.",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 6);
    for l in lines {
        let d: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(d["box"].as_array().unwrap().len(), 4);
    }
    assert!(mask.exists());

    let cell = f.data.join("images/vqa-eval-00000.uhtn");
    let o = run(&[
        "infer",
        "--ckpt",
        p(&s2),
        "--image",
        p(&cell),
        "--prompt",
        "Q: is the cell pale ?",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(v["answer"].is_string());
    let o = run(&["infer", "--ckpt", p(&s2), "--image", p(&cell)]);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(["rbc", "wbc", "parasite", "sickle"].contains(&v["class"].as_str().unwrap()));
    let o = run(&[
        "infer",
        "--ckpt",
        p(&s2),
        "--image",
        p(&cell),
        "--prompt",
        "hello there",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("This image is for the detection of")
            && err.contains("Q:")
            && err.contains("mask:")
    );

    let o = run(&["inspect", "--ckpt", p(&f.stage1)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("backbone.stem.weight") && out.contains("image_encoder."));
    assert!(out.contains("stage: 1 (complete)"));

    let bad = dir.join("bad.uhck");
    let mut bytes = fs::read(&f.stage1).unwrap();
    bytes[0] = b'Z';
    fs::write(&bad, bytes).unwrap();
    let o = run(&["inspect", "--ckpt", p(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("magic"));
    assert_eq!(
        run(&["inspect", "--ckpt", p(&dir.join("none.uhck"))])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn stop_and_resume_matches_uninterrupted() {
    let f = fixture();
    let dir = f.stage1.parent().unwrap();
    let cfg = TINY_CONFIG.replace("[2, 2, 2, 2, 2, 2]", "[4, 4, 4, 4, 4, 4]");
    fs::write(&f.config, cfg).unwrap();
    let full = dir.join("full.uhck");
    let half = dir.join("half.uhck");
    let resumed = dir.join("resumed.uhck");
    let base = |out: &Path| -> Vec<String> {
        [
            "train",
            "--config",
            p(&f.config),
            "--stage",
            "2",
            "--data",
            p(&f.data),
            "--out",
            p(out),
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let mut a = base(&full);
    a.extend(["--resume".into(), p(&f.stage1).into()]);
    assert!(bin().args(&a).output().unwrap().status.success());
    let mut a = base(&half);
    a.extend([
        "--resume".into(),
        p(&f.stage1).into(),
        "--stop-after".into(),
        "2".into(),
    ]);
    let o = bin().args(&a).output().unwrap();
    assert!(stdout(&o).contains("paused"));
    let mut a = base(&resumed);
    a.extend(["--resume".into(), p(&half).into()]);
    assert!(bin().args(&a).output().unwrap().status.success());
    assert_eq!(fs::read(&full).unwrap(), fs::read(&resumed).unwrap());
}
