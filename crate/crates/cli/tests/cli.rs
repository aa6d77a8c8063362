use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

struct Scratch(PathBuf);

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("addit-cli-{}-{name}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        Self(dir)
    }

    fn path(&self, p: &str) -> PathBuf {
        self.0.join(p)
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.0);
    }
}

fn addit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_addit"))
        .args(args)
        .env_remove("ADDIT_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = addit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn small_config(s: &Scratch) -> String {
    let p = s.path("small.json");
    fs::write(&p, r#"{"model": {"image_grid": [8, 8]}}"#).unwrap();
    p.display().to_string()
}

fn benchmark(s: &Scratch, records: &str) -> String {
    let p = s.path("bench.json");
    fs::write(&p, records).unwrap();
    p.display().to_string()
}

const TWO_RECORDS: &str = r#"[
  {"src_prompt": "a quiet lake", "tgt_prompt": "a quiet lake with a boat", "subject_token": "boat",
   "instruction": "add a boat", "gt_boxes": [{"x": 0, "y": 0, "w": 8, "h": 8}]},
  {"src_prompt": "a desk", "tgt_prompt": "a desk with a lamp", "subject_token": "lamp",
   "instruction": "add a lamp", "gt_boxes": [{"x": 0, "y": 0, "w": 8, "h": 8}], "seed": 9}
]"#;

#[test]
fn edit_writes_a_complete_manifest() {
    let s = Scratch::new("manifest");
    let cfg = small_config(&s);
    let out = s.path("run");
    ok(&["--config", &cfg, "--out", out.to_str().unwrap(), "edit", "--prompt", "a cat on a sofa", "--subject", "cat"]);
    let m = manifest(&out);
    assert_eq!(m["steps"], 30);
    assert_eq!(m["seeds"]["source"], 0);
    assert_eq!(m["weights"]["gamma_prompt"], 1.05);
    assert_eq!(m["weights"]["gamma_source"], 1.0);
    let latent = fs::read(out.join("output.adlt")).unwrap();
    let word = |i: usize| u32::from_le_bytes(latent[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!((word(1), word(2), word(3)), (8, 8, 4));
    let pgm = fs::read(out.join("output.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    let mask: Vec<Vec<bool>> = serde_json::from_str(&fs::read_to_string(out.join("mask.json")).unwrap()).unwrap();
    assert_eq!((mask.len(), mask[0].len()), (8, 8));
}

#[test]
fn real_mode_blend_all_returns_the_source() {
    let s = Scratch::new("blendall");
    let cfg = small_config(&s);
    let gen = s.path("gen");
    ok(&["--config", &cfg, "--seed", "5", "--out", gen.to_str().unwrap(), "generate", "--prompt", "a red barn"]);
    let src = gen.join("latent.adlt");
    let out = s.path("edit");
    ok(&[
        "--config", &cfg, "--mode", "real", "--out", out.to_str().unwrap(),
        "edit", "--prompt", "a red barn with a cow", "--subject", "cow",
        "--source", src.to_str().unwrap(), "--blend-all",
    ]);
    assert_eq!(fs::read(out.join("output.adlt")).unwrap(), fs::read(&src).unwrap());
    assert_eq!(manifest(&out)["inputs"][0]["sha256"], manifest(&gen)["outputs"][0]["sha256"]);
}

#[test]
fn automatic_gamma_matches_the_balance_curve() {
    let s = Scratch::new("auto");
    let cfg = small_config(&s);
    let out = s.path("an");
    ok(&["--config", &cfg, "--gamma", "auto", "--out", out.to_str().unwrap(), "analyze", "--prompt", "a shelf with a book", "--subject", "book"]);
    let solved = manifest(&out)["solved_gamma"].as_f64().unwrap();
    let curve: Vec<(f64, f64)> = fs::read_to_string(out.join("balance.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (g, f) = l.split_once(',').unwrap();
            (g.parse().unwrap(), f.parse().unwrap())
        })
        .collect();
    assert_eq!(curve.len(), 151);
    let root = curve
        .windows(2)
        .find(|w| w[0].1.signum() != w[1].1.signum())
        .map(|w| w[0].0 - w[0].1 * (w[1].0 - w[0].0) / (w[1].1 - w[0].1))
        .expect("curve changes sign");
    assert!((solved - root).abs() <= 1e-3, "solved {solved}, scan {root}");

    let spread = fs::read_to_string(out.join("spread.csv")).unwrap();
    let mut rows = 0;
    for line in spread.lines().skip(1) {
        let f: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-6, "{line}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn eval_and_sweep_over_a_benchmark() {
    let s = Scratch::new("bench");
    let cfg = small_config(&s);
    let bench = benchmark(&s, TWO_RECORDS);
    let out = s.path("eval");
    ok(&["--config", &cfg, "--out", out.to_str().unwrap(), "eval", "--benchmark", &bench]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(summary["n"], 2);
    assert!(summary["inclusion"].as_f64().unwrap() > 0.0);
    assert_eq!(summary["affordance"], 1.0);
    assert_eq!(fs::read_to_string(out.join("per_image.csv")).unwrap().lines().count(), 3);

    let out = s.path("sweep");
    ok(&["--config", &cfg, "--out", out.to_str().unwrap(), "sweep", "--param", "gamma", "--grid", "0.9:1.3:0.05", "--benchmark", &bench]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let values: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 9);
    assert!((values[8] - 1.3).abs() < 1e-9);
}

#[test]
fn malformed_benchmark_exits_with_data_error() {
    let s = Scratch::new("badbench");
    let bench = benchmark(
        &s,
        r#"[{"src_prompt": "a", "tgt_prompt": "a dog", "subject_token": "dog", "instruction": "", "gt_boxes": [{"x":0,"y":0,"w":1,"h":1}]},
            {"src_prompt": "a", "tgt_prompt": "a dog", "subject_token": "cat", "instruction": "", "gt_boxes": [{"x":0,"y":0,"w":1,"h":1}]}]"#,
    );
    let out = addit(&["--out", s.path("o").to_str().unwrap(), "eval", "--benchmark", &bench]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("record 1"));
}

#[test]
fn usage_errors_exit_one() {
    let s = Scratch::new("usage");
    let o = s.path("o");
    let o = o.to_str().unwrap();
    assert_eq!(addit(&["edit"]).status.code(), Some(1));
    assert_eq!(addit(&["--gamma", "fast", "edit", "--prompt", "x"]).status.code(), Some(1));
    assert_eq!(addit(&["--out", o, "--mode", "real", "edit", "--prompt", "a cat", "--subject", "cat"]).status.code(), Some(1));
    assert_eq!(addit(&["--help"]).status.code(), Some(0));
    let missing = addit(&["--out", o, "--mode", "real", "edit", "--prompt", "a cat", "--source", "/nonexistent.adlt"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn seed_comes_from_the_environment() {
    let s = Scratch::new("env");
    let cfg = small_config(&s);
    let out = s.path("g");
    let status = Command::new(env!("CARGO_BIN_EXE_addit"))
        .args(["--config", &cfg, "--out", out.to_str().unwrap(), "generate", "--prompt", "a hill"])
        .env("ADDIT_SEED", "42")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(manifest(&out)["seeds"]["target"], 42);
}
