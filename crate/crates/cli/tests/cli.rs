use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TOY: &str = r#"{
    "scene": {"height": 12, "width": 12, "bands": 2, "num_blobs": 3, "rng_seed": 4},
    "num_scenes": 10,
    "system": {"mask_kind": "bernoulli", "mask_seed": 2, "shift_step": 1},
    "predictor": {"kind": "adjoint_baseline"},
    "refiner": {"bands": 2, "hidden_channels": 4, "num_res_blocks": 1},
    "train": {"steps": 3, "learning_rate": 0.001},
    "output_dir": "unused"
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cassi-refine"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with<'a>(cmd: &'a str, base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    [&[cmd][..], base, extra].concat()
}

fn count(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().count()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "toy.json", TOY);
    let out = tmp.path().join("run");
    let base = ["--config", s(&cfg), "--out", s(&out)];

    ok(&with("gen-data", &base, &[]));
    assert_eq!(count(&out.join("data/truth")), 10);
    assert_eq!(count(&out.join("data/measurements")), 10);
    assert!(out.join("data/mask.msic").is_file());
    let manifest = fs::read(out.join("manifest.json")).unwrap();
    ok(&with("gen-data", &base, &[]));
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), manifest);

    let train = ok(&with("train", &base, &["--steps", "2", "--seed", "9"]));
    assert!(train.contains("ground-truth reads 0"), "{train}");
    let loss = fs::read_to_string(out.join("train/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    ok(&with("eval", &base, &[]));
    let metrics = fs::read_to_string(out.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("scene,method,psnr_db,ssim"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 10);

    let cube = tmp.path().join("one.msic");
    let y = out.join("data/measurements/scene_003.msic");
    ok(&with("refine", &base, &["--input", s(&y), "--output", s(&cube)]));
    assert!(cube.is_file());

    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let files = json["files"].as_array().unwrap();
    assert!(files.iter().any(|f| f["path"] == "eval/metrics.csv"));
}

#[test]
fn supervised_identity_system_reaches_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = TOY
        .replace("\"bands\": 2", "\"bands\": 1")
        .replace("\"bernoulli\"", "\"all_ones\"")
        .replace("\"num_scenes\": 10", "\"num_scenes\": 2")
        .replace(
            "\"learning_rate\": 0.001",
            "\"learning_rate\": 0.001, \"mode\": \"supervised\"",
        );
    let cfg = write_config(tmp.path(), "id.json", &text);
    let out = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--steps", "500"]);
    let loss = fs::read_to_string(out.join("train/loss.csv")).unwrap();
    let last = loss.lines().last().unwrap();
    let total: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(loss.lines().count(), 501);
    assert!(total <= 1e-6, "{last}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let code = |args: &[&str]| cli(args).status.code();

    let typo = write_config(tmp.path(), "typo.json", &TOY.replace("\"num_scenes\"", "\"scenes\""));
    assert_eq!(code(&["gen-data", "--config", s(&typo)]), Some(2));
    let cfg = write_config(tmp.path(), "toy.json", TOY);
    assert_eq!(code(&["train", "--config", s(&cfg), "--alpha", "-1"]), Some(2));
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&out)]), Some(3));
    assert_eq!(
        code(&["gen-data", "--config", s(&tmp.path().join("missing.json"))]),
        Some(3)
    );

    let blowup = write_config(
        tmp.path(),
        "blowup.json",
        &TOY.replace("\"learning_rate\": 0.001", "\"learning_rate\": 1e38"),
    );
    assert_eq!(code(&["gen-data", "--config", s(&blowup), "--out", s(&out)]), Some(0));
    assert_eq!(
        code(&["train", "--config", s(&blowup), "--out", s(&out), "--steps", "50"]),
        Some(4)
    );
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        cassi_refine::experiment::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 2);
}
