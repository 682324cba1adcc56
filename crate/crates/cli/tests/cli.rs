use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 5

[data]
count = 10
split = [0.8, 0.2]

[data.generator]
patch_size = 16
nuclei_per_patch = [1, 4]

[model]
num_classes = 4
base_width = 8
width_mults = [1, 2]
groups = 4
time_dim = 16
text_dim = 16

[model.points]
features = 4
growth = 4
blocks = 1
dense_blocks = 1
dense_layers = 1

[diffusion]
steps = 6

[training]
batch_size = 4
steps = 4
checkpoint_every = 2

[sampling]
omega = 1.0
batch_size = 2

[text]
embed_dim = 16
"#;

fn cosynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("COSYNTH_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cosynth(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out_a = ok(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    let out_b = ok(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    assert!(out_a.contains("8 train and 2 test"), "{out_a}");
    let digest = |o: &str| o.rsplit("sha256 ").next().unwrap().to_string();
    assert_eq!(digest(&out_a), digest(&out_b));
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("manifest.json")));
    assert_eq!(ta, tb);

    let c = tmp.path().join("c");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "6", "--out", s(&c)]);
    assert_ne!(tree(&c), ta);
}

#[test]
fn data_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_cosynth"))
        .args(["gen-data", "--config", s(&cfg)])
        .env("COSYNTH_DATA_ROOT", tmp.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("toy").join("manifest.json").exists());
}

#[test]
fn invalid_split_fails_before_writing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("split = [0.8, 0.2]", "split = [0.7, 0.2]"));
    let target = tmp.path().join("never");
    let out = cosynth(&["gen-data", "--config", s(&cfg), "--out", s(&target)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("split"));
    assert!(!target.exists());
}

#[test]
fn config_errors_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(tmp.path(), &TINY.replace("num_classes = 4", "num_classes = 5"));
    let out = cosynth(&["gen-data", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));

    let unknown = write_config(tmp.path(), &format!("{TINY}\nbogus = 1\n"));
    assert_eq!(cosynth(&["gen-data", "--config", s(&unknown)]).status.code(), Some(1));

    let missing = tmp.path().join("absent.toml");
    let out = cosynth(&["gen-data", "--config", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));

    assert_eq!(cosynth(&["gen-data", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(cosynth(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cosynth(&["--help"]).status.code(), Some(0));
}

#[test]
fn prompt_command() {
    let out = ok(&["prompt", "--tissue", "colon", "--cells", "lymphocyte, epithelial"]);
    assert_eq!(
        out.trim(),
        "high-quality histopathology colon tissue image including nuclei types of lymphocyte, epithelial."
    );
    let out = ok(&["prompt", "--tissue", "breast", "--cells", "connective", "--stain", "H&E"]);
    assert_eq!(
        out.trim(),
        "high-quality histopathology H&E-stained breast tissue image including nuclei types of connective."
    );
    assert_eq!(cosynth(&["prompt", "--tissue", "colon", "--cells", ""]).status.code(), Some(1));
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let text = ok(&["eval", "--pred", s(&data), "--gt", s(&data), "--out", s(&r1)]);
    assert!(text.contains("fsd = 0.000000"), "{text}");
    let m = metrics(&r1);
    for key in ["dice", "mdice", "aji", "f_d", "acc"] {
        assert_eq!(m["values"][key].as_f64(), Some(1.0), "{key}");
    }
    assert!(m["values"]["fsd"].as_f64().unwrap().abs() <= 1e-9);

    ok(&["eval", "--pred", s(&data), "--gt", s(&data), "--out", s(&r2)]);
    assert_eq!(tree(&r1), tree(&r2));

    let out = cosynth(&["eval", "--pred", s(&data), "--gt", s(&data), "--metrics", "dice,nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_names_missing_paths() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);

    let ghost = tmp.path().join("ghost");
    let out = cosynth(&["eval", "--pred", s(&ghost), "--gt", s(&data)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&ghost)));

    let copy = tmp.path().join("copy");
    std::fs::create_dir(&copy).unwrap();
    for (rel, bytes) in tree(&data) {
        let p = copy.join(&rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, bytes).unwrap();
    }
    let victim = tree(&copy).into_keys().find(|p| p != Path::new("manifest.json")).unwrap();
    std::fs::remove_file(copy.join(&victim)).unwrap();
    let out = cosynth(&["eval", "--pred", s(&copy), "--gt", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(victim.file_name().unwrap().to_str().unwrap()), "{err}");
}

#[test]
fn train_sample_separate_eval() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let log = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4);
    assert!(run.join("checkpoints/step-000002").is_dir());
    let ckpt = run.join("checkpoints/final");
    assert!(ckpt.is_dir());
    let manifest = std::fs::read_to_string(run.join("run.json")).unwrap();
    assert!(manifest.contains("reference_settings"));

    // A second identical run reproduces the loss log.
    let run2 = tmp.path().join("run2");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run2)]);
    assert_eq!(log, std::fs::read_to_string(run2.join("losses.csv")).unwrap());

    let (sa, sb) = (tmp.path().join("sa"), tmp.path().join("sb"));
    for out in [&sa, &sb] {
        ok(&["sample", "--checkpoint", s(&ckpt), "--conditions", s(&data), "--out", s(out)]);
    }
    assert!(sa.join("grid.png").exists());
    assert_eq!(tree(&sa), tree(&sb));

    let sep = tmp.path().join("sep");
    ok(&["separate", "--input", s(&sa), "--out", s(&sep)]);
    let text = ok(&["eval", "--pred", s(&sep), "--gt", s(&sep)]);
    assert!(text.contains("num_gt = 2"), "{text}");
    let m = metrics(&sep);
    assert_eq!(m["values"]["aji"].as_f64().or(m["undefined"]["aji"].as_str().map(|_| 1.0)), Some(1.0));

    let out = cosynth(&["sample", "--checkpoint", s(&ckpt), "--conditions", s(&data), "--split", "val", "--out", s(&tmp.path().join("z"))]);
    assert_eq!(out.status.code(), Some(1));
}
