use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "
holdout = 2
synth.count = 6
synth.height = 32
synth.width = 32
synth.reflection_blur = 1
depth.channels = 4,2,2,2,2,2,2,1
depth_train.batch_size = 1
depth_train.patch = 32
depth_train.max_steps = 3
regen.generator.depth = 3
regen.generator.base_channels = 2
regen.generator.max_channels = 4
regen.critic.depth = 3
regen.critic.base_channels = 2
regen.critic.max_channels = 4
regen_train.steps = 3
regen_train.batch_size = 2
extract.unet.depth = 3
extract.unet.base_channels = 2
extract.unet.max_channels = 4
extract.perceptual.width_divisor = 32
extract_train.max_steps = 3
extract_train.batch_size = 2
";

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.conf");
        fs::write(&config, TINY).unwrap();
        Self { _tmp: tmp, root, config }
    }

    /// Runs with dataset, checkpoints and outputs under `<tag>/`.
    fn run(&self, tag: &str, args: &[&str]) -> Output {
        let base = self.root.join(tag);
        let out = Command::new(env!("CARGO_BIN_EXE_refsep"))
            .arg("--config")
            .arg(&self.config)
            .arg("--dataset-dir")
            .arg(base.join("data"))
            .arg("--checkpoint-dir")
            .arg(base.join("ckpt"))
            .arg("--out-dir")
            .arg(base.join("out"))
            .args(args)
            .output()
            .unwrap();
        out
    }

    fn ok(&self, tag: &str, args: &[&str]) -> String {
        let out = self.run(tag, args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn train_all(&self, tag: &str) {
        for cmd in ["synth", "train-depth", "train-regen", "train-extract"] {
            self.ok(tag, &[cmd, "--seed", "5"]);
        }
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn assert_same_tree(a: &Path, b: &Path) {
    let files = files_under(a);
    assert!(!files.is_empty());
    assert_eq!(files, files_under(b));
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn synth_is_reproducible_per_seed() {
    let w = Workspace::new();
    w.ok("a", &["synth", "--seed", "3"]);
    w.ok("b", &["synth", "--seed", "3"]);
    w.ok("c", &["synth", "--seed", "4"]);
    assert_same_tree(&w.path("a/data"), &w.path("b/data"));
    assert_eq!(files_under(&w.path("a/data")).len(), 6 * 8 + 1);
    assert_ne!(
        fs::read(w.path("a/data/manifest.txt")).unwrap(),
        fs::read(w.path("c/data/manifest.txt")).unwrap()
    );
}

#[test]
fn training_and_inference_are_reproducible() {
    let w = Workspace::new();
    w.train_all("a");
    w.train_all("b");
    assert_same_tree(&w.path("a/out/losses"), &w.path("b/out/losses"));
    assert_same_tree(&w.path("a/ckpt"), &w.path("b/ckpt"));
    for name in ["depth.csv", "regen.csv", "extractor.csv"] {
        assert!(w.path("a/out/losses").join(name).exists(), "{name}");
    }

    let input = w.path("a/data/sample_00005");
    let input = input.to_str().unwrap();
    w.ok("a", &["infer", "--input", input, "--intermediates"]);
    let first = w.path("first");
    fs::remove_dir_all(w.path("a/out/losses")).unwrap();
    fs::rename(w.path("a/out"), &first).unwrap();
    w.ok("a", &["infer", "--input", input, "--intermediates"]);
    assert_same_tree(&first, &w.path("a/out"));
    for name in ["background.png", "residual.png", "residual_raw.pfm", "labels.png", "depth.png"] {
        assert!(first.join(name).exists(), "{name}");
    }
}

#[test]
fn reports_are_written() {
    let w = Workspace::new();
    w.train_all("a");
    let summary = w.ok("a", &["eval"]);
    assert!(summary.contains("output PSNR"));
    for name in ["eval-full.csv", "eval-full.txt", "histogram.csv", "histogram.png"] {
        assert!(w.path("a/out").join(name).exists(), "{name}");
    }
    let csv = fs::read_to_string(w.path("a/out/eval-full.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);

    let timing = w.ok("a", &["timing", "--repeats", "2"]);
    assert!(timing.contains("total"));
    assert!(w.path("a/out/timing.csv").exists());
    w.ok("a", &["timing", "--repeats", "1", "--size", "64"]);

    let table = w.ok("a", &["ablate"]);
    assert!(table.contains("no-regen"));
    let csv = fs::read_to_string(w.path("a/out/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    for ckpt in ["regen-no-discriminators", "extractor-no-i-mr.json", "extractor-no-i-mb.json"] {
        assert!(w.path("a/ckpt").join(ckpt).exists(), "{ckpt}");
    }
}

#[test]
fn errors_are_reported() {
    let w = Workspace::new();
    w.ok("a", &["synth"]);
    let out = w.run("a", &["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));

    let out = w.run("a", &["--no-regen", "train-regen"]);
    assert!(!out.status.success());

    fs::write(&w.config, "regen_train.stepz = 3\n").unwrap();
    let out = w.run("a", &["show-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn flags_override_the_config() {
    let w = Workspace::new();
    let text = w.ok("a", &["--seed", "11", "--no-i-mb", "show-config"]);
    assert!(text.contains("seed = 11"));
    assert!(text.contains("ablation.no_i_mb = true"));
    assert!(text.contains("synth.count = 6"));
}
