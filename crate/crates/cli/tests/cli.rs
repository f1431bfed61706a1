use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ccvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Five ordered classes along one direction of a 3-feature space.
fn toy_csv(dir: &Path) -> PathBuf {
    let mut s = String::from("f1,f2,f3,label\n");
    for i in 0..150usize {
        let c = i % 5;
        let jitter = ((i * 37 % 11) as f64 - 5.0) / 20.0;
        let t = c as f64 + jitter;
        s.push_str(&format!("{t},{},{},{}\n", 2.0 * t - jitter, (i % 7) as f64 / 7.0, c + 1));
    }
    let p = dir.join("toy.csv");
    fs::write(&p, s).unwrap();
    p
}

fn toy_config(dir: &Path) -> PathBuf {
    let csv = toy_csv(dir);
    let text = format!(
        r#"
[run]
seed = 11

[data]
kind = "stocks"
path = "{}"
label_fraction = 0.5
train_size = 100
test_size = 50
n_splits = 2

[model]
latent_dim = 1
recognition_hidden = [6]
generative_hidden = [6]
classifier_hidden = [6]
activation = "tanh"
head = "ordmax"

[train]
epochs = 3
batch_size_labeled = 20
batch_size_unlabeled = 20
alpha = 5.0
"#,
        csv.display()
    );
    let p = dir.join("toy.toml");
    fs::write(&p, text).unwrap();
    p
}

fn manifest(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn missing_config_exits_1_and_names_the_file() {
    let out = ccvae(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent/run.toml"), "{}", stderr(&out));
}

#[test]
fn malformed_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[train]\nepochs = \"many\"\n").unwrap();
    let out = ccvae(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_2_and_still_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = ccvae(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "data.path=\"/nonexistent/stock.csv\"",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let m = manifest(&out_dir.join("manifest.txt"));
    assert!(m.contains("status = failed"));
    assert!(m.contains("/nonexistent/stock.csv"));
}

#[test]
fn alpha_flag_overrides_file_and_lands_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = ccvae(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        "100",
        "--set",
        "train.epochs=1",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = manifest(&out_dir.join("manifest.txt"));
    assert!(m.contains("config.train.alpha = 100.0\n"), "{m}");
    assert!(m.contains("config.train.epochs = 1\n"));
}

#[test]
fn toy_train_writes_metrics_checkpoint_and_manifest_then_eval_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = ccvae(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));

    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,"));
    assert_eq!(metrics.lines().count(), 4);
    assert!(out_dir.join("last.ckpt").exists());
    assert!(out_dir.join("best.ckpt").exists());
    let m = manifest(&out_dir.join("manifest.txt"));
    for key in ["verb = train", "build = ", "seed = 11", "dataset_sha256 = ", "final_test_error = ", "status = ok"] {
        assert!(m.contains(key), "missing `{key}` in\n{m}");
    }
    let sha = m.lines().find_map(|l| l.strip_prefix("dataset_sha256 = ")).unwrap();
    assert_eq!(sha.len(), 64);

    let ckpt = out_dir.join("best.ckpt");
    let eval_dir = dir.path().join("eval");
    let out = ccvae(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("split,error,mae,n\n"));
    assert!(csv.contains("\ntest,"));
    assert!(eval_dir.join("manifest.txt").exists());

    // figure verbs reject a non-image model with a config error
    let grid = dir.path().join("grid.pgm");
    let out = ccvae(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--output", grid.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!grid.exists());
    assert!(manifest(&dir.path().join("grid.pgm.manifest")).contains("status = failed"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let run = |name: &str| {
        let d = dir.path().join(name);
        let out = ccvae(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(d.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn replicate_smoke_summary_is_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path());
    let out_dir = dir.path().join("rep");
    let out = ccvae(&[
        "replicate",
        "--config",
        cfg.to_str().unwrap(),
        "--n-runs",
        "2",
        "--set",
        "train.epochs=1",
        "--set",
        "replicate.fractions=[0.1, 0.3]",
        "--set",
        "replicate.heads=[\"softmax\", \"ordmax\"]",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "head,fraction,n_runs,mean_error,std_error,mean_mae,std_mae,degenerate");
    assert_eq!(lines.len(), 1 + 4);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 8);
        assert_eq!(f[2], "2");
        let err: f64 = f[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&err));
    }
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
}

#[test]
fn unknown_verb_is_a_usage_error() {
    assert_eq!(ccvae(&["frobnicate"]).status.code(), Some(1));
}

/// A 4×4-pixel, 3-class, 2-dimensional-latent image model saved as a checkpoint.
fn image_checkpoint(dir: &Path) -> PathBuf {
    use ccvae::checkpoint::Checkpoint;
    use ccvae::model::{Architecture, CcVae, HeadKind, OutputKind};
    let arch = Architecture {
        data_dim: 16,
        latent_dim: 2,
        num_classes: 3,
        recognition_hidden: vec![5],
        generative_hidden: vec![5],
        classifier_hidden: vec![5],
        activation: ccvae::Activation::Softplus,
        output: OutputKind::Bernoulli,
        global_variance: false,
        head: HeadKind::Softmax,
        label_values: Architecture::default_labels(3),
        learn_class_prior: false,
    };
    let p = dir.join("img.ckpt");
    Checkpoint::new(CcVae::init(arch, 4).unwrap(), None).save(&p).unwrap();
    p
}

fn pgm_dims(bytes: &[u8]) -> (usize, usize) {
    let img = ccvae::figures::GrayImage::from_pgm(bytes).unwrap();
    (img.width, img.height)
}

#[test]
fn figure_verbs_write_pgm_grids_and_latent_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = image_checkpoint(dir.path());
    let ck = ckpt.to_str().unwrap();

    let samples = dir.path().join("s.pgm");
    let out = ccvae(&["sample", "--checkpoint", ck, "--per-class", "1", "--output", samples.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = fs::read(&samples).unwrap();
    assert!(bytes.starts_with(b"P5\n4 12\n255\n"));
    assert_eq!(pgm_dims(&bytes), (4, 12));
    let again = dir.path().join("s2.pgm");
    ccvae(&["sample", "--checkpoint", ck, "--per-class", "1", "--output", again.to_str().unwrap()]);
    assert_eq!(fs::read(&again).unwrap(), bytes);
    assert!(manifest(&dir.path().join("s.pgm.manifest")).contains("status = ok"));

    let interp = dir.path().join("i.pgm");
    let out = ccvae(&["interpolate", "--checkpoint", ck, "--steps", "2", "--output", interp.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(pgm_dims(&fs::read(&interp).unwrap()), (8, 8));

    let map = dir.path().join("map.csv");
    let out = ccvae(&["latent-map", "--checkpoint", ck, "--resolution", "10", "--output", map.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(&map).unwrap();
    assert_eq!(csv.lines().next(), Some("z1,z2,density"));
    assert_eq!(csv.lines().count(), 10 * 10 + 1);
    let priors = fs::read_to_string(dir.path().join("map.priors.csv")).unwrap();
    assert_eq!(priors.lines().count(), 1 + 3);
}
