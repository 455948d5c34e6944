//! End-to-end tests of the command-line binary: exit codes, write
//! discipline, determinism, and the shape of every artifact it produces.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fhvae")
}

/// A tiny corpus + model configuration that trains in well under a second.
const TINY_CONFIG: &str = r#"
[latent]
dim_z1 = 4
dim_z2 = 4
dim_z_vae = 6
input_width = 10
input_dim = 6

[arch]
cell = "feedforward"
layers = 1
units = 8

[train]
batch_size = 32
lr = 0.005
max_epochs = 2
patience_epochs = 1

[synth]
n_speakers = 2
n_noise_types = 2
n_utts_per_speaker = 4
t_min = 30
t_max = 50
dim = 6
n_segment_classes = 2
seg_width = 10
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        Workspace {
            _dir: dir,
            root,
            config,
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(bin())
            .args(args)
            .current_dir(&self.root)
            .env_remove("FHVAE_DATA_ROOT")
            .output()
            .expect("binary runs")
    }

    fn run_ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "command {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Generate the tiny corpus into `<root>/corpus`.
    fn with_corpus(self) -> Self {
        self.run_ok(&[
            "--config",
            "tiny.toml",
            "--seed",
            "7",
            "datagen",
            "--out",
            "corpus",
        ]);
        self
    }
}

fn read_all_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn unknown_subcommand_is_a_usage_error_and_writes_nothing() {
    let ws = Workspace::new();
    let before = read_all_bytes(&ws.root).len();
    let out = ws.run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read_all_bytes(&ws.root).len(), before);
}

#[test]
fn invalid_flag_value_is_a_usage_error_before_any_writes() {
    let ws = Workspace::new().with_corpus();
    let out = ws.run(&[
        "--data", "corpus", "train", "--out", "run", "--alpha", "-3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("run").exists(), "usage error must not create outputs");
    // Same for a malformed config file.
    std::fs::write(ws.path("bad.toml"), "[latent]\nnope = 1\n").unwrap();
    let out = ws.run(&["--config", "bad.toml", "datagen", "--out", "gen"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path("gen").exists());
}

#[test]
fn missing_inputs_fail_with_a_single_line_diagnostic() {
    let ws = Workspace::new();
    // No --data flag and no environment default.
    let out = ws.run(&["train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2), "unresolvable data root is a usage error");
    // Data root set but pointing nowhere: runtime error, exit 1.
    let out = ws.run(&["--data", "nowhere", "train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "diagnostic: {stderr}");
    assert!(stderr.starts_with("error: "));
    assert!(!ws.path("run").exists());
}

#[test]
fn datagen_is_byte_identical_under_a_fixed_seed() {
    let ws = Workspace::new();
    for out in ["a", "b"] {
        ws.run_ok(&["--config", "tiny.toml", "--seed", "42", "datagen", "--out", out]);
    }
    let a = read_all_bytes(&ws.path("a"));
    let b = read_all_bytes(&ws.path("b"));
    assert_eq!(a.len(), 13, "4 splits x 3 files + config.toml");
    assert_eq!(a, b);

    // A different seed must change the feature archives.
    ws.run_ok(&["--config", "tiny.toml", "--seed", "43", "datagen", "--out", "c"]);
    let c = read_all_bytes(&ws.path("c"));
    assert_ne!(a, c);
}

#[test]
fn data_root_environment_variable_is_honored() {
    let ws = Workspace::new().with_corpus();
    let out = Command::new(bin())
        .args(["--config", "tiny.toml", "--seed", "7", "train", "--out", "run_env"])
        .current_dir(&ws.root)
        .env("FHVAE_DATA_ROOT", ws.path("corpus"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(ws.path("run_env/model.fhck").exists());
}

#[test]
fn train_extract_and_eval_artifacts_line_up() {
    let ws = Workspace::new().with_corpus();

    // Train the factorized model and the baseline.
    let stdout = ws.run_ok(&[
        "--config", "tiny.toml", "--seed", "7", "--data", "corpus",
        "train", "--out", "run_f", "--alpha", "10", "--seq-label", "uttid",
    ]);
    assert!(stdout.contains("trained fhvae"), "{stdout}");
    ws.run_ok(&[
        "--config", "tiny.toml", "--seed", "7", "--data", "corpus",
        "train", "--out", "run_v", "--mode", "vae",
    ]);

    // Checkpoints load and carry the configured geometry.
    let ckpt = fhvae::checkpoint::read_checkpoint(ws.path("run_f/model.fhck")).unwrap();
    assert_eq!(ckpt.params.latent().dim_z1, 4);
    assert_eq!(ckpt.table.num_sequences(), 8);
    // The echoed config parses and reflects the flag overrides.
    let echoed =
        fhvae::config::RunConfig::load(&ws.path("run_f/config.toml")).unwrap();
    assert_eq!(echoed.train.alpha, 10.0);
    assert_eq!(echoed.train.seed, 7);
    assert_eq!(echoed.seq_label, Some(fhvae::config::SeqLabel::UttId));
    // Per-epoch report: header plus one row per epoch plus footer.
    let report = std::fs::read_to_string(ws.path("run_f/report.txt")).unwrap();
    assert!(report.lines().next().unwrap().starts_with("epoch"));
    assert!(report.contains("best_epoch"));

    // Extraction writes an archive with T rows and 2*dim_z1 columns.
    ws.run_ok(&[
        "--data", "corpus", "extract", "--checkpoint", "run_f/model.fhck",
        "--feature", "z1", "--split", "test_clean", "--out", "feats",
    ]);
    let archive =
        fhvae::archive::read_archive(&ws.path("feats/test_clean_z1.farc")).unwrap();
    let source = fhvae::synth::load_split(&ws.path("corpus"), "test_clean").unwrap();
    assert_eq!(archive.len(), source.len());
    for utt in source.utterances() {
        let rec = archive.get(&utt.utt_id).unwrap();
        assert_eq!(rec.frames.nrows(), utt.num_frames());
        assert_eq!(rec.frames.ncols(), 8);
    }

    // The invariance report covers raw + z + z1 by default and its JSON
    // file parses with the same cells.
    let stdout = ws.run_ok(&[
        "--data", "corpus", "--seed", "5", "eval-invariance",
        "--fhvae", "run_f/model.fhck", "--vae", "run_v/model.fhck",
        "--out", "inv",
    ]);
    for feature in ["raw", "z", "z1"] {
        assert!(stdout.lines().any(|l| l.starts_with(feature)), "{stdout}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("inv/report.json")).unwrap())
            .unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 3);

    // eval-collapse prints the spread; the baseline VAE has no table.
    let stdout = ws.run_ok(&["eval-collapse", "--checkpoint", "run_f/model.fhck"]);
    assert!(stdout.starts_with("svector_spread "), "{stdout}");
    let spread: f64 = stdout
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(spread.is_finite() && spread >= 0.0);
    let out = ws.run(&["eval-collapse", "--checkpoint", "run_v/model.fhck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_reproducible_under_a_fixed_seed() {
    let ws = Workspace::new().with_corpus();
    for out in ["r1", "r2"] {
        ws.run_ok(&[
            "--config", "tiny.toml", "--seed", "11", "--data", "corpus",
            "train", "--out", out,
        ]);
    }
    let a = std::fs::read(ws.path("r1/model.fhck")).unwrap();
    let b = std::fs::read(ws.path("r2/model.fhck")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical checkpoints");
}

#[test]
fn sweep_alpha_writes_one_run_per_alpha_and_a_summary() {
    let ws = Workspace::new().with_corpus();
    let stdout = ws.run_ok(&[
        "--config", "tiny.toml", "--seed", "7", "--data", "corpus",
        "sweep-alpha", "--alphas", "0,10", "--out", "sweep",
    ]);
    assert!(stdout.contains("alpha 0:"), "{stdout}");
    assert!(stdout.contains("alpha 10:"), "{stdout}");
    for sub in ["alpha_0", "alpha_10"] {
        assert!(ws.path(&format!("sweep/{sub}/model.fhck")).exists());
        assert!(ws.path(&format!("sweep/{sub}/config.toml")).exists());
    }
    let summary = std::fs::read_to_string(ws.path("sweep/sweep.txt")).unwrap();
    assert_eq!(summary.lines().count(), 3, "header + one row per alpha");
    assert!(summary.lines().next().unwrap().starts_with("alpha\t"));
}
