use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
dataset_root = "data"
out_dir = "run"

[data]
per_motion = 1
heldout_per_motion = 1
frames = 8
size = 16

[vae]
widths = [4, 4]
latent_channels = 4

[vq_fine]
latent_channels = 4
hidden = 8
code_dim = 8
codebook_size = 8
heads = 2

[vq_coarse]
variant = "coarse"
compression = [2, 4, 4]
latent_channels = 4
hidden = 8
code_dim = 8
codebook_size = 8
heads = 2

[ar]
layers = 1
heads = 2
dim = 16
ffn = 32
max_len = 24
codebook_size = 8

[dit]
depth = 2
dim = 16
heads = 2
ffn_mult = 2
latent_channels = 4
diffusion_steps = 50

[train.vae]
steps = 2
batch = 2
[train.vqvae]
steps = 2
batch = 2
[train.ar]
steps = 2
batch = 2
[train.dit]
steps = 2
batch = 2
[train.injection]
steps = 2
batch = 2

[generation]
segment_len = 4
overlap = 1
ddim_steps = 3

[eval]
prompts = 2
sweep_prompts = 1
long_runs = 1
long_frames = 10
step_counts = [2, 3]
"#;

fn arlon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arlon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn manifest(dir: &Path, command: &str) -> serde_json::Value {
    let p = dir.join("run/manifests").join(format!("{command}.json"));
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn validation_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&arlon(&["build-data", "--config", missing.to_str().unwrap()])), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[generation]\nsegment_len = 12\noverlap = 12\n").unwrap();
    let o = arlon(&["train-all", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap"));

    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    // no corpus yet
    assert_eq!(code(&arlon(&["train-vae", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn end_to_end_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();

    // generation before training is a stage failure
    let early = dir.path().join("early.arlv");
    assert_eq!(code(&arlon(&["generate", "--config", c, "--prompt", "a red square moving left to right", "--out", early.to_str().unwrap()])), 3);

    assert_eq!(code(&arlon(&["build-data", "--config", c])), 0);
    assert_eq!(code(&arlon(&["train-all", "--config", c])), 0);
    let m = manifest(dir.path(), "train-all");
    assert_eq!(m["checkpoints"].as_object().unwrap().len(), 6);
    assert!(!m["config_hash"].as_str().unwrap().is_empty());

    let o = arlon(&["train-all", "--config", c, "--resume"]);
    assert_eq!(code(&o), 0);
    let m2 = manifest(dir.path(), "train-all");
    assert!(m2["stages"].as_array().unwrap().iter().all(|s| s["skipped"] == true));
    assert_eq!(m["checkpoints"], m2["checkpoints"]);

    let out = dir.path().join("long.arlv");
    let o = arlon(&[
        "generate-long", "--config", c, "--prompt", "a red square moving left to right", "--frames", "10", "--seed", "3",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.exists());
    assert!(out.with_extension("ppm").exists());
    let m = manifest(dir.path(), "generate-long");
    assert_eq!(m["metrics"]["dit_calls"], 3.0);

    // same seed, same bytes
    let out2 = dir.path().join("long2.arlv");
    arlon(&[
        "generate-long", "--config", c, "--prompt", "a red square moving left to right", "--frames", "10", "--seed", "3",
        "--out", out2.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());

    let prog = dir.path().join("prog.arlv");
    let o = arlon(&[
        "generate-progressive", "--config", c, "--prompts", "a red square moving left to right;a red square moving top to bottom",
        "--frames-per-prompt", "4", "--out", prog.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let tok = dir.path().join("long.tokens");
    assert_eq!(code(&arlon(&["tokenize", "--config", c, "--video", out.to_str().unwrap(), "--out", tok.to_str().unwrap()])), 0);
    let back = dir.path().join("back.arlv");
    assert_eq!(code(&arlon(&["detokenize", "--config", c, "--tokens", tok.to_str().unwrap(), "--out", back.to_str().unwrap()])), 0);

    let ar = dir.path().join("codes.tokens");
    assert_eq!(code(&arlon(&["sample-ar", "--config", c, "--prompt", "a red square moving left to right", "--out", ar.to_str().unwrap()])), 0);

    let o = arlon(&["eval", "--config", c, "--parts", "reconstruction,layout"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(dir.path(), "eval");
    assert!(m["metrics"]["psnr_vq_heldout"].is_number());
    assert!(m["metrics"]["layout_iou_injected"].is_number());

    let plot = dir.path().join("steps");
    assert_eq!(code(&arlon(&["plot", "--config", c, "--out", plot.to_str().unwrap()])), 0);
    assert!(plot.with_extension("svg").exists());
    assert!(plot.with_extension("tsv").exists());

    assert_eq!(code(&arlon(&["eval", "--config", c, "--parts", "bogus"])), 2);
}
