//! `arlon` command-line driver.
//!
//! Exit codes: 0 success, 2 validation error, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arlon_core::error::{Error, Result};
use arlon_core::io;
use arlon_core::latent_vqvae::IndexGrid;
use arlon_core::pipeline::{self, EvalParts, GenOptions, GenerationOutput, RunConfig, RunManifest, System, Trainer};
use arlon_core::synth_data::{self, Corpus};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arlon", version, about = "AR-code-guided video diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Clone)]
struct GenArgs {
    #[arg(long)]
    prompt: String,
    /// Output video (ARLV); a `.ppm` frame strip is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Run the bare backbone without semantic injection.
    #[arg(long)]
    no_injection: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic corpus.
    BuildData {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train the video autoencoder.
    TrainVae {
        #[command(flatten)]
        c: Common,
    },
    /// Train the latent VQ-VAEs.
    TrainVqvae {
        #[command(flatten)]
        c: Common,
        /// fine, coarse or both
        #[arg(long, default_value = "both")]
        variant: String,
    },
    /// Train the AR code model.
    TrainAr {
        #[command(flatten)]
        c: Common,
    },
    /// Backbone pretraining then injection training with a frozen backbone.
    TrainDit {
        #[command(flatten)]
        c: Common,
        /// backbone, injection or both
        #[arg(long, default_value = "both")]
        stage: String,
    },
    /// Every stage in dependency order.
    TrainAll {
        #[command(flatten)]
        c: Common,
        /// Skip stages whose checkpoints are current.
        #[arg(long)]
        resume: bool,
    },
    /// One short clip from a prompt.
    Generate {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        g: GenArgs,
    },
    /// Alias of `generate`.
    Sample {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        g: GenArgs,
    },
    /// Long video from overlapped segments.
    GenerateLong {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        g: GenArgs,
        /// Total latent frames.
        #[arg(long)]
        frames: usize,
    },
    /// Long video with prompt changes along the way.
    GenerateProgressive {
        #[command(flatten)]
        c: Common,
        /// Prompts in order, separated by `;`.
        #[arg(long)]
        prompts: String,
        #[arg(long)]
        frames_per_prompt: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Metrics on the trained system.
    Eval {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of reconstruction,layout,dynamics,sweep,long.
        #[arg(long)]
        parts: Option<String>,
    },
    /// Denoising-steps sweep: writes `<out>.svg` and `<out>.tsv`.
    Plot {
        #[command(flatten)]
        c: Common,
        #[arg(long, default_value = "steps")]
        curve: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Video file to fine code grid.
    Tokenize {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code grid to video.
    Detokenize {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample an AR code grid for a prompt.
    SampleAr {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Latent frames (defaults to one clip).
        #[arg(long)]
        frames: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.dataset_root).map_err(|e| match e {
        Error::Io { path, .. } => Error::validation(
            "dataset_root",
            format!("no corpus at {} (run build-data first)", path.display()),
        ),
        other => other,
    })
}

fn finish(mut m: RunManifest, cfg: &RunConfig) -> Result<()> {
    m.record_checkpoints(&cfg.out_dir);
    let p = m.write(&cfg.out_dir)?;
    log::info!("manifest written to {}", p.display());
    Ok(())
}

fn train(cfg: &RunConfig, name: &str, stages: &[&str], resume: bool) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let mut t = Trainer::new(cfg, &corpus);
    let mut m = RunManifest::new(name, cfg);
    for s in stages {
        let r = t.run_stage(s, resume)?;
        log::info!("stage {s}: {}", if r.skipped { "up to date".to_string() } else { format!("loss {:.5} in {:.1}s", r.final_loss, r.wall_clock_s) });
        for (k, v) in &r.metrics {
            m.metrics.insert(format!("{s}.{k}"), *v);
        }
        if !r.skipped {
            m.metrics.insert(format!("{s}.final_loss"), r.final_loss);
        }
        m.stages.push(r);
    }
    finish(m, cfg)
}

fn opts(cfg: &RunConfig, seed: Option<u64>, steps: Option<usize>, injected: bool) -> GenOptions {
    let mut o = GenOptions::from_config(&cfg.generation);
    o.seed = seed.unwrap_or(o.seed);
    o.steps = steps.unwrap_or(o.steps);
    o.injected = injected;
    o
}

fn save_video(path: &Path, g: &GenerationOutput) -> Result<Vec<String>> {
    io::write_video(path, &g.video)?;
    let strip = path.with_extension("ppm");
    io::write_bytes(&strip, &io::encode_ppm_strip(&g.video)?)?;
    let layout = path.with_extension("layout.ppm");
    io::write_bytes(&layout, &io::encode_ppm_strip(&g.coarse)?)?;
    Ok([path, &strip, &layout].iter().map(|p| p.display().to_string()).collect())
}

fn generated(cfg: &RunConfig, name: &str, o: &GenOptions, out: &Path, g: GenerationOutput) -> Result<()> {
    let mut m = RunManifest::new(name, cfg);
    m.seeds.insert("sample".into(), o.seed);
    m.metrics.insert("dit_calls".into(), g.dit_calls as f64);
    m.metrics.insert("denoiser_evals".into(), g.denoiser_evals as f64);
    m.metrics.insert("latent_frames".into(), g.plan.total_frames as f64);
    m.outputs = save_video(out, &g)?;
    m.outputs.push(out.with_extension("video.sha256").display().to_string());
    io::write_bytes(&out.with_extension("video.sha256"), io::file_sha256(out)?.as_bytes())?;
    finish(m, cfg)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::BuildData { c, overwrite } => {
            let cfg = RunConfig::load(&c.config)?;
            let man = synth_data::build_corpus(&cfg.data, &cfg.dataset_root, overwrite)?;
            let mut m = RunManifest::new("build-data", &cfg);
            m.metrics.insert("entries".into(), man.entries.len() as f64);
            m.outputs.push(man.content_hash());
            finish(m, &cfg)
        }
        Cmd::TrainVae { c } => train(&RunConfig::load(&c.config)?, "train-vae", &["vae"], false),
        Cmd::TrainVqvae { c, variant } => {
            let stages: &[&str] = match variant.as_str() {
                "fine" => &["vqvae-fine"],
                "coarse" => &["vqvae-coarse"],
                "both" => &["vqvae-fine", "vqvae-coarse"],
                other => return Err(Error::validation("variant", format!("{other:?} is not fine, coarse or both"))),
            };
            train(&RunConfig::load(&c.config)?, "train-vqvae", stages, false)
        }
        Cmd::TrainAr { c } => train(&RunConfig::load(&c.config)?, "train-ar", &["ar"], false),
        Cmd::TrainDit { c, stage } => {
            let stages: &[&str] = match stage.as_str() {
                "backbone" => &["dit"],
                "injection" => &["injection"],
                "both" => &["dit", "injection"],
                other => return Err(Error::validation("stage", format!("{other:?} is not backbone, injection or both"))),
            };
            train(&RunConfig::load(&c.config)?, "train-dit", stages, false)
        }
        Cmd::TrainAll { c, resume } => train(&RunConfig::load(&c.config)?, "train-all", &pipeline::STAGES, resume),
        Cmd::Generate { c, g } | Cmd::Sample { c, g } => {
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let o = opts(&cfg, g.seed, g.steps, !g.no_injection);
            let out = sys.generate_short(&g.prompt, &o)?;
            generated(&cfg, "generate", &o, &g.out, out)
        }
        Cmd::GenerateLong { c, g, frames } => {
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let o = opts(&cfg, g.seed, g.steps, !g.no_injection);
            let out = sys.generate_long(&g.prompt, frames, &o)?;
            generated(&cfg, "generate-long", &o, &g.out, out)
        }
        Cmd::GenerateProgressive {
            c,
            prompts,
            frames_per_prompt,
            out,
            seed,
            steps,
        } => {
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let o = opts(&cfg, seed, steps, true);
            let ps: Vec<&str> = prompts.split(';').map(str::trim).filter(|p| !p.is_empty()).collect();
            let g = sys.generate_progressive(&ps, frames_per_prompt, &o)?;
            generated(&cfg, "generate-progressive", &o, &out, g)
        }
        Cmd::Eval { c, out, parts } => {
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let corpus = load_corpus(&cfg)?;
            let parts = match parts {
                None => EvalParts::ALL,
                Some(s) => {
                    let mut p = EvalParts {
                        reconstruction: false,
                        layout: false,
                        dynamics: false,
                        sweep: false,
                        long: false,
                    };
                    for w in s.split(',').map(str::trim) {
                        match w {
                            "reconstruction" => p.reconstruction = true,
                            "layout" => p.layout = true,
                            "dynamics" => p.dynamics = true,
                            "sweep" => p.sweep = true,
                            "long" => p.long = true,
                            other => return Err(Error::validation("parts", format!("unknown part {other:?}"))),
                        }
                    }
                    p
                }
            };
            let res = pipeline::evaluate(&sys, &corpus, parts)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("report.json"));
            io::write_bytes(&path, &serde_json::to_vec_pretty(&res)?)?;
            for (k, v) in &res.report.metrics {
                println!("{k}\t{v:.6}");
            }
            let mut m = RunManifest::new("eval", &cfg);
            m.metrics = res.report.metrics.clone();
            m.outputs.push(path.display().to_string());
            finish(m, &cfg)
        }
        Cmd::Plot { c, curve, out } => {
            if curve != "steps" {
                return Err(Error::validation("curve", format!("unknown curve {curve:?}; only \"steps\" is available")));
            }
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let corpus = load_corpus(&cfg)?;
            let res = pipeline::evaluate(
                &sys,
                &corpus,
                EvalParts {
                    reconstruction: false,
                    layout: false,
                    dynamics: false,
                    sweep: true,
                    long: false,
                },
            )?;
            let table = res.sweep.expect("sweep requested");
            let (svg, tsv) = (out.with_extension("svg"), out.with_extension("tsv"));
            io::write_bytes(&svg, table.to_svg().as_bytes())?;
            io::write_bytes(&tsv, table.to_tsv().as_bytes())?;
            print!("{}", table.to_tsv());
            let mut m = RunManifest::new("plot", &cfg);
            m.metrics = res.report.metrics;
            m.outputs = vec![svg.display().to_string(), tsv.display().to_string()];
            finish(m, &cfg)
        }
        Cmd::Tokenize { c, video, out } => {
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let grid = sys.tokenize_video(&io::read_video(&video)?)?;
            io::write_bytes(&out, &grid.to_token_file().encode())?;
            let mut m = RunManifest::new("tokenize", &cfg);
            m.outputs.push(out.display().to_string());
            finish(m, &cfg)
        }
        Cmd::Detokenize { c, tokens, out } => {
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let grid = IndexGrid::from_token_file(&io::TokenFile::decode(&io::read_bytes(&tokens)?)?)?;
            let v = sys.detokenize(&grid)?;
            io::write_video(&out, &v)?;
            io::write_bytes(&out.with_extension("ppm"), &io::encode_ppm_strip(&v)?)?;
            let mut m = RunManifest::new("detokenize", &cfg);
            m.outputs.push(out.display().to_string());
            finish(m, &cfg)
        }
        Cmd::SampleAr {
            c,
            prompt,
            out,
            seed,
            frames,
        } => {
            let cfg = RunConfig::load(&c.config)?;
            let sys = System::load(cfg.clone())?;
            let o = opts(&cfg, seed, None, true);
            let ids = synth_data::TextPrompt::parse(&prompt, cfg.ar.text_len)?.token_ids;
            let n = frames.unwrap_or(cfg.clip_latent_frames());
            let grid = sys.ar_stream(&vec![ids; n], &o)?;
            io::write_bytes(&out, &grid.to_token_file().encode())?;
            let mut m = RunManifest::new("sample-ar", &cfg);
            m.seeds.insert("sample".into(), o.seed);
            m.outputs.push(out.display().to_string());
            finish(m, &cfg)
        }
    }
}
