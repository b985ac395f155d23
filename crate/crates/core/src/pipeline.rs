//! Run configuration, staged training with resumable checkpoints, and the
//! short, long and progressive generation paths.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ar_model::{flatten_grid, ArConfig, ArModel, SampleOptions};
use crate::dit::schedule::{ddim_sample, NoisePredictor};
use crate::dit::{Dit, DitConfig};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, SweepTable};
use crate::injection::{ConditionedPredictor, InjectionConfig, Injector};
use crate::io::{self, Checkpoint};
use crate::latent_vqvae::{IndexGrid, LatentVqVae, VqConfig};
use crate::nn::{lr_schedule, Adam, AdamConfig, ParamStore};
use crate::synth_data::{self, Corpus, CorpusConfig, Split};
use crate::tensor::Tensor;
use crate::video_vae::{VideoVae, VideoVaeConfig};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StageBudget {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
}

impl StageBudget {
    pub fn new(steps: usize, batch: usize, lr: f64, warmup: usize) -> Self {
        StageBudget { steps, batch, lr, warmup }
    }
}

impl Default for StageBudget {
    fn default() -> Self {
        StageBudget::new(100, 4, 1e-3, 10)
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TrainConfig {
    pub vae: StageBudget,
    pub vqvae: StageBudget,
    pub ar: StageBudget,
    pub dit: StageBudget,
    pub injection: StageBudget,
    /// Dead-code restarts every this many VQ steps; 0 disables.
    pub revive_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vae: StageBudget::new(600, 4, 2e-3, 30),
            vqvae: StageBudget::new(1500, 8, 2e-3, 50),
            ar: StageBudget::new(1500, 16, 1e-3, 100),
            dit: StageBudget::new(2000, 8, 1e-3, 100),
            injection: StageBudget::new(1500, 8, 1e-3, 100),
            revive_every: 100,
            seed: 11,
        }
    }
}

/// Budget keys as written; absent keys keep the stage's own default.
#[derive(Deserialize, Default)]
#[serde(default)]
struct BudgetPatch {
    steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    warmup: Option<usize>,
}

impl BudgetPatch {
    fn over(self, b: StageBudget) -> StageBudget {
        StageBudget {
            steps: self.steps.unwrap_or(b.steps),
            batch: self.batch.unwrap_or(b.batch),
            lr: self.lr.unwrap_or(b.lr),
            warmup: self.warmup.unwrap_or(b.warmup),
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainPatch {
    vae: BudgetPatch,
    vqvae: BudgetPatch,
    ar: BudgetPatch,
    dit: BudgetPatch,
    injection: BudgetPatch,
    revive_every: Option<usize>,
    seed: Option<u64>,
}

impl<'de> Deserialize<'de> for TrainConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = TrainPatch::deserialize(d)?;
        let b = TrainConfig::default();
        Ok(TrainConfig {
            vae: p.vae.over(b.vae),
            vqvae: p.vqvae.over(b.vqvae),
            ar: p.ar.over(b.ar),
            dit: p.dit.over(b.dit),
            injection: p.injection.over(b.injection),
            revive_every: p.revive_every.unwrap_or(b.revive_every),
            seed: p.seed.unwrap_or(b.seed),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenerationConfig {
    /// Latent frames per DiT segment.
    pub segment_len: usize,
    /// Conditioning latent frames shared with the previous segment.
    pub overlap: usize,
    pub ddim_steps: usize,
    /// Grid frames per AR window when chaining long streams.
    pub ar_window: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    /// Allow a shorter final segment when the frame count does not tile.
    pub truncate_final: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            segment_len: 12,
            overlap: 3,
            ddim_steps: 30,
            ar_window: 4,
            temperature: 1.0,
            top_k: 32,
            seed: 0,
            truncate_final: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub prompts: usize,
    pub seed: u64,
    pub iou_threshold: f64,
    pub step_counts: Vec<usize>,
    pub sweep_prompts: usize,
    pub long_runs: usize,
    pub long_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompts: 20,
            seed: 100,
            iou_threshold: eval::DEFAULT_IOU_THRESHOLD,
            step_counts: vec![3, 5, 10, 30],
            sweep_prompts: 10,
            long_runs: 10,
            long_frames: 30,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    pub data: CorpusConfig,
    pub vae: VideoVaeConfig,
    pub vq_fine: VqConfig,
    pub vq_coarse: VqConfig,
    pub ar: ArConfig,
    pub dit: DitConfig,
    pub injection: InjectionConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            data: CorpusConfig::default(),
            vae: VideoVaeConfig::default(),
            vq_fine: VqConfig::fine(8),
            vq_coarse: VqConfig::coarse(8),
            ar: ArConfig::default(),
            dit: DitConfig::default(),
            injection: InjectionConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset_root, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Latent frames of one corpus clip.
    pub fn clip_latent_frames(&self) -> usize {
        self.data.frames / self.vae.temporal_stride
    }

    pub fn validate(&self) -> Result<()> {
        self.vae.validate()?;
        let ls = self.vae.latent_shape(&[self.data.frames, self.data.size, self.data.size, 3])?;
        let c = self.vae.latent_channels;
        for (name, vq) in [("vq_fine", &self.vq_fine), ("vq_coarse", &self.vq_coarse)] {
            vq.validate()?;
            if vq.latent_channels != c {
                return Err(Error::validation(
                    format!("{name}.latent_channels"),
                    format!("{} but the video latent has {c}", vq.latent_channels),
                ));
            }
            vq.grid_dims(&ls)?;
        }
        self.ar.validate()?;
        if self.ar.codebook_size != self.vq_fine.codebook_size {
            return Err(Error::validation("ar.codebook_size", "must equal vq_fine.codebook_size"));
        }
        let g = self.vq_fine.grid_dims(&ls)?;
        let need = crate::ar_model::sequence_len([self.generation.ar_window.max(g[0]), g[1], g[2]]);
        if need > self.ar.max_len {
            return Err(Error::validation(
                "ar.max_len",
                format!("{} is shorter than the {need} tokens of one window", self.ar.max_len),
            ));
        }
        self.dit.validate()?;
        if self.dit.latent_channels != c {
            return Err(Error::validation("dit.latent_channels", format!("must equal the video latent's {c}")));
        }
        self.dit.token_grid(&[ls[0], ls[1], ls[2], c])?;
        self.injection.validate(self.dit.depth)?;
        let gc = &self.generation;
        if gc.overlap == 0 || gc.overlap >= gc.segment_len {
            return Err(Error::validation(
                "generation.overlap",
                format!("need 0 < M < L_seg, got M = {}, L_seg = {}", gc.overlap, gc.segment_len),
            ));
        }
        let r = self.vq_fine.compression[0];
        if gc.segment_len % r != 0 || gc.overlap % self.dit.patch[0] != 0 {
            return Err(Error::validation("generation.segment_len", "segments must align with the code grid"));
        }
        if gc.ar_window < 2 {
            return Err(Error::validation("generation.ar_window", "need at least 2 grid frames"));
        }
        if gc.ddim_steps == 0 || gc.ddim_steps > self.dit.diffusion_steps {
            return Err(Error::validation(
                "generation.ddim_steps",
                format!("{} outside 1..={}", gc.ddim_steps, self.dit.diffusion_steps),
            ));
        }
        for (name, b) in [
            ("vae", &self.train.vae),
            ("vqvae", &self.train.vqvae),
            ("ar", &self.train.ar),
            ("dit", &self.train.dit),
            ("injection", &self.train.injection),
        ] {
            if b.batch == 0 || b.lr <= 0.0 {
                return Err(Error::validation(format!("train.{name}"), "batch and lr must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    /// Latent frames the segment spans, conditioning frames included.
    pub frames: Range<usize>,
    /// Leading conditioning frames copied from the previous segment.
    pub cond: Range<usize>,
    /// Frames this segment contributes to the output.
    pub new_frames: Range<usize>,
    pub prompt: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub total_frames: usize,
    pub segment_len: usize,
    pub overlap: usize,
    pub segments: Vec<Segment>,
    /// `(prompt index, latent frame range)` in order.
    pub prompt_regions: Vec<(usize, Range<usize>)>,
}

/// Segment plan for `total` latent frames: `1 + (total − L)/(L − M)`
/// segments. With `truncate` a non-tiling remainder becomes a shorter final
/// segment.
pub fn plan_segments(total: usize, seg_len: usize, overlap: usize, truncate: bool) -> Result<GenerationPlan> {
    if overlap >= seg_len {
        return Err(Error::validation(
            "overlap",
            format!("M = {overlap} must be smaller than L_seg = {seg_len}"),
        ));
    }
    if total < seg_len {
        return Err(Error::validation(
            "total_frames",
            format!("{total} frames is shorter than one {seg_len}-frame segment"),
        ));
    }
    let stride = seg_len - overlap;
    let rem = (total - seg_len) % stride;
    if rem != 0 && !truncate {
        return Err(Error::validation(
            "total_frames",
            format!(
                "{total} − {seg_len} is not a multiple of {stride}; pick another length or allow a truncated final segment"
            ),
        ));
    }
    let n = 1 + (total - seg_len).div_ceil(stride);
    let segments = (0..n)
        .map(|s| {
            let start = s * stride;
            let end = (start + seg_len).min(total);
            let cond = if s == 0 { start..start } else { start..start + overlap };
            Segment {
                index: s,
                frames: start..end,
                new_frames: cond.end..end,
                cond,
                prompt: 0,
            }
        })
        .collect();
    Ok(GenerationPlan {
        total_frames: total,
        segment_len: seg_len,
        overlap,
        segments,
        prompt_regions: vec![(0, 0..total)],
    })
}

impl GenerationPlan {
    /// Assigns consecutive prompt regions of the given lengths; each segment
    /// takes the prompt in force at its first new frame.
    pub fn with_prompts(mut self, lengths: &[usize]) -> Result<Self> {
        if lengths.iter().sum::<usize>() != self.total_frames || lengths.iter().any(|&l| l == 0) {
            return Err(Error::validation("prompts", "prompt regions must be non-empty and cover every frame"));
        }
        let mut start = 0;
        self.prompt_regions = lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                start += l;
                (i, start - l..start)
            })
            .collect();
        let prompts: Vec<usize> = self.segments.iter().map(|s| self.prompt_at(s.new_frames.start)).collect();
        for (seg, p) in self.segments.iter_mut().zip(prompts) {
            seg.prompt = p;
        }
        Ok(self)
    }

    pub fn prompt_at(&self, frame: usize) -> usize {
        self.prompt_regions
            .iter()
            .find(|(_, r)| r.contains(&frame))
            .map_or(0, |(p, _)| *p)
    }

    /// Latent frames where a new segment's output begins (excluding 0).
    pub fn boundaries(&self) -> Vec<usize> {
        self.segments.iter().skip(1).map(|s| s.new_frames.start).collect()
    }
}

pub const STAGES: [&str; 6] = ["vae", "vqvae-fine", "vqvae-coarse", "ar", "dit", "injection"];

fn stage_deps(stage: &str) -> &'static [&'static str] {
    match stage {
        "vqvae-fine" | "vqvae-coarse" | "dit" => &["vae"],
        "ar" => &["vqvae-fine"],
        "injection" => &["dit", "vqvae-coarse"],
        _ => &[],
    }
}

pub fn checkpoint_path(out_dir: &Path, stage: &str) -> PathBuf {
    out_dir.join("checkpoints").join(format!("{stage}.arlc"))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub skipped: bool,
    pub steps: usize,
    pub final_loss: f64,
    pub wall_clock_s: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub stages: Vec<StageReport>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("data".into(), cfg.data.master_seed);
        seeds.insert("train".into(), cfg.train.seed);
        seeds.insert("generation".into(), cfg.generation.seed);
        seeds.insert("eval".into(), cfg.eval.seed);
        RunManifest {
            command: command.into(),
            config_hash: cfg.hash(),
            seeds,
            ..Default::default()
        }
    }

    pub fn record_checkpoints(&mut self, out_dir: &Path) {
        for s in STAGES {
            let p = checkpoint_path(out_dir, s);
            if let Ok(h) = io::file_sha256(&p) {
                self.checkpoints.insert(s.into(), h);
            }
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let p = out_dir.join("manifests").join(format!("{}.json", self.command));
        io::write_bytes(&p, &serde_json::to_vec_pretty(self)?)?;
        Ok(p)
    }
}

fn stage_meta(stage: &str, cfg: &serde_json::Value, out_dir: &Path, extra: serde_json::Value) -> Result<serde_json::Value> {
    let mut upstream = serde_json::Map::new();
    for d in stage_deps(stage) {
        let h = io::file_sha256(&checkpoint_path(out_dir, d)).map_err(|_| Error::MissingCheckpoint {
            stage: (*d).into(),
            path: checkpoint_path(out_dir, d),
        })?;
        upstream.insert((*d).into(), h.into());
    }
    Ok(serde_json::json!({ "stage": stage, "config": cfg, "upstream": upstream, "extra": extra }))
}

fn save_stage(out_dir: &Path, stage: &str, cfg: &serde_json::Value, params: &ParamStore, extra: serde_json::Value) -> Result<String> {
    let meta = stage_meta(stage, cfg, out_dir, extra)?;
    let ck = Checkpoint {
        config: meta,
        params: params.named(),
    };
    let p = checkpoint_path(out_dir, stage);
    ck.save(&p)?;
    io::file_sha256(&p)
}

fn load_stage(out_dir: &Path, stage: &str) -> Result<Checkpoint> {
    let p = checkpoint_path(out_dir, stage);
    if !p.exists() {
        return Err(Error::MissingCheckpoint { stage: stage.into(), path: p });
    }
    Checkpoint::load(&p)
}

/// True when the stored checkpoint matches the stage config and the current
/// upstream checkpoints.
fn stage_is_current(out_dir: &Path, stage: &str, cfg: &serde_json::Value) -> bool {
    let Ok(ck) = load_stage(out_dir, stage) else {
        return false;
    };
    match stage_meta(stage, cfg, out_dir, serde_json::Value::Null) {
        Ok(now) => ck.config["config"] == now["config"] && ck.config["upstream"] == now["upstream"],
        Err(_) => false,
    }
}

fn extra_f64(ck: &Checkpoint, key: &str) -> Option<f64> {
    ck.config["extra"][key].as_f64()
}

/// Training data derived from the corpus.
struct TrainData {
    videos: Vec<Tensor>,
    prompts: Vec<Vec<usize>>,
}

impl TrainData {
    fn new(corpus: &Corpus) -> Result<Self> {
        let items = corpus.items(Split::Train);
        if items.is_empty() {
            return Err(Error::validation("dataset", "training split is empty"));
        }
        let mut videos = Vec::new();
        let mut prompts = Vec::new();
        for (e, v) in items {
            videos.push(v.clone());
            prompts.push(synth_data::tokenize(&e.caption)?);
        }
        Ok(TrainData { videos, prompts })
    }
}

fn stack(items: &[&Tensor]) -> Tensor {
    let parts: Vec<Tensor> = items
        .iter()
        .map(|t| {
            let mut sh = vec![1];
            sh.extend_from_slice(t.shape());
            t.reshape(&sh)
        })
        .collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::cat(&refs, 0)
}

fn pick(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|_| rng.gen_range(0..n)).collect()
}

fn stage_seed(base: u64, stage: &str) -> u64 {
    let h = io::sha256_hex(stage.as_bytes());
    base ^ u64::from_str_radix(&h[..16], 16).unwrap_or(0)
}

fn adam(b: &StageBudget) -> Adam {
    Adam::new(AdamConfig {
        lr: b.lr,
        ..Default::default()
    })
}

fn check_loss(stage: &str, step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Stage {
            stage: stage.into(),
            message: format!("non-finite loss at step {step}"),
        })
    }
}

fn encode_all(vae: &VideoVae, videos: &[Tensor]) -> Result<Vec<Tensor>> {
    videos
        .chunks(8)
        .map(|c| {
            let refs: Vec<&Tensor> = c.iter().collect();
            let z = vae.encode_batch(&stack(&refs))?;
            Ok((0..c.len()).map(|i| {
                let sh = z.shape()[1..].to_vec();
                z.narrow(0, i, 1).reshape(&sh)
            }).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

const ENCODE_CHUNK: usize = 16;

/// Pre-quantization vectors of every latent, `[N * grid, m]`.
fn vq_vectors_all(vq: &LatentVqVae, latents: &[Tensor]) -> Tensor {
    let parts: Vec<Tensor> = latents
        .chunks(ENCODE_CHUNK)
        .map(|c| vq.encode_vectors(&stack(&c.iter().collect::<Vec<_>>())))
        .collect();
    Tensor::cat(&parts.iter().collect::<Vec<_>>(), 0)
}

fn quantize_all(vq: &LatentVqVae, latents: &[Tensor]) -> Result<Vec<IndexGrid>> {
    let mut out = Vec::with_capacity(latents.len());
    for c in latents.chunks(ENCODE_CHUNK) {
        out.extend(vq.quantize_batch(&stack(&c.iter().collect::<Vec<_>>()))?);
    }
    Ok(out)
}

/// Root-mean-square of the training latents; the DiT sees `z / scale`.
fn latent_rms(latents: &[Tensor]) -> f64 {
    let (s, n) = latents
        .iter()
        .fold((0.0, 0usize), |(s, n), z| (s + z.sq_norm(), n + z.numel()));
    (s / n.max(1) as f64).sqrt().max(1e-8)
}

/// Staged trainer over a corpus.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    corpus: &'a Corpus,
    pub progress: Box<dyn FnMut(&str, usize, f64) + 'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, corpus: &'a Corpus) -> Self {
        Trainer {
            cfg,
            corpus,
            progress: Box::new(|stage, step, loss| log::info!("{stage} step {step} loss {loss:.5}")),
        }
    }

    fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn log_every(&mut self, stage: &str, step: usize, total: usize, loss: f64) {
        if step % 50 == 0 || step + 1 == total {
            (self.progress)(stage, step, loss);
        }
    }

    fn stage_config(&self, stage: &str) -> serde_json::Value {
        let c = self.cfg;
        let t = &c.train;
        let v = match stage {
            "vae" => serde_json::json!({"model": c.vae, "budget": t.vae, "data": c.data}),
            "vqvae-fine" => serde_json::json!({"model": c.vq_fine, "budget": t.vqvae, "revive": t.revive_every}),
            "vqvae-coarse" => serde_json::json!({"model": c.vq_coarse, "budget": t.vqvae, "revive": t.revive_every}),
            "ar" => serde_json::json!({"model": c.ar, "budget": t.ar}),
            "dit" => serde_json::json!({"model": c.dit, "budget": t.dit}),
            _ => serde_json::json!({"model": c.injection, "budget": t.injection}),
        };
        serde_json::json!({"stage": v, "seed": t.seed})
    }

    /// Runs one stage unless `resume` is set and its checkpoint is current.
    pub fn run_stage(&mut self, stage: &str, resume: bool) -> Result<StageReport> {
        let scfg = self.stage_config(stage);
        if resume && stage_is_current(self.out(), stage, &scfg) {
            return Ok(StageReport {
                stage: stage.into(),
                skipped: true,
                ..Default::default()
            });
        }
        let t0 = Instant::now();
        let (params, extra, mut report) = match stage {
            "vae" => self.train_vae()?,
            "vqvae-fine" => self.train_vq(true)?,
            "vqvae-coarse" => self.train_vq(false)?,
            "ar" => self.train_ar()?,
            "dit" => self.train_dit()?,
            "injection" => self.train_injection()?,
            other => return Err(Error::validation("stage", format!("unknown stage {other:?}"))),
        };
        save_stage(self.out(), stage, &scfg, &params, extra)?;
        report.stage = stage.into();
        report.wall_clock_s = t0.elapsed().as_secs_f64();
        Ok(report)
    }

    /// All stages in dependency order.
    pub fn train_all(&mut self, resume: bool) -> Result<Vec<StageReport>> {
        STAGES.iter().map(|s| self.run_stage(s, resume)).collect()
    }

    fn load_vae(&self) -> Result<VideoVae> {
        let mut vae = VideoVae::new(self.cfg.vae.clone())?;
        vae.params.load_named(&load_stage(self.out(), "vae")?.params)?;
        Ok(vae)
    }

    fn train_vae(&mut self) -> Result<(ParamStore, serde_json::Value, StageReport)> {
        let data = TrainData::new(self.corpus)?;
        let b = self.cfg.train.vae.clone();
        let mut vae = VideoVae::new(self.cfg.vae.clone())?;
        let mut opt = adam(&b);
        let seed = stage_seed(self.cfg.train.seed, "vae");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut loss = f64::NAN;
        for step in 0..b.steps {
            let idx = pick(&mut rng, data.videos.len(), b.batch);
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &data.videos[i]).collect();
            loss = vae
                .train_step(&stack(&refs), &mut opt, lr_schedule(step, b.steps, b.warmup), seed.wrapping_add(step as u64))
                .map_err(|e| stage_error("train-vae", e))?;
            check_loss("train-vae", step, loss)?;
            self.log_every("vae", step, b.steps, loss);
        }
        Ok((
            vae.params,
            serde_json::Value::Null,
            StageReport {
                steps: b.steps,
                final_loss: loss,
                ..Default::default()
            },
        ))
    }

    fn train_vq(&mut self, fine: bool) -> Result<(ParamStore, serde_json::Value, StageReport)> {
        let name = if fine { "vqvae-fine" } else { "vqvae-coarse" };
        let vae = self.load_vae()?;
        let data = TrainData::new(self.corpus)?;
        let latents = encode_all(&vae, &data.videos)?;
        let vcfg = if fine { &self.cfg.vq_fine } else { &self.cfg.vq_coarse };
        let mut vq = LatentVqVae::new(vcfg.clone())?;
        let b = self.cfg.train.vqvae.clone();
        let mut opt = adam(&b);
        let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(self.cfg.train.seed, name));
        let pool = vq_vectors_all(&vq, &latents);
        vq.init_codebook_from(&pool, &mut rng);
        let mut last = None;
        let mut restarts = 0usize;
        for step in 0..b.steps {
            let idx = pick(&mut rng, latents.len(), b.batch);
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
            let batch = stack(&refs);
            let l = vq
                .train_step(&batch, &mut opt, lr_schedule(step, b.steps, b.warmup))
                .map_err(|e| stage_error(name, e))?;
            check_loss(name, step, l.total)?;
            let every = self.cfg.train.revive_every;
            if every > 0 && (step + 1) % every == 0 && step + every < b.steps {
                let pool = vq.encode_vectors(&batch);
                restarts += vq.revive_dead(&pool, &mut opt, &mut rng);
                vq.reset_usage();
            }
            self.log_every(name, step, b.steps, l.total);
            last = Some(l);
        }
        let grids = quantize_all(&vq, &latents)?;
        let mut usage = vec![0u64; vq.k()];
        for g in &grids {
            for &i in &g.indices {
                usage[i] += 1;
            }
        }
        let ppl = eval::codebook_perplexity(&usage)?;
        let l = last.unwrap_or_default();
        let mut metrics = BTreeMap::new();
        metrics.insert("perplexity".into(), ppl);
        metrics.insert("recon".into(), l.recon);
        metrics.insert("restarts".into(), restarts as f64);
        Ok((
            vq.params,
            serde_json::json!({ "usage": usage }),
            StageReport {
                steps: b.steps,
                final_loss: l.total,
                metrics,
                ..Default::default()
            },
        ))
    }

    fn train_ar(&mut self) -> Result<(ParamStore, serde_json::Value, StageReport)> {
        let vae = self.load_vae()?;
        let mut vq = LatentVqVae::new(self.cfg.vq_fine.clone())?;
        vq.params.load_named(&load_stage(self.out(), "vqvae-fine")?.params)?;
        let data = TrainData::new(self.corpus)?;
        let latents = encode_all(&vae, &data.videos)?;
        let seqs: Vec<Vec<usize>> = quantize_all(&vq, &latents)?
            .iter()
            .map(|g| flatten_grid(g).tokens)
            .collect();
        let mut ar = ArModel::new(self.cfg.ar.clone())?;
        let b = self.cfg.train.ar.clone();
        let mut opt = adam(&b);
        let seed = stage_seed(self.cfg.train.seed, "ar");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut loss = f64::NAN;
        for step in 0..b.steps {
            let idx = pick(&mut rng, seqs.len(), b.batch);
            let t: Vec<Vec<usize>> = idx.iter().map(|&i| data.prompts[i].clone()).collect();
            let s: Vec<Vec<usize>> = idx.iter().map(|&i| seqs[i].clone()).collect();
            loss = ar
                .train_step(&t, &s, &mut opt, lr_schedule(step, b.steps, b.warmup), seed.wrapping_add(step as u64))
                .map_err(|e| stage_error("train-ar", e))?;
            check_loss("train-ar", step, loss)?;
            self.log_every("ar", step, b.steps, loss);
        }
        Ok((
            ar.params,
            serde_json::Value::Null,
            StageReport {
                steps: b.steps,
                final_loss: loss,
                ..Default::default()
            },
        ))
    }

    fn train_dit(&mut self) -> Result<(ParamStore, serde_json::Value, StageReport)> {
        let vae = self.load_vae()?;
        let data = TrainData::new(self.corpus)?;
        let latents = encode_all(&vae, &data.videos)?;
        let scale = latent_rms(&latents);
        let mut dit = Dit::new(self.cfg.dit.clone())?;
        let b = self.cfg.train.dit.clone();
        let mut opt = adam(&b);
        let seed = stage_seed(self.cfg.train.seed, "dit");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut loss = f64::NAN;
        for step in 0..b.steps {
            let idx = pick(&mut rng, latents.len(), b.batch);
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
            let z0 = stack(&refs).scale(1.0 / scale);
            let t: Vec<Vec<usize>> = idx.iter().map(|&i| data.prompts[i].clone()).collect();
            let s = seed.wrapping_add(step as u64);
            let batch = dit.sample_batch(z0, t, s);
            loss = dit
                .train_step(&batch, &mut opt, lr_schedule(step, b.steps, b.warmup), s)
                .map_err(|e| stage_error("train-dit", e))?;
            check_loss("train-dit", step, loss)?;
            self.log_every("dit", step, b.steps, loss);
        }
        Ok((
            dit.params,
            serde_json::json!({ "latent_scale": scale }),
            StageReport {
                steps: b.steps,
                final_loss: loss,
                ..Default::default()
            },
        ))
    }

    fn train_injection(&mut self) -> Result<(ParamStore, serde_json::Value, StageReport)> {
        let vae = self.load_vae()?;
        let mut vq = LatentVqVae::new(self.cfg.vq_coarse.clone())?;
        vq.params.load_named(&load_stage(self.out(), "vqvae-coarse")?.params)?;
        let dck = load_stage(self.out(), "dit")?;
        let mut dit = Dit::new(self.cfg.dit.clone())?;
        dit.params.load_named(&dck.params)?;
        dit.params.set_trainable(false);
        let backbone = dit.params.content_hash();
        let scale = extra_f64(&dck, "latent_scale").unwrap_or(1.0);
        let data = TrainData::new(self.corpus)?;
        let latents = encode_all(&vae, &data.videos)?;
        let feats = latents
            .chunks(8)
            .map(|c| {
                let refs: Vec<&Tensor> = c.iter().collect();
                let f = vq.reconstruct_batch(&stack(&refs))?;
                let sh = f.shape()[1..].to_vec();
                Ok((0..c.len()).map(|i| f.narrow(0, i, 1).reshape(&sh)).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect::<Vec<_>>();
        let mut inj = Injector::new(self.cfg.injection.clone(), &self.cfg.dit)?;
        let b = self.cfg.train.injection.clone();
        let mut opt = adam(&b);
        let seed = stage_seed(self.cfg.train.seed, "injection");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut loss = f64::NAN;
        for step in 0..b.steps {
            let idx = pick(&mut rng, latents.len(), b.batch);
            let zr: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
            let fr: Vec<&Tensor> = idx.iter().map(|&i| &feats[i]).collect();
            let z0 = stack(&zr).scale(1.0 / scale);
            let f = stack(&fr);
            let t: Vec<Vec<usize>> = idx.iter().map(|&i| data.prompts[i].clone()).collect();
            let s = seed.wrapping_add(step as u64);
            let batch = dit.sample_batch(z0, t, s);
            loss = inj
                .train_step(&dit, &batch, &f, &mut opt, lr_schedule(step, b.steps, b.warmup), s)
                .map_err(|e| stage_error("train-injection", e))?;
            check_loss("train-injection", step, loss)?;
            self.log_every("injection", step, b.steps, loss);
        }
        let after = dit.params.content_hash();
        if after != backbone {
            return Err(Error::Stage {
                stage: "train-injection".into(),
                message: "backbone parameters changed during injection training".into(),
            });
        }
        Ok((
            inj.params,
            serde_json::json!({ "backbone_sha256": after }),
            StageReport {
                steps: b.steps,
                final_loss: loss,
                ..Default::default()
            },
        ))
    }
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Stage { .. } => e,
        other if other.is_validation() => other,
        other => Error::Stage {
            stage: stage.into(),
            message: other.to_string(),
        },
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenOptions {
    pub seed: u64,
    pub steps: usize,
    pub injected: bool,
    pub temperature: f64,
    pub top_k: usize,
}

impl GenOptions {
    pub fn from_config(g: &GenerationConfig) -> Self {
        GenOptions {
            seed: g.seed,
            steps: g.ddim_steps,
            injected: true,
            temperature: g.temperature,
            top_k: g.top_k,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerationOutput {
    pub video: Tensor,
    /// Generated latents `(T, H, W, C)` in VAE units.
    pub latents: Tensor,
    /// Decoded AR features `F` on the latent grid.
    pub features: Tensor,
    /// VAE decode of `F`: the layout the AR codes describe.
    pub coarse: Tensor,
    pub grid: IndexGrid,
    pub plan: GenerationPlan,
    pub dit_calls: usize,
    pub denoiser_evals: usize,
}

/// Counts noise-predictor evaluations.
struct Counting<'a, P: NoisePredictor> {
    inner: P,
    count: &'a Cell<usize>,
}

impl<P: NoisePredictor> NoisePredictor for Counting<'_, P> {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self.count.set(self.count.get() + 1);
        self.inner.predict(z_t, t)
    }
}

/// All trained components.
#[derive(Clone, Debug)]
pub struct System {
    pub cfg: RunConfig,
    pub vae: VideoVae,
    pub vq_fine: LatentVqVae,
    pub vq_coarse: LatentVqVae,
    pub ar: ArModel,
    pub dit: Dit,
    pub injector: Injector,
    pub latent_scale: f64,
}

impl System {
    /// Freshly initialized components (no training).
    pub fn untrained(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(System {
            vae: VideoVae::new(cfg.vae.clone())?,
            vq_fine: LatentVqVae::new(cfg.vq_fine.clone())?,
            vq_coarse: LatentVqVae::new(cfg.vq_coarse.clone())?,
            ar: ArModel::new(cfg.ar.clone())?,
            dit: Dit::new(cfg.dit.clone())?,
            injector: Injector::new(cfg.injection.clone(), &cfg.dit)?,
            latent_scale: 1.0,
            cfg,
        })
    }

    pub fn load(cfg: RunConfig) -> Result<Self> {
        let mut sys = Self::untrained(cfg)?;
        let out = sys.cfg.out_dir.clone();
        sys.vae.params.load_named(&load_stage(&out, "vae")?.params)?;
        sys.vq_fine.params.load_named(&load_stage(&out, "vqvae-fine")?.params)?;
        sys.vq_coarse.params.load_named(&load_stage(&out, "vqvae-coarse")?.params)?;
        sys.ar.params.load_named(&load_stage(&out, "ar")?.params)?;
        let dck = load_stage(&out, "dit")?;
        sys.dit.params.load_named(&dck.params)?;
        sys.latent_scale = extra_f64(&dck, "latent_scale").unwrap_or(1.0);
        sys.injector.params.load_named(&load_stage(&out, "injection")?.params)?;
        Ok(sys)
    }

    fn latent_hw(&self) -> [usize; 2] {
        let s = self.cfg.vae.spatial_stride;
        [self.cfg.data.size / s, self.cfg.data.size / s]
    }

    fn grid_hw(&self) -> [usize; 2] {
        let [h, w] = self.latent_hw();
        let c = self.cfg.vq_fine.compression;
        [h / c[1], w / c[2]]
    }

    /// AR code stream for `prompts_per_frame[f]` at every latent frame `f`.
    pub fn ar_stream(&self, prompts_per_frame: &[Vec<usize>], opts: &GenOptions) -> Result<IndexGrid> {
        let r = self.cfg.vq_fine.compression[0];
        if prompts_per_frame.is_empty() || prompts_per_frame.len() % r != 0 {
            return Err(Error::validation(
                "frames",
                format!("{} latent frames is not a positive multiple of {r}", prompts_per_frame.len()),
            ));
        }
        let per_grid: Vec<Vec<usize>> = prompts_per_frame.iter().step_by(r).cloned().collect();
        self.ar.sample_stream(
            &per_grid,
            self.cfg.generation.ar_window,
            self.grid_hw(),
            self.cfg.vq_fine.compression,
            SampleOptions {
                temperature: opts.temperature,
                top_k: opts.top_k,
                seed: opts.seed,
            },
            None,
        )
    }

    /// Latent-space generation of one plan given the AR features `F`.
    fn denoise_plan(
        &self,
        plan: &GenerationPlan,
        prompts: &[Vec<usize>],
        features: &Tensor,
        opts: &GenOptions,
        calls: &Cell<usize>,
        evals: &Cell<usize>,
    ) -> Result<Tensor> {
        let [h, w] = self.latent_hw();
        let c = self.cfg.vae.latent_channels;
        let mut z_all = Tensor::zeros(&[1, plan.total_frames, h, w, c]);
        for seg in &plan.segments {
            let len = seg.frames.len();
            let f = features.narrow(0, seg.frames.start, len).reshape(&[1, len, h, w, c]);
            let mut mask = vec![false; len];
            let mut cond = Tensor::zeros(&[1, len, h, w, c]);
            for (i, fr) in seg.cond.clone().enumerate() {
                mask[i] = true;
                cond.assign_narrow(1, i, &z_all.narrow(1, fr, 1));
            }
            let pred = ConditionedPredictor {
                dit: &self.dit,
                injection: opts.injected.then_some((&self.injector, &f)),
                text_ids: vec![prompts[seg.prompt].clone()],
                mask: mask.clone(),
            };
            let counting = Counting { inner: pred, count: evals };
            calls.set(calls.get() + 1);
            let seed = opts.seed ^ (0xd1b5_4a32_d192_ed03u64.wrapping_mul(seg.index as u64 + 1));
            let z = ddim_sample(
                &counting,
                &self.dit.schedule,
                &[1, len, h, w, c],
                &mask,
                if seg.cond.is_empty() { None } else { Some(&cond) },
                opts.steps,
                seed,
            )?;
            for fr in seg.new_frames.clone() {
                z_all.assign_narrow(1, fr, &z.narrow(1, fr - seg.frames.start, 1));
            }
        }
        let sh = z_all.shape()[1..].to_vec();
        Ok(z_all.reshape(&sh))
    }

    fn run(&self, prompts: &[Vec<usize>], plan: GenerationPlan, opts: &GenOptions) -> Result<GenerationOutput> {
        let per_frame: Vec<Vec<usize>> = (0..plan.total_frames).map(|f| prompts[plan.prompt_at(f)].clone()).collect();
        let grid = self.ar_stream(&per_frame, opts)?;
        let features = self.vq_fine.decode_indices(&grid)?;
        let calls = Cell::new(0);
        let evals = Cell::new(0);
        let z = self.denoise_plan(&plan, prompts, &features, opts, &calls, &evals)?;
        let latents = z.scale(self.latent_scale);
        Ok(GenerationOutput {
            video: self.vae.decode_video(&latents)?,
            coarse: self.vae.decode_video(&features)?,
            latents,
            features,
            grid,
            plan,
            dit_calls: calls.get(),
            denoiser_evals: evals.get(),
        })
    }

    fn parse_prompt(&self, text: &str) -> Result<Vec<usize>> {
        Ok(synth_data::TextPrompt::parse(text, self.cfg.dit.text_len.min(self.cfg.ar.text_len))?.token_ids)
    }

    /// One clip of the training length.
    pub fn generate_short(&self, prompt: &str, opts: &GenOptions) -> Result<GenerationOutput> {
        let n = self.cfg.clip_latent_frames();
        let plan = plan_segments(n, n, self.cfg.generation.overlap.min(n - 1), false)?;
        self.run(&[self.parse_prompt(prompt)?], plan, opts)
    }

    /// `total` latent frames in overlapping segments.
    pub fn generate_long(&self, prompt: &str, total: usize, opts: &GenOptions) -> Result<GenerationOutput> {
        let g = &self.cfg.generation;
        let plan = plan_segments(total, g.segment_len, g.overlap, g.truncate_final)?;
        self.run(&[self.parse_prompt(prompt)?], plan, opts)
    }

    /// One prompt region of `frames_per_prompt` latent frames per prompt; the
    /// code stream of each region continues from the last code frame of the
    /// previous one.
    pub fn generate_progressive(&self, prompts: &[&str], frames_per_prompt: usize, opts: &GenOptions) -> Result<GenerationOutput> {
        if prompts.len() < 2 {
            return Err(Error::validation("prompts", "progressive generation needs at least 2 prompts"));
        }
        let r = self.cfg.vq_fine.compression[0];
        if frames_per_prompt == 0 || frames_per_prompt % r != 0 {
            return Err(Error::validation(
                "frames_per_prompt",
                format!("must be a positive multiple of {r}"),
            ));
        }
        let ids = prompts.iter().map(|p| self.parse_prompt(p)).collect::<Result<Vec<_>>>()?;
        let g = &self.cfg.generation;
        let total = frames_per_prompt * prompts.len();
        let plan = plan_segments(total, g.segment_len, g.overlap, true)?.with_prompts(&vec![frames_per_prompt; prompts.len()])?;
        self.run(&ids, plan, opts)
    }

    /// `(T, H, W, 3)` video to fine code grid.
    pub fn tokenize_video(&self, video: &Tensor) -> Result<IndexGrid> {
        self.vq_fine.quantize_latent(&self.vae.encode_video(video)?)
    }

    pub fn detokenize(&self, grid: &IndexGrid) -> Result<Tensor> {
        self.vae.decode_video(&self.vq_fine.decode_indices(grid)?)
    }

    /// Video through the VAE only.
    pub fn vae_reconstruct(&self, video: &Tensor) -> Result<Tensor> {
        self.vae.decode_video(&self.vae.encode_video(video)?)
    }
}

/// Mean adjacent-frame cosine within segments and across segment boundaries.
/// `boundaries` are pixel frame indices starting a new segment.
pub fn boundary_consistency(video: &Tensor, boundaries: &[usize]) -> Result<(f64, f64)> {
    let cos = eval::adjacent_cosines(video)?;
    let (mut win, mut cross) = (Vec::new(), Vec::new());
    for (i, c) in cos.iter().enumerate() {
        if let Some(c) = c {
            if boundaries.contains(&(i + 1)) {
                cross.push(*c);
            } else {
                win.push(*c);
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok((mean(&win), mean(&cross)))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub sweep: Option<SweepTable>,
    pub dynamic_pairs: Vec<(f64, f64)>,
    pub layout_pairs: Vec<(f64, f64)>,
    pub long_consistency: Vec<(f64, f64)>,
}

/// Prompts and seeds for evaluation: held-out captions in order.
pub fn eval_cases(corpus: &Corpus, n: usize, seed: u64) -> Vec<(String, u64)> {
    let held: Vec<String> = corpus.items(Split::Heldout).iter().map(|(e, _)| e.caption.clone()).collect();
    let pool = if held.is_empty() {
        corpus.items(Split::Train).iter().map(|(e, _)| e.caption.clone()).collect()
    } else {
        held
    };
    (0..n).map(|i| (pool[i * 7 % pool.len()].clone(), seed + i as u64)).collect()
}

/// Replaces the motion phrase of a caption with "staying still".
pub fn static_variant(caption: &str) -> String {
    let words: Vec<&str> = caption.split_whitespace().collect();
    format!("{} staying still", words[..3.min(words.len())].join(" "))
}

/// Which parts of [`evaluate`] to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalParts {
    pub reconstruction: bool,
    pub layout: bool,
    pub dynamics: bool,
    pub sweep: bool,
    pub long: bool,
}

impl EvalParts {
    pub const ALL: EvalParts = EvalParts {
        reconstruction: true,
        layout: true,
        dynamics: true,
        sweep: true,
        long: true,
    };
}

/// Metrics over the trained system.
pub fn evaluate(sys: &System, corpus: &Corpus, parts: EvalParts) -> Result<EvalOutcome> {
    let e = &sys.cfg.eval;
    let mut out = EvalOutcome::default();
    out.report.config_hash = sys.cfg.hash();
    out.report.seeds = vec![e.seed];
    let base = GenOptions::from_config(&sys.cfg.generation);
    if parts.reconstruction {
        let t0 = Instant::now();
        let held = corpus.items(Split::Heldout);
        let (mut pv, mut pq) = (0.0, 0.0);
        for (_, v) in &held {
            pv += eval::psnr(v, &sys.vae_reconstruct(v)?)?;
            pq += eval::psnr(v, &sys.detokenize(&sys.tokenize_video(v)?)?)?;
        }
        let n = held.len().max(1) as f64;
        out.report.insert("psnr_vae_heldout", pv / n)?;
        out.report.insert("psnr_vq_heldout", pq / n)?;
        for (name, vq) in [("fine", &sys.vq_fine), ("coarse", &sys.vq_coarse)] {
            let mut usage = vec![0u64; vq.k()];
            for (_, v) in corpus.items(Split::Train) {
                for &i in &vq.quantize_latent(&sys.vae.encode_video(v)?)?.indices {
                    usage[i] += 1;
                }
            }
            out.report.insert(&format!("perplexity_{name}"), eval::codebook_perplexity(&usage)?)?;
        }
        out.report.wall_clock_s.insert("reconstruction".into(), t0.elapsed().as_secs_f64());
    }
    let cases = eval_cases(corpus, e.prompts, e.seed);
    if parts.layout {
        let t0 = Instant::now();
        for (p, seed) in &cases {
            let o = GenOptions { seed: *seed, ..base };
            let inj = sys.generate_short(p, &o)?;
            let bl = sys.generate_short(p, &GenOptions { injected: false, ..o })?;
            out.layout_pairs.push((
                eval::layout_iou(&inj.coarse, &inj.video, e.iou_threshold)?,
                eval::layout_iou(&bl.coarse, &bl.video, e.iou_threshold)?,
            ));
        }
        let n = out.layout_pairs.len() as f64;
        out.report.insert("layout_iou_injected", out.layout_pairs.iter().map(|p| p.0).sum::<f64>() / n)?;
        out.report.insert("layout_iou_baseline", out.layout_pairs.iter().map(|p| p.1).sum::<f64>() / n)?;
        out.report.wall_clock_s.insert("layout".into(), t0.elapsed().as_secs_f64());
    }
    if parts.dynamics {
        let t0 = Instant::now();
        let moving: Vec<&(String, u64)> = cases.iter().filter(|(p, _)| !p.contains("still")).collect();
        let pool: Vec<(String, u64)> = if moving.is_empty() { cases.clone() } else { moving.into_iter().cloned().collect() };
        for i in 0..e.prompts {
            let (p, _) = &pool[i % pool.len()];
            let o = GenOptions {
                seed: e.seed + 1000 + i as u64,
                ..base
            };
            let mv = sys.generate_short(p, &o)?;
            let st = sys.generate_short(&static_variant(p), &o)?;
            out.dynamic_pairs.push((eval::dynamic_degree(&mv.video)?, eval::dynamic_degree(&st.video)?));
        }
        out.report.insert("dynamic_sign_test_p", eval::sign_test(&out.dynamic_pairs))?;
        let n = out.dynamic_pairs.len() as f64;
        out.report.insert("dynamic_degree_moving", out.dynamic_pairs.iter().map(|p| p.0).sum::<f64>() / n)?;
        out.report.insert("dynamic_degree_static", out.dynamic_pairs.iter().map(|p| p.1).sum::<f64>() / n)?;
        out.report.wall_clock_s.insert("dynamics".into(), t0.elapsed().as_secs_f64());
    }
    if parts.sweep {
        let t0 = Instant::now();
        let sc: Vec<(String, u64)> = cases.iter().take(e.sweep_prompts).cloned().collect();
        let table = eval::steps_sweep(&e.step_counts, &sc, e.iou_threshold, |steps, injected, (p, seed)| {
            let o = GenOptions {
                seed: *seed,
                steps,
                injected,
                ..base
            };
            let g = sys.generate_short(p, &o)?;
            Ok((g.coarse, g.video))
        })?;
        for r in &table.rows {
            let tag = if r.injected { "inj" } else { "base" };
            out.report.insert(&format!("sweep_{tag}_{}_layout_iou", r.steps), r.mean.layout_iou)?;
            out.report
                .insert(&format!("sweep_{tag}_{}_temporal_consistency", r.steps), r.mean.temporal_consistency)?;
        }
        out.sweep = Some(table);
        out.report.wall_clock_s.insert("sweep".into(), t0.elapsed().as_secs_f64());
    }
    if parts.long {
        let t0 = Instant::now();
        let rt = sys.cfg.vae.temporal_stride;
        for (p, seed) in cases.iter().take(e.long_runs) {
            let g = sys.generate_long(p, e.long_frames, &GenOptions { seed: *seed, ..base })?;
            let b: Vec<usize> = g.plan.boundaries().iter().map(|f| f * rt).collect();
            out.long_consistency.push(boundary_consistency(&g.video, &b)?);
        }
        let n = out.long_consistency.len().max(1) as f64;
        out.report.insert("long_within_tc", out.long_consistency.iter().map(|p| p.0).sum::<f64>() / n)?;
        out.report.insert("long_cross_tc", out.long_consistency.iter().map(|p| p.1).sum::<f64>() / n)?;
        out.report.wall_clock_s.insert("long".into(), t0.elapsed().as_secs_f64());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_counts() {
        assert_eq!(plan_segments(578, 68, 17, false).unwrap().segments.len(), 11);
        assert_eq!(plan_segments(30, 12, 3, false).unwrap().segments.len(), 3);
        let one = plan_segments(12, 12, 3, false).unwrap();
        assert_eq!(one.segments.len(), 1);
        assert!(one.segments[0].cond.is_empty());
        assert!(plan_segments(30, 12, 12, false).is_err());
        assert!(plan_segments(31, 12, 3, false).is_err());
        let t = plan_segments(24, 12, 3, true).unwrap();
        assert_eq!(t.segments.last().unwrap().frames, 18..24);
    }

    #[test]
    fn plan_tiles_every_frame_once() {
        for (total, l, m) in [(30, 12, 3), (578, 68, 17), (24, 12, 3), (40, 8, 2)] {
            let p = plan_segments(total, l, m, true).unwrap();
            let mut seen = vec![0; total];
            for s in &p.segments {
                for f in s.new_frames.clone() {
                    seen[f] += 1;
                }
                if s.index > 0 {
                    assert_eq!(s.cond.len(), m);
                    assert_eq!(s.cond.end, p.segments[s.index - 1].frames.end.min(s.cond.end));
                }
            }
            assert!(seen.iter().all(|&c| c == 1), "{total} {l} {m}");
        }
    }

    #[test]
    fn progressive_regions() {
        let p = plan_segments(24, 12, 3, true).unwrap().with_prompts(&[12, 12]).unwrap();
        assert_eq!(p.prompt_regions, vec![(0, 0..12), (1, 12..24)]);
        assert_eq!(p.segments.iter().map(|s| s.prompt).collect::<Vec<_>>(), vec![0, 1, 1]);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let mut bad = c.clone();
        bad.generation.overlap = 12;
        assert!(bad.validate().unwrap_err().is_validation());
        assert!(RunConfig::from_toml("[generation]\nsegment_len = \"x\"").unwrap_err().is_validation());
    }

    #[test]
    fn partial_budget_keeps_stage_defaults() {
        let c = RunConfig::from_toml("[train]\nseed = 5\n[train.vae]\nsteps = 7\n").unwrap();
        let d = TrainConfig::default();
        assert_eq!(c.train.vae, StageBudget { steps: 7, ..d.vae });
        assert_eq!(c.train.dit, d.dit);
        assert_eq!((c.train.seed, c.train.revive_every), (5, d.revive_every));
    }

    #[test]
    fn static_variant_keeps_subject() {
        assert_eq!(static_variant("a red square moving left to right"), "a red square staying still");
    }

    #[test]
    fn boundary_split() {
        let v = Tensor::from_vec(&[3, 1, 1, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let (w, c) = boundary_consistency(&v, &[2]).unwrap();
        assert_eq!((w, c), (1.0, 0.0));
    }
}
