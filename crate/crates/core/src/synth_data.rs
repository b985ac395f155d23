//! Synthetic captioned moving-shape videos and the toy text encoder.
//!
//! Videos are `(T, H, W, 3)` tensors in `[0, 1]`: one flat-colored shape on
//! a black background. Masks are axis-aligned without anti-aliasing, so the
//! centroid and IoU oracles in the tests are exact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{ParamId, ParamStore, Scope};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
    Diagonal,
    Static,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl ColorName {
    pub const ALL: [ColorName; 6] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Cyan,
        ColorName::Magenta,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Cyan => "cyan",
            ColorName::Magenta => "magenta",
        }
    }

    /// RGB in `[0, 1]`. Every color sits at least 0.4 luminance above black
    /// so a 0.15 foreground threshold separates it cleanly.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorName::Red => [1.0, 0.2, 0.2],
            ColorName::Green => [0.2, 0.9, 0.2],
            ColorName::Blue => [0.25, 0.45, 1.0],
            ColorName::Yellow => [1.0, 0.9, 0.1],
            ColorName::Cyan => [0.1, 0.9, 0.9],
            ColorName::Magenta => [0.9, 0.2, 0.9],
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 6] = [
        Motion::LeftToRight,
        Motion::RightToLeft,
        Motion::TopToBottom,
        Motion::BottomToTop,
        Motion::Diagonal,
        Motion::Static,
    ];

    /// Per-frame displacement direction `(dx, dy)` in units of speed.
    pub fn direction(self) -> (i64, i64) {
        match self {
            Motion::LeftToRight => (1, 0),
            Motion::RightToLeft => (-1, 0),
            Motion::TopToBottom => (0, 1),
            Motion::BottomToTop => (0, -1),
            Motion::Diagonal => (1, 1),
            Motion::Static => (0, 0),
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Motion::LeftToRight => "moving left to right",
            Motion::RightToLeft => "moving right to left",
            Motion::TopToBottom => "moving top to bottom",
            Motion::BottomToTop => "moving bottom to top",
            Motion::Diagonal => "moving diagonally",
            Motion::Static => "staying still",
        }
    }

    pub fn is_static(self) -> bool {
        self == Motion::Static
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub motion: Motion,
    /// Pixels per frame; ignored for static scenes.
    pub speed: u32,
    pub seed: u64,
}

/// Side length of the shape's bounding box for a given frame size.
pub fn shape_size(size: usize) -> usize {
    size / 4
}

/// Boolean `s × s` footprint of a shape, row-major.
pub fn shape_mask(kind: ShapeKind, s: usize) -> Vec<bool> {
    let mut m = vec![false; s * s];
    for y in 0..s {
        for x in 0..s {
            m[y * s + x] = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let c = s as f64 / 2.0;
                    let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
                    dx * dx + dy * dy <= c * c
                }
                ShapeKind::Triangle => {
                    // apex at the top centre, base on the bottom row
                    let half = (y + 1) as f64 * s as f64 / (2.0 * s as f64);
                    let c = s as f64 / 2.0;
                    (x as f64 + 0.5 - c).abs() <= half
                }
            };
        }
    }
    m
}

/// Top-left corner of the shape at each frame.
pub fn trajectory(spec: &SceneSpec, frames: usize, size: usize) -> Result<Vec<(usize, usize)>> {
    if frames < 1 {
        return Err(Error::validation("frames", "need at least one frame"));
    }
    if size < 16 {
        return Err(Error::validation("size", format!("{size} px is below the 16 px minimum")));
    }
    let s = shape_size(size);
    let (dx, dy) = spec.motion.direction();
    let speed = if spec.motion.is_static() { 0 } else { spec.speed as usize };
    if !spec.motion.is_static() && speed == 0 {
        return Err(Error::validation("speed", "moving scenes need a positive speed"));
    }
    let travel = speed * (frames - 1);
    if travel + s > size {
        return Err(Error::validation(
            "speed",
            format!(
                "speed {speed} over {frames} frames moves {travel} px; a {s} px shape leaves a {size} px frame"
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut start = |d: i64| -> usize {
        let span = size - s - if d != 0 { travel } else { 0 };
        let base = rng.gen_range(0..=span);
        if d < 0 {
            base + travel
        } else {
            base
        }
    };
    let x0 = start(dx);
    let y0 = start(dy);
    Ok((0..frames)
        .map(|f| {
            let off = (speed * f) as i64;
            ((x0 as i64 + dx * off) as usize, (y0 as i64 + dy * off) as usize)
        })
        .collect())
}

/// Renders a scene plus its per-frame foreground masks `(T, H, W)`.
pub fn render_scene_with_masks(spec: &SceneSpec, frames: usize, size: usize) -> Result<(Tensor, Vec<Vec<bool>>)> {
    let path = trajectory(spec, frames, size)?;
    let s = shape_size(size);
    let fp = shape_mask(spec.shape, s);
    let rgb = spec.color.rgb();
    let mut v = vec![0.0; frames * size * size * 3];
    let mut masks = vec![vec![false; size * size]; frames];
    for (f, &(x0, y0)) in path.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                if !fp[y * s + x] {
                    continue;
                }
                let (px, py) = (x0 + x, y0 + y);
                masks[f][py * size + px] = true;
                let o = ((f * size + py) * size + px) * 3;
                v[o..o + 3].copy_from_slice(&rgb);
            }
        }
    }
    Ok((Tensor::from_vec(&[frames, size, size, 3], v), masks))
}

pub fn render_scene(spec: &SceneSpec, frames: usize, size: usize) -> Result<Tensor> {
    Ok(render_scene_with_masks(spec, frames, size)?.0)
}

/// Fixed word-level vocabulary. Id 0 is padding.
pub const VOCAB: [&str; 20] = [
    "<pad>", "a", "moving", "staying", "still", "left", "right", "to", "top", "bottom", "diagonally", "red",
    "green", "blue", "yellow", "cyan", "magenta", "square", "circle", "triangle",
];

pub const PAD_ID: usize = 0;

pub fn vocab_size() -> usize {
    VOCAB.len()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub text: String,
    pub token_ids: Vec<usize>,
}

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            VOCAB
                .iter()
                .position(|v| *v == w && *v != "<pad>")
                .ok_or_else(|| Error::validation("prompt", format!("unknown word {w:?}")))
        })
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let words = ids
        .iter()
        .filter(|&&i| i != PAD_ID)
        .map(|&i| {
            VOCAB.get(i).copied().ok_or(Error::Index {
                index: i,
                limit: VOCAB.len(),
                position: "token id".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

impl TextPrompt {
    pub fn parse(text: &str, max_len: usize) -> Result<Self> {
        let token_ids = tokenize(text)?;
        if token_ids.len() > max_len {
            return Err(Error::validation(
                "prompt",
                format!("{} tokens exceed the limit of {max_len}", token_ids.len()),
            ));
        }
        Ok(TextPrompt {
            text: text.split_whitespace().collect::<Vec<_>>().join(" "),
            token_ids,
        })
    }
}

pub fn caption(spec: &SceneSpec) -> TextPrompt {
    let text = format!("a {} {} {}", spec.color.word(), spec.shape.word(), spec.motion.phrase());
    let token_ids = tokenize(&text).expect("caption grammar only uses vocabulary words");
    TextPrompt { text, token_ids }
}

/// Learned token table plus learned absolute positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub pos: ParamId,
    pub max_len: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, max_len: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(&[vocab_size(), dim], 1.0, rng));
        let pos = store.add(format!("{name}.pos"), Tensor::randn(&[max_len, dim], 0.1, rng));
        TextEncoder {
            table,
            pos,
            max_len,
            dim,
        }
    }

    /// Pads or rejects to exactly `max_len` ids.
    pub fn padded_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if ids.len() > self.max_len {
            return Err(Error::validation(
                "prompt",
                format!("{} tokens exceed L_text = {}", ids.len(), self.max_len),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size()) {
            return Err(Error::Index {
                index: bad,
                limit: vocab_size(),
                position: "prompt token id".into(),
            });
        }
        let mut v = ids.to_vec();
        v.resize(self.max_len, PAD_ID);
        Ok(v)
    }

    /// Embeds a batch of prompts to `[B, L_text, d_text]`.
    pub fn forward<'t>(&self, s: Scope<'_, 't>, prompts: &[Vec<usize>]) -> Result<Var<'t>> {
        let mut ids = Vec::with_capacity(prompts.len() * self.max_len);
        for p in prompts {
            ids.extend(self.padded_ids(p)?);
        }
        let rows = s.p(self.table).index_select(&ids);
        Ok(rows
            .reshape(&[prompts.len(), self.max_len, self.dim])
            .add(s.p(self.pos)))
    }

    /// Eval-mode embedding of one prompt as `(L_text, d_text)`.
    pub fn encode_text(&self, store: &ParamStore, prompt: &TextPrompt) -> Result<Tensor> {
        let tape = crate::autograd::Tape::new();
        let ctx = crate::nn::Ctx::eval(&tape);
        let e = self.forward(ctx.scope(store), std::slice::from_ref(&prompt.token_ids))?;
        Ok(e.value().reshape(&[self.max_len, self.dim]))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusConfig {
    pub motions: Vec<Motion>,
    /// Scenes per motion class (training split).
    pub per_motion: usize,
    /// Additional held-out scenes per motion class.
    pub heldout_per_motion: usize,
    pub frames: usize,
    pub size: usize,
    pub speed: u32,
    pub master_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            motions: Motion::ALL.to_vec(),
            per_motion: 24,
            heldout_per_motion: 4,
            frames: 16,
            size: 32,
            speed: 1,
            master_seed: 2024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub caption: String,
    pub spec: SceneSpec,
    pub split: Split,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn content_hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Deterministic class-balanced scene list for a corpus config.
pub fn corpus_specs(cfg: &CorpusConfig) -> Vec<(SceneSpec, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    let mut out = Vec::new();
    for &motion in &cfg.motions {
        for i in 0..cfg.per_motion + cfg.heldout_per_motion {
            let spec = SceneSpec {
                shape: ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())],
                color: ColorName::ALL[rng.gen_range(0..ColorName::ALL.len())],
                motion,
                speed: if motion.is_static() { 0 } else { cfg.speed },
                seed: rng.gen(),
            };
            let split = if i < cfg.per_motion { Split::Train } else { Split::Heldout };
            out.push((spec, split));
        }
    }
    out
}

pub fn video_path(root: &Path, id: &str) -> PathBuf {
    root.join("videos").join(format!("{id}.npyish"))
}

/// Renders the corpus into `root` and writes `captions.tsv` and `manifest.json`.
pub fn build_corpus(cfg: &CorpusConfig, root: &Path, overwrite: bool) -> Result<CorpusManifest> {
    if root.exists() {
        let non_empty = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .next()
            .is_some();
        if non_empty && !overwrite {
            return Err(Error::validation(
                "root",
                format!("{} exists and is not empty (pass overwrite to replace it)", root.display()),
            ));
        }
        if non_empty {
            let vids = root.join("videos");
            if vids.exists() {
                fs::remove_dir_all(&vids).map_err(|e| Error::io(&vids, e))?;
            }
        }
    }
    let specs = corpus_specs(cfg);
    let bad: Vec<String> = specs
        .iter()
        .filter_map(|(s, _)| trajectory(s, cfg.frames, cfg.size).err().map(|e| format!("{s:?}: {e}")))
        .collect();
    if !bad.is_empty() {
        return Err(Error::validation("speed", format!("invalid scenes:\n{}", bad.join("\n"))));
    }
    let mut entries = Vec::with_capacity(specs.len());
    let mut tsv = String::new();
    for (i, (spec, split)) in specs.iter().enumerate() {
        let id = format!("{i:05}");
        let video = render_scene(spec, cfg.frames, cfg.size)?;
        let bytes = io::encode_video_array(&video)?;
        io::write_bytes(&video_path(root, &id), &bytes)?;
        let cap = caption(spec);
        tsv.push_str(&format!("{id}\t{}\n", cap.text));
        entries.push(CorpusEntry {
            id,
            caption: cap.text,
            spec: *spec,
            split: *split,
            sha256: io::sha256_hex(&bytes),
        });
    }
    io::write_bytes(&root.join("captions.tsv"), tsv.as_bytes())?;
    let manifest = CorpusManifest {
        config: cfg.clone(),
        entries,
    };
    io::write_bytes(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<CorpusManifest> {
    Ok(serde_json::from_slice(&io::read_bytes(&root.join("manifest.json"))?)?)
}

/// A corpus loaded into memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub videos: BTreeMap<String, Tensor>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let mut videos = BTreeMap::new();
        for e in &manifest.entries {
            let bytes = io::read_bytes(&video_path(root, &e.id))?;
            if io::sha256_hex(&bytes) != e.sha256 {
                return Err(Error::format("corpus", format!("hash mismatch for video {}", e.id)));
            }
            videos.insert(e.id.clone(), io::decode_video_array(&bytes)?);
        }
        Ok(Corpus { manifest, videos })
    }

    /// Renders the corpus in memory without touching the filesystem.
    pub fn in_memory(cfg: &CorpusConfig) -> Result<Self> {
        let mut entries = Vec::new();
        let mut videos = BTreeMap::new();
        for (i, (spec, split)) in corpus_specs(cfg).into_iter().enumerate() {
            let id = format!("{i:05}");
            let v = render_scene(&spec, cfg.frames, cfg.size)?;
            let bytes = io::encode_video_array(&v)?;
            // round through f32 so in-memory and on-disk corpora agree exactly
            let v = io::decode_video_array(&bytes)?;
            entries.push(CorpusEntry {
                id: id.clone(),
                caption: caption(&spec).text,
                spec,
                split,
                sha256: io::sha256_hex(&bytes),
            });
            videos.insert(id, v);
        }
        Ok(Corpus {
            manifest: CorpusManifest {
                config: cfg.clone(),
                entries,
            },
            videos,
        })
    }

    pub fn items(&self, split: Split) -> Vec<(&CorpusEntry, &Tensor)> {
        self.manifest
            .split(split)
            .map(|e| (e, &self.videos[&e.id]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: ShapeKind, color: ColorName, motion: Motion, speed: u32, seed: u64) -> SceneSpec {
        SceneSpec {
            shape,
            color,
            motion,
            speed,
            seed,
        }
    }

    /// Pixel-mass centroid of the non-black pixels of one frame.
    fn centroid(video: &Tensor, f: usize) -> (f64, f64) {
        let (h, w) = (video.dim(1), video.dim(2));
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let o = ((f * h + y) * w + x) * 3;
                if video.data()[o..o + 3].iter().any(|&v| v > 0.0) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn static_scene_frames_identical() {
        let v = render_scene(&spec(ShapeKind::Square, ColorName::Red, Motion::Static, 0, 1), 16, 32).unwrap();
        let f0 = v.narrow(0, 0, 1);
        for f in 1..16 {
            assert!(v.narrow(0, f, 1).bit_eq(&f0));
        }
    }

    #[test]
    fn circle_centroid_advances_by_speed() {
        let v = render_scene(&spec(ShapeKind::Circle, ColorName::Blue, Motion::LeftToRight, 2, 7), 16, 64).unwrap();
        let c0 = centroid(&v, 0);
        for f in 1..16 {
            let c = centroid(&v, f);
            assert!((c.0 - c0.0 - 2.0 * f as f64).abs() < 1e-9, "frame {f}");
            assert!((c.1 - c0.1).abs() < 1e-9);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let s = spec(ShapeKind::Triangle, ColorName::Cyan, Motion::Diagonal, 1, 99);
        assert!(render_scene(&s, 16, 32).unwrap().bit_eq(&render_scene(&s, 16, 32).unwrap()));
    }

    #[test]
    fn out_of_frame_motion_names_speed() {
        let s = spec(ShapeKind::Square, ColorName::Red, Motion::LeftToRight, 3, 1);
        match render_scene(&s, 16, 32) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "speed"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn captions_follow_grammar() {
        let c = caption(&spec(ShapeKind::Square, ColorName::Red, Motion::LeftToRight, 1, 0));
        assert_eq!(c.text, "a red square moving left to right");
        let c = caption(&spec(ShapeKind::Circle, ColorName::Blue, Motion::Static, 0, 0));
        assert_eq!(c.text, "a blue circle staying still");
        let a = caption(&spec(ShapeKind::Circle, ColorName::Blue, Motion::Static, 0, 0));
        let b = caption(&spec(ShapeKind::Circle, ColorName::Green, Motion::Static, 0, 0));
        assert_ne!(a.token_ids, b.token_ids);
    }

    #[test]
    fn token_round_trip_over_grammar() {
        for &m in &Motion::ALL {
            for &c in &ColorName::ALL {
                for &s in &ShapeKind::ALL {
                    let cap = caption(&spec(s, c, m, 1, 0));
                    assert_eq!(detokenize(&cap.token_ids).unwrap(), cap.text);
                    assert!(cap.token_ids.len() <= 12);
                }
            }
        }
    }

    #[test]
    fn text_encoder_lookup_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, "text", 12, 8, &mut rng);
        let p = TextPrompt {
            text: String::new(),
            token_ids: vec![],
        };
        let e = enc.encode_text(&store, &p).unwrap();
        let table = store.get(enc.table);
        let pos = store.get(enc.pos);
        for r in 0..12 {
            for c in 0..8 {
                let want = table.data()[PAD_ID * 8 + c] + pos.data()[r * 8 + c];
                assert_eq!(e.data()[r * 8 + c], want);
            }
        }
        let p = TextPrompt {
            text: "x".into(),
            token_ids: vec![3],
        };
        let e = enc.encode_text(&store, &p).unwrap();
        for c in 0..8 {
            assert_eq!(e.data()[c], table.data()[3 * 8 + c] + pos.data()[c]);
        }
        assert!(e.bit_eq(&enc.encode_text(&store, &p).unwrap()));
        let bad = TextPrompt {
            text: "x".into(),
            token_ids: vec![999],
        };
        assert!(matches!(enc.encode_text(&store, &bad), Err(Error::Index { index: 999, .. })));
    }

    #[test]
    fn corpus_build_counts_determinism_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            per_motion: 10,
            heldout_per_motion: 0,
            ..Default::default()
        };
        let root = dir.path().join("data");
        let m1 = build_corpus(&cfg, &root, false).unwrap();
        assert_eq!(m1.entries.len(), 60);
        for &mo in &Motion::ALL {
            assert_eq!(m1.entries.iter().filter(|e| e.spec.motion == mo).count(), 10);
        }
        assert!(build_corpus(&cfg, &root, false).is_err());
        let m2 = build_corpus(&cfg, &root, true).unwrap();
        assert_eq!(m1.content_hash(), m2.content_hash());
        let tsv = std::fs::read_to_string(root.join("captions.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 60);
        let c = Corpus::load(&root).unwrap();
        assert_eq!(c.videos.len(), 60);
    }

    #[test]
    fn corpus_rejects_exiting_speed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            per_motion: 2,
            speed: 5,
            ..Default::default()
        };
        let err = build_corpus(&cfg, &dir.path().join("d"), false).unwrap_err();
        assert!(err.to_string().contains("invalid scenes"), "{err}");
    }

    #[test]
    fn caption_direction_matches_centroid_regression() {
        let cfg = CorpusConfig::default();
        for (s, _) in corpus_specs(&cfg) {
            let v = render_scene(&s, cfg.frames, cfg.size).unwrap();
            let (a, b) = (centroid(&v, 0), centroid(&v, cfg.frames - 1));
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let sign = |d: f64| if d > 0.5 { 1 } else if d < -0.5 { -1 } else { 0 };
            assert_eq!((sign(dx), sign(dy)), s.motion.direction(), "{}", caption(&s).text);
        }
    }
}
