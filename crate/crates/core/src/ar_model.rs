//! Decoder-only transformer over flattened code grids, conditioned on a
//! fully visible text prefix.
//!
//! Sequence layout for a `(t, h, w)` grid: `BOS`, then for every frame its
//! `h·w` codes in raster order followed by `FRAME`, then `EOS`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent_vqvae::IndexGrid;
use crate::nn::{Adam, Ctx, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::synth_data::TextEncoder;
use crate::tensor::Tensor;

/// Special tokens follow the `K` content codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub frame: usize,
    pub eos: usize,
    pub bos: usize,
    pub pad: usize,
}

impl Specials {
    pub fn new(k: usize) -> Self {
        Specials {
            frame: k,
            eos: k + 1,
            bos: k + 2,
            pad: k + 3,
        }
    }
}

pub const NUM_SPECIALS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub frame_boundaries: Vec<usize>,
    pub k: usize,
}

/// Number of tokens for a `(t, h, w)` grid: `t·h·w + t + 2`.
pub fn sequence_len(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2] + dims[0] + 2
}

pub fn flatten_grid(q: &IndexGrid) -> TokenSequence {
    let sp = Specials::new(q.k);
    let mut tokens = Vec::with_capacity(sequence_len(q.dims));
    let mut frame_boundaries = Vec::with_capacity(q.dims[0]);
    tokens.push(sp.bos);
    for t in 0..q.dims[0] {
        tokens.extend_from_slice(q.frame(t));
        frame_boundaries.push(tokens.len());
        tokens.push(sp.frame);
    }
    tokens.push(sp.eos);
    TokenSequence {
        tokens,
        frame_boundaries,
        k: q.k,
    }
}

/// Inverse of [`flatten_grid`] given the frame size `(h, w)`.
pub fn unflatten(seq: &TokenSequence, hw: [usize; 2], compression: [usize; 3]) -> Result<IndexGrid> {
    let sp = Specials::new(seq.k);
    let per = hw[0] * hw[1];
    let toks = &seq.tokens;
    let bad = |pos: usize, what: &str| Error::format("token sequence", format!("expected {what} at position {pos}"));
    if toks.first() != Some(&sp.bos) {
        return Err(bad(0, "BOS"));
    }
    let mut indices = Vec::new();
    let mut pos = 1;
    let mut frames = 0;
    loop {
        match toks.get(pos) {
            Some(&t) if t == sp.eos => {
                if pos + 1 != toks.len() {
                    return Err(bad(pos + 1, "end of sequence"));
                }
                break;
            }
            Some(_) => {
                if pos + per >= toks.len() {
                    return Err(bad(pos, "a full frame"));
                }
                for (j, &t) in toks[pos..pos + per].iter().enumerate() {
                    if t >= seq.k {
                        return Err(bad(pos + j, "a content code"));
                    }
                    indices.push(t);
                }
                if toks[pos + per] != sp.frame {
                    return Err(bad(pos + per, "FRAME"));
                }
                pos += per + 1;
                frames += 1;
            }
            None => return Err(bad(pos, "EOS")),
        }
    }
    IndexGrid::new([frames, hw[0], hw[1]], compression, seq.k, indices)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ArConfig {
    /// Paper scale: 12 layers, 16 heads, dim 1024.
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn: usize,
    pub dropout: f64,
    /// Maximum visual sequence length (BOS through EOS).
    pub max_len: usize,
    pub text_len: usize,
    pub codebook_size: usize,
    pub seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            layers: 4,
            heads: 4,
            dim: 64,
            ffn: 256,
            dropout: 0.1,
            max_len: 70,
            text_len: 12,
            codebook_size: 64,
            seed: 4,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::validation("ar.heads", format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.layers == 0 || self.max_len < 3 {
            return Err(Error::validation("ar.layers", "need at least one layer and room for BOS, a frame and EOS"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("ar.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        self.codebook_size + NUM_SPECIALS
    }
}

#[derive(Clone, Debug)]
struct ArBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Additive mask for `lt` text positions followed by `lv` visual positions.
pub fn prefix_causal_mask(lt: usize, lv: usize) -> Tensor {
    let n = lt + lv;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let visible = if i < lt { j < lt } else { j <= i };
            if !visible {
                m[i * n + j] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::from_vec(&[n, n], m)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleOptions {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            temperature: 1.0,
            top_k: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArSample {
    pub grid: IndexGrid,
    /// The model's own choice at the end position was not EOS, so EOS was
    /// forced after the last frame.
    pub eos_forced: bool,
}

#[derive(Clone, Debug)]
pub struct ArModel {
    pub cfg: ArConfig,
    pub params: ParamStore,
    pub text: TextEncoder,
    text_proj: Linear,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<ArBlock>,
    ln_f: LayerNorm,
    head: Linear,
}

impl ArModel {
    pub fn new(cfg: ArConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut st = ParamStore::new();
        let d = cfg.dim;
        let text = TextEncoder::new(&mut st, "text", cfg.text_len, d, &mut rng);
        let text_proj = Linear::new(&mut st, "text.proj", d, d, Init::Scaled(1.0), &mut rng);
        let tok_emb = st.add("tok_emb", Tensor::randn(&[cfg.vocab(), d], 0.5, &mut rng));
        let pos_emb = st.add("pos_emb", Tensor::randn(&[cfg.max_len, d], 0.1, &mut rng));
        let blocks = (0..cfg.layers)
            .map(|i| ArBlock {
                ln1: LayerNorm::new(&mut st, &format!("block.{i}.ln1"), d),
                attn: MultiHeadAttention::new(&mut st, &format!("block.{i}.attn"), d, d, cfg.heads, Init::Scaled(0.5), &mut rng),
                ln2: LayerNorm::new(&mut st, &format!("block.{i}.ln2"), d),
                mlp: Mlp::new(&mut st, &format!("block.{i}.mlp"), d, cfg.ffn, d, Init::Scaled(0.5), &mut rng),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut st, "ln_f", d);
        let head = Linear::new(&mut st, "head", d, cfg.vocab(), Init::Scaled(1.0), &mut rng);
        Ok(ArModel {
            cfg,
            params: st,
            text,
            text_proj,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn specials(&self) -> Specials {
        Specials::new(self.cfg.codebook_size)
    }

    /// Logits `[B, Lv, V]` at every visual position. All sequences in the
    /// batch must share one length.
    pub fn logits<'t>(&self, ctx: &Ctx<'t>, text_ids: &[Vec<usize>], tokens: &[Vec<usize>]) -> Result<Var<'t>> {
        let b = tokens.len();
        if b == 0 || text_ids.len() != b {
            return Err(Error::validation("batch", "need one prompt per token sequence"));
        }
        let lv = tokens[0].len();
        if tokens.iter().any(|t| t.len() != lv) {
            return Err(Error::validation("tokens", "sequences in a batch must share a length"));
        }
        if lv == 0 || lv > self.cfg.max_len {
            return Err(Error::validation(
                "tokens",
                format!("sequence length {lv} outside 1..={}", self.cfg.max_len),
            ));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= self.cfg.vocab()) {
            return Err(Error::Index {
                index: bad,
                limit: self.cfg.vocab(),
                position: "AR token".into(),
            });
        }
        let s = ctx.scope(&self.params);
        let d = self.cfg.dim;
        let lt = self.cfg.text_len;
        let text = self.text_proj.forward(s, self.text.forward(s, text_ids)?);
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        let vis = s
            .p(self.tok_emb)
            .index_select(&flat)
            .reshape(&[b, lv, d])
            .add(s.p(self.pos_emb).narrow(0, 0, lv));
        let mut x = Var::cat(&[text, vis], 1);
        let mask = ctx.constant(prefix_causal_mask(lt, lv));
        let p = self.cfg.dropout;
        for blk in &self.blocks {
            let h = blk.ln1.forward(s, x);
            x = x.add(ctx.dropout(blk.attn.forward(s, h, h, Some(mask), None), p));
            x = x.add(ctx.dropout(blk.mlp.forward(s, blk.ln2.forward(s, x)), p));
        }
        let x = self.ln_f.forward(s, x.narrow(1, lt, lv));
        Ok(self.head.forward(s, x))
    }

    /// Mean next-token cross-entropy over visual positions, PAD targets excluded.
    pub fn loss<'t>(&self, ctx: &Ctx<'t>, text_ids: &[Vec<usize>], seqs: &[Vec<usize>]) -> Result<Var<'t>> {
        let pad = self.specials().pad;
        let inputs: Vec<Vec<usize>> = seqs.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
        let targets: Vec<Option<usize>> = seqs
            .iter()
            .flat_map(|s| s[1..].iter().map(|&t| (t != pad).then_some(t)))
            .collect();
        let logits = self.logits(ctx, text_ids, &inputs)?;
        let sh = logits.shape();
        Ok(logits.reshape(&[sh[0] * sh[1], sh[2]]).cross_entropy(&targets))
    }

    pub fn train_step(&mut self, text_ids: &[Vec<usize>], seqs: &[Vec<usize>], opt: &mut Adam, lr_scale: f64, seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true, seed);
        let l = self.loss(&ctx, text_ids, seqs)?;
        let lv = l.value().to_scalar();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                stage: "train-ar".into(),
                diagnostics: format!("loss {lv} at optimizer step {}", opt.steps()),
            });
        }
        let g = tape.backward(l);
        let pg = ctx.grads_for(&self.params, &g);
        opt.step(&mut self.params, &pg, lr_scale);
        Ok(lv)
    }

    /// Samples a batch of grids of `frames` frames of size `hw`. When
    /// `prefix` holds a frame of codes for a sample, that frame is forced as
    /// frame 0.
    pub fn sample_batch(
        &self,
        text_ids: &[Vec<usize>],
        prefix: &[Option<Vec<usize>>],
        frames: usize,
        hw: [usize; 2],
        compression: [usize; 3],
        opts: SampleOptions,
    ) -> Result<Vec<ArSample>> {
        let b = text_ids.len();
        let per = hw[0] * hw[1];
        let k = self.cfg.codebook_size;
        let sp = self.specials();
        let total = sequence_len([frames, hw[0], hw[1]]);
        if frames == 0 || total > self.cfg.max_len {
            return Err(Error::validation(
                "frames",
                format!("{frames} frames of {per} codes need {total} tokens, limit {}", self.cfg.max_len),
            ));
        }
        if prefix.len() != b {
            return Err(Error::validation("prefix", "one optional prefix per prompt"));
        }
        let mut seqs = vec![vec![sp.bos]; b];
        for (seq, p) in seqs.iter_mut().zip(prefix) {
            if let Some(codes) = p {
                if codes.len() != per {
                    return Err(Error::shape(&hw, &[codes.len()]));
                }
                if let Some(&bad) = codes.iter().find(|&&c| c >= k) {
                    return Err(Error::Index {
                        index: bad,
                        limit: k,
                        position: "conditioning frame".into(),
                    });
                }
                seq.extend_from_slice(codes);
                seq.push(sp.frame);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut eos_forced = vec![false; b];
        let start = seqs.iter().map(|s| s.len()).min().unwrap_or(1);
        for pos in start..total {
            let active: Vec<usize> = (0..b).filter(|&i| seqs[i].len() == pos).collect();
            if active.is_empty() {
                continue;
            }
            let rel = pos - 1;
            let structural = if pos == total - 1 {
                Some(sp.eos)
            } else if rel % (per + 1) == per {
                Some(sp.frame)
            } else {
                None
            };
            let need_logits = structural.is_none() || pos == total - 1;
            let rows = if need_logits {
                let tape = Tape::new();
                let ctx = Ctx::eval(&tape);
                let tids: Vec<Vec<usize>> = active.iter().map(|&i| text_ids[i].clone()).collect();
                let toks: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
                let lg = self.logits(&ctx, &tids, &toks)?.narrow(1, pos - 1, 1).value();
                let v = self.cfg.vocab();
                Some(lg.into_vec().chunks(v).map(|c| c.to_vec()).collect::<Vec<_>>())
            } else {
                None
            };
            for (a, &i) in active.iter().enumerate() {
                let tok = match structural {
                    Some(t) => {
                        if t == sp.eos {
                            let row = &rows.as_ref().expect("logits computed at the end position")[a];
                            eos_forced[i] = argmax(row) != sp.eos;
                        }
                        t
                    }
                    None => {
                        let row = &rows.as_ref().expect("logits computed at content positions")[a];
                        sample_content(&row[..k], opts.temperature, opts.top_k, &mut rng)
                    }
                };
                seqs[i].push(tok);
            }
        }
        seqs.into_iter()
            .zip(eos_forced)
            .map(|(tokens, eos_forced)| {
                let seq = TokenSequence {
                    frame_boundaries: Vec::new(),
                    tokens,
                    k,
                };
                Ok(ArSample {
                    grid: unflatten(&seq, hw, compression)?,
                    eos_forced,
                })
            })
            .collect()
    }

    pub fn sample(&self, text_ids: &[usize], frames: usize, hw: [usize; 2], compression: [usize; 3], opts: SampleOptions) -> Result<ArSample> {
        Ok(self
            .sample_batch(&[text_ids.to_vec()], &[None], frames, hw, compression, opts)?
            .remove(0))
    }

    /// Continuation whose frame 0 is `last_frame_codes`.
    pub fn sample_continued(
        &self,
        text_ids: &[usize],
        last_frame_codes: &[usize],
        frames: usize,
        hw: [usize; 2],
        compression: [usize; 3],
        opts: SampleOptions,
    ) -> Result<ArSample> {
        Ok(self
            .sample_batch(&[text_ids.to_vec()], &[Some(last_frame_codes.to_vec())], frames, hw, compression, opts)?
            .remove(0))
    }

    /// A stream of `total` grid frames built from windows of `window` frames,
    /// each window after the first continuing from the previous last frame.
    /// `prompts[f]` is the prompt in force at grid frame `f`; when it changes
    /// a new window starts at the previous frame.
    pub fn sample_stream(
        &self,
        prompts: &[Vec<usize>],
        window: usize,
        hw: [usize; 2],
        compression: [usize; 3],
        opts: SampleOptions,
        start: Option<&[usize]>,
    ) -> Result<IndexGrid> {
        let total = prompts.len();
        if window < 2 || total == 0 {
            return Err(Error::validation("window", "need window ≥ 2 and at least one frame"));
        }
        let per = hw[0] * hw[1];
        let mut frames: Vec<Vec<usize>> = Vec::with_capacity(total);
        let mut call = 0u64;
        while frames.len() < total {
            let o = SampleOptions {
                seed: opts.seed.wrapping_add(call.wrapping_mul(0x9e37_79b9)),
                ..opts
            };
            call += 1;
            let prev = frames.last().cloned().or_else(|| start.map(|s| s.to_vec()));
            let at = frames.len();
            let text = &prompts[at];
            let s = match &prev {
                Some(p) => self.sample_continued(text, p, window, hw, compression, o)?,
                None => self.sample(text, window, hw, compression, o)?,
            };
            let skip = usize::from(prev.is_some());
            let mut end = s.grid.dims[0];
            if let Some(next_change) = (at + 1..total).find(|&f| prompts[f] != prompts[at]) {
                end = end.min(next_change - at + skip);
            }
            for f in skip..end {
                if frames.len() < total {
                    frames.push(s.grid.frame(f).to_vec());
                }
            }
        }
        let indices = frames.concat();
        debug_assert_eq!(indices.len(), total * per);
        IndexGrid::new([total, hw[0], hw[1]], compression, self.cfg.codebook_size, indices)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Temperature / top-k sampling; temperature at or below 1e-8 is argmax.
pub fn sample_content(logits: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    if temperature <= 1e-8 {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let keep = if top_k == 0 { logits.len() } else { top_k.min(logits.len()) };
    let kept = &order[..keep];
    let mx = logits[kept[0]];
    let w: Vec<f64> = kept.iter().map(|&i| ((logits[i] - mx) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, &wi) in kept.iter().zip(&w) {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    kept[keep - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::AdamConfig;
    use crate::synth_data::tokenize;

    fn toy() -> ArConfig {
        ArConfig {
            layers: 2,
            heads: 2,
            dim: 16,
            ffn: 32,
            dropout: 0.0,
            max_len: 16,
            text_len: 8,
            codebook_size: 8,
            seed: 1,
        }
    }

    fn grid(dims: [usize; 3], k: usize, seed: u64) -> IndexGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        IndexGrid::new(dims, [2, 2, 2], k, (0..n).map(|_| rng.gen_range(0..k)).collect()).unwrap()
    }

    fn prompt() -> Vec<usize> {
        tokenize("a red square staying still").unwrap()
    }

    #[test]
    fn flatten_layout_and_inverse() {
        let g = grid([2, 2, 2], 8, 0);
        let s = flatten_grid(&g);
        assert_eq!(s.tokens.len(), 12);
        assert_eq!(s.tokens[0], 10);
        assert_eq!(s.frame_boundaries, vec![5, 10]);
        assert_eq!(s.tokens[5], 8);
        assert_eq!(s.tokens[10], 8);
        assert_eq!(s.tokens[11], 9);
        assert_eq!(unflatten(&s, [2, 2], [2, 2, 2]).unwrap(), g);
        assert_eq!(sequence_len([4, 4, 4]), 70);
        let zero = IndexGrid::new([2, 2, 2], [2, 2, 2], 8, vec![0; 8]).unwrap();
        let z = flatten_grid(&zero);
        assert!(z.tokens.iter().enumerate().all(|(i, &t)| [0, 5, 10, 11].contains(&i) || t == 0));
    }

    #[test]
    fn unflatten_rejects_broken_structure() {
        let g = grid([2, 2, 2], 8, 1);
        let mut s = flatten_grid(&g);
        s.tokens[5] = 3;
        assert!(unflatten(&s, [2, 2], [2, 2, 2]).is_err());
    }

    #[test]
    fn overlength_rejected_and_pad_input_finite() {
        let m = ArModel::new(toy()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        assert!(m.logits(&ctx, &[prompt()], &[vec![10; 17]]).is_err());
        let l = m.logits(&ctx, &[prompt()], &[vec![11; 16]]).unwrap();
        assert!(l.value().all_finite());
        assert_eq!(l.shape(), vec![1, 16, 12]);
    }

    #[test]
    fn text_changes_first_visual_logits() {
        let m = ArModel::new(toy()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let l = m.logits(&ctx, &[prompt()], &[vec![10, 1, 2]]).unwrap();
        let g = tape.backward(l.narrow(1, 0, 1).sum_all());
        let table = ctx.param(&m.params, m.text.table);
        assert!(g.wrt(table).sq_norm() > 0.0);
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[5, 4])).cross_entropy(&[Some(0), Some(1), Some(2), Some(3), Some(1)]);
        assert!((l.value().to_scalar() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients() {
        let m = ArModel::new(toy()).unwrap();
        let g = grid([2, 2, 2], 8, 2);
        let seq = flatten_grid(&g).tokens;
        let err = gradcheck::max_rel_error(&m, |m| &mut m.params, |m, ctx| m.loss(ctx, &[prompt()], &[seq.clone()]).unwrap(), 12, 5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sampling_structure_and_determinism() {
        let m = ArModel::new(toy()).unwrap();
        let opts = SampleOptions {
            seed: 3,
            ..Default::default()
        };
        let a = m.sample(&prompt(), 2, [2, 2], [2, 2, 2], opts).unwrap();
        let b = m.sample(&prompt(), 2, [2, 2], [2, 2, 2], opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grid.dims, [2, 2, 2]);
        let greedy = SampleOptions {
            temperature: 0.0,
            ..opts
        };
        let g1 = m.sample(&prompt(), 2, [2, 2], [2, 2, 2], greedy).unwrap();
        let g2 = m.sample(&prompt(), 2, [2, 2], [2, 2, 2], SampleOptions { seed: 99, ..greedy }).unwrap();
        assert_eq!(g1, g2);
        let c = m.sample_continued(&prompt(), &[1, 2, 3, 4], 2, [2, 2], [2, 2, 2], opts).unwrap();
        assert_eq!(c.grid.frame(0), &[1, 2, 3, 4]);
        assert!(m.sample_continued(&prompt(), &[1, 2, 3], 2, [2, 2], [2, 2, 2], opts).is_err());
        assert!(m.sample(&prompt(), 3, [2, 2], [2, 2, 2], opts).is_err());
    }

    #[test]
    fn low_temperature_matches_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.1, 2.0, 1.9, -1.0];
        assert_eq!(sample_content(&logits, 1e-9, 0, &mut rng), 1);
        assert_eq!(sample_content(&logits, 1.0, 1, &mut rng), 1);
    }

    #[test]
    fn memorizes_a_small_set() {
        let mut m = ArModel::new(toy()).unwrap();
        let seqs: Vec<Vec<usize>> = (0..4).map(|i| flatten_grid(&grid([2, 2, 2], 8, 10 + i)).tokens).collect();
        let words = ["red", "green", "blue", "yellow"];
        let texts: Vec<Vec<usize>> = words
            .iter()
            .map(|w| tokenize(&format!("a {w} square staying still")).unwrap())
            .collect();
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-2,
            ..Default::default()
        });
        let mut l = f64::INFINITY;
        for step in 0..300 {
            l = m.train_step(&texts, &seqs, &mut opt, 1.0, step).unwrap();
        }
        assert!(l < 0.05, "loss {l}");
    }

    #[test]
    fn stream_chains_windows() {
        let m = ArModel::new(ArConfig {
            max_len: 20,
            ..toy()
        })
        .unwrap();
        let p = prompt();
        let q = tokenize("a red square moving left to right").unwrap();
        let prompts = vec![p.clone(), p.clone(), p.clone(), p, q.clone(), q];
        let g = m
            .sample_stream(&prompts, 3, [2, 2], [2, 2, 2], SampleOptions::default(), None)
            .unwrap();
        assert_eq!(g.dims, [6, 2, 2]);
    }
}
