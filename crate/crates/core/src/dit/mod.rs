//! Spatial-temporal diffusion transformer over video latents.
//!
//! Tokens are kept as `[B, t, s, d]` between blocks (`t` latent frames, `s`
//! patches per frame). Each block runs spatial self-attention over `s`,
//! temporal self-attention over `t` (by folding `s` into the batch), text
//! cross-attention and an FFN, all pre-norm residual. Timestep conditioning
//! enters as per-block shift/scale modulation of the self-attention and FFN
//! norms.

pub mod rope;
pub mod schedule;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{depth_to_space, space_to_depth, Adam, Ctx, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Scope};
use crate::synth_data::TextEncoder;
use crate::tensor::Tensor;

use rope::Rope;
pub use schedule::{build_schedule, ddim_sample, ddim_sample_from, NoisePredictor, NoiseSchedule, ScheduleKind};

const TIME_FREQS: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DitConfig {
    /// Number of blocks (paper scale: 28).
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// `(p_t, p_h, p_w)`
    pub patch: [usize; 3],
    pub latent_channels: usize,
    pub text_len: usize,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    /// Probability that a training sample gets a noise-free frame prefix.
    pub cond_prefix_prob: f64,
    /// Classifier-free guidance: train-time text dropout plus guided sampling.
    pub cfg_enabled: bool,
    pub text_dropout: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            depth: 8,
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            patch: [1, 2, 2],
            latent_channels: 8,
            text_len: 12,
            schedule: ScheduleKind::LinearBeta,
            diffusion_steps: 1000,
            cond_prefix_prob: 0.5,
            cfg_enabled: false,
            text_dropout: 0.1,
            guidance_scale: 3.0,
            seed: 5,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::validation("dit.depth", "must be at least 2"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::validation("dit.heads", format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if (self.dim / self.heads) % 4 != 0 {
            return Err(Error::validation("dit.dim", "head dim must be a multiple of 4 for 2D rotary embeddings"));
        }
        if self.patch.iter().any(|&p| p == 0) {
            return Err(Error::validation("dit.patch", "patch sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_prefix_prob) || !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::validation("dit.cond_prefix_prob", "probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_numel(&self) -> usize {
        self.patch.iter().product::<usize>() * self.latent_channels
    }

    /// `(t, h, w)` patch grid for a `(T', H', W', C)` latent.
    pub fn token_grid(&self, latent: &[usize]) -> Result<[usize; 3]> {
        let p = self.patch;
        if latent.len() != 4 || latent[3] != self.latent_channels {
            return Err(Error::validation(
                "latent",
                format!("expected (T, H, W, {}), got {latent:?}", self.latent_channels),
            ));
        }
        if latent[0] % p[0] != 0 || latent[1] % p[1] != 0 || latent[2] % p[2] != 0 {
            return Err(Error::validation(
                "latent",
                format!("dims {:?} not divisible by patch {:?}", &latent[..3], p),
            ));
        }
        Ok([latent[0] / p[0], latent[1] / p[1], latent[2] / p[2]])
    }
}

/// `[B, T, H, W, C] -> [B, t, s, P]` raw patches, `P = p_t·p_h·p_w·C`.
pub fn patchify_tokens<'t>(z: Var<'t>, patch: [usize; 3]) -> Var<'t> {
    let p = space_to_depth(z, patch);
    let sh = p.shape();
    p.reshape(&[sh[0], sh[1], sh[2] * sh[3], sh[4]])
}

/// Inverse of [`patchify_tokens`] for a patch grid of `grid` `(t, h, w)`.
pub fn unpatchify_tokens<'t>(x: Var<'t>, grid: [usize; 3], patch: [usize; 3]) -> Var<'t> {
    let sh = x.shape();
    depth_to_space(x.reshape(&[sh[0], grid[0], grid[1], grid[2], sh[3]]), patch)
}

/// `(b t) s d -> (b s) t d` for tokens held as `[B, t, s, d]`.
pub fn spatial_to_temporal<'t>(x: Var<'t>) -> Var<'t> {
    let sh = x.shape();
    x.permute(&[0, 2, 1, 3]).reshape(&[sh[0] * sh[2], sh[1], sh[3]])
}

/// `(b s) t d -> [B, t, s, d]`.
pub fn temporal_to_spatial<'t>(x: Var<'t>, b: usize) -> Var<'t> {
    let sh = x.shape();
    let s = sh[0] / b;
    x.reshape(&[b, s, sh[1], sh[2]]).permute(&[0, 2, 1, 3])
}

/// Sinusoidal timestep features `[B, 2·TIME_FREQS]`.
pub fn timestep_features(ts: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(ts.len() * 2 * TIME_FREQS);
    for &t in ts {
        for i in 0..TIME_FREQS {
            let f = (-(10_000f64).ln() * i as f64 / TIME_FREQS as f64).exp();
            out.push((t as f64 * f).cos());
        }
        for i in 0..TIME_FREQS {
            let f = (-(10_000f64).ln() * i as f64 / TIME_FREQS as f64).exp();
            out.push((t as f64 * f).sin());
        }
    }
    Tensor::from_vec(&[ts.len(), 2 * TIME_FREQS], out)
}

/// Called with the token grid `[B, t, s, d]` entering block `index`.
pub trait BlockHook<'t> {
    fn before_block(&self, index: usize, x: Var<'t>) -> Var<'t>;
}

/// Rotary tables for one token grid.
pub struct GridRopes {
    pub spatial: Rope,
    pub temporal: Rope,
}

impl GridRopes {
    pub fn new(grid: [usize; 3], head_dim: usize) -> Self {
        GridRopes {
            spatial: Rope::spatial(grid[1], grid[2], head_dim),
            temporal: Rope::temporal(grid[0], head_dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StditBlock {
    pub modulation: Linear,
    pub spatial: MultiHeadAttention,
    pub temporal: MultiHeadAttention,
    pub cross_ln: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ffn: Mlp,
}

fn modulate<'t>(x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Var<'t> {
    x.layer_norm(crate::nn::LN_EPS).mul(scale.affine(1.0, 1.0)).add(shift)
}

impl StditBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DitConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        StditBlock {
            modulation: Linear::new(store, &format!("{name}.mod"), d, 6 * d, Init::Zeros, rng),
            spatial: MultiHeadAttention::new(store, &format!("{name}.sattn"), d, d, cfg.heads, Init::Zeros, rng),
            temporal: MultiHeadAttention::new(store, &format!("{name}.tattn"), d, d, cfg.heads, Init::Zeros, rng),
            cross_ln: LayerNorm::new(store, &format!("{name}.xln"), d),
            cross: MultiHeadAttention::new(store, &format!("{name}.xattn"), d, d, cfg.heads, Init::Zeros, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, cfg.ffn_mult * d, d, Init::Zeros, rng),
        }
    }

    /// `x: [B, t, s, d]`, `c: [B, d]` timestep embedding, `text: [B, L, d]`.
    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>, c: Var<'t>, text: Var<'t>, ropes: &GridRopes) -> Var<'t> {
        let sh = x.shape();
        let (b, t, n, d) = (sh[0], sh[1], sh[2], sh[3]);
        let m = self.modulation.forward(s, c.silu()).reshape(&[b, 1, 1, 6 * d]);
        let part = |i: usize| m.narrow(3, i * d, d);

        let h = modulate(x, part(0), part(1)).reshape(&[b * t, n, d]);
        let h = self.spatial.forward(s, h, h, None, Some(&ropes.spatial));
        let x = x.add(h.reshape(&[b, t, n, d]));

        let h = spatial_to_temporal(modulate(x, part(2), part(3)));
        let h = self.temporal.forward(s, h, h, None, Some(&ropes.temporal));
        let x = x.add(temporal_to_spatial(h, b));

        let h = self.cross_ln.forward(s, x).reshape(&[b, t * n, d]);
        let h = self.cross.forward(s, h, text, None, None);
        let x = x.add(h.reshape(&[b, t, n, d]));

        let h = self.ffn.forward(s, modulate(x, part(4), part(5)));
        x.add(h)
    }
}

/// Inputs of one diffusion training step, with noise and timesteps drawn.
#[derive(Clone, Debug)]
pub struct DiffusionBatch {
    pub z0: Tensor,
    pub text_ids: Vec<Vec<usize>>,
    /// Per sample, per latent frame: true = noise-free conditioning frame.
    pub masks: Vec<Vec<bool>>,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
    pub text: TextEncoder,
    patch_embed: Linear,
    cond_frame: ParamId,
    t_in: Linear,
    t_out: Linear,
    pub blocks: Vec<StditBlock>,
    final_mod: Linear,
    final_out: Linear,
}

impl Dit {
    pub fn new(cfg: DitConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = build_schedule(cfg.schedule, cfg.diffusion_steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut st = ParamStore::new();
        let d = cfg.dim;
        let text = TextEncoder::new(&mut st, "text", cfg.text_len, d, &mut rng);
        let patch_embed = Linear::new(&mut st, "patch", cfg.patch_numel(), d, Init::Scaled(1.0), &mut rng);
        let cond_frame = st.add("cond_frame", Tensor::randn(&[d], 0.02, &mut rng));
        let t_in = Linear::new(&mut st, "temb.in", 2 * TIME_FREQS, d, Init::Scaled(1.0), &mut rng);
        let t_out = Linear::new(&mut st, "temb.out", d, d, Init::Scaled(1.0), &mut rng);
        let blocks = (0..cfg.depth)
            .map(|i| StditBlock::new(&mut st, &format!("block.{i}"), &cfg, &mut rng))
            .collect();
        let final_mod = Linear::new(&mut st, "final.mod", d, 2 * d, Init::Zeros, &mut rng);
        let final_out = Linear::new(&mut st, "final.out", d, cfg.patch_numel(), Init::Zeros, &mut rng);
        Ok(Dit {
            cfg,
            params: st,
            schedule,
            text,
            patch_embed,
            cond_frame,
            t_in,
            t_out,
            blocks,
            final_mod,
            final_out,
        })
    }

    /// Linear patch embedding: `[B, T, H, W, C] -> [B, t, s, d]`.
    pub fn patchify<'t>(&self, s: Scope<'_, 't>, z: Var<'t>) -> Var<'t> {
        self.patch_embed.forward(s, patchify_tokens(z, self.cfg.patch))
    }

    pub fn time_embedding<'t>(&self, s: Scope<'_, 't>, ts: &[usize]) -> Var<'t> {
        let f = s.ctx.constant(timestep_features(ts));
        self.t_out.forward(s, self.t_in.forward(s, f).silu())
    }

    /// Predicted noise `[B, T, H, W, C]` for `z_t`. `masks` may be empty
    /// (no conditioning frames) or hold one entry per sample.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        z_t: Var<'t>,
        ts: &[usize],
        text_ids: &[Vec<usize>],
        masks: &[Vec<bool>],
        hook: Option<&dyn BlockHook<'t>>,
    ) -> Result<Var<'t>> {
        let sh = z_t.shape();
        if sh.len() != 5 {
            return Err(Error::validation("z_t", format!("expected [B, T, H, W, C], got {sh:?}")));
        }
        let b = sh[0];
        let grid = self.cfg.token_grid(&sh[1..])?;
        if ts.len() != b || text_ids.len() != b || !(masks.is_empty() || masks.len() == b) {
            return Err(Error::validation("batch", "timesteps, prompts and masks must match the batch size"));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.schedule.steps()) {
            return Err(Error::validation("t", format!("timestep {t} outside 1..={}", self.schedule.steps())));
        }
        let s = ctx.scope(&self.params);
        let d = self.cfg.dim;
        let mut x = self.patchify(s, z_t);
        if masks.iter().any(|m| m.iter().any(|&v| v)) {
            let mut mf = Vec::with_capacity(b * grid[0]);
            for m in masks {
                if m.len() != sh[1] {
                    return Err(Error::validation("mask", format!("{} entries for {} frames", m.len(), sh[1])));
                }
                for f in 0..grid[0] {
                    let pt = self.cfg.patch[0];
                    mf.push(if m[f * pt..(f + 1) * pt].iter().all(|&v| v) { 1.0 } else { 0.0 });
                }
            }
            let mt = ctx.constant(Tensor::from_vec(&[b, grid[0], 1, 1], mf));
            x = x.add(mt.mul(s.p(self.cond_frame)));
        }
        let c = self.time_embedding(s, ts);
        let text = self.text.forward(s, text_ids)?;
        let ropes = GridRopes::new(grid, self.cfg.head_dim());
        for (i, blk) in self.blocks.iter().enumerate() {
            if let Some(h) = hook {
                x = h.before_block(i, x);
            }
            x = blk.forward(s, x, c, text, &ropes);
        }
        let m = self.final_mod.forward(s, c.silu()).reshape(&[b, 1, 1, 2 * d]);
        let x = modulate(x, m.narrow(3, 0, d), m.narrow(3, d, d));
        let out = self.final_out.forward(s, x);
        Ok(unpatchify_tokens(out, grid, self.cfg.patch))
    }

    /// Draws timesteps, noise and (with probability `cond_prefix_prob`) a
    /// noise-free frame prefix for every sample.
    pub fn sample_batch(&self, z0: Tensor, text_ids: Vec<Vec<usize>>, seed: u64) -> DiffusionBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, frames) = (z0.dim(0), z0.dim(1));
        let pt = self.cfg.patch[0];
        let t = (0..b).map(|_| rng.gen_range(1..=self.schedule.steps())).collect();
        let masks = (0..b)
            .map(|_| {
                let mut m = vec![false; frames];
                let groups = frames / pt;
                if groups > 1 && rng.gen::<f64>() < self.cfg.cond_prefix_prob {
                    let k = rng.gen_range(1..groups) * pt;
                    m[..k].iter_mut().for_each(|v| *v = true);
                }
                m
            })
            .collect();
        let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
        let text_ids = if self.cfg.cfg_enabled {
            text_ids
                .into_iter()
                .map(|ids| if rng.gen::<f64>() < self.cfg.text_dropout { Vec::new() } else { ids })
                .collect()
        } else {
            text_ids
        };
        DiffusionBatch {
            z0,
            text_ids,
            masks,
            t,
            eps,
        }
    }

    /// Noisy input for a batch: conditioning frames keep `z0`.
    pub fn noisy_input(&self, batch: &DiffusionBatch) -> Result<Tensor> {
        let b = batch.z0.dim(0);
        let mut parts = Vec::with_capacity(b);
        for i in 0..b {
            let z0 = batch.z0.narrow(0, i, 1);
            let mut zt = self.schedule.forward_diffuse(&z0, batch.t[i], &batch.eps.narrow(0, i, 1))?;
            schedule::overwrite_frames(&mut zt, &batch.masks[i], &z0);
            parts.push(zt);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::cat(&refs, 0))
    }

    /// Mean squared noise-prediction error over non-conditioning frames.
    pub fn diffusion_loss<'t>(&self, ctx: &Ctx<'t>, batch: &DiffusionBatch, hook: Option<&dyn BlockHook<'t>>) -> Result<Var<'t>> {
        let sh = batch.z0.shape().to_vec();
        let (b, frames) = (sh[0], sh[1]);
        if batch.masks.len() != b {
            return Err(Error::validation("mask", "one mask per sample required"));
        }
        let mut w = Vec::with_capacity(b * frames);
        let mut count = 0usize;
        for m in &batch.masks {
            if m.len() != frames {
                return Err(Error::validation("mask", format!("{} entries for {frames} frames", m.len())));
            }
            if m.iter().all(|&v| v) {
                return Err(Error::validation("mask", "every frame is a conditioning frame"));
            }
            for &v in m {
                w.push(if v { 0.0 } else { 1.0 });
                count += usize::from(!v);
            }
        }
        let zt = self.noisy_input(batch)?;
        let eps_hat = self.forward(ctx, ctx.constant(zt), &batch.t, &batch.text_ids, &batch.masks, hook)?;
        let per = (sh[2] * sh[3] * sh[4]) as f64;
        let wt = ctx.constant(Tensor::from_vec(&[b, frames, 1, 1, 1], w));
        Ok(eps_hat
            .sub(ctx.constant(batch.eps.clone()))
            .sqr()
            .mul(wt)
            .sum_all()
            .scale(1.0 / (count as f64 * per)))
    }

    /// One backbone optimizer step on an unconditioned batch.
    pub fn train_step(&mut self, batch: &DiffusionBatch, opt: &mut Adam, lr_scale: f64, seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true, seed);
        let l = self.diffusion_loss(&ctx, batch, None)?;
        let lv = l.value().to_scalar();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                stage: "train-dit".into(),
                diagnostics: format!("loss {lv} at optimizer step {}", opt.steps()),
            });
        }
        let g = tape.backward(l);
        let pg = ctx.grads_for(&self.params, &g);
        opt.step(&mut self.params, &pg, lr_scale);
        Ok(lv)
    }

    /// Noise prediction on plain tensors, without injection.
    pub fn predict(&self, z_t: &Tensor, t: usize, text_ids: &[Vec<usize>], masks: &[Vec<bool>]) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let ts = vec![t; z_t.dim(0)];
        Ok(self.forward(&ctx, ctx.constant(z_t.clone()), &ts, text_ids, masks, None)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::synth_data::tokenize;

    pub(crate) fn toy() -> DitConfig {
        DitConfig {
            depth: 2,
            dim: 16,
            heads: 2,
            ffn_mult: 2,
            latent_channels: 2,
            text_len: 8,
            diffusion_steps: 50,
            ..Default::default()
        }
    }

    fn randomize(dit: &mut Dit, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in dit.params.ids().collect::<Vec<_>>() {
            let t = dit.params.get(id);
            let r = Tensor::randn(t.shape(), 0.3, &mut rng);
            dit.params.set(id, t.add(&r));
        }
    }

    fn prompt() -> Vec<usize> {
        tokenize("a red square moving left to right").unwrap()
    }

    #[test]
    fn token_grid_and_patch_round_trip() {
        let cfg = DitConfig::default();
        assert_eq!(cfg.token_grid(&[8, 8, 8, 8]).unwrap(), [8, 4, 4]);
        assert!(cfg.token_grid(&[8, 7, 8, 8]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[2, 8, 8, 8, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let p = patchify_tokens(tape.constant(z.clone()), cfg.patch);
        assert_eq!(p.shape(), vec![2, 8, 16, 32]);
        assert!(unpatchify_tokens(p, [8, 4, 4], cfg.patch).value().bit_eq(&z));
    }

    #[test]
    fn rearrange_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (b, t, s) in [(1, 1, 1), (2, 3, 4), (3, 5, 2)] {
            let x = Tensor::randn(&[b, t, s, 4], 1.0, &mut rng);
            let tape = Tape::new();
            let v = spatial_to_temporal(tape.constant(x.clone()));
            assert_eq!(v.shape(), vec![b * s, t, 4]);
            assert!(temporal_to_spatial(v, b).value().bit_eq(&x));
        }
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let dit = Dit::new(toy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 4, 4, 16], 1.0, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let s = ctx.scope(&dit.params);
        let c = dit.time_embedding(s, &[7]);
        let text = dit.text.forward(s, &[prompt()]).unwrap();
        let ropes = GridRopes::new([4, 2, 2], dit.cfg.head_dim());
        let mut y = tape.constant(x.clone());
        for b in &dit.blocks {
            y = b.forward(s, y, c, text, &ropes);
        }
        assert!(y.value().bit_eq(&x));
    }

    #[test]
    fn single_spatial_token_is_order_free() {
        let mut dit = Dit::new(DitConfig {
            patch: [1, 2, 2],
            ..toy()
        })
        .unwrap();
        randomize(&mut dit, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 3, 1, 16], 1.0, &mut rng);
        let perm = [2usize, 0, 1];
        let xp = Tensor::cat(&perm.iter().map(|&i| x.narrow(1, i, 1)).collect::<Vec<_>>().iter().collect::<Vec<_>>(), 1);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let s = ctx.scope(&dit.params);
        let ropes = GridRopes::new([3, 1, 1], dit.cfg.head_dim());
        let blk = &dit.blocks[0];
        let va = tape.constant(x.reshape(&[3, 1, 16]));
        let vb = tape.constant(xp.reshape(&[3, 1, 16]));
        let a = blk.spatial.forward(s, va, va, None, Some(&ropes.spatial)).value();
        let b = blk.spatial.forward(s, vb, vb, None, Some(&ropes.spatial)).value();
        for (j, &i) in perm.iter().enumerate() {
            assert!(b.narrow(0, j, 1).bit_eq(&a.narrow(0, i, 1)));
        }
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let mut dit = Dit::new(toy()).unwrap();
        randomize(&mut dit, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::randn(&[1, 4, 4, 4, 2], 1.0, &mut rng);
        let a = dit.predict(&z, 10, &[prompt()], &[]).unwrap();
        let b = dit.predict(&z, 10, &[prompt()], &[]).unwrap();
        assert_eq!(a.shape(), z.shape());
        assert!(a.bit_eq(&b));
        assert!(dit.predict(&z, 51, &[prompt()], &[]).is_err());
    }

    #[test]
    fn loss_masks_conditioning_frames() {
        let mut dit = Dit::new(toy()).unwrap();
        randomize(&mut dit, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = Tensor::randn(&[1, 4, 4, 4, 2], 1.0, &mut rng);
        let mut batch = dit.sample_batch(z0, vec![prompt()], 1);
        batch.masks = vec![vec![true, true, false, false]];
        let l1 = {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape);
            dit.diffusion_loss(&ctx, &batch, None).unwrap().value().to_scalar()
        };
        // the noise drawn for conditioning frames never enters the loss
        let mut other = batch.clone();
        let fresh = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut rng);
        other.eps.assign_narrow(1, 0, &fresh);
        let l2 = {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape);
            dit.diffusion_loss(&ctx, &other, None).unwrap().value().to_scalar()
        };
        assert_eq!(l1, l2);
        batch.masks = vec![vec![true; 4]];
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        assert!(dit.diffusion_loss(&ctx, &batch, None).is_err());
    }

    #[test]
    fn diffusion_loss_gradients() {
        let mut dit = Dit::new(toy()).unwrap();
        randomize(&mut dit, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z0 = Tensor::randn(&[2, 2, 4, 4, 2], 1.0, &mut rng);
        let mut batch = dit.sample_batch(z0, vec![prompt(), prompt()], 3);
        batch.masks = vec![vec![true, false], vec![false, false]];
        let err = gradcheck::max_rel_error(&dit, |m| &mut m.params, |m, ctx| m.diffusion_loss(ctx, &batch, None).unwrap(), 12, 11);
        assert!(err < 1e-4, "relative error {err}");
    }
}
