//! Latent VQ-VAE nested inside the video VAE's latent space.
//!
//! Two independently trained variants share this code: the fine variant
//! tokenizes latents for the AR model and the coarse variant (twice the
//! spatial compression) provides conditions while the DiT trains. Both
//! decoders reconstruct the continuous latent itself, so their outputs live
//! on the same grid and the injection stack cannot tell them apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::TokenFile;
use crate::nn::{
    depth_to_space, Adam, Conv3d, Ctx, Init, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamStore, ResBlock3d, Scope,
};
use crate::tensor::Tensor;
use crate::video_vae::VideoVae;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fine,
    Coarse,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Fine => "fine",
            Variant::Coarse => "coarse",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Variant::Fine),
            "coarse" => Ok(Variant::Coarse),
            _ => Err(Error::validation("variant", format!("unknown variant {s:?}, expected fine or coarse"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VqConfig {
    pub variant: Variant,
    /// `(r, o, o)` downsampling from the latent grid to the index grid.
    pub compression: [usize; 3],
    /// Channels of the latent being compressed.
    pub latent_channels: usize,
    /// Hidden width `h`.
    pub hidden: usize,
    /// Codebook entry dimension `m` (paper scale: 256).
    pub code_dim: usize,
    /// Codebook size `K` (paper scale: 2048).
    pub codebook_size: usize,
    pub heads: usize,
    pub commitment: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self::fine(8)
    }
}

impl VqConfig {
    pub fn fine(latent_channels: usize) -> Self {
        VqConfig {
            variant: Variant::Fine,
            compression: [2, 2, 2],
            latent_channels,
            hidden: 32,
            code_dim: 32,
            codebook_size: 64,
            heads: 4,
            commitment: 0.25,
            seed: 2,
        }
    }

    pub fn coarse(latent_channels: usize) -> Self {
        VqConfig {
            variant: Variant::Coarse,
            compression: [2, 4, 4],
            seed: 3,
            ..Self::fine(latent_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.codebook_size > u16::MAX as usize {
            return Err(Error::validation("vqvae.codebook_size", "must be in 1..=65535"));
        }
        if self.code_dim == 0 || self.hidden == 0 {
            return Err(Error::validation("vqvae.hidden", "widths must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::validation("vqvae.heads", "hidden width must be divisible by heads"));
        }
        if self.compression.iter().any(|&c| c == 0) {
            return Err(Error::validation("vqvae.compression", "factors must be positive"));
        }
        Ok(())
    }

    /// Index-grid dims for a `(T', H', W', C)` latent.
    pub fn grid_dims(&self, latent: &[usize]) -> Result<[usize; 3]> {
        let c = self.compression;
        if latent.len() != 4 || latent[3] != self.latent_channels {
            return Err(Error::validation(
                "latent",
                format!("expected (T, H, W, {}), got {latent:?}", self.latent_channels),
            ));
        }
        if latent[0] % c[0] != 0 || latent[1] % c[1] != 0 || latent[2] % c[2] != 0 {
            return Err(Error::validation(
                "latent",
                format!(
                    "{} variant needs dims divisible by ({}, {}, {}), got {:?}",
                    self.variant.name(),
                    c[0],
                    c[1],
                    c[2],
                    &latent[..3]
                ),
            ));
        }
        Ok([latent[0] / c[0], latent[1] / c[1], latent[2] / c[2]])
    }
}

/// Code indices in grid form, W fastest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexGrid {
    pub dims: [usize; 3],
    pub compression: [usize; 3],
    pub k: usize,
    pub indices: Vec<usize>,
}

impl IndexGrid {
    pub fn new(dims: [usize; 3], compression: [usize; 3], k: usize, indices: Vec<usize>) -> Result<Self> {
        let g = IndexGrid {
            dims,
            compression,
            k,
            indices,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dims.iter().product::<usize>();
        if self.indices.len() != n {
            return Err(Error::shape(&[n], &[self.indices.len()]));
        }
        if let Some(p) = self.indices.iter().position(|&i| i >= self.k) {
            return Err(Error::Index {
                index: self.indices[p],
                limit: self.k,
                position: self.position_name(p),
            });
        }
        Ok(())
    }

    fn position_name(&self, p: usize) -> String {
        let hw = self.dims[1] * self.dims[2];
        format!("grid (t={}, h={}, w={})", p / hw, (p % hw) / self.dims[2], p % self.dims[2])
    }

    pub fn frame_len(&self) -> usize {
        self.dims[1] * self.dims[2]
    }

    pub fn frame(&self, t: usize) -> &[usize] {
        let n = self.frame_len();
        &self.indices[t * n..(t + 1) * n]
    }

    /// Frames `[start, start + len)` as a new grid.
    pub fn frames(&self, start: usize, len: usize) -> IndexGrid {
        let n = self.frame_len();
        IndexGrid {
            dims: [len, self.dims[1], self.dims[2]],
            compression: self.compression,
            k: self.k,
            indices: self.indices[start * n..(start + len) * n].to_vec(),
        }
    }

    pub fn to_token_file(&self) -> TokenFile {
        TokenFile {
            compression: self.compression.map(|c| c as u32),
            dims: self.dims.map(|d| d as u32),
            k: self.k as u32,
            indices: self.indices.iter().map(|&i| i as u16).collect(),
        }
    }

    pub fn from_token_file(f: &TokenFile) -> Result<Self> {
        Self::new(
            f.dims.map(|d| d as usize),
            f.compression.map(|c| c as usize),
            f.k as usize,
            f.indices.iter().map(|&i| i as usize).collect(),
        )
    }
}

/// Nearest codebook entry for each row of `vectors` (`[N, m]`) under squared
/// Euclidean distance. Equal distances resolve to the lowest index.
pub fn quantize(vectors: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    let m = codebook.dim(1);
    if vectors.rank() != 2 || vectors.dim(1) != m {
        return Err(Error::shape(&[vectors.numel() / m.max(1), m], vectors.shape()));
    }
    let entries = codebook.data();
    Ok(vectors
        .data()
        .chunks(m)
        .map(|v| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, e) in entries.chunks(m).enumerate() {
                let d: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Pre-norm residual self-attention over the tokens of each grid frame.
#[derive(Clone, Debug)]
struct FrameAttention {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

impl FrameAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        FrameAttention {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, heads, Init::Scaled(0.5), rng),
        }
    }

    fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>) -> Var<'t> {
        let sh = x.shape();
        let (b, t, h, w, d) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
        let seq = x.reshape(&[b * t, h * w, d]);
        let n = self.ln.forward(s, seq);
        seq.add(self.attn.forward(s, n, n, None, None)).reshape(&sh)
    }
}

/// Constants that turn the straight-through loss into an ordinary
/// differentiable function: indices, the `q - v` offset and the stop-gradient
/// copies of `v` and `q`, all captured at one parameter point.
#[derive(Clone, Debug)]
pub struct FrozenQuantization {
    pub indices: Vec<usize>,
    pub offset: Tensor,
    pub v: Tensor,
    pub q: Tensor,
}

pub struct VqTerms<'t> {
    pub total: Var<'t>,
    pub recon: Var<'t>,
    pub codebook: Var<'t>,
    pub commitment: Var<'t>,
    pub indices: Vec<usize>,
    /// Pre-quantization vectors `[N, m]`.
    pub v: Var<'t>,
    pub q: Var<'t>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct VqLossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Clone, Debug)]
pub struct LatentVqVae {
    pub cfg: VqConfig,
    pub params: ParamStore,
    pub codebook: ParamId,
    /// Assignments per entry since the last [`LatentVqVae::reset_usage`].
    pub usage: Vec<u64>,
    enc_in: Conv3d,
    enc_down: Conv3d,
    enc_res: ResBlock3d,
    enc_attn: FrameAttention,
    enc_out: Linear,
    dec_in: Linear,
    dec_res: ResBlock3d,
    dec_attn: FrameAttention,
    dec_up: Linear,
    dec_out: Conv3d,
}

impl LatentVqVae {
    pub fn new(cfg: VqConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut st = ParamStore::new();
        let (c, h, m) = (cfg.latent_channels, cfg.hidden, cfg.code_dim);
        let f = cfg.compression;
        let fk = f.iter().product::<usize>();
        let enc_in = Conv3d::same(&mut st, "enc.in", c, h, 3, Init::Scaled(1.0), &mut rng);
        let enc_down = Conv3d::new(&mut st, "enc.down", h, h, f, f, [0; 3], Init::Scaled(1.0), &mut rng);
        let enc_res = ResBlock3d::new(&mut st, "enc.res", h, &mut rng);
        let enc_attn = FrameAttention::new(&mut st, "enc.attn", h, cfg.heads, &mut rng);
        let enc_out = Linear::new(&mut st, "enc.out", h, m, Init::Scaled(1.0), &mut rng);
        let codebook = st.add("codebook", Tensor::randn(&[cfg.codebook_size, m], 1.0, &mut rng));
        let dec_in = Linear::new(&mut st, "dec.in", m, h, Init::Scaled(1.0), &mut rng);
        let dec_res = ResBlock3d::new(&mut st, "dec.res", h, &mut rng);
        let dec_attn = FrameAttention::new(&mut st, "dec.attn", h, cfg.heads, &mut rng);
        let dec_up = Linear::new(&mut st, "dec.up", h, h * fk, Init::Scaled(1.0), &mut rng);
        let dec_out = Conv3d::same(&mut st, "dec.out", h, c, 3, Init::Scaled(1.0), &mut rng);
        Ok(LatentVqVae {
            usage: vec![0; cfg.codebook_size],
            cfg,
            params: st,
            codebook,
            enc_in,
            enc_down,
            enc_res,
            enc_attn,
            enc_out,
            dec_in,
            dec_res,
            dec_attn,
            dec_up,
            dec_out,
        })
    }

    pub fn k(&self) -> usize {
        self.cfg.codebook_size
    }

    pub fn entries(&self) -> &Tensor {
        self.params.get(self.codebook)
    }

    /// `[B, T', H', W', C] -> [B, t, h, w, m]`
    pub fn encode_var<'t>(&self, s: Scope<'_, 't>, z: Var<'t>) -> Var<'t> {
        let x = self.enc_in.forward(s, z).gelu();
        let x = self.enc_down.forward(s, x);
        let x = self.enc_attn.forward(s, self.enc_res.forward(s, x));
        self.enc_out.forward(s, x)
    }

    /// `[B, t, h, w, m] -> [B, T', H', W', C]`
    pub fn decode_var<'t>(&self, s: Scope<'_, 't>, e: Var<'t>) -> Var<'t> {
        let x = self.dec_in.forward(s, e);
        let x = self.dec_attn.forward(s, self.dec_res.forward(s, x));
        let x = depth_to_space(self.dec_up.forward(s, x), self.cfg.compression).gelu();
        self.dec_out.forward(s, x)
    }

    /// Full VQ objective on a latent batch. With `frozen` set, quantization
    /// constants come from it instead of the current parameters.
    pub fn terms<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>, frozen: Option<&FrozenQuantization>) -> VqTerms<'t> {
        let s = ctx.scope(&self.params);
        let v5 = self.encode_var(s, z);
        let vs = v5.shape();
        let m = self.cfg.code_dim;
        let n = vs[..4].iter().product::<usize>();
        let v = v5.reshape(&[n, m]);
        let cb = s.p(self.codebook);
        let indices = match frozen {
            Some(f) => f.indices.clone(),
            None => quantize(&v.value(), &cb.value()).expect("code_dim checked at construction"),
        };
        let q = cb.index_select(&indices);
        let (offset, v_sg, q_sg) = match frozen {
            Some(f) => (f.offset.clone(), ctx.constant(f.v.clone()), ctx.constant(f.q.clone())),
            None => (q.value().sub(&v.value()), v.detach(), q.detach()),
        };
        let q_st = v.add(ctx.constant(offset));
        let recon = self.decode_var(s, q_st.reshape(&vs)).sub(z).sqr().mean_all();
        let codebook = q.sub(v_sg).sqr().mean_all();
        let commitment = v.sub(q_sg).sqr().mean_all();
        let total = recon.add(codebook).add(commitment.scale(self.cfg.commitment));
        VqTerms {
            total,
            recon,
            codebook,
            commitment,
            indices,
            v,
            q,
        }
    }

    /// Captures the constants of the straight-through surrogate at the
    /// current parameters.
    pub fn freeze_quantization(&self, z: &Tensor) -> FrozenQuantization {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let t = self.terms(&ctx, tape.constant(z.clone()), None);
        let (v, q) = (t.v.value(), t.q.value());
        FrozenQuantization {
            offset: q.sub(&v),
            indices: t.indices,
            v,
            q,
        }
    }

    pub fn train_step(&mut self, batch: &Tensor, opt: &mut Adam, lr_scale: f64) -> Result<VqLossBreakdown> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true, 0);
        let t = self.terms(&ctx, tape.constant(batch.clone()), None);
        let out = VqLossBreakdown {
            total: t.total.value().to_scalar(),
            recon: t.recon.value().to_scalar(),
            codebook: t.codebook.value().to_scalar(),
            commitment: t.commitment.value().to_scalar(),
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite {
                stage: format!("train-vqvae-{}", self.cfg.variant.name()),
                diagnostics: format!("{out:?} at optimizer step {}", opt.steps()),
            });
        }
        for &i in &t.indices {
            self.usage[i] += 1;
        }
        let g = tape.backward(t.total);
        let pg = ctx.grads_for(&self.params, &g);
        opt.step(&mut self.params, &pg, lr_scale);
        Ok(out)
    }

    /// Pre-quantization vectors `[N, m]` for a latent batch.
    pub fn encode_vectors(&self, z: &Tensor) -> Tensor {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let v = self.encode_var(ctx.scope(&self.params), tape.constant(z.clone())).value();
        let m = self.cfg.code_dim;
        v.reshape(&[v.numel() / m, m])
    }

    /// Seeds the codebook with distinct encoder outputs drawn from `pool`.
    pub fn init_codebook_from(&mut self, pool: &Tensor, rng: &mut impl Rng) {
        let (k, m) = (self.k(), self.cfg.code_dim);
        let n = pool.dim(0);
        let mut e = self.entries().clone();
        let data = e.data_mut();
        for row in 0..k {
            let src = rng.gen_range(0..n);
            for j in 0..m {
                data[row * m + j] = pool.data()[src * m + j] + 1e-3 * rng.gen::<f64>();
            }
        }
        self.params.set(self.codebook, e);
    }

    /// Re-seeds entries with zero usage from random rows of `pool`; returns
    /// how many were restarted. Logs a warning when more than 90% were dead.
    pub fn revive_dead(&mut self, pool: &Tensor, opt: &mut Adam, rng: &mut impl Rng) -> usize {
        let (k, m) = (self.k(), self.cfg.code_dim);
        let dead: Vec<usize> = (0..k).filter(|&i| self.usage[i] == 0).collect();
        if dead.is_empty() || pool.dim(0) == 0 {
            return 0;
        }
        if dead.len() * 10 > k * 9 {
            log::warn!(
                "{} codebook collapse: {} of {k} entries unused, restarting them",
                self.cfg.variant.name(),
                dead.len()
            );
        }
        let std = (pool.sq_norm() / pool.numel() as f64).sqrt() * 0.01;
        let mut e = self.entries().clone();
        let data = e.data_mut();
        for &row in &dead {
            let src = rng.gen_range(0..pool.dim(0));
            for j in 0..m {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                data[row * m + j] = pool.data()[src * m + j] + std * noise;
            }
        }
        self.params.set(self.codebook, e);
        opt.reset_moments(self.codebook);
        dead.len()
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// `(T', H', W', C)` latent to pre-quantization embeddings `(t, h, w, m)`.
    pub fn encode_latent(&self, z: &Tensor) -> Result<Tensor> {
        let g = self.cfg.grid_dims(z.shape())?;
        let mut sh = vec![1];
        sh.extend_from_slice(z.shape());
        let v = self.encode_vectors(&z.reshape(&sh));
        Ok(v.reshape(&[g[0], g[1], g[2], self.cfg.code_dim]))
    }

    pub fn quantize_latent(&self, z: &Tensor) -> Result<IndexGrid> {
        let g = self.cfg.grid_dims(z.shape())?;
        let v = self.encode_latent(z)?;
        let idx = quantize(&v.reshape(&[v.numel() / self.cfg.code_dim, self.cfg.code_dim]), self.entries())?;
        IndexGrid::new(g, self.cfg.compression, self.k(), idx)
    }

    /// Quantizes a `[B, T', H', W', C]` batch.
    pub fn quantize_batch(&self, z: &Tensor) -> Result<Vec<IndexGrid>> {
        let g = self.cfg.grid_dims(&z.shape()[1..])?;
        let idx = quantize(&self.encode_vectors(z), self.entries())?;
        let per = g.iter().product::<usize>();
        idx.chunks(per)
            .map(|c| IndexGrid::new(g, self.cfg.compression, self.k(), c.to_vec()))
            .collect()
    }

    /// Codebook lookup plus decoder: grid `(t, h, w)` to features on the
    /// latent grid `(t·r, h·o, w·o, C)`.
    pub fn decode_indices(&self, q: &IndexGrid) -> Result<Tensor> {
        Ok(self.decode_batch(std::slice::from_ref(q))?.narrow(0, 0, 1).reshape(&self.feature_shape(q)))
    }

    fn feature_shape(&self, q: &IndexGrid) -> Vec<usize> {
        let c = self.cfg.compression;
        vec![q.dims[0] * c[0], q.dims[1] * c[1], q.dims[2] * c[2], self.cfg.latent_channels]
    }

    /// Decodes grids that share dims into `[B, T', H', W', C]`.
    pub fn decode_batch(&self, grids: &[IndexGrid]) -> Result<Tensor> {
        let first = grids.first().ok_or_else(|| Error::validation("grids", "empty batch"))?;
        for g in grids {
            if g.k != self.k() {
                return Err(Error::validation("grid.k", format!("grid has K={}, codebook has {}", g.k, self.k())));
            }
            if g.dims != first.dims {
                return Err(Error::shape(&first.dims, &g.dims));
            }
            g.validate()?;
        }
        let idx: Vec<usize> = grids.iter().flat_map(|g| g.indices.iter().copied()).collect();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let s = ctx.scope(&self.params);
        let d = first.dims;
        let e = s
            .p(self.codebook)
            .index_select(&idx)
            .reshape(&[grids.len(), d[0], d[1], d[2], self.cfg.code_dim]);
        Ok(self.decode_var(s, e).value())
    }

    /// Encode, quantize and decode a `[B, T', H', W', C]` batch.
    pub fn reconstruct_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_batch(&self.quantize_batch(z)?)
    }
}

/// `F = D_latent(quantize(E_latent(E_video(x))))` for one video.
pub fn semantic_condition(vae: &VideoVae, vq: &LatentVqVae, video: &Tensor) -> Result<Tensor> {
    let z = vae.encode_video(video)?;
    let q = vq.quantize_latent(&z)?;
    vq.decode_indices(&q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::AdamConfig;

    fn tiny(variant: Variant) -> VqConfig {
        let base = match variant {
            Variant::Fine => VqConfig::fine(3),
            Variant::Coarse => VqConfig::coarse(3),
        };
        VqConfig {
            hidden: 8,
            code_dim: 4,
            codebook_size: 6,
            heads: 2,
            ..base
        }
    }

    #[test]
    fn spec_quantizer_examples() {
        let cb = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        let v = Tensor::from_vec(&[3, 2], vec![0.2, 0.1, 0.5, 0.5, 1.0, 1.0]);
        assert_eq!(quantize(&v, &cb).unwrap(), vec![0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Tensor::randn(&[8, 3], 1.0, &mut rng);
        let row5 = cb.narrow(0, 5, 1);
        assert_eq!(quantize(&row5, &cb).unwrap(), vec![5]);
    }

    #[test]
    fn encode_and_decode_shapes() {
        let fine = LatentVqVae::new(VqConfig::fine(8)).unwrap();
        let coarse = LatentVqVae::new(VqConfig::coarse(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[8, 8, 8, 8], 1.0, &mut rng);
        assert_eq!(fine.encode_latent(&z).unwrap().shape(), &[4, 4, 4, 32]);
        assert_eq!(coarse.encode_latent(&z).unwrap().shape(), &[4, 2, 2, 32]);
        let qf = fine.quantize_latent(&z).unwrap();
        let qc = coarse.quantize_latent(&z).unwrap();
        assert_eq!(qf.dims, [4, 4, 4]);
        assert_eq!(qc.dims, [4, 2, 2]);
        assert_eq!(fine.decode_indices(&qf).unwrap().shape(), &[8, 8, 8, 8]);
        assert_eq!(coarse.decode_indices(&qc).unwrap().shape(), &[8, 8, 8, 8]);
        assert!(fine.encode_latent(&z).unwrap().bit_eq(&fine.encode_latent(&z).unwrap()));
    }

    #[test]
    fn indivisible_latent_names_variant() {
        let coarse = LatentVqVae::new(VqConfig::coarse(8)).unwrap();
        let err = coarse.encode_latent(&Tensor::zeros(&[8, 6, 6, 8])).unwrap_err();
        assert!(err.to_string().contains("coarse"), "{err}");
        assert!(err.to_string().contains("(2, 4, 4)"), "{err}");
    }

    #[test]
    fn out_of_range_index_reports_position() {
        let vq = LatentVqVae::new(tiny(Variant::Fine)).unwrap();
        let g = IndexGrid {
            dims: [1, 2, 2],
            compression: [2, 2, 2],
            k: 6,
            indices: vec![0, 1, 6, 2],
        };
        let err = vq.decode_indices(&g).unwrap_err();
        match err {
            Error::Index { index, limit, position } => {
                assert_eq!((index, limit), (6, 6));
                assert!(position.contains("h=1, w=0"), "{position}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn token_file_round_trip() {
        let g = IndexGrid::new([2, 2, 2], [2, 2, 2], 64, (0..8).map(|i| i * 7).collect()).unwrap();
        let back = IndexGrid::from_token_file(&TokenFile::decode(&g.to_token_file().encode()).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn commitment_zero_when_vectors_are_entries() {
        let mut vq = LatentVqVae::new(tiny(Variant::Fine)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[1, 2, 4, 4, 3], 1.0, &mut rng);
        let v = vq.encode_vectors(&z);
        let mut cb = vq.entries().clone();
        for r in 0..v.dim(0).min(6) {
            cb.assign_narrow(0, r, &v.narrow(0, r, 1));
        }
        vq.params.set(vq.codebook, cb);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let t = vq.terms(&ctx, tape.constant(z), None);
        // the first 4 vectors are all the vectors of a (1, 2, 2) grid
        assert_eq!(v.dim(0), 4);
        assert_eq!(t.commitment.value().to_scalar(), 0.0);
        assert_eq!(t.codebook.value().to_scalar(), 0.0);
    }

    #[test]
    fn straight_through_surrogate_gradients() {
        for variant in [Variant::Fine, Variant::Coarse] {
            let vq = LatentVqVae::new(tiny(variant)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let z = Tensor::randn(&[1, 2, 4, 4, 3], 1.0, &mut rng);
            let frozen = vq.freeze_quantization(&z);
            // the surrogate and the real loss agree at the freeze point
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape);
            let real = vq.terms(&ctx, tape.constant(z.clone()), None).total.value().to_scalar();
            let sur = vq.terms(&ctx, tape.constant(z.clone()), Some(&frozen)).total.value().to_scalar();
            assert!((real - sur).abs() < 1e-12);
            let err = gradcheck::max_rel_error(
                &vq,
                |m| &mut m.params,
                |m, ctx| m.terms(ctx, ctx.constant(z.clone()), Some(&frozen)).total,
                12,
                7,
            );
            assert!(err < 1e-4, "{variant:?}: relative error {err}");
        }
    }

    #[test]
    fn training_reduces_loss_and_revival_restarts_dead_codes() {
        let mut vq = LatentVqVae::new(tiny(Variant::Fine)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::randn(&[2, 2, 4, 4, 3], 1.0, &mut rng);
        let pool = vq.encode_vectors(&z);
        vq.init_codebook_from(&pool, &mut rng);
        let mut opt = Adam::new(AdamConfig {
            lr: 3e-3,
            ..Default::default()
        });
        let first = vq.train_step(&z, &mut opt, 1.0).unwrap().total;
        let mut last = first;
        for _ in 0..40 {
            last = vq.train_step(&z, &mut opt, 1.0).unwrap().total;
        }
        assert!(last < first, "{last} !< {first}");
        vq.reset_usage();
        vq.usage[0] = 1;
        let before = vq.entries().clone();
        let n = vq.revive_dead(&pool, &mut opt, &mut rng);
        assert_eq!(n, 5);
        assert!(vq.entries().narrow(0, 0, 1).bit_eq(&before.narrow(0, 0, 1)));
        assert!(!vq.entries().narrow(0, 1, 1).bit_eq(&before.narrow(0, 1, 1)));
    }
}
