//! Outer 3D autoencoder between pixel videos and the continuous latent grid
//! the diffusion transformer and the latent VQ-VAE operate on.
//!
//! The encoder is a stack of stages, each a non-overlapping strided 3D
//! convolution followed by a residual block of two `3×3×3` convolutions. The
//! decoder mirrors it with depth-to-space upsampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{depth_to_space, Adam, Conv3d, Ctx, Init, Linear, ParamStore, ResBlock3d, Scope};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VideoVaeConfig {
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub latent_channels: usize,
    /// Channel width of each stage, outermost first.
    pub widths: Vec<usize>,
    /// Adds a KL term and samples the latent during training.
    pub variational: bool,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VideoVaeConfig {
    fn default() -> Self {
        VideoVaeConfig {
            temporal_stride: 2,
            spatial_stride: 4,
            latent_channels: 8,
            widths: vec![24, 48],
            variational: false,
            kl_weight: 1e-4,
            seed: 1,
        }
    }
}

impl VideoVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::validation("vae.latent_channels", "must be at least 1"));
        }
        if self.widths.is_empty() {
            return Err(Error::validation("vae.widths", "need at least one stage"));
        }
        self.stage_factors().map(|_| ())
    }

    /// Downsampling factor of each stage. Spatial factors of 2 go to the
    /// outermost stages, temporal factors of 2 to the innermost.
    pub fn stage_factors(&self) -> Result<Vec<[usize; 3]>> {
        let n = self.widths.len();
        let log2 = |v: usize, field: &str| -> Result<usize> {
            if v == 0 || !v.is_power_of_two() {
                return Err(Error::validation(field, format!("{v} must be a power of two")));
            }
            Ok(v.trailing_zeros() as usize)
        };
        let ls = log2(self.spatial_stride, "vae.spatial_stride")?;
        let lt = log2(self.temporal_stride, "vae.temporal_stride")?;
        if ls > n || lt > n {
            return Err(Error::validation(
                "vae.widths",
                format!("{n} stages cannot realise strides ({}, {})", self.temporal_stride, self.spatial_stride),
            ));
        }
        Ok((0..n)
            .map(|i| {
                let s = if i < ls { 2 } else { 1 };
                let t = if i >= n - lt { 2 } else { 1 };
                [t, s, s]
            })
            .collect())
    }

    pub fn latent_shape(&self, video: &[usize]) -> Result<Vec<usize>> {
        if video.len() != 4 || video[3] != 3 {
            return Err(Error::validation("video", format!("expected (T, H, W, 3), got {video:?}")));
        }
        let (t, h, w) = (video[0], video[1], video[2]);
        if t % self.temporal_stride != 0 || h % self.spatial_stride != 0 || w % self.spatial_stride != 0 {
            return Err(Error::validation(
                "video",
                format!(
                    "shape {video:?} must have T divisible by {} and H, W divisible by {}",
                    self.temporal_stride, self.spatial_stride
                ),
            ));
        }
        Ok(vec![
            t / self.temporal_stride,
            h / self.spatial_stride,
            w / self.spatial_stride,
            self.latent_channels,
        ])
    }
}

#[derive(Clone, Debug)]
struct EncStage {
    down: Conv3d,
    res: ResBlock3d,
}

#[derive(Clone, Debug)]
struct DecStage {
    up: Linear,
    factor: [usize; 3],
    res: ResBlock3d,
}

#[derive(Clone, Debug)]
pub struct VideoVae {
    pub cfg: VideoVaeConfig,
    pub params: ParamStore,
    enc: Vec<EncStage>,
    enc_out: Linear,
    dec_in: Linear,
    dec: Vec<DecStage>,
}

impl VideoVae {
    pub fn new(cfg: VideoVaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let factors = cfg.stage_factors()?;
        let mut enc = Vec::new();
        let mut c_in = 3;
        for (i, (&w, f)) in cfg.widths.iter().zip(&factors).enumerate() {
            enc.push(EncStage {
                down: Conv3d::new(&mut store, &format!("enc.{i}.down"), c_in, w, *f, *f, [0; 3], Init::Scaled(1.0), &mut rng),
                res: ResBlock3d::new(&mut store, &format!("enc.{i}.res"), w, &mut rng),
            });
            c_in = w;
        }
        let z_out = if cfg.variational { 2 * cfg.latent_channels } else { cfg.latent_channels };
        let enc_out = Linear::new(&mut store, "enc.out", c_in, z_out, Init::Scaled(1.0), &mut rng);
        let dec_in = Linear::new(&mut store, "dec.in", cfg.latent_channels, c_in, Init::Scaled(1.0), &mut rng);
        let mut dec = Vec::new();
        for i in (0..cfg.widths.len()).rev() {
            let f = factors[i];
            let c_out = if i == 0 { 3 } else { cfg.widths[i - 1] };
            let k = f.iter().product::<usize>();
            let res_c = cfg.widths[i];
            dec.push(DecStage {
                res: ResBlock3d::new(&mut store, &format!("dec.{i}.res"), res_c, &mut rng),
                up: Linear::new(&mut store, &format!("dec.{i}.up"), res_c, c_out * k, Init::Scaled(1.0), &mut rng),
                factor: f,
            });
        }
        Ok(VideoVae {
            cfg,
            params: store,
            enc,
            enc_out,
            dec_in,
            dec,
        })
    }

    /// Encoder head output: `[B, T', H', W', C_z]` (or `2·C_z` when variational).
    pub fn encode_var<'t>(&self, s: Scope<'_, 't>, x: Var<'t>) -> Var<'t> {
        let mut h = x;
        for st in &self.enc {
            h = st.res.forward(s, st.down.forward(s, h));
        }
        self.enc_out.forward(s, h)
    }

    /// Raw (unclamped) reconstruction of a latent batch.
    pub fn decode_var<'t>(&self, s: Scope<'_, 't>, z: Var<'t>) -> Var<'t> {
        let mut h = self.dec_in.forward(s, z);
        for st in &self.dec {
            h = st.res.forward(s, h);
            h = depth_to_space(st.up.forward(s, h), st.factor);
        }
        h
    }

    fn latent_mean<'t>(&self, h: Var<'t>) -> Var<'t> {
        if self.cfg.variational {
            h.narrow(4, 0, self.cfg.latent_channels)
        } else {
            h
        }
    }

    /// `(T, H, W, 3)` video to `(T/r, H/s, W/s, C_z)` latent.
    pub fn encode_video(&self, x: &Tensor) -> Result<Tensor> {
        let ls = self.cfg.latent_shape(x.shape())?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let h = self.encode_var(ctx.scope(&self.params), tape.constant(x.reshape(&shape)));
        Ok(self.latent_mean(h).value().reshape(&ls))
    }

    /// Batched encode of `[B, T, H, W, 3]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.cfg.latent_shape(&x.shape()[1..])?;
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let h = self.encode_var(ctx.scope(&self.params), tape.constant(x.clone()));
        Ok(self.latent_mean(h).value())
    }

    /// Latent back to a video clamped to `[0, 1]`. Any number of latent frames
    /// is accepted; spatial dims and channels must match the config.
    pub fn decode_video(&self, z: &Tensor) -> Result<Tensor> {
        let c = self.cfg.latent_channels;
        if z.rank() != 4 || z.dim(3) != c {
            return Err(Error::shape(&[0, 0, 0, c], z.shape()));
        }
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let mut shape = vec![1];
        shape.extend_from_slice(z.shape());
        let y = self.decode_var(ctx.scope(&self.params), tape.constant(z.reshape(&shape))).value();
        let out = y.shape()[1..].to_vec();
        Ok(y.map(|v| v.clamp(0.0, 1.0)).reshape(&out))
    }

    /// Reconstruction loss (+ KL when variational) on a `[B, T, H, W, 3]` batch.
    pub fn loss<'t>(&self, ctx: &Ctx<'t>, batch: Var<'t>) -> Var<'t> {
        let s = ctx.scope(&self.params);
        let h = self.encode_var(s, batch);
        let z = if self.cfg.variational {
            let c = self.cfg.latent_channels;
            let mu = h.narrow(4, 0, c);
            let logvar = h.narrow(4, c, c);
            let z = if ctx.is_train() {
                let eps = ctx.with_rng(|r| Tensor::randn(&mu.shape(), 1.0, r));
                mu.add(logvar.scale(0.5).exp().mul(ctx.constant(eps)))
            } else {
                mu
            };
            let kl = mu
                .sqr()
                .add(logvar.exp())
                .sub(logvar)
                .affine(0.5, -0.5)
                .mean_all()
                .scale(self.cfg.kl_weight);
            return self.decode_var(s, z).sub(batch).sqr().mean_all().add(kl);
        } else {
            h
        };
        self.decode_var(s, z).sub(batch).sqr().mean_all()
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(&mut self, batch: &Tensor, opt: &mut Adam, lr_scale: f64, seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true, seed);
        let l = self.loss(&ctx, tape.constant(batch.clone()));
        let lv = l.value().to_scalar();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                stage: "train-vae".into(),
                diagnostics: format!("loss {lv} at optimizer step {}", opt.steps()),
            });
        }
        let g = tape.backward(l);
        let pg = ctx.grads_for(&self.params, &g);
        opt.step(&mut self.params, &pg, lr_scale);
        Ok(lv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::AdamConfig;

    fn tiny() -> VideoVaeConfig {
        VideoVaeConfig {
            widths: vec![4, 6],
            latent_channels: 3,
            ..Default::default()
        }
    }

    #[test]
    fn encode_shape_and_round_trip() {
        let vae = VideoVae::new(VideoVaeConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[16, 32, 32, 3], 0.0, 1.0, &mut rng);
        let z = vae.encode_video(&x).unwrap();
        assert_eq!(z.shape(), &[8, 8, 8, 8]);
        assert!(z.bit_eq(&vae.encode_video(&x).unwrap()));
        let y = vae.decode_video(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let zero = vae.decode_video(&Tensor::zeros(&[8, 8, 8, 8])).unwrap();
        assert!(zero.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let z0 = vae.encode_video(&Tensor::zeros(&[16, 32, 32, 3])).unwrap();
        assert!(z0.all_finite());
    }

    #[test]
    fn indivisible_shape_rejected() {
        let vae = VideoVae::new(tiny()).unwrap();
        let err = vae.encode_video(&Tensor::zeros(&[15, 32, 32, 3])).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn stage_factors_multiply_to_strides() {
        let f = VideoVaeConfig::default().stage_factors().unwrap();
        assert_eq!(f, vec![[1, 2, 2], [2, 2, 2]]);
        let bad = VideoVaeConfig {
            spatial_stride: 8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let vae = VideoVae::new(tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 4, 8, 8, 3], 0.0, 1.0, &mut rng);
        let err = gradcheck::max_rel_error(&vae, |m| &mut m.params, |m, ctx| m.loss(ctx, ctx.constant(x.clone())), 12, 9);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn one_step_decreases_loss() {
        let mut wins = 0;
        for seed in 0..5 {
            let mut vae = VideoVae::new(VideoVaeConfig { seed, ..tiny() }).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
            let x = Tensor::uniform(&[2, 4, 8, 8, 3], 0.0, 1.0, &mut rng);
            let mut opt = Adam::new(AdamConfig {
                lr: 1e-3,
                ..Default::default()
            });
            let before = vae.train_step(&x, &mut opt, 1.0, 0).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape);
            let after = vae.loss(&ctx, tape.constant(x.clone())).value().to_scalar();
            if after < before {
                wins += 1;
            }
        }
        assert_eq!(wins, 5);
    }
}
