//! Condition injection: decoded AR-token features enter selected DiT blocks.
//!
//! `F` (on the DiT latent grid) is patch-embedded into `F_0`, passed through
//! one pre-norm residual adapter per injected block, optionally perturbed by
//! uncertainty sampling, and fused into the block input by a gated adaptive
//! norm whose gate projection starts at zero.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dit::{patchify_tokens, BlockHook, DiffusionBatch, Dit, DitConfig, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::{Adam, Ctx, Init, LayerNorm, Linear, Mlp, ParamStore, Scope};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InjectionVariant {
    AdaptiveNorm,
    MlpAdapter,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct InjectionConfig {
    pub variant: InjectionVariant,
    /// Block indices receiving the condition; `None` means the first half.
    pub inject_layers: Option<Vec<usize>>,
    pub uncertainty_prob: f64,
    /// Train-time additive noise on `F` (ablation); 0 disables.
    pub gaussian_noise_std: f64,
    pub epsilon_std: f64,
    /// Draw `σ̂ ~ N(σ, σ)` instead of `N(1, σ)`, so that `E[F̂] ≈ F`.
    pub recover_scale: bool,
    pub seed: u64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            variant: InjectionVariant::AdaptiveNorm,
            inject_layers: None,
            uncertainty_prob: 0.1,
            gaussian_noise_std: 0.0,
            epsilon_std: 1e-5,
            recover_scale: false,
            seed: 6,
        }
    }
}

impl InjectionConfig {
    pub fn layers(&self, depth: usize) -> Vec<usize> {
        match &self.inject_layers {
            Some(l) => l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            None => (0..depth / 2).collect(),
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if let Some(&bad) = self.layers(depth).iter().find(|&&l| l >= depth) {
            return Err(Error::validation("injection.inject_layers", format!("layer {bad} outside 0..{depth}")));
        }
        if !(0.0..=1.0).contains(&self.uncertainty_prob) {
            return Err(Error::validation("injection.uncertainty_prob", "must lie in [0, 1]"));
        }
        if self.gaussian_noise_std < 0.0 || self.epsilon_std <= 0.0 {
            return Err(Error::validation("injection.gaussian_noise_std", "noise scales must be non-negative"));
        }
        Ok(())
    }
}

/// Per-channel statistics over token positions for a `[B, ..., d]` tensor,
/// as `(mean, std)` each of shape `[B, d]`. Exactly constant channels get
/// their value as mean and an exact zero std.
pub fn channel_stats(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let b = f.dim(0);
    let d = *f.shape().last().unwrap();
    let n = f.numel() / (b * d);
    let mut mean = vec![0.0; b * d];
    let mut std = vec![0.0; b * d];
    let x = f.data();
    for bi in 0..b {
        for c in 0..d {
            let at = |i: usize| x[bi * n * d + i * d + c];
            let first = at(0);
            if (1..n).all(|i| at(i) == first) {
                mean[bi * d + c] = first;
                continue;
            }
            let mu = (0..n).map(at).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (at(i) - mu).powi(2)).sum::<f64>() / n as f64;
            mean[bi * d + c] = mu;
            std[bi * d + c] = var.sqrt();
        }
    }
    (mean, std)
}

/// `F̂ = σ̂ ⊙ (F - μ)/(σ + ε) + μ̂` with `μ̂ ~ N(μ, σ)` and `σ̂ ~ N(1, σ)`
/// (or `N(σ, σ)` when `recover_scale`), drawn per sample and channel.
/// Statistics and draws are constants for backprop.
pub fn uncertainty_sample_var<'t>(ctx: &Ctx<'t>, f: Var<'t>, eps_std: f64, recover_scale: bool, rng: &mut impl Rng) -> Var<'t> {
    let v = f.value();
    let sh = v.shape().to_vec();
    let (b, d) = (sh[0], *sh.last().unwrap());
    let (mu, sd) = channel_stats(&v);
    let mut scale = vec![0.0; b * d];
    let mut shift = vec![0.0; b * d];
    for i in 0..b * d {
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let centre = if recover_scale { sd[i] } else { 1.0 };
        let sigma_hat = centre + sd[i] * n1;
        scale[i] = sigma_hat / (sd[i] + eps_std);
        shift[i] = mu[i] + sd[i] * n2;
    }
    let mut bshape = vec![1; sh.len()];
    bshape[0] = b;
    bshape[sh.len() - 1] = d;
    f.sub(ctx.constant(Tensor::from_vec(&bshape, mu)))
        .mul(ctx.constant(Tensor::from_vec(&bshape, scale)))
        .add(ctx.constant(Tensor::from_vec(&bshape, shift)))
}

/// Tensor form of [`uncertainty_sample_var`]; `enabled = false` returns `f`.
pub fn uncertainty_sample(f: &Tensor, eps_std: f64, recover_scale: bool, enabled: bool, seed: u64) -> Tensor {
    if !enabled {
        return f.clone();
    }
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uncertainty_sample_var(&ctx, tape.constant(f.clone()), eps_std, recover_scale, &mut rng).value()
}

/// `F + std·ε`; `std = 0` returns `f` unchanged.
pub fn gaussian_noise_ablation(f: &Tensor, std: f64, seed: u64) -> Tensor {
    if std == 0.0 {
        return f.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f.add(&Tensor::randn(f.shape(), std, &mut rng))
}

/// `F_{i+1} = MLP(LN(F_i)) + F_i`
#[derive(Clone, Debug)]
pub struct AdapterBlock {
    pub ln: LayerNorm,
    pub mlp: Mlp,
}

impl AdapterBlock {
    pub fn forward<'t>(&self, s: Scope<'_, 't>, f: Var<'t>) -> Var<'t> {
        f.add(self.mlp.forward(s, self.ln.forward(s, f)))
    }
}

/// Gated adaptive norm: `X' = α ⊙ MLP(γ ⊙ LN(X) + β) + X` with
/// `(α, β, γ)` heads on a shared hidden layer of `F̂`.
#[derive(Clone, Debug)]
pub struct AdaNormFusion {
    pub hidden: Linear,
    pub gamma: Linear,
    pub beta: Linear,
    pub alpha: Linear,
    pub mlp: Mlp,
}

impl AdaNormFusion {
    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>, f: Var<'t>) -> Var<'t> {
        let h = self.hidden.forward(s, f).gelu();
        let gamma = self.gamma.forward(s, h);
        let beta = self.beta.forward(s, h);
        let alpha = self.alpha.forward(s, h);
        let inner = x.layer_norm(crate::nn::LN_EPS).mul(gamma).add(beta);
        alpha.mul(self.mlp.forward(s, inner)).add(x)
    }
}

/// Additive variant: `X' = X + P(MLP(LN(F̂)))` with zero-initialised `P`.
#[derive(Clone, Debug)]
pub struct MlpFusion {
    pub ln: LayerNorm,
    pub mlp: Mlp,
    pub proj: Linear,
}

impl MlpFusion {
    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>, f: Var<'t>) -> Var<'t> {
        x.add(self.proj.forward(s, self.mlp.forward(s, self.ln.forward(s, f))))
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    AdaNorm(AdaNormFusion),
    Mlp(MlpFusion),
}

impl Fusion {
    pub fn forward<'t>(&self, s: Scope<'_, 't>, x: Var<'t>, f: Var<'t>) -> Result<Var<'t>> {
        if x.shape() != f.shape() {
            return Err(Error::shape(&x.shape(), &f.shape()));
        }
        Ok(match self {
            Fusion::AdaNorm(a) => a.forward(s, x, f),
            Fusion::Mlp(m) => m.forward(s, x, f),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Injector {
    pub cfg: InjectionConfig,
    pub params: ParamStore,
    pub layers: Vec<usize>,
    patch: [usize; 3],
    latent_channels: usize,
    embed: Linear,
    pub adapters: Vec<AdapterBlock>,
    pub fusions: Vec<Fusion>,
}

impl Injector {
    pub fn new(cfg: InjectionConfig, dit: &DitConfig) -> Result<Self> {
        cfg.validate(dit.depth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut st = ParamStore::new();
        let d = dit.dim;
        let layers = cfg.layers(dit.depth);
        let embed = Linear::new(&mut st, "embed", dit.patch_numel(), d, Init::Scaled(1.0), &mut rng);
        let mut adapters = Vec::new();
        let mut fusions = Vec::new();
        for &l in &layers {
            adapters.push(AdapterBlock {
                ln: LayerNorm::new(&mut st, &format!("adapter.{l}.ln"), d),
                mlp: Mlp::new(&mut st, &format!("adapter.{l}.mlp"), d, 2 * d, d, Init::Scaled(0.5), &mut rng),
            });
            fusions.push(match cfg.variant {
                InjectionVariant::AdaptiveNorm => {
                    let gamma = Linear::new(&mut st, &format!("fuse.{l}.gamma"), d, d, Init::Scaled(0.5), &mut rng);
                    let b = gamma.b.expect("linear has bias");
                    st.set(b, Tensor::ones(&[d]));
                    Fusion::AdaNorm(AdaNormFusion {
                        hidden: Linear::new(&mut st, &format!("fuse.{l}.hidden"), d, d, Init::Scaled(1.0), &mut rng),
                        gamma,
                        beta: Linear::new(&mut st, &format!("fuse.{l}.beta"), d, d, Init::Scaled(0.5), &mut rng),
                        alpha: Linear::new(&mut st, &format!("fuse.{l}.alpha"), d, d, Init::Zeros, &mut rng),
                        mlp: Mlp::new(&mut st, &format!("fuse.{l}.mlp"), d, 2 * d, d, Init::Scaled(1.0), &mut rng),
                    })
                }
                InjectionVariant::MlpAdapter => Fusion::Mlp(MlpFusion {
                    ln: LayerNorm::new(&mut st, &format!("fuse.{l}.ln"), d),
                    mlp: Mlp::new(&mut st, &format!("fuse.{l}.mlp"), d, 2 * d, d, Init::Scaled(1.0), &mut rng),
                    proj: Linear::new(&mut st, &format!("fuse.{l}.proj"), d, d, Init::Zeros, &mut rng),
                }),
            });
        }
        Ok(Injector {
            cfg,
            params: st,
            layers,
            patch: dit.patch,
            latent_channels: dit.latent_channels,
            embed,
            adapters,
            fusions,
        })
    }

    /// `[B, T', H', W', C] -> [B, t, s, d]`
    pub fn embed_condition<'t>(&self, s: Scope<'_, 't>, f: Var<'t>) -> Result<Var<'t>> {
        let sh = f.shape();
        if sh.len() != 5 || sh[4] != self.latent_channels {
            return Err(Error::validation("condition", format!("expected [B, T, H, W, {}], got {sh:?}", self.latent_channels)));
        }
        for (i, (&n, &p)) in sh[1..4].iter().zip(&self.patch).enumerate() {
            if n % p != 0 {
                return Err(Error::validation("condition", format!("axis {i} of length {n} not divisible by patch {p}")));
            }
        }
        Ok(self.embed.forward(s, patchify_tokens(f, self.patch)))
    }

    /// Per-block adapted (and possibly uncertainty-sampled) features.
    /// `train` enables the stochastic modules.
    pub fn features<'t>(&self, ctx: &Ctx<'t>, f: &Tensor, train: bool, seed: u64) -> Result<Vec<(usize, Var<'t>)>> {
        let s = ctx.scope(&self.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = if train {
            gaussian_noise_ablation(f, self.cfg.gaussian_noise_std, rng.gen())
        } else {
            f.clone()
        };
        let mut cur = self.embed_condition(s, ctx.constant(f))?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (&l, ad) in self.layers.iter().zip(&self.adapters) {
            cur = ad.forward(s, cur);
            if train && rng.gen::<f64>() < self.cfg.uncertainty_prob {
                cur = uncertainty_sample_var(ctx, cur, self.cfg.epsilon_std, self.cfg.recover_scale, &mut rng);
            }
            out.push((l, cur));
        }
        Ok(out)
    }

    pub fn hook<'a, 't>(&'a self, ctx: &'a Ctx<'t>, f: &Tensor, train: bool, seed: u64) -> Result<InjectionHook<'a, 't>> {
        Ok(InjectionHook {
            inj: self,
            scope: ctx.scope(&self.params),
            feats: self.features(ctx, f, train, seed)?,
        })
    }

    /// Diffusion loss with the condition injected.
    pub fn loss<'t>(&self, ctx: &Ctx<'t>, dit: &Dit, batch: &DiffusionBatch, f: &Tensor, seed: u64) -> Result<Var<'t>> {
        let hook = self.hook(ctx, f, ctx.is_train(), seed)?;
        dit.diffusion_loss(ctx, batch, Some(&hook))
    }

    /// One optimizer step on the injection parameters only. The backbone is
    /// read, never written.
    pub fn train_step(&mut self, dit: &Dit, batch: &DiffusionBatch, f: &Tensor, opt: &mut Adam, lr_scale: f64, seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, true, seed);
        let l = self.loss(&ctx, dit, batch, f, seed ^ 0x5eed)?;
        let lv = l.value().to_scalar();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                stage: "train-dit-injection".into(),
                diagnostics: format!("loss {lv} at optimizer step {}", opt.steps()),
            });
        }
        let g = tape.backward(l);
        let pg = ctx.grads_for(&self.params, &g);
        opt.step(&mut self.params, &pg, lr_scale);
        Ok(lv)
    }
}

pub struct InjectionHook<'a, 't> {
    inj: &'a Injector,
    scope: Scope<'a, 't>,
    feats: Vec<(usize, Var<'t>)>,
}

impl<'a, 't> BlockHook<'t> for InjectionHook<'a, 't> {
    fn before_block(&self, index: usize, x: Var<'t>) -> Var<'t> {
        match self.feats.iter().position(|(l, _)| *l == index) {
            Some(k) => self.inj.fusions[k]
                .forward(self.scope, x, self.feats[k].1)
                .expect("condition grid checked against the latent grid"),
            None => x,
        }
    }
}

/// Noise predictor for sampling: backbone plus optional injected condition,
/// fixed prompts and conditioning-frame mask. Applies classifier-free
/// guidance when the backbone was configured for it.
pub struct ConditionedPredictor<'a> {
    pub dit: &'a Dit,
    pub injection: Option<(&'a Injector, &'a Tensor)>,
    pub text_ids: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
}

impl ConditionedPredictor<'_> {
    fn eps(&self, z_t: &Tensor, t: usize, text_ids: &[Vec<usize>]) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let b = z_t.dim(0);
        let masks = vec![self.mask.clone(); b];
        let ts = vec![t; b];
        let z = ctx.constant(z_t.clone());
        let out = match self.injection {
            Some((inj, f)) => {
                let hook = inj.hook(&ctx, f, false, 0)?;
                self.dit.forward(&ctx, z, &ts, text_ids, &masks, Some(&hook))?
            }
            None => self.dit.forward(&ctx, z, &ts, text_ids, &masks, None)?,
        };
        Ok(out.value())
    }
}

impl NoisePredictor for ConditionedPredictor<'_> {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let cond = self.eps(z_t, t, &self.text_ids)?;
        if !self.dit.cfg.cfg_enabled {
            return Ok(cond);
        }
        let empty = vec![Vec::new(); self.text_ids.len()];
        let uncond = self.eps(z_t, t, &empty)?;
        let g = self.dit.cfg.guidance_scale;
        Ok(uncond.zip_map(&cond, |u, c| u + g * (c - u)))
    }
}

/// `ε̂(z_t, t, text, F)`; `condition = None` runs the bare backbone.
pub fn predict_noise(dit: &Dit, injection: Option<(&Injector, &Tensor)>, z_t: &Tensor, t: usize, text_ids: &[Vec<usize>]) -> Result<Tensor> {
    ConditionedPredictor {
        dit,
        injection,
        text_ids: text_ids.to_vec(),
        mask: vec![false; z_t.dim(1)],
    }
    .predict(z_t, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::synth_data::tokenize;

    fn toy_dit() -> Dit {
        let mut dit = Dit::new(DitConfig {
            depth: 4,
            dim: 16,
            heads: 2,
            ffn_mult: 2,
            latent_channels: 2,
            text_len: 6,
            diffusion_steps: 50,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in dit.params.ids().collect::<Vec<_>>() {
            let t = dit.params.get(id);
            let r = Tensor::randn(t.shape(), 0.3, &mut rng);
            dit.params.set(id, t.add(&r));
        }
        dit
    }

    fn prompt() -> Vec<Vec<usize>> {
        vec![tokenize("a blue circle staying still").unwrap()]
    }

    #[test]
    fn fresh_injection_is_transparent() {
        let dit = toy_dit();
        for variant in [InjectionVariant::AdaptiveNorm, InjectionVariant::MlpAdapter] {
            let inj = Injector::new(
                InjectionConfig {
                    variant,
                    ..Default::default()
                },
                &dit.cfg,
            )
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let z = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut rng);
            let f = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut rng);
            let a = predict_noise(&dit, None, &z, 17, &prompt()).unwrap();
            let b = predict_noise(&dit, Some((&inj, &f)), &z, 17, &prompt()).unwrap();
            assert!(a.bit_eq(&b), "{variant:?}");
        }
    }

    #[test]
    fn default_layers_are_first_half() {
        assert_eq!(InjectionConfig::default().layers(8), vec![0, 1, 2, 3]);
        let bad = InjectionConfig {
            inject_layers: Some(vec![9]),
            ..Default::default()
        };
        assert!(bad.validate(8).is_err());
    }

    #[test]
    fn embed_condition_shape_and_linearity() {
        let dit = Dit::new(DitConfig::default()).unwrap();
        let mut inj = Injector::new(InjectionConfig::default(), &dit.cfg).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let f0 = inj
            .embed_condition(ctx.scope(&inj.params), ctx.constant(Tensor::zeros(&[1, 8, 8, 8, 8])))
            .unwrap();
        assert_eq!(f0.shape(), vec![1, 8, 16, 64]);
        assert!(f0.value().data().iter().all(|&v| v == 0.0));
        assert!(inj
            .embed_condition(ctx.scope(&inj.params), ctx.constant(Tensor::zeros(&[1, 8, 7, 8, 8])))
            .is_err());
        inj.params.set_trainable(false);
    }

    #[test]
    fn adapter_identity_and_shift_invariance() {
        let dit = toy_dit();
        let mut inj = Injector::new(InjectionConfig::default(), &dit.cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(&[1, 2, 4, 16], 1.0, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let s = ctx.scope(&inj.params);
        let ad = &inj.adapters[0];
        let shifted = f.map(|v| v + 3.7);
        let a = ad.mlp.forward(s, ad.ln.forward(s, ctx.constant(f.clone()))).value();
        let b = ad.mlp.forward(s, ad.ln.forward(s, ctx.constant(shifted))).value();
        assert!(a.max_abs_diff(&b) < 1e-9);
        let fc2 = inj.adapters[0].mlp.fc2.clone();
        inj.params.set(fc2.w, Tensor::zeros(&[32, 16]));
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let out = inj.adapters[0].forward(ctx.scope(&inj.params), ctx.constant(f.clone())).value();
        assert!(out.bit_eq(&f));
    }

    #[test]
    fn constant_channels_pass_through_uncertainty_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = Tensor::randn(&[2, 3, 5, 4], 1.0, &mut rng);
        for i in 0..(f.numel() / 4) {
            f.data_mut()[i * 4 + 1] = 0.1 * (1 + i / 15) as f64;
        }
        let out = uncertainty_sample(&f, 1e-5, false, true, 9);
        for i in 0..(f.numel() / 4) {
            assert_eq!(out.data()[i * 4 + 1], f.data()[i * 4 + 1]);
        }
        assert!(out.max_abs_diff(&f) > 1e-3);
        assert!(uncertainty_sample(&f, 1e-5, false, false, 9).bit_eq(&f));
    }

    #[test]
    fn gaussian_ablation_zero_std_passthrough() {
        let f = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        assert!(gaussian_noise_ablation(&f, 0.0, 1).bit_eq(&f));
        assert!(!gaussian_noise_ablation(&f, 0.1, 1).bit_eq(&f));
    }

    #[test]
    fn fusion_gradients_and_gate_probe() {
        let dit = toy_dit();
        let mut inj = Injector::new(InjectionConfig::default(), &dit.cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut rng);
        let f = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut rng);
        let batch = dit.sample_batch(z0, prompt(), 5);
        // at init only the gate receives gradient
        {
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape);
            let l = inj.loss(&ctx, &dit, &batch, &f, 0).unwrap();
            let g = tape.backward(l);
            let pg = ctx.grads_for(&inj.params, &g);
            let nonzero: Vec<&str> = inj
                .params
                .ids()
                .filter(|&i| pg[i.index()].as_ref().is_some_and(|t| t.sq_norm() > 0.0))
                .map(|i| inj.params.name(i))
                .collect();
            assert!(!nonzero.is_empty());
            assert!(nonzero.iter().all(|n| n.contains(".alpha.")), "{nonzero:?}");
        }
        let mut opt = Adam::new(Default::default());
        inj.train_step(&dit, &batch, &f, &mut opt, 1.0, 1).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        let fv = tape.var(f.reshape(&[1, 2, 4, 4, 2]));
        let hook = InjectionHook {
            inj: &inj,
            scope: ctx.scope(&inj.params),
            feats: {
                let s = ctx.scope(&inj.params);
                let mut cur = inj.embed_condition(s, fv).unwrap();
                inj.layers
                    .iter()
                    .zip(&inj.adapters)
                    .map(|(&l, a)| {
                        cur = a.forward(s, cur);
                        (l, cur)
                    })
                    .collect()
            },
        };
        let l = dit.diffusion_loss(&ctx, &batch, Some(&hook)).unwrap();
        let g = tape.backward(l);
        assert!(g.wrt(fv).sq_norm() > 0.0);
        let err = gradcheck::max_rel_error(&inj, |m| &mut m.params, |m, ctx| m.loss(ctx, &dit, &batch, &f, 0).unwrap(), 12, 3);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn injection_training_leaves_backbone_untouched() {
        let mut dit = toy_dit();
        dit.params.set_trainable(false);
        let before = dit.params.clone();
        let mut inj = Injector::new(InjectionConfig::default(), &dit.cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut rng);
        let f = Tensor::randn(&[1, 2, 4, 4, 2], 1.0, &mut rng);
        let mut opt = Adam::new(Default::default());
        for i in 0..3 {
            let batch = dit.sample_batch(z0.clone(), prompt(), i);
            inj.train_step(&dit, &batch, &f, &mut opt, 1.0, i).unwrap();
        }
        assert!(dit.params.bit_eq(&before));
    }
}
