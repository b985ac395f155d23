//! Rotary position embeddings over one or more position axes.
//!
//! The head dimension is split into `dh/2` rotation pairs `(i, i + dh/2)`.
//! With several axes the pairs are divided evenly between them, so a spatial
//! table rotates the first half of the pairs by row and the rest by column.

use crate::autograd::Var;
use crate::nn::Ctx;
use crate::tensor::Tensor;

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug)]
pub struct Rope {
    cos: Tensor,
    sin: Tensor,
}

impl Rope {
    /// `coords[l]` holds the position of token `l` along every axis.
    pub fn new(coords: &[Vec<f64>], head_dim: usize) -> Self {
        let axes = coords.first().map_or(1, |c| c.len());
        let half = head_dim / 2;
        assert!(head_dim % 2 == 0 && half % axes == 0, "head dim {head_dim} cannot be split over {axes} axes");
        let per_axis = half / axes;
        let l = coords.len();
        let mut cos = vec![0.0; l * head_dim];
        let mut sin = vec![0.0; l * head_dim];
        for (p, c) in coords.iter().enumerate() {
            for i in 0..half {
                let (a, j) = (i / per_axis, i % per_axis);
                let freq = ROPE_BASE.powf(-(j as f64) / per_axis as f64);
                let ang = c[a] * freq;
                let (s, co) = ang.sin_cos();
                for k in [i, i + half] {
                    cos[p * head_dim + k] = co;
                    sin[p * head_dim + k] = s;
                }
            }
        }
        Rope {
            cos: Tensor::from_vec(&[l, head_dim], cos),
            sin: Tensor::from_vec(&[l, head_dim], sin),
        }
    }

    pub fn temporal(t: usize, head_dim: usize) -> Self {
        let coords: Vec<Vec<f64>> = (0..t).map(|i| vec![i as f64]).collect();
        Self::new(&coords, head_dim)
    }

    /// Row-major `h × w` grid.
    pub fn spatial(h: usize, w: usize, head_dim: usize) -> Self {
        let coords: Vec<Vec<f64>> = (0..h * w).map(|i| vec![(i / w) as f64, (i % w) as f64]).collect();
        Self::new(&coords, head_dim)
    }

    pub fn len(&self) -> usize {
        self.cos.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rotates `x: [..., L, dh]`.
    pub fn apply<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Var<'t> {
        let sh = x.shape();
        let r = sh.len();
        let dh = sh[r - 1];
        let half = dh / 2;
        let x1 = x.narrow(r - 1, 0, half);
        let x2 = x.narrow(r - 1, half, half);
        let rot = Var::cat(&[x2.neg(), x1], r - 1);
        x.mul(ctx.constant(self.cos.clone()))
            .add(rot.mul(ctx.constant(self.sin.clone())))
    }
}
