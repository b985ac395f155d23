//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted and the backward pass is a single reverse
//! sweep. Nodes whose inputs carry no gradient store no backward closure.

use std::cell::RefCell;

use rand::Rng;

use crate::tensor::{self, numel, sum_to_shape, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, vec![], None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, vec![], None)
    }

    fn op<'t>(&'t self, value: Tensor, parents: &[Var<'t>], backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static) -> Var<'t> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let rg = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if rg {
            self.push(value, true, ids, Some(Box::new(backward)))
        } else {
            self.push(value, false, vec![], None)
        }
    }

    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let flags: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let pg = bw(&g, &flags);
            // keep the gradient of non-leaf nodes around for inspection
            grads[id] = Some(g);
            for ((&p, gp), &f) in node.parents.iter().zip(pg).zip(&flags) {
                let Some(gp) = gp else { continue };
                if !f {
                    continue;
                }
                debug_assert_eq!(gp.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => {
                        let a = acc.data_mut();
                        for (x, y) in a.iter_mut().zip(gp.data()) {
                            *x += y;
                        }
                    }
                    slot @ None => *slot = Some(gp),
                }
            }
        }
        Grads { grads }
    }
}

fn need(flags: &[bool], i: usize) -> bool {
    flags.get(i).copied().unwrap_or(false)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn binary(self, other: Var<'t>, kind: BinKind) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = match kind {
            BinKind::Add => a.add(&b),
            BinKind::Sub => a.sub(&b),
            BinKind::Mul => a.mul(&b),
            BinKind::Div => tensor::broadcast_binary(&a, &b, |x, y| x / y),
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.op(out, &[self, other], move |g, f| {
            let ga = need(f, 0).then(|| match kind {
                BinKind::Add | BinKind::Sub => sum_to_shape(g, &sa),
                BinKind::Mul => sum_to_shape(&g.mul(&b), &sa),
                BinKind::Div => sum_to_shape(&tensor::broadcast_binary(g, &b, |x, y| x / y), &sa),
            });
            let gb = need(f, 1).then(|| match kind {
                BinKind::Add => sum_to_shape(g, &sb),
                BinKind::Sub => sum_to_shape(&g.scale(-1.0), &sb),
                BinKind::Mul => sum_to_shape(&g.mul(&a), &sb),
                BinKind::Div => {
                    let t = tensor::broadcast_binary(g, &a, |x, y| x * y);
                    let t = tensor::broadcast_binary(&t, &b, |x, y| -x / (y * y));
                    sum_to_shape(&t, &sb)
                }
            });
            vec![ga, gb]
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, BinKind::Div)
    }

    /// Elementwise `x * s + c`.
    pub fn affine(self, s: f64, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * s + c);
        self.tape.op(out, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let yc = y.clone();
        self.tape.op(y, &[self], move |g, _| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(yc.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d))]
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sqr(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            },
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.to_scalar()))]
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = numel(&self.shape()) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sums over the last axis, keeping it with size 1.
    pub fn sum_last(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let d = *shape.last().unwrap();
        let v: Vec<f64> = x.data().chunks(d).map(|c| c.iter().sum()).collect();
        let mut os = shape.clone();
        *os.last_mut().unwrap() = 1;
        self.tape.op(Tensor::from_vec(&os, v), &[self], move |g, _| {
            let mut out = Vec::with_capacity(numel(&shape));
            for &gi in g.data() {
                out.extend(std::iter::repeat(gi).take(d));
            }
            vec![Some(Tensor::from_vec(&shape, out))]
        })
    }

    pub fn mean_last(self) -> Var<'t> {
        let d = *self.shape().last().unwrap() as f64;
        self.sum_last().scale(1.0 / d)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let orig = x.shape().to_vec();
        self.tape.op(x.reshape(shape), &[self], move |g, _| vec![Some(g.reshape(&orig))])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let inv = tensor::inverse_axes(axes);
        let out = self.value().permute(axes);
        self.tape.op(out, &[self], move |g, _| vec![Some(g.permute(&inv))])
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(x.narrow(axis, start, len), &[self], move |g, _| {
            let mut full = Tensor::zeros(&shape);
            full.assign_narrow(axis, start, g);
            vec![Some(full)]
        })
    }

    pub fn cat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        let tape = parts[0].tape;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().collect();
        let lens: Vec<usize> = vals.iter().map(|v| v.dim(axis)).collect();
        tape.op(tensor::cat(&refs, axis), parts, move |g, f| {
            let mut start = 0;
            lens.iter()
                .enumerate()
                .map(|(i, &l)| {
                    let r = need(f, i).then(|| g.narrow(axis, start, l));
                    start += l;
                    r
                })
                .collect()
        })
    }

    /// `self @ other` over the last two axes; see [`tensor::matmul`].
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, false)
    }

    /// `self @ otherᵀ` over the last two axes.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, bt: bool) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = tensor::matmul(&a, &b, bt);
        self.tape.op(out, &[self, other], move |g, f| {
            let (batch, m, k, n, batched) = tensor::matmul_dims(a.shape(), b.shape(), bt);
            let ga = need(f, 0).then(|| {
                // dA = dC · Bᵀ  (or dC · B when B was given transposed)
                let mut v = vec![0.0; batch * m * k];
                let (rsb, csb) = if bt { (k, 1) } else { (1, n) };
                if !batched {
                    tensor::gemm(batch * m, n, k, g.data(), n, 1, b.data(), rsb, csb, 0.0, &mut v);
                } else {
                    for i in 0..batch {
                        tensor::gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..],
                            n,
                            1,
                            &b.data()[i * k * n..],
                            rsb,
                            csb,
                            0.0,
                            &mut v[i * m * k..],
                        );
                    }
                }
                Tensor::from_vec(a.shape(), v)
            });
            let gb = need(f, 1).then(|| {
                // dB = Aᵀ · dC, or (dC)ᵀ · A for the transposed operand
                let mut v = vec![0.0; if batched { batch } else { 1 } * k * n];
                let run = |ad: &[f64], gd: &[f64], rows: usize, out: &mut [f64]| {
                    if bt {
                        tensor::gemm(n, rows, k, gd, 1, n, ad, k, 1, 1.0, out);
                    } else {
                        tensor::gemm(k, rows, n, ad, 1, k, gd, n, 1, 1.0, out);
                    }
                };
                if !batched {
                    run(a.data(), g.data(), batch * m, &mut v);
                } else {
                    for i in 0..batch {
                        run(
                            &a.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            m,
                            &mut v[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
                Tensor::from_vec(b.shape(), v)
            });
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis. `-inf` entries get exactly zero weight.
    pub fn softmax_last(self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut y = vec![0.0; x.numel()];
        for (row, out) in x.data().chunks(d).zip(y.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        let y = Tensor::from_vec(x.shape(), y);
        let yc = y.clone();
        self.tape.op(y, &[self], move |g, _| {
            let mut out = vec![0.0; g.numel()];
            for ((yr, gr), o) in yc.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                    *oi = yi * (gi - dot);
                }
            }
            vec![Some(Tensor::from_vec(g.shape(), out))]
        })
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let rows = x.numel() / d;
        let mut y = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (row, out)) in x.data().chunks(d).zip(y.chunks_mut(d)).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mu) * rs;
            }
        }
        let y = Tensor::from_vec(x.shape(), y);
        let yc = y.clone();
        self.tape.op(y, &[self], move |g, _| {
            let mut out = vec![0.0; g.numel()];
            for (r, ((yr, gr), o)) in yc
                .data()
                .chunks(d)
                .zip(g.data().chunks(d))
                .zip(out.chunks_mut(d))
                .enumerate()
            {
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for ((oi, &yi), &gi) in o.iter_mut().zip(yr).zip(gr) {
                    *oi = rstd[r] * (gi - mg - yi * mgy);
                }
            }
            vec![Some(Tensor::from_vec(g.shape(), out))]
        })
    }

    /// Row gather: `self` is a `[V, D]` table, the result is `[ids.len(), D]`.
    pub fn index_select(self, ids: &[usize]) -> Var<'t> {
        let table = self.value();
        assert_eq!(table.rank(), 2);
        let (v, d) = (table.dim(0), table.dim(1));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "index {i} out of range for table of {v} rows");
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.tape.op(Tensor::from_vec(&[ids.len(), d], out), &[self], move |g, _| {
            let mut acc = vec![0.0; v * d];
            for (r, &i) in ids.iter().enumerate() {
                for (a, &x) in acc[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *a += x;
                }
            }
            vec![Some(Tensor::from_vec(&[v, d], acc))]
        })
    }

    /// Mean cross-entropy of `[N, V]` logits against targets; `None` targets are skipped.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.rank(), 2);
        let (n, v) = (x.dim(0), x.dim(1));
        assert_eq!(targets.len(), n);
        let count = targets.iter().filter(|t| t.is_some()).count().max(1) as f64;
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (r, (row, p)) in x.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (pi, &xi) in p.iter_mut().zip(row) {
                *pi = (xi - mx).exp();
                s += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= s;
            }
            if let Some(t) = targets[r] {
                loss += mx + s.ln() - row[t];
            }
        }
        let targets = targets.to_vec();
        self.tape.op(Tensor::scalar(loss / count), &[self], move |g, _| {
            let gs = g.to_scalar() / count;
            let mut out = vec![0.0; n * v];
            for (r, o) in out.chunks_mut(v).enumerate() {
                if let Some(t) = targets[r] {
                    for (oi, &pi) in o.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *oi = gs * pi;
                    }
                    o[t] -= gs;
                }
            }
            vec![Some(Tensor::from_vec(&[n, v], out))]
        })
    }

    /// See [`tensor::unfold3d`].
    pub fn unfold3d(self, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = tensor::unfold3d(&x, kernel, stride, pad);
        self.tape.op(out, &[self], move |g, _| {
            vec![Some(tensor::fold3d(g, &shape, kernel, stride, pad))]
        })
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Var<'t> {
        if p <= 0.0 {
            return self;
        }
        let shape = self.shape();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..numel(&shape))
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::from_vec(&shape, mask));
        self.mul(m)
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a random weighting `w`.
    fn check_unary(shape: &[usize], f: impl Fn(Var<'_>) -> Var<'_>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = f(x);
        let w = Tensor::randn(&y.shape(), 1.0, &mut rng);
        let loss = y.mul(tape.constant(w.clone())).sum_all();
        let grads = tape.backward(loss);
        let g = grads.wrt(x);
        let eval = |xv: Tensor| {
            let t = Tape::new();
            let y = f(t.var(xv));
            y.value().mul(&w).sum()
        };
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "index {i}: analytic {an} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn grad_elementwise() {
        check_unary(&[3, 4], |x| x.gelu());
        check_unary(&[3, 4], |x| x.silu());
        check_unary(&[3, 4], |x| x.tanh());
        check_unary(&[3, 4], |x| x.sqr().affine(0.5, 1.0).sqrt());
        check_unary(&[3, 4], |x| x.exp().ln());
    }

    #[test]
    fn grad_norms_and_softmax() {
        check_unary(&[3, 5], |x| x.softmax_last());
        check_unary(&[3, 5], |x| x.layer_norm(1e-5));
        check_unary(&[2, 3, 5], |x| x.mean_last().mul(x));
    }

    #[test]
    fn grad_matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let bw = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        check_unary(&[2, 5, 4], |x| {
            let t = x.tape();
            x.matmul(t.constant(w.clone()))
        });
        check_unary(&[2, 5, 4], |x| {
            let t = x.tape();
            x.matmul_t(t.constant(bw.clone()))
        });
        check_unary(&[2, 5, 4], |x| x.matmul_t(x));
        check_unary(&[4, 3], |x| {
            let t = x.tape();
            t.constant(bw.clone()).matmul(x)
        });
        check_unary(&[2, 4, 3], |x| {
            let t = x.tape();
            t.constant(bw.clone()).matmul_t(x.permute(&[0, 2, 1]))
        });
    }

    #[test]
    fn grad_shape_ops() {
        check_unary(&[2, 3, 4], |x| x.permute(&[2, 0, 1]).narrow(1, 1, 1));
        check_unary(&[2, 3], |x| Var::cat(&[x, x.sqr()], 1).reshape(&[12]));
        check_unary(&[4, 3], |x| x.index_select(&[0, 2, 2, 3]));
        check_unary(&[2, 3], |x| x.div(x.sqr().affine(1.0, 1.0)));
        check_unary(&[2, 3], |x| x.mul(x.narrow(1, 0, 1)).sub(x.sum_last()));
        check_unary(&[1, 3, 4, 4, 2], |x| x.unfold3d([3, 3, 3], [1, 2, 2], [1, 1, 1]));
    }

    #[test]
    fn grad_cross_entropy() {
        check_unary(&[4, 6], |x| x.cross_entropy(&[Some(1), None, Some(5), Some(0)]));
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4]));
        let l = x.cross_entropy(&[Some(0), Some(1), Some(3)]).value().to_scalar();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_gives_exact_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![0.3, f64::NEG_INFINITY, 1.0]));
        let y = x.softmax_last().value();
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn constants_do_not_record_backward() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = a.exp().add(a);
        assert!(!b.requires_grad());
    }
}
