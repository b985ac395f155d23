//! Finite-difference gradient checks for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::nn::{Ctx, ParamId, ParamStore};

/// Largest relative error between backprop and central differences over `n`
/// randomly chosen trainable scalars of `model`.
pub fn max_rel_error<M: Clone>(
    model: &M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl for<'t> Fn(&M, &Ctx<'t>) -> Var<'t>,
    n: usize,
    seed: u64,
) -> f64 {
    let eval = |m: &M| {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape);
        loss(m, &ctx).value().to_scalar()
    };
    let mut m = model.clone();
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape);
    let l = loss(&m, &ctx);
    let g = tape.backward(l);
    let pg = ctx.grads_for(store(&mut m), &g);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = {
        let s = store(&mut m);
        s.ids().filter(|&i| s.is_trainable(i)).collect()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut tries = 0;
    while checked < n && tries < 50 * n {
        tries += 1;
        let id = ids[rng.gen_range(0..ids.len())];
        let numel = store(&mut m).get(id).numel();
        let j = rng.gen_range(0..numel);
        let analytic = pg[id_index(id)].as_ref().map(|t| t.data()[j]).unwrap_or(0.0);
        let h = 1e-5;
        let orig = store(&mut m).get(id).data()[j];
        store(&mut m).get_mut(id).data_mut()[j] = orig + h;
        let lp = eval(&m);
        store(&mut m).get_mut(id).data_mut()[j] = orig - h;
        let lm = eval(&m);
        store(&mut m).get_mut(id).data_mut()[j] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((analytic - numeric).abs() / scale);
        checked += 1;
    }
    assert_eq!(checked, n, "too few parameters with non-negligible gradient");
    worst
}

fn id_index(id: ParamId) -> usize {
    id.index()
}
