use super::{precision, Graph, ParamStore, Precision, Tensor, Var};
use crate::error::{Error, Result};

fn check_preconditions(step: f64) -> Result<()> {
    if precision() != Precision::F64 {
        return Err(Error::arg("gradient checks require 64-bit precision"));
    }
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::arg(format!("step {step} outside [1e-6, 1e-4]")));
    }
    Ok(())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn scalar_of(g: &Graph<'_>, out: Var) -> Result<f64> {
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::arg(format!(
            "gradient check needs a scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Max relative error between the tape gradient of `f` at `point` and central
/// finite differences, over all components of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Var,
{
    grad_check_with(&ParamStore::new(), f, point, step)
}

/// As [`grad_check`], with parameters from `store` visible to `f`.
pub fn grad_check_with<F>(store: &ParamStore, f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Var,
{
    check_preconditions(step)?;
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new(store);
        let x = g.input(p.clone());
        let out = f(&mut g, x);
        scalar_of(&g, out)
    };
    let analytic = {
        let mut g = Graph::new(store);
        let x = g.input(point.clone());
        let out = f(&mut g, x);
        scalar_of(&g, out)?;
        let grads = g.backward(out);
        grads
            .wrt(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; point.len()])
    };
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Max relative error over every entry of every trainable parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    check_preconditions(step)?;
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        scalar_of(&g, out)?;
        let grads = g.backward(out);
        let mut s = store.clone();
        s.zero_grads();
        grads.accumulate_into(&mut s, 1.0);
        s
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g);
        scalar_of(&g, out)
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).grad.data()[i];
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::with_precision;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn square_is_exact() {
        let err = grad_check(|g, x| g.mul(x, x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn weighted_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut rng, &[1, 5]);
        let x = random(&mut rng, &[1, 5]);
        let err = grad_check(
            |g, x| {
                let p = g.softmax(x);
                let wv = g.input(w.clone());
                let y = g.mul(p, wv);
                g.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_scalar_outputs_and_bad_steps() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(|g, x| g.scale(x, 2.0), &x, 1e-5).is_err());
        assert!(grad_check(|g, x| g.sum(x), &x, 1e-2).is_err());
        let r = with_precision(Precision::F32, || grad_check(|g, x| g.sum(x), &x, 1e-5));
        assert!(r.is_err());
    }

    /// Every tape op against finite differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store.add("w", random(&mut rng, &[4, 6]), true);
        let b = store.add("b", random(&mut rng, &[6]), true);
        let gamma = store.add("gamma", random(&mut rng, &[6]), true);
        let beta = store.add("beta", random(&mut rng, &[6]), true);
        let table = store.add("table", random(&mut rng, &[5, 6]), true);
        let dw = store.add("dw", random(&mut rng, &[3, 6]), true);
        let m2 = store.add("m2", random(&mut rng, &[6, 6]), true);
        let probe = random(&mut rng, &[3, 12]);
        let x = random(&mut rng, &[3, 4]);
        let f = |g: &mut Graph<'_>, x: Var| {
            let (w, b, gamma, beta, table, dw, m2) = (
                g.param(w),
                g.param(b),
                g.param(gamma),
                g.param(beta),
                g.param(table),
                g.param(dw),
                g.param(m2),
            );
            let h = g.linear(x, w, Some(b));
            let h = g.silu(h);
            let h = g.layer_norm(h, gamma, beta, 1e-5);
            let e = g.embedding(table, &[1, 4, 1]);
            let c = g.bag_mean(table, &[vec![0, 2], vec![], vec![3]]);
            let e = g.add(e, c);
            let h = g.mul(h, e);
            let h = g.depthwise_conv(h, dw, b);
            let q = g.matmul(h, m2, false);
            let kk = g.matmul(h, m2, true);
            let a = g.attention(q, kk, h, 2, true);
            let a2 = g.attention(a, h, kk, 3, false);
            let s = g.sigmoid(a2);
            let s = g.sub(s, a);
            let cat = g.concat_cols(s, h);
            let glu = g.glu(cat);
            let lsm = g.log_softmax(glu);
            let sm = g.softmax(a);
            let t = g.add_row(sm, b);
            let t = g.scale(t, 0.5);
            let both = g.concat_cols(lsm, t);
            let pv = g.input(probe.clone());
            let y = g.mul(both, pv);
            let s1 = g.sum(y);
            let s2 = g.mean(lsm);
            g.weighted_sum(&[s1, s2], &[1.0, -0.3])
        };
        let err = grad_check_with(&store, f, &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "input gradient error {err}");
        let err = grad_check_params(&store, |g| {
            let xv = g.input(x.clone());
            f(g, xv)
        }, 1e-5)
        .unwrap();
        assert!(err <= 1e-6, "parameter gradient error {err}");
    }

    #[test]
    fn unfold_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[9, 2]);
        let probe = random(&mut rng, &[4, 6]);
        let err = grad_check(
            |g, x| {
                let u = g.unfold(x, 3, 2);
                let r = g.relu(u);
                let p = g.input(probe.clone());
                let y = g.mul(r, p);
                g.sum(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}
