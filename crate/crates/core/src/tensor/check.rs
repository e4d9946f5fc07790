use super::{Graph, OpKind, ParamStore, Tensor, Var};
use crate::error::{BmgfError, Result};

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(BmgfError::Contract(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    Ok(())
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the analytic gradient of the scalar built by `f` with respect to
/// its input against central differences. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_with_fault(f, x, step, None)
}

/// [`finite_diff_check`] with a deliberately corrupted backward rule for
/// `fault` (a negative control for the checker itself).
pub fn finite_diff_check_with_fault<F>(f: F, x: &Tensor, step: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_step(step)?;
    let empty = ParamStore::new();
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new(&empty);
        let xv = g.input(t, false);
        let y = f(&mut g, xv)?;
        scalar(&g, y)
    };

    let mut g = Graph::new(&empty).with_fault(fault);
    let xv = g.input(x, true);
    let y = f(&mut g, xv)?;
    let base = scalar(&g, y)?;
    if eval(x)? != base {
        return Err(BmgfError::Contract("function is not deterministic".into()));
    }
    let grads = g.backward(y)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

/// Same check, taken with respect to every trainable parameter in `params`.
pub fn finite_diff_check_params<F>(params: &mut ParamStore, step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    finite_diff_check_params_with_fault(params, step, None, f)
}

pub fn finite_diff_check_params_with_fault<F>(params: &mut ParamStore, step: f64, fault: Option<OpKind>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    check_step(step)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let y = f(&mut g)?;
        scalar(&g, y)
    };

    let (base, analytic) = {
        let mut g = Graph::new(params).with_fault(fault);
        let y = f(&mut g)?;
        let base = scalar(&g, y)?;
        let grads = g.backward(y)?;
        let analytic: Vec<Vec<f64>> = params
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; params.tensor(id).numel()])
            })
            .collect();
        (base, analytic)
    };
    if eval(params)? != base {
        return Err(BmgfError::Contract("function is not deterministic".into()));
    }

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().filter(|&id| params.trainable(id)).collect();
    for id in ids {
        for i in 0..params.tensor(id).numel() {
            let orig = params.tensor(id).data()[i];
            params.tensor_mut(id).data_mut()[i] = orig + step;
            let up = eval(params)?;
            params.tensor_mut(id).data_mut()[i] = orig - step;
            let down = eval(params)?;
            params.tensor_mut(id).data_mut()[i] = orig;
            worst = worst.max(relative_error(analytic[id.index()][i], (up - down) / (2.0 * step)));
        }
    }
    Ok(worst)
}

fn scalar(g: &Graph, y: Var) -> Result<f64> {
    match g.value(y) {
        [v] => Ok(*v),
        other => Err(BmgfError::Contract(format!("expected a scalar, got {} values", other.len()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.7, 2.5, 10.0]);
        let err = finite_diff_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::vector(vec![1.0]);
        let r = finite_diff_check(|g, v| Ok(g.sum_all(v)), &x, 0.0);
        assert!(matches!(r, Err(BmgfError::Contract(_))));
        assert!(finite_diff_check(|g, v| Ok(g.sum_all(v)), &x, 0.1).is_err());
    }

    #[test]
    fn nondeterminism_is_detected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let calls = Cell::new(0.0);
        let r = finite_diff_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.sum_all(v);
                Ok(g.scale(s, calls.get()))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(BmgfError::Contract(_))));
    }

    #[test]
    fn parameter_check_catches_wrong_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.add("w", &[3, 2], Init::FanIn(3), true, &mut rng);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let build = |g: &mut Graph| {
            let xv = g.constant(&x);
            let wv = g.param(w);
            let y = g.matmul(xv, wv)?;
            let s = g.sigmoid(y);
            Ok(g.sum_all(s))
        };
        let ok = finite_diff_check_params(&mut store, 1e-5, build).unwrap();
        assert!(ok < 1e-8);
    }
}
