//! Central-difference verification of tape gradients.

use serde::Serialize;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub h: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is below the finite-difference noise floor are compared in
    /// absolute terms.
    pub floor: f64,
    /// Check only parameters whose name starts with one of these prefixes
    /// (all parameters when empty).
    pub only: Vec<String>,
    /// Smaller steps retried, in order, for entries whose error at `h` is at
    /// least `retry_above`; the entry keeps its best agreement. A piecewise
    /// linear unit switching inside `±h` spoils one step but not all of
    /// them, while a wrong gradient disagrees at every step.
    pub fallback_h: Vec<f64>,
    pub retry_above: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-6,
            floor: 1e-6,
            only: Vec::new(),
            fallback_h: Vec::new(),
            retry_above: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the whole tensor.
    pub norm_rel_error: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Largest tensor-wise relative error.
    pub fn max_norm_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.norm_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients of `loss_fn` against `(f(w+h) - f(w-h)) / 2h`
/// for every parameter entry.
pub fn grad_check<F>(loss_fn: F, store: &mut ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_with(
        loss_fn,
        store,
        &GradCheckOptions {
            h,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    mut loss_fn: F,
    store: &mut ParamStore,
    options: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let h = options.h;
    if std::iter::once(&h).chain(&options.fallback_h).any(|h| !(*h > 0.0) || !h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    fn eval<F>(loss_fn: &mut F, store: &ParamStore) -> Result<f64>
    where
        F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    }

    store.zero_grad();
    let mut tape = Tape::new();
    let loss_var = loss_fn(&mut tape, store)?;
    let loss = tape.scalar_value(loss_var);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {loss}")));
    }
    tape.backward(loss_var)?.accumulate_into(&tape, store);
    drop(tape);

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| {
            options.only.is_empty() || options.only.iter().any(|pre| p.name.starts_with(pre))
        })
        .map(|(id, _)| id)
        .collect();

    let mut params = Vec::with_capacity(ids.len());
    let mut entries = 0;
    for id in ids {
        let analytic = store.grad(id).clone();
        let mut worst = (0, 0.0, 0.0);
        let mut max_err: f64 = 0.0;
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for k in 0..analytic.len() {
            let a = analytic.data()[k];
            let mut central = |step: f64| -> Result<f64> {
                let orig = store.value(id).data()[k];
                store.value_mut(id).data_mut()[k] = orig + step;
                let up = eval(&mut loss_fn, store);
                store.value_mut(id).data_mut()[k] = orig - step;
                let down = eval(&mut loss_fn, store);
                store.value_mut(id).data_mut()[k] = orig;
                Ok((up? - down?) / (2.0 * step))
            };
            let mut numeric = central(h)?;
            for &step in &options.fallback_h {
                if relative_error(a, numeric, options.floor) < options.retry_above {
                    break;
                }
                let n = central(step)?;
                if relative_error(a, n, options.floor) < relative_error(a, numeric, options.floor) {
                    numeric = n;
                }
            }
            d2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            let err = relative_error(a, numeric, options.floor);
            if err > max_err || k == 0 {
                max_err = max_err.max(err);
                worst = (k, a, numeric);
            }
            entries += 1;
        }
        params.push(ParamCheck {
            name: store.param(id).name.clone(),
            max_rel_error: max_err,
            norm_rel_error: d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(options.floor),
            worst,
        });
    }
    store.zero_grad();
    Ok(GradCheckReport {
        loss,
        params,
        entries_checked: entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Activation, Dense, GruCell};
    use crate::nn::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::matrix(2, 3, vec![0.1, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap())
            .unwrap();
        let report = grad_check(
            |t, s| {
                let w = t.param(s, id);
                Ok(t.sum(w))
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-8, "{}", report.max_rel_error());
    }

    #[test]
    fn fallback_step_resolves_kink_crossing() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(5e-6)).unwrap();
        let f = |t: &mut Tape, s: &ParamStore| {
            let w = t.param(s, id);
            Ok(t.leaky_relu(w, 0.0))
        };
        let coarse = grad_check(f, &mut store, 1e-5).unwrap();
        assert!((coarse.max_rel_error() - 0.25).abs() < 1e-9);
        let options = GradCheckOptions {
            h: 1e-5,
            fallback_h: vec![1e-6],
            retry_above: 1e-5,
            ..Default::default()
        };
        let fine = grad_check_with(f, &mut store, &options).unwrap();
        assert!(fine.max_rel_error() < 1e-9);
    }

    #[test]
    fn zero_step_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0)).unwrap();
        let r = grad_check(|t, s| Ok(t.param(s, id)), &mut store, 0.0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(-1.0)).unwrap();
        let r = grad_check(
            |t, s| {
                let w = t.param(s, id);
                Ok(t.sqrt(w))
            },
            &mut store,
            1e-6,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn dense_layer_gradient_including_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "d", 4, 3, Activation::Tanh, &mut rng).unwrap();
        for v in store.value_mut(layer.bias).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let input = store.add("input", Tensor::matrix(2, 4, x).unwrap()).unwrap();
        let target: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(
            |t, s| {
                let x = t.param(s, input);
                let y = layer.forward(t, s, x)?;
                let tgt = t.input(Tensor::matrix(2, 3, target.clone())?);
                let d = t.sub(y, tgt)?;
                let q = t.square(d);
                Ok(t.sum(q))
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
    }

    #[test]
    fn gru_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        for v in store.value_mut(cell.bias).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let h0 = store
            .add("h0", Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .unwrap();
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let report = grad_check(
            |t, s| {
                let mut h = t.param(s, h0);
                for x in &xs {
                    let x = t.input(x.clone());
                    h = cell.step(t, s, h, x)?;
                }
                let w = t.input(Tensor::matrix(2, 4, vec![1., -1., 0.5, 2., 0.3, -0.7, 1.1, 0.2])?);
                let p = t.mul(h, w)?;
                Ok(t.sum(p))
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{:?}", report.worst());
    }
}
