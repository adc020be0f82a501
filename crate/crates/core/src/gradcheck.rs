//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Gradients, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares the tape gradient of every parameter in `store` with
/// fourth-order central differences of step `eps`.
///
/// `build` must be deterministic: it is evaluated twice up front and an
/// error is returned if the two losses differ.
pub fn check_gradients<T, F>(store: &mut ParamStore<T>, eps: f64, mut build: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    check_owned_gradients(store, eps, |s| s, |s| {
        let mut g = Graph::new();
        let loss = build(&mut g, s)?;
        Ok((g, loss))
    })
}

/// [`check_gradients`] for losses that build their own graph from
/// parameters held inside `owner`, such as a whole model.
pub fn check_owned_gradients<O, T, S, F>(owner: &mut O, eps: f64, store: S, mut loss: F) -> Result<GradCheckReport>
where
    T: Scalar,
    S: Fn(&mut O) -> &mut ParamStore<T>,
    F: FnMut(&O) -> Result<(Graph<T>, Var)>,
{
    let mut value = |o: &O, backward: bool| -> Result<(f64, Option<Gradients<T>>)> {
        let (g, l) = loss(o)?;
        let v = g.value(l).item().as_f64();
        Ok((v, if backward { Some(g.backward(l)?) } else { None }))
    };
    let first = value(owner, false)?.0;
    let second = value(owner, false)?.0;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Autodiff(format!(
            "build function is not deterministic ({first} vs {second})"
        )));
    }

    let grads = value(owner, true)?.1.expect("requested");
    let st = store(owner);
    st.zero_grad();
    st.accumulate(&grads);

    let ids: Vec<_> = store(owner).iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport::default();
    let step = T::from_f64_lossy(eps);
    for id in ids {
        let analytic = store(owner).get(id).grad.to_f64_vec();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store(owner).get(id).value.data()[i];
            let mut f = [0.0; 4];
            for (slot, k) in f.iter_mut().zip([-2.0, -1.0, 1.0, 2.0]) {
                store(owner).get_mut(id).value.data_mut()[i] = orig + T::from_f64_lossy(k) * step;
                *slot = value(owner, false)?.0;
            }
            store(owner).get_mut(id).value.data_mut()[i] = orig;
            // differences first, so equal values cancel exactly
            let numeric = (8.0 * (f[2] - f[1]) - (f[3] - f[0])) / (12.0 * eps);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        report.params.push(ParamCheck {
            name: store(owner).get(id).name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamKind;
    use crate::tensor::Tensor;

    #[test]
    fn sigmoid_neuron() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", ParamKind::Weight, Tensor::from_f64(vec![3], &[0.3, -0.7, 1.1]).unwrap())
            .unwrap();
        let b = store
            .add("b", ParamKind::Bias, Tensor::from_f64(vec![1], &[0.2]).unwrap())
            .unwrap();
        let report = check_gradients(&mut store, 1e-5, |g, s| {
            let x = g.constant(Tensor::from_f64(vec![1, 3], &[0.5, 1.5, -2.0])?);
            let wv = g.param(s, w);
            let bv = g.param(s, b);
            let z = g.matmul(x, wv)?;
            let z = g.reshape(z, vec![1, 1])?;
            let z = g.add_bias(z, bv)?;
            let y = g.sigmoid(z);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn nondeterministic_build_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", ParamKind::Weight, Tensor::ones(&[2]).unwrap()).unwrap();
        let mut calls = 0.0;
        let err = check_gradients(&mut store, 1e-5, |g, s| {
            calls += 1.0;
            let wv = g.param(s, w);
            let y = g.scale(wv, calls);
            Ok(g.sum(y))
        })
        .unwrap_err();
        assert!(err.to_string().contains("not deterministic"));
    }
}
