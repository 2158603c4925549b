use super::{Bindings, Graph, ParamStore, Var};
use crate::error::{Error, Result};

fn eval_loss<B>(build: &B, params: &ParamStore<f64>) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let loss = build(&mut g, &bound)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Invalid("gradient check needs a scalar loss".into()));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `build` against central differences
/// over every learnable entry of `params` and returns the largest relative
/// error `|a - n| / max(1e-8, |a| + |n|)`.
///
/// `params` is perturbed in place and restored before returning.
pub fn grad_check<B>(build: B, params: &mut ParamStore<f64>, eps: f64) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = build(&mut g, &bound)?;
    let lv = g.value(loss).data().first().copied().unwrap_or(f64::NAN);
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {lv}")));
    }
    g.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = (0..params.len())
        .map(|i| g.grad(bound.at(i)).map(<[f64]>::to_vec))
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let names: Vec<(String, bool, usize)> = params
        .iter()
        .map(|p| (p.name.clone(), p.learnable, p.tensor.len()))
        .collect();
    for (pi, (name, learnable, len)) in names.into_iter().enumerate() {
        if !learnable {
            continue;
        }
        let grad = analytic[pi].as_deref().unwrap_or(&[]);
        for e in 0..len {
            let orig = params.get(&name)?.data()[e];
            params.get_mut(&name)?.data_mut()[e] = orig + eps;
            let plus = eval_loss(&build, params);
            params.get_mut(&name)?.data_mut()[e] = orig - eps;
            let minus = eval_loss(&build, params);
            params.get_mut(&name)?.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.get(e).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                worst_at = Some((name.clone(), e, a, numeric));
            }
        }
    }
    if let Some((name, e, a, n)) = worst_at {
        log::debug!(
            "grad_check worst entry {name}[{e}]: analytic {a:e}, numeric {n:e}, rel {worst:e}"
        );
    }
    Ok(worst)
}

/// Central-difference gradient of a plain function.
pub fn numeric_gradient<Fun>(mut f: Fun, x: &[f64], eps: f64) -> Vec<f64>
where
    Fun: FnMut(&[f64]) -> f64,
{
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let plus = f(&x);
            x[i] = orig - eps;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}
