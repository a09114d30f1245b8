//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of one component is `|a - n| / max(|a|, |n|, floor)`
//! where `a` is the analytic and `n` the numeric derivative. The floor keeps
//! components whose true gradient is essentially zero from dominating the
//! report through rounding noise; below it the comparison is absolute.

use crate::{Graph, Gradients, ParamId, ParamStore, Result, Var};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the maximum relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Default denominator floor.
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst component.
    pub worst: Option<(String, usize)>,
    pub components: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central differences `(L(p + h) - L(p - h)) / 2h` for every scalar of
/// every parameter in `ids`. Parameters are restored afterwards.
pub fn numeric_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    mut loss_fn: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).len();
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = loss_fn(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = loss_fn(store);
            store.get_mut(id).data_mut()[i] = orig;
            grads.push((plus? - minus?) / (2.0 * h));
        }
        out.push(grads);
    }
    Ok(out)
}

/// Maximum component-wise relative error with its location
/// `(param position in the list, flat index)`.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> (f64, Option<(usize, usize)>) {
    let mut worst = (0.0, None);
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let denom = av.abs().max(nv.abs()).max(floor);
            let err = (av - nv).abs() / denom;
            if err > worst.0 || worst.1.is_none() {
                worst = (err, Some((p, i)));
            }
        }
    }
    worst
}

/// Flattens the gradients of `ids`, substituting zeros for unreached
/// parameters.
pub fn flatten_gradients(store: &ParamStore, grads: &Gradients, ids: &[ParamId]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.get(id).len()],
        })
        .collect()
}

/// Compares the reverse-mode gradient of `build` against central
/// differences over every parameter in `store`.
///
/// `build` must be deterministic: it is re-run twice per scalar parameter.
/// A training graph with a fixed dropout seed qualifies.
pub fn gradient_check<F>(store: &mut ParamStore, h: f64, tol: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let (g, loss) = build(store)?;
    let grads = g.backward(loss)?;
    let analytic = flatten_gradients(store, &grads, &ids);
    let numeric = numeric_gradients(store, &ids, h, |s| {
        let (g, loss) = build(s)?;
        Ok(g.value(loss).data()[0])
    })?;
    let (err, loc) = max_relative_error(&analytic, &numeric, DEFAULT_FLOOR);
    Ok(GradCheckReport {
        max_rel_error: err,
        worst: loc.map(|(p, i)| (store.name(ids[p]).to_string(), i)),
        components: store.scalar_count(),
        tolerance: tol,
        passed: err <= tol,
    })
}
