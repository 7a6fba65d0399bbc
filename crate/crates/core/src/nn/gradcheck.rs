//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::param::{Gradients, ParamId, ParamStore};
use crate::error::Result;

/// Absolute mismatch below which an entry passes regardless of its relative
/// error. Parameters whose true gradient is zero (e.g. attention key biases,
/// which shift all scores of a query equally) otherwise compare two rounding
/// residues of order `eps / step`.
pub const ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_abs_diff: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed).collect()
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::no_grad(store);
    let out = f(&mut g)?;
    Ok(g.scalar(out))
}

/// Runs `f` once with reverse mode, then compares against central differences.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    check_gradients_against(store, params, f, &analytic, step, tol)
}

/// Compares supplied gradients against central differences of `f`.
///
/// Per parameter the relative error is
/// `max|a - n| / max(1e-12, max|a| + max|n|)`, taken over all elements. An
/// entry passes when that is at most `tol` or `max|a - n| <= ABS_FLOOR`.
pub fn check_gradients_against<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    f: F,
    analytic: &Gradients,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut entries = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.get(id).tensor.len();
        let zeros = vec![0.0; n];
        let a = analytic.get(id).unwrap_or(&zeros).to_vec();
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + step;
            let plus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[i] = orig - step;
            let minus = evaluate(store, &f);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            numeric[i] = (plus? - minus?) / (2.0 * step);
        }
        let max_abs_diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max)
            + numeric.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let rel_error = max_abs_diff / scale.max(1e-12);
        entries.push(GradCheckEntry {
            name: store.get(id).name.clone(),
            max_abs_diff,
            rel_error,
            passed: rel_error <= tol || max_abs_diff <= ABS_FLOOR,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::{Role, Scope};
    use crate::nn::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::from_vec(vec![3.0]), Scope::Shared, Role::Weight)
            .unwrap();
        let f = |g: &mut Graph<'_>| {
            let v = g.param(w);
            let sq = g.mul(v, v)?;
            g.sum(sq)
        };
        let mut g = Graph::new(&store);
        let out = f(&mut g).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
        drop(g);
        let report = check_gradients(&mut store, &[w], f, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.entries[0].rel_error < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_flagged_by_name() {
        let mut store = ParamStore::new();
        let w = store
            .register("layer.w", Tensor::from_vec(vec![3.0, -1.0]), Scope::Shared, Role::Weight)
            .unwrap();
        let f = |g: &mut Graph<'_>| {
            let v = g.param(w);
            let sq = g.mul(v, v)?;
            g.sum(sq)
        };
        let mut bad = Gradients::default();
        bad.insert(w, vec![6.0, 5.0]);
        let report = check_gradients_against(&mut store, &[w], f, &bad, 1e-5, 1e-4).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures()[0].name, "layer.w");
    }
}
