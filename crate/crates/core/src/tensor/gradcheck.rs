use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|g − ĝ| / max(1e−8, |g| + |ĝ|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences
/// over every element of every parameter in `store` (optionally only the
/// parameters accepted by `filter`).
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, eps: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    grad_check_filtered(store, f, eps, |_| true)
}

pub fn grad_check_filtered<F, P>(store: &mut ParamStore<f64>, f: F, eps: f64, filter: P) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
    P: Fn(&str) -> bool,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g);
        g.backward(loss)
    };
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let loss = f(&mut g);
        g.scalar(loss)
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    let ids: Vec<(ParamId, String)> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if !filter(&name) {
            continue;
        }
        let n = store.value(id).numel();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}
