//! Central finite-difference checks of analytic gradients (64-bit only).

use crate::autodiff::{Bound, Graph, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Entries skipped because a non-differentiable point (a ReLU switching)
    /// lies within the step: the one-sided slopes disagree.
    pub kinks: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare the analytic gradient of `loss` w.r.t. every scalar of `store`
/// against Richardson-extrapolated central differences at `step` and `step / 2`.
pub fn check_store(
    store: &mut ParamStore<f64>,
    loss: impl FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
    step: f64,
    floor: f64,
) -> Result<GradCheck> {
    check_store_steps(store, loss, &[step], floor)
}

/// Like [`check_store`], but each entry keeps its best agreement over several
/// steps, skipping steps whose interval contains a kink.
pub fn check_store_steps(
    store: &mut ParamStore<f64>,
    mut loss: impl FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
    steps: &[f64],
    floor: f64,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, true);
    let l = loss(&mut g, &b)?;
    g.backward(l)?;
    let analytic: Vec<Matrix<f64>> = store
        .ids()
        .map(|id| {
            let (r, c) = store.get(id).value.shape();
            g.grad(b[id]).cloned().unwrap_or_else(|| Matrix::zeros(r, c))
        })
        .collect();

    let mut eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let l = loss(&mut g, &b)?;
        Ok(g.value(l).scalar_value())
    };

    let base = eval(store)?;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        checked: 0,
        kinks: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            let a = analytic[k].data()[i];
            let mut best: Option<(f64, f64)> = None;
            for &step in steps {
                let mut at = |s: &mut ParamStore<f64>, x: f64| -> Result<f64> {
                    s.value_mut(id).data_mut()[i] = x;
                    eval(s)
                };
                let (up, down) = (at(store, orig + step)?, at(store, orig - step)?);
                let (up2, down2) = (at(store, orig + step / 2.0)?, at(store, orig - step / 2.0)?);
                store.value_mut(id).data_mut()[i] = orig;
                let (right, left) = ((up - base) / step, (base - down) / step);
                if (right - left).abs() > 1e-7_f64.max(0.1 * right.abs().max(left.abs())) {
                    continue;
                }
                let wide = (up - down) / (2.0 * step);
                let narrow = (up2 - down2) / step;
                let numeric = (4.0 * narrow - wide) / 3.0;
                let e = rel_err(a, numeric, floor);
                if best.is_none_or(|(be, _)| e < be) {
                    best = Some((e, numeric));
                }
            }
            let Some((e, numeric)) = best else {
                out.kinks += 1;
                continue;
            };
            out.checked += 1;
            if out.checked == 1 || e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = format!("{}[{i}]", store.get(id).name);
                out.worst_pair = (a, numeric);
            }
        }
    }
    Ok(out)
}

/// Convenience wrapper: treat each input matrix as a parameter `x{i}`.
pub fn check_fn(
    inputs: &[Matrix<f64>],
    mut f: impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| store.add(format!("x{i}"), m.clone()))
        .collect();
    check_store(
        &mut store,
        |g, b| {
            let vars: Vec<Var> = ids.iter().map(|&id| b[id]).collect();
            f(g, &vars)
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
}
