use crate::graph::{Graph, Var};
use crate::{check_grads_finite, NnError, ParamStore, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Refuse to check more coordinates than this.
    pub max_params: usize,
    /// Check at most this many evenly spaced coordinates of each parameter
    /// tensor, always including the first. `None` checks every coordinate.
    pub per_tensor: Option<usize>,
    /// Test hook: perturbs one analytic gradient entry so the check must fail.
    #[doc(hidden)]
    pub corrupt_gradient: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_params: 5000,
            per_tensor: None,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates where the step had to be shrunk to stay on one side of a kink.
    pub shrunk: usize,
    /// Coordinates sitting on a kink even at the smallest step; not compared.
    pub skipped: usize,
    /// Coordinates whose analytic and numeric gradients both lie below the
    /// rounding floor of the difference quotient; not compared.
    pub at_noise_floor: usize,
}

/// Ulps of loss rounding tolerated in each probe.
const NOISE_ULPS: f64 = 8.0;

const MAX_SHRINKS: usize = 4;

/// Compares reverse-mode gradients of the scalar returned by `loss` against
/// central finite differences, for every trainable scalar in `store`.
///
/// `loss` must be a deterministic function of the parameters: it is re-run
/// twice per coordinate. Each evaluation records a signature of its
/// non-smooth branch decisions; when a perturbation flips one, the step is
/// shrunk tenfold (up to four times) so both probes see the same branch.
pub fn grad_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let coords = |n: usize| -> Vec<usize> {
        match opts.per_tensor {
            Some(k) if k < n => (0..k.max(1)).map(|j| j * n / k.max(1)).collect(),
            _ => (0..n).collect(),
        }
    };
    let total: usize = store.trainable_ids().into_iter().map(|id| coords(store.value(id).len()).len()).sum();
    if total > opts.max_params {
        return Err(NnError::Config(format!(
            "gradient check limited to {} coordinates, model needs {total}",
            opts.max_params
        )));
    }
    let mut g = Graph::new();
    g.track_kinks();
    let l = loss(store, &mut g)?;
    let base_sig = g.kink_signature();
    let mut grads = g.backward(l)?;
    check_grads_finite(store, &grads)?;
    drop(g);

    if opts.corrupt_gradient {
        if let Some(t) = grads.values_mut().next() {
            t.data_mut()[0] += 1.0;
        }
    }

    let mut eval = |store: &ParamStore| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::inference();
        g.track_kinks();
        let v = loss(store, &mut g)?;
        Ok((g.value(v).data()[0], g.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        shrunk: 0,
        skipped: 0,
        at_noise_floor: 0,
    };
    for id in store.trainable_ids() {
        for i in coords(store.value(id).len()) {
            let analytic = grads.get(&id).map_or(0.0, |t| t.data()[i]);
            let orig = store.value(id).data()[i];
            let mut eps = opts.eps;
            let mut numeric = None;
            let mut floor = 0.0;
            for attempt in 0..=MAX_SHRINKS {
                store.value_mut(id).data_mut()[i] = orig + eps;
                let (fp, sp) = eval(store)?;
                store.value_mut(id).data_mut()[i] = orig - eps;
                let (fm, sm) = eval(store)?;
                store.value_mut(id).data_mut()[i] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * eps));
                    floor = NOISE_ULPS * f64::EPSILON * fp.abs().max(fm.abs()) / (2.0 * eps);
                    if attempt > 0 {
                        report.shrunk += 1;
                    }
                    break;
                }
                eps /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            if !numeric.is_finite() {
                return Err(NnError::NonFiniteGradient(format!(
                    "{}[{i}] (finite difference)",
                    store.get(id).name
                )));
            }
            report.checked += 1;
            if analytic.abs() <= floor && numeric.abs() <= floor {
                report.at_noise_floor += 1;
                continue;
            }
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{}[{i}]", store.get(id).name);
            }
        }
    }
    Ok(report)
}
