use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamId, ParamStore, Parameterized, Tensor, Var};
use crate::{Error, Result};

/// Settings for a central finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries of each parameter.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheckConfig {
            step,
            tol,
            abs_floor: 1e-3,
            max_entries_per_param: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, per_param: usize, seed: u64) -> Self {
        self.max_entries_per_param = Some(per_param);
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstEntry {
    pub param: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries where the one-sided differences disagree: `f` has a kink there.
    pub kinks: usize,
    pub worst: Option<WorstEntry>,
    pub passed: bool,
}

fn eval<M: Parameterized>(
    target: &M,
    f: &impl Fn(&M, &mut Graph) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = f(target, &mut g)?;
    let t = g.value(out);
    if !t.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares the analytic gradient of `f` with respect to every parameter of
/// `target` against central finite differences.
///
/// `f` must be deterministic: it is evaluated twice up front and a mismatch
/// is reported as a contract error.
pub fn grad_check_params<M: Parameterized>(
    target: &mut M,
    f: impl Fn(&M, &mut Graph) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let f0 = eval(target, &f)?;
    let again = eval(target, &f)?;
    if f0.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {f0} then {again}"
        )));
    }

    let mut g = Graph::new();
    let out = f(target, &mut g)?;
    g.backward(out)?;
    let ids: Vec<ParamId> = target.params().ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let bound = g.bound_params().find(|(p, _)| *p == id).map(|(_, v)| v);
            match bound.and_then(|v| g.grad(v)) {
                Some(grad) => grad.to_vec(),
                None => vec![0.0; target.params().get(id).numel()],
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.step;
    let kink_threshold = h.sqrt();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
        worst: None,
        passed: true,
    };

    for (pi, &id) in ids.iter().enumerate() {
        let numel = target.params().get(id).numel();
        let entries: Vec<usize> = match cfg.max_entries_per_param {
            Some(k) if k < numel => sample(&mut rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for e in entries {
            let orig = target.params().get(id).data()[e];
            target.params_mut().get_mut(id).data_mut()[e] = orig + h;
            let plus = eval(target, &f);
            target.params_mut().get_mut(id).data_mut()[e] = orig - h;
            let minus = eval(target, &f);
            target.params_mut().get_mut(id).data_mut()[e] = orig;
            let (plus, minus) = (plus?, minus?);

            let numeric = (plus - minus) / (2.0 * h);
            let forward = (plus - f0) / h;
            let backward = (f0 - minus) / h;
            if (forward - backward).abs() > kink_threshold * numeric.abs().max(1.0) {
                report.kinks += 1;
            }
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(WorstEntry {
                    param: target.params().name(id).to_string(),
                    entry: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol && report.kinks == 0;
    Ok(report)
}

/// Gradient check of `f(params)`; `f` receives the parameters bound in order.
pub fn grad_check(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    params: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    for (i, t) in params.iter().enumerate() {
        store.add(format!("p{i}"), t.clone())?;
    }
    grad_check_params(
        &mut store,
        |s: &ParamStore, g: &mut Graph| {
            let vars: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect();
            f(g, &vars)
        },
        &GradCheckConfig::new(step, tol),
    )
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn square_at_three() {
        let rep = grad_check(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            &[scalar_param(3.0)],
            1e-5,
            1e-6,
        )
        .unwrap();
        let w = rep.worst.unwrap();
        assert_eq!(w.analytic, 6.0);
        assert!((w.numeric - 6.0).abs() < 1e-7);
        assert!(rep.passed);
    }

    #[test]
    fn constant_function_passes() {
        let rep = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.2))),
            &[scalar_param(1.0)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn abs_at_zero_is_reported() {
        // |x| = relu(x) + relu(-x)
        let rep = grad_check(
            |g, p| {
                let a = g.relu(p[0]);
                let n = g.scale(p[0], -1.0);
                let b = g.relu(n);
                let s = g.add(a, b)?;
                Ok(g.sum(s))
            },
            &[scalar_param(0.0)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.kinks, 1);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let calls = Cell::new(0.0);
        let err = grad_check(
            |g, p| {
                calls.set(calls.get() + 1.0);
                let s = g.scale(p[0], calls.get());
                Ok(g.sum(s))
            },
            &[scalar_param(1.0)],
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
