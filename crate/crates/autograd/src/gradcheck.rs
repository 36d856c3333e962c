use crate::error::Result;
use crate::params::{GradMap, ParamStore};

/// A deterministic scalar function of a parameter store.
pub trait Objective {
    fn value_and_grad(&mut self, params: &ParamStore) -> Result<(f64, GradMap)>;

    fn value(&mut self, params: &ParamStore) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }
}

impl<F> Objective for F
where
    F: FnMut(&ParamStore) -> Result<(f64, GradMap)>,
{
    fn value_and_grad(&mut self, params: &ParamStore) -> Result<(f64, GradMap)> {
        self(params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares analytic gradients with central differences `(f(p+h) - f(p-h)) / 2h`
/// for every parameter entry. The relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    objective: &mut impl Objective,
    params: &ParamStore,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = objective.value_and_grad(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let len = params.get(&name)?.value.len();
        for i in 0..len {
            let orig = params.get(&name)?.value.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let fp = objective.value(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let fm = objective.value(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
