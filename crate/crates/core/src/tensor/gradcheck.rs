use super::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-3,
            max_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval<F>(store: &ParameterStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).item())
}

/// Compares analytic gradients of `f` against central finite differences
/// for every trainable parameter of `store`.
pub fn grad_check<F>(store: &ParameterStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let first = g.value(loss).item();
    let second = eval(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two evaluations gave {first} and {second}"
        )));
    }
    let analytic = g.backward_params(loss, store)?;

    let mut work = store.clone();
    let mut params = Vec::new();
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        let numel = grad.numel();
        let picks: Vec<usize> = match opts.max_per_param {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        let mut max_rel = 0.0f64;
        for &i in &picks {
            let orig = work.get(name).expect("grad for known param").value.data()[i];
            work.get_mut(name).unwrap().value.data_mut()[i] = orig + opts.step;
            let plus = eval(&work, &f)?;
            work.get_mut(name).unwrap().value.data_mut()[i] = orig - opts.step;
            let minus = eval(&work, &f)?;
            work.get_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            max_rel = max_rel.max(rel);
        }
        worst = worst.max(max_rel);
        params.push(ParamCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: max_rel,
        });
    }
    Ok(GradCheckReport {
        params,
        max_rel_error: worst,
        tolerance: opts.tolerance,
        passed: worst < opts.tolerance,
    })
}
