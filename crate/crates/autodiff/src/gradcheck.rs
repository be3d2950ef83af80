//! Central finite-difference gradient checks. The numeric side only ever
//! runs forward passes, so it is independent of every backward rule.

use rand::seq::index::sample;

use crate::error::Result;
use crate::params::{Graph, Mode, ParamStore};
use crate::rng::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on checked coordinates; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

fn relative(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Picks up to `max` coordinates out of `sizes` (one entry per tensor).
fn pick_coords(sizes: &[usize], opts: &GradCheckOptions) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    if all.len() <= opts.max_coords {
        return all;
    }
    let mut rng = rng_for(opts.seed, "gradcheck-coords");
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), opts.max_coords).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

fn compare(
    report: &mut GradCheckReport,
    label: String,
    index: usize,
    analytic: f64,
    numeric: f64,
    opts: &GradCheckOptions,
) {
    report.checked += 1;
    let diff = (analytic - numeric).abs();
    let rel = relative(analytic, numeric);
    if diff > opts.atol {
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    if diff > opts.atol && rel > opts.rtol {
        report.failures.push(GradMismatch {
            input: label,
            index,
            analytic,
            numeric,
        });
    }
}

/// Checks d(loss)/d(inputs) for a scalar function built on a bare tape.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (t, i) in pick_coords(&sizes, opts) {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + opts.eps;
        let up = eval(&work)?;
        work[t].data_mut()[i] = orig - opts.eps;
        let down = eval(&work)?;
        work[t].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * opts.eps);
        compare(&mut report, format!("input{t}"), i, analytic[t].data()[i], numeric, opts);
    }
    Ok(report)
}

/// Checks d(loss)/d(params) for a model forward built on a [`Graph`] in
/// training mode.
pub fn check_params<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut graph = Graph::new(store, Mode::Train);
    let loss = f(&mut graph)?;
    graph.backward(loss)?;
    let grads = graph.param_grads();

    let names: Vec<String> = store.param_names().cloned().collect();
    let sizes: Vec<usize> = names.iter().map(|n| store.param(n).map(Tensor::len)).collect::<Result<_>>()?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, Mode::Train);
        let loss = f(&mut g)?;
        g.value(loss).item()
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (t, i) in pick_coords(&sizes, opts) {
        let name = &names[t];
        let orig = work.param(name)?.data()[i];
        work.param_mut(name)?.data_mut()[i] = orig + opts.eps;
        let up = eval(&work)?;
        work.param_mut(name)?.data_mut()[i] = orig - opts.eps;
        let down = eval(&work)?;
        work.param_mut(name)?.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * opts.eps);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
        compare(&mut report, name.clone(), i, analytic, numeric, opts);
    }
    Ok(report)
}
