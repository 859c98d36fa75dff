//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Lower bound on the denominator of the relative error, so gradients
    /// that are zero on both sides do not divide by zero.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, samples_per_tensor: 32, denom_floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Where the worst error was seen, e.g. `input 0 [17]` or `param conv.w [3]`.
    pub worst_at: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks `f` with respect to every tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_params(&ParamStore::new(), inputs, cfg, |g, _, v| f(g, v))
}

/// Checks `f` with respect to every input tensor and every parameter of
/// `store`. `f` must bind parameters through [`Graph::param`]. Non-scalar
/// outputs are reduced with a fixed random projection.
pub fn grad_check_params<F>(store: &ParamStore, inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut projection: Option<Vec<f64>> = None;

    let mut eval = |store: &ParamStore, inputs: &[Tensor], grads: bool| -> Result<(f64, Graph, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_requires_grad(grads))).collect();
        let out = f(&mut g, store, &vars)?;
        let loss = if g.value(out).numel() == 1 {
            out
        } else {
            let n = g.value(out).numel();
            let w = projection
                .get_or_insert_with(|| {
                    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
                    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
                })
                .clone();
            g.weighted_sum(out, w)?
        };
        let v = g.value(loss).item();
        if grads {
            g.backward(loss)?;
        }
        Ok((v, g, vars))
    };

    let (_, graph, vars) = eval(store, inputs, true)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    graph.write_param_grads(&mut analytic_store);

    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: 0, worst_at: String::new() };
    let consider = |a: f64, n: f64, at: String, report: &mut GradCheckReport| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.denom_floor);
        report.coordinates += 1;
        if err > report.max_rel_error || report.worst_at.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_at = format!("{at}: analytic {a:.6e} numeric {n:.6e}");
        }
    };

    let mut probe_inputs = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let numel = inputs[ti].numel();
        let analytic = graph.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        for c in sample(&mut rng, numel, cfg.samples_per_tensor.min(numel)).into_iter() {
            let orig = inputs[ti].data()[c];
            probe_inputs[ti].data_mut()[c] = orig + cfg.step;
            let plus = eval(store, &probe_inputs, false)?.0;
            probe_inputs[ti].data_mut()[c] = orig - cfg.step;
            let minus = eval(store, &probe_inputs, false)?.0;
            probe_inputs[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            consider(analytic[c], numeric, format!("input {ti} [{c}]"), &mut report);
        }
    }

    let mut probe = store.clone();
    for id in store.param_ids() {
        let p = store.get(id);
        let numel = p.tensor.numel();
        let analytic = analytic_store.get(id).tensor.grad.clone().unwrap_or_else(|| vec![0.0; numel]);
        for c in sample(&mut rng, numel, cfg.samples_per_tensor.min(numel)).into_iter() {
            let orig = p.tensor.data()[c];
            probe.get_mut(id).tensor.data_mut()[c] = orig + cfg.step;
            let plus = eval(&probe, inputs, false)?.0;
            probe.get_mut(id).tensor.data_mut()[c] = orig - cfg.step;
            let minus = eval(&probe, inputs, false)?.0;
            probe.get_mut(id).tensor.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            consider(analytic[c], numeric, format!("param {} [{c}]", p.name), &mut report);
        }
    }
    Ok(report)
}
