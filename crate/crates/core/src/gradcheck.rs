//! Central finite-difference gradient checking.
//!
//! The function under test is a graph builder. Its output is projected onto
//! a fixed random tensor to give a scalar, and the analytic gradients of that
//! scalar are compared against central differences for a sample of
//! coordinates of every input and every trainable parameter.
//!
//! The error of one coordinate is `|a - n| / max(|a|, |n|, floor)` where
//! `floor` is a fraction of the largest analytic gradient of the same tensor,
//! so entries that are numerically zero are judged on the tensor's scale.
//! When the step straddles a kink (ReLU), the estimates at `h` and `h/2`
//! disagree; the checker then retries with smaller steps and skips the
//! coordinate only if no step gives a consistent estimate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Relative floor of the error denominator, as a fraction of the
    /// tensor's largest analytic gradient.
    pub floor_fraction: f64,
    /// Coordinates sampled per tensor; all when the tensor is smaller.
    pub max_coords: usize,
    /// Fraction of coordinates that may be skipped as non-smooth.
    pub max_skip_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            floor_fraction: 1e-2,
            max_coords: 24,
            max_skip_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and coordinate of the worst error.
    pub worst: String,
    pub checked: usize,
    pub refined: usize,
    pub skipped_nonsmooth: usize,
    pub passed: bool,
}

/// What the numeric side perturbs.
#[derive(Clone, Copy, Debug)]
enum Target {
    Input(usize),
    Param(ParamId),
}

struct Eval<'a, F> {
    store: &'a ParamStore<f64>,
    inputs: &'a [Tensor<f64>],
    mode: Mode,
    build: &'a F,
    projection: Option<Tensor<f64>>,
}

impl<F> Eval<'_, F>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    fn scalar(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Graph::new(store, self.mode);
        let vars = inputs
            .iter()
            .map(|t| g.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.build)(&mut g, &vars)?;
        let r = self.projection.as_ref().expect("projection");
        Ok(g
            .value(out)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum())
    }

    fn perturbed(&self, target: Target, idx: usize, delta: f64) -> Result<f64> {
        match target {
            Target::Input(i) => {
                let mut inputs = self.inputs.to_vec();
                let d = inputs[i].data_mut();
                d[idx] += delta;
                self.scalar(self.store, &inputs)
            }
            Target::Param(id) => {
                let mut store = self.store.clone();
                store.get_mut(id).value.data_mut()[idx] += delta;
                self.scalar(&store, self.inputs)
            }
        }
    }

    fn central(&self, target: Target, idx: usize, h: f64) -> Result<f64> {
        let plus = self.perturbed(target, idx, h)?;
        let minus = self.perturbed(target, idx, -h)?;
        Ok((plus - minus) / (2.0 * h))
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    let den = a.abs().max(n.abs()).max(floor);
    if den == 0.0 {
        0.0
    } else {
        (a - n).abs() / den
    }
}

/// Checks `build` on `inputs` against finite differences in 64-bit storage.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    mode: Mode,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Analytic side.
    let mut g = Graph::new(store, mode);
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let out_dims = g.dims(out);
    let projection = Tensor::<f64>::uniform(out_dims, 1.0, &mut rng);
    let grads = g.backward(out, &projection)?;
    let mut targets: Vec<(Target, String, Vec<f64>)> = Vec::new();
    for (i, &v) in vars.iter().enumerate() {
        let gi = grads
            .wrt(v)
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        targets.push((Target::Input(i), format!("input{i}"), gi));
    }
    let mut param_grads: Vec<(ParamId, Vec<f64>)> =
        grads.params().map(|(id, gr)| (id, gr.to_vec())).collect();
    param_grads.sort_by_key(|(id, _)| *id);
    for (id, gr) in param_grads {
        targets.push((Target::Param(id), store.get(id).name.clone(), gr));
    }
    drop(g);

    let eval = Eval {
        store,
        inputs,
        mode,
        build: &build,
        projection: Some(projection),
    };
    let mut report = GradCheckReport::default();
    for (target, name, analytic) in &targets {
        let n = analytic.len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords).into_vec()
        };
        let floor = opts.floor_fraction * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in coords {
            let a = analytic[idx];
            let mut h = opts.step;
            let mut estimate = None;
            for attempt in 0..6 {
                let n1 = eval.central(*target, idx, h)?;
                let n2 = eval.central(*target, idx, h / 2.0)?;
                if !n1.is_finite() || !n2.is_finite() {
                    return Err(Error::NonFinite(format!("finite difference of {name}[{idx}]")));
                }
                if rel_error(n1, n2, floor) <= opts.tolerance / 20.0 {
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    estimate = Some(n2);
                    break;
                }
                h /= 10.0;
            }
            report.checked += 1;
            match estimate {
                Some(num) => {
                    let e = rel_error(a, num, floor);
                    if e > report.max_rel_error || report.worst.is_empty() {
                        report.max_rel_error = report.max_rel_error.max(e);
                        if e >= report.max_rel_error {
                            report.worst = format!("{name}[{idx}]: analytic {a:.6e}, numeric {num:.6e}");
                        }
                    }
                }
                None => report.skipped_nonsmooth += 1,
            }
        }
    }
    let skip_ok = (report.skipped_nonsmooth as f64) <= opts.max_skip_fraction * report.checked as f64;
    report.passed = report.max_rel_error <= opts.tolerance && skip_ok && report.checked > 0;
    Ok(report)
}

/// Random tensor helper used by checks and tests.
pub fn random_tensor(dims: [usize; 4], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(dims, 1.0, rng)
}
