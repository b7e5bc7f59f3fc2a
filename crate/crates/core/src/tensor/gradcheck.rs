//! Central finite-difference verification of graph gradients.
//!
//! The checked function builds its own sub-graph from leaf variables and
//! returns a scalar. Analytic gradients come from one backward pass; each
//! probed coordinate is then perturbed by `±h` and the function is
//! re-evaluated from scratch on a fresh graph.
//!
//! Coordinates sitting on a non-smooth point (ReLU hinge, top-k selection
//! change, crop-box flip) are skipped: they are recognised by the forward and
//! backward one-sided slopes disagreeing, or by a caller supplied guard.

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Upper bound on probed coordinates; all coordinates when the inputs
    /// have fewer.
    pub max_coords: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            max_coords: 128,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

type Guard<'a> = Box<dyn Fn(&[Tensor<f64>]) -> bool + 'a>;

pub struct GradCheck<'a, F> {
    f: F,
    opts: GradCheckOptions,
    skip_if: Option<Guard<'a>>,
}

impl<'a, F> GradCheck<'a, F>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    pub fn new(f: F, opts: GradCheckOptions) -> Self {
        Self { f, opts, skip_if: None }
    }

    /// Skip any probe whose perturbed inputs satisfy `guard`.
    pub fn skip_if(mut self, guard: impl Fn(&[Tensor<f64>]) -> bool + 'a) -> Self {
        self.skip_if = Some(Box::new(guard));
        self
    }

    fn eval(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.f)(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    }

    pub fn run(&self, inputs: &[Tensor<f64>]) -> Result<GradCheckReport> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.f)(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let f0 = g.value(out).data()[0];

        let coords = pick_coords(inputs, self.opts.max_coords, self.opts.seed);
        let h = self.opts.h;
        let mut report = GradCheckReport::default();
        let mut probe = inputs.to_vec();
        for (ti, ei) in coords {
            let x0 = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = x0 + h;
            let skip_plus = self.skip_if.as_ref().is_some_and(|s| s(&probe));
            let fp = self.eval(&probe)?;
            probe[ti].data_mut()[ei] = x0 - h;
            let skip_minus = self.skip_if.as_ref().is_some_and(|s| s(&probe));
            let fm = self.eval(&probe)?;
            probe[ti].data_mut()[ei] = x0;
            if skip_plus || skip_minus {
                report.skipped += 1;
                continue;
            }
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()).max(1e-3) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, ei));
            }
        }
        report.passed = report.checked > 0 && report.max_rel_error <= self.opts.tol;
        Ok(report)
    }
}

/// Check `f` at `inputs` with default options except `h` and `tol`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck::new(
        f,
        GradCheckOptions {
            h,
            tol,
            ..Default::default()
        },
    )
    .run(inputs)
}

fn pick_coords<T: Real>(inputs: &[Tensor<T>], max: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ei| (ti, ei)))
        .collect();
    if all.len() <= max {
        return all;
    }
    let mut rng = Rng::new(seed);
    let mut picked: Vec<(usize, usize)> = rng.sample_indices(all.len(), max).into_iter().map(|i| all[i]).collect();
    picked.sort_unstable();
    picked
}
