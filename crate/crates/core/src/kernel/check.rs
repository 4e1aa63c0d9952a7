//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{ParamGrads, ParameterStore};
use super::tensor::Tensor2;
use super::KernelError;

/// Magnitudes below this are treated as this value when normalising, so that
/// gradients that are zero analytically are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Description of the entry attaining the maximum.
    pub worst: String,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if err > self.max_relative_error || self.worst.is_empty() {
            self.max_relative_error = err;
            self.worst = what();
        }
    }
}

fn empty() -> GradCheck {
    GradCheck {
        max_relative_error: 0.0,
        worst: String::new(),
        checked: 0,
    }
}

/// Compares the tape gradient of `build(input)` (a scalar) with central
/// differences of step `h` in every input entry.
pub fn check_input_gradient<F>(input: &Tensor2<f64>, h: f64, build: F) -> Result<GradCheck, KernelError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, KernelError>,
{
    let eval = |x: &Tensor2<f64>| -> Result<f64, KernelError> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = build(&mut g, v)?;
        Ok(g.value(out).get(0, 0))
    };
    let mut g = Graph::new();
    let v = g.variable(input.clone());
    let out = build(&mut g, v)?;
    let grads = g.backward(out, 1.0)?;
    let zero = Tensor2::zeros(input.rows(), input.cols());
    let analytic = grads.wrt(v).unwrap_or(&zero);
    let mut report = empty();
    for idx in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[idx] += h;
        let mut minus = input.clone();
        minus.data_mut()[idx] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[idx];
        report.record(relative_error(a, numeric), || format!("input[{idx}] analytic {a} numeric {numeric}"));
    }
    Ok(report)
}

/// Compares `analytic` against central differences of `loss` over every
/// scalar of `store`.
pub fn check_parameter_gradient<F>(
    store: &ParameterStore<f64>,
    analytic: &ParamGrads<f64>,
    h: f64,
    loss: F,
) -> Result<GradCheck, KernelError>
where
    F: Fn(&ParameterStore<f64>) -> Result<f64, KernelError>,
{
    let flat = analytic.flat();
    let mut probe = store.clone();
    let mut report = empty();
    for (idx, &a) in flat.iter().enumerate() {
        let x = probe.get_flat(idx);
        probe.set_flat(idx, x + h);
        let up = loss(&probe)?;
        probe.set_flat(idx, x - h);
        let down = loss(&probe)?;
        probe.set_flat(idx, x);
        let numeric = (up - down) / (2.0 * h);
        report.record(relative_error(a, numeric), || {
            let (id, off) = store.locate_flat(idx);
            format!("{}[{off}] analytic {a} numeric {numeric}", store.name(id))
        });
    }
    Ok(report)
}
