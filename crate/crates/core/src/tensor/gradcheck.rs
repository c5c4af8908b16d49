//! Central finite-difference gradient checker.

use super::{Graph, OpKind, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` with the largest relative error.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
    pub pass: bool,
}

/// Knobs for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
    pub tamper: Option<(OpKind, f64)>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: DEFAULT_STEP,
            tol: 1e-4,
            max_coords: None,
            tamper: None,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).data().to_vec())
}

impl GradCheck {
    /// Compares the analytic gradient of `f(inputs)` with respect to every
    /// input against `(f(x + h e_i) - f(x - h e_i)) / 2h`. A non-scalar `f`
    /// stands for the sum of its entries; the difference is then taken entry
    /// by entry before summing, so large terms that barely move do not bury
    /// small changes under their rounding.
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        if let Some((kind, factor)) = self.tamper {
            g.tamper_backward(kind, factor);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let mut out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            out = g.sum(out);
        }
        g.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).expect("leaf requires grad").data().to_vec())
            .collect();

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: (0, 0),
            worst_values: (0.0, 0.0),
            coords_checked: 0,
            pass: true,
        };
        let mut probe = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            let n = input.len();
            let stride = match self.max_coords {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            for j in (0..n).step_by(stride) {
                let x0 = input.data()[j];
                probe[which].data_mut()[j] = x0 + self.step;
                let plus = evaluate(&f, &probe)?;
                probe[which].data_mut()[j] = x0 - self.step;
                let minus = evaluate(&f, &probe)?;
                probe[which].data_mut()[j] = x0;

                let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
                let numeric = diff / (2.0 * self.step);
                let a = analytic[which][j];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let err = (a - numeric).abs() / denom;
                if err > report.max_rel_err || err.is_nan() {
                    report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                    report.worst = (which, j);
                    report.worst_values = (a, numeric);
                }
                report.coords_checked += 1;
            }
        }
        report.pass = report.max_rel_err <= self.tol;
        Ok(report)
    }
}

/// Single-input check with step `h` and tolerance `tol`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    GradCheck {
        step: h,
        tol,
        ..GradCheck::default()
    }
    .run(|g, v| f(g, v[0]), std::slice::from_ref(x))
}

pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    GradCheck {
        step: h,
        tol,
        ..GradCheck::default()
    }
    .run(f, inputs)
}
