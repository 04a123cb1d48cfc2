//! Central finite-difference verification of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Settings for one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Perturb at most this many evenly strided coordinates per input.
    pub max_coords: Option<usize>,
    /// Multiplies the analytic gradient before comparison (negative controls).
    pub corrupt: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_coords: None,
            corrupt: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InputReport {
    pub input: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn into_result(self) -> Result<GradCheckReport> {
        if self.passed {
            return Ok(self);
        }
        let worst = self
            .inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("a failed report has inputs");
        Err(Error::GradCheck {
            op: self.op.clone(),
            detail: format!(
                "input {} coord {}: analytic {:.6e} vs numeric {:.6e}, rel error {:.3e} > {:.1e}",
                worst.input,
                worst.worst_coord,
                worst.analytic,
                worst.numeric,
                worst.max_rel_error,
                self.tolerance
            ),
        })
    }
}

/// Builds the op under test on a graph from its input vars.
pub trait GraphFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> GraphFn for F {}

/// Projection weights that reduce any output to a scalar without the
/// cancellations a plain sum has (softmax rows sum to a constant).
fn projection(len: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let values = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![len], values).expect("positive length")
}

fn scalar_loss(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.tensor(out).len();
    if n == 1 {
        return Ok(out);
    }
    let flat = g.reshape(out, vec![n])?;
    let r = g.constant(projection(n));
    let prod = g.mul(flat, r)?;
    Ok(g.sum(prod))
}

fn loss_value(f: &impl GraphFn, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = scalar_loss(&mut g, out)?;
    Ok(g.value(loss)[0])
}

impl GradCheck {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheck {
            tolerance,
            ..GradCheck::default()
        }
    }

    /// Compares analytic and numeric gradients for every input and reports
    /// without failing.
    pub fn measure(&self, op: &str, inputs: &[Tensor], f: impl GraphFn) -> Result<GradCheckReport> {
        if let Some(t) = inputs.iter().find(|t| !t.is_finite()) {
            return Err(Error::Numeric {
                name: op.to_string(),
                detail: format!("non-finite grad-check input of shape {:?}", t.shape()),
            });
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_grad()))
            .collect();
        let out = f(&mut g, &vars)?;
        let loss = scalar_loss(&mut g, out)?;
        g.backward(loss)?;

        let mut reports = Vec::with_capacity(inputs.len());
        for (i, var) in vars.iter().enumerate() {
            let analytic: Vec<f64> = match g.grad(*var) {
                Some(a) => a.iter().map(|v| v * self.corrupt).collect(),
                None => vec![0.0; inputs[i].len()],
            };
            let len = inputs[i].len();
            let stride = match self.max_coords {
                Some(m) if m > 0 && len > m => len.div_ceil(m),
                _ => 1,
            };
            let mut worst = InputReport {
                input: i,
                coords_checked: 0,
                max_rel_error: 0.0,
                worst_coord: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            let mut perturbed = inputs.to_vec();
            for j in (0..len).step_by(stride) {
                let orig = inputs[i].values()[j];
                perturbed[i].values_mut()[j] = orig + self.step;
                let plus = loss_value(&f, &perturbed)?;
                perturbed[i].values_mut()[j] = orig - self.step;
                let minus = loss_value(&f, &perturbed)?;
                perturbed[i].values_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                worst.coords_checked += 1;
                if rel > worst.max_rel_error || !rel.is_finite() {
                    worst.max_rel_error = rel;
                    worst.worst_coord = j;
                    worst.analytic = a;
                    worst.numeric = numeric;
                }
            }
            reports.push(worst);
        }
        let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        Ok(GradCheckReport {
            op: op.to_string(),
            tolerance: self.tolerance,
            passed: max_rel_error < self.tolerance,
            inputs: reports,
            max_rel_error,
        })
    }

    /// Like [`GradCheck::measure`] but fails when the tolerance is exceeded.
    pub fn check(&self, op: &str, inputs: &[Tensor], f: impl GraphFn) -> Result<GradCheckReport> {
        self.measure(op, inputs, f)?.into_result()
    }
}

/// Shorthand for [`GradCheck::check`] with default step and floor.
pub fn grad_check(
    op: &str,
    inputs: &[Tensor],
    tolerance: f64,
    f: impl GraphFn,
) -> Result<GradCheckReport> {
    GradCheck::with_tolerance(tolerance).check(op, inputs, f)
}

/// Random tensor with entries in `[-1, 1]` for grad-check fixtures.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, 1.0, &mut rng)
}
