//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Elements probed per leaf; leaves with fewer elements are checked exhaustively.
    pub samples_per_leaf: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: FD_STEP, samples_per_leaf: usize::MAX, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElementError {
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Max relative error per leaf, in input order.
    pub per_leaf: Vec<f64>,
    pub worst: Option<ElementError>,
    /// Elements whose finite difference was not finite.
    pub non_finite: Vec<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::NonScalarLoss { shape: value.shape().to_vec() });
    }
    Ok(value.item())
}

/// Compares the tape gradient of `f` at `leaves` against central differences.
///
/// `f` must build a scalar loss from the leaf variables, in the order given.
pub fn grad_check<F>(f: F, leaves: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let elements: Vec<usize> = if n <= opts.samples_per_leaf {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.samples_per_leaf).into_vec()
        };
        let mut leaf_max = 0.0f64;
        for e in elements {
            let orig = leaf.data()[e];
            probe[li].data_mut()[e] = orig + opts.step;
            let plus = eval(&f, &probe)?;
            probe[li].data_mut()[e] = orig - opts.step;
            let minus = eval(&f, &probe)?;
            probe[li].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.checked += 1;
            if !numeric.is_finite() {
                report.non_finite.push((li, e));
                continue;
            }
            let a = analytic[li].data()[e];
            let rel = relative_error(a, numeric);
            leaf_max = leaf_max.max(rel);
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(ElementError { leaf: li, element: e, analytic: a, numeric, rel_error: rel });
            }
        }
        report.per_leaf.push(leaf_max);
    }
    Ok(report)
}
