//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::arch::ParamStore;
use crate::error::{Result, StoicError};

/// Guards the relative error when both gradients are (near) zero.
pub const REL_ERROR_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub per_parameter: Vec<GradEntry>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<32} {:>6} {:>14} {:>14} {:>10}",
            "path", "index", "analytic", "numeric", "rel_err"
        )?;
        for e in &self.per_parameter {
            writeln!(
                f,
                "{:<32} {:>6} {:>14.6e} {:>14.6e} {:>10.2e}",
                e.path, e.index, e.analytic, e.numeric, e.rel_error
            )?;
        }
        write!(f, "max relative error: {:.3e}", self.max_rel_error)
    }
}

const ROUNDING_ULPS: f64 = 4.0;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; tensors at or below this size are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 3e-3,
            coords_per_param: 6,
            seed: 0,
        }
    }
}

/// Compares backward-pass gradients of the scalar `f(params)` against central differences
/// `D(h) = (f(θ+h) − f(θ−h)) / 2h` on a sampled subset of coordinates of every tensor.
/// The reported numeric gradient is the Richardson combination `(4·D(h) − D(2h)) / 3`,
/// which cancels the O(h²) term and lets `h` be large enough to keep rounding noise small.
pub fn finite_diff_grad_check<F>(
    f: F,
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let v = f(store)?.item()?;
        if !v.is_finite() {
            return Err(StoicError::NonFinite {
                op: "finite_diff_grad_check",
            });
        }
        Ok(v)
    };

    let live = params.trainable();
    let loss = f(&live)?;
    loss.check_finite("finite_diff_grad_check")?;
    loss.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    for (path, tensor) in live.iter() {
        let analytic = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.numel()]);
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for index in coords {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = tensor.to_vec();
                data[index] += delta;
                let mut shifted = params.clone();
                shifted.insert(path, Tensor::from_vec(data, tensor.shape())?);
                eval(&shifted)
            };
            let central = |h: f64| -> Result<Option<f64>> {
                let (plus, minus) = (probe(h)?, probe(-h)?);
                // Differences within a few ulps of f are rounding noise, not slope.
                let noise = ROUNDING_ULPS * f64::EPSILON * plus.abs().max(minus.abs());
                Ok(((plus - minus).abs() > noise).then(|| (plus - minus) / (2.0 * h)))
            };
            let numeric = match (central(opts.step)?, central(2.0 * opts.step)?) {
                (None, None) => 0.0,
                (d1, d2) => (4.0 * d1.unwrap_or(0.0) - d2.unwrap_or(0.0)) / 3.0,
            };
            let err = rel_error(analytic[index], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.per_parameter.push(GradEntry {
                path: path.to_string(),
                index,
                analytic: analytic[index],
                numeric,
                rel_error: err,
            });
        }
    }
    Ok(report)
}
