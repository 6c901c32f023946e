//! Central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::layers::Module;
use crate::tensor::QTensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Upper bound on coordinates probed per tensor.
pub const MAX_COORDINATES: usize = 200;
const FLOOR: f64 = 1e-12;
const INERT_TOLERANCE: f64 = 1e-9;

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Outcome of probing a set of coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest error, if any was checked.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates with an exactly zero analytic gradient on which the
    /// objective is flat over a unit-size perturbation; scored as exact.
    pub inert: usize,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        let (max_rel_error, worst) = if other.max_rel_error > self.max_rel_error {
            (other.max_rel_error, other.worst)
        } else {
            (self.max_rel_error, self.worst)
        };
        GradReport {
            max_rel_error,
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            worst,
            checked: self.checked + other.checked,
            inert: self.inert + other.inert,
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tolerance
    }
}

/// Maximum relative error between `analytic` and central differences of `f`
/// at `x`, over every coordinate.
pub fn finite_diff_gradcheck(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let coords: Vec<usize> = (0..x.len()).collect();
    probe(&mut f, x, analytic, h, &coords).max_rel_error
}

/// Up to `max` distinct coordinates out of `n`, in increasing order.
pub fn sample_coordinates<R: Rng + ?Sized>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut v = sample(rng, n, max).into_vec();
    v.sort_unstable();
    v
}

/// Central differences at the listed coordinates only.
pub fn probe(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64, coords: &[usize]) -> GradReport {
    let mut xp = x.to_vec();
    let mut report = GradReport::default();
    for &i in coords {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        report = report.merge(GradReport {
            max_rel_error: relative_error(analytic[i], numeric),
            max_abs_error: (analytic[i] - numeric).abs(),
            worst: Some(i),
            checked: 1,
            inert: 0,
        });
    }
    report
}

/// Central-difference error for one coordinate of a module objective, treating
/// structurally inert coordinates as exact. `eval(δ)` returns the module output
/// with the coordinate shifted by `δ`; the difference is projected onto `r`
/// output by output, which avoids cancellation against unaffected outputs.
fn module_coordinate(analytic: f64, r: &[f64], eval: &mut impl FnMut(f64) -> Result<QTensor<f64>>) -> Result<(f64, f64, bool)> {
    let mut diff = |delta: f64| -> Result<(f64, f64)> {
        let up = eval(delta)?;
        let down = eval(-delta)?;
        let mut d = 0.0;
        let mut scale = 0.0f64;
        for ((a, b), w) in up.data().iter().zip(down.data()).zip(r) {
            d += w * (a - b);
            scale = scale.max((w * a).abs()).max((w * b).abs());
        }
        Ok((d, scale))
    };
    if analytic == 0.0 {
        let (d, scale) = diff(1.0)?;
        if d.abs() <= INERT_TOLERANCE * scale.max(1.0) {
            return Ok((0.0, 0.0, true));
        }
    }
    let (d, _) = diff(DEFAULT_STEP)?;
    let numeric = d / (2.0 * DEFAULT_STEP);
    Ok((relative_error(analytic, numeric), (analytic - numeric).abs(), false))
}

/// Checks input and parameter gradients of `module` at `input` against the
/// scalar objective `Σ r ⊙ forward(x)` with a random projection `r`.
/// At most [`MAX_COORDINATES`] input and parameter coordinates are probed.
pub fn check_module(module: &mut dyn Module<f64>, input: &QTensor<f64>, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    let y = module.forward(input, true)?;
    let r: Vec<f64> = (0..y.len()).map(|_| unit.sample(&mut rng)).collect();
    let dy = QTensor::from_vec(y.dims(), r.clone())?;
    module.zero_grad();
    let dx = module.backward(&dy)?;
    let param_grads: Vec<Vec<f64>> = module.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = GradReport::default();
    let record = |report: &mut GradReport, (err, abs, inert): (f64, f64, bool), at: usize| {
        *report = report.merge(GradReport {
            max_rel_error: err,
            max_abs_error: abs,
            worst: Some(at),
            checked: 1,
            inert: usize::from(inert),
        });
    };

    let mut xp = input.clone();
    for i in sample_coordinates(input.len(), MAX_COORDINATES, &mut rng) {
        let orig = input.data()[i];
        let mut eval = |delta: f64| -> Result<QTensor<f64>> {
            xp.data_mut()[i] = orig + delta;
            let y = module.forward(&xp, true);
            xp.data_mut()[i] = orig;
            y
        };
        let outcome = module_coordinate(dx.data()[i], &r, &mut eval)?;
        record(&mut report, outcome, i);
    }

    // Parameters are flattened into (tensor, element) pairs.
    let slots: Vec<(usize, usize)> = param_grads
        .iter()
        .enumerate()
        .flat_map(|(t, g)| (0..g.len()).map(move |e| (t, e)))
        .collect();
    for k in sample_coordinates(slots.len(), MAX_COORDINATES, &mut rng) {
        let (t, e) = slots[k];
        let mut eval = |delta: f64| -> Result<QTensor<f64>> {
            let orig = module.params()[t].value[e];
            module.params_mut()[t].value[e] = orig + delta;
            let y = module.forward(input, true);
            module.params_mut()[t].value[e] = orig;
            y
        };
        let outcome = module_coordinate(param_grads[t][e], &r, &mut eval)?;
        record(&mut report, outcome, input.len() + k);
    }
    Ok(report)
}

/// Checks a loss given as `x ↦ (value, gradient)`.
pub fn check_loss(f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>, x: &[f64], seed: u64) -> Result<GradReport> {
    let (_, analytic) = f(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample_coordinates(x.len(), MAX_COORDINATES, &mut rng);
    let mut failure = None;
    let mut value = |p: &[f64]| match f(p) {
        Ok((v, _)) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let report = probe(&mut value, x, &analytic, DEFAULT_STEP, &coords);
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
