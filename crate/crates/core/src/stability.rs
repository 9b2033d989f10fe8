//! Dissipativity of the boundary couplings and the delay-difference model
//! that governs the closed loop.
//!
//! The coupling matrix is laid out on the state order `(w-bar1, v~2, v~1,
//! w-bar2)`: row `k` gives the value entering the domain for state `k` in
//! terms of the values leaving it. Its characteristic polynomial is
//! `l^4 - a l^2 - b`, and `(a, b)` are exactly the gains of the difference
//! equation satisfied by `beta2(0, t)` under the backstepping feedback.

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::linearize::boundary_rows;
use crate::model::NetworkParams;

pub const SP1_RESTARTS: usize = 16;
pub const SP1_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("coupling matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid difference model: {0}")]
    InvalidModel(&'static str),
    #[error("history must be sampled with 0 < dt <= kappa2/200 (dt = {dt}, kappa2 = {kappa2})")]
    StepTooLarge { dt: f64, kappa2: f64 },
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
}

pub type Result<T> = std::result::Result<T, StabilityError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingMatrix(pub Matrix4<f64>);

impl CouplingMatrix {
    pub fn from_network(net: &NetworkParams) -> Self {
        let rows = boundary_rows(net);
        let mut h = Matrix4::zeros();
        h[(0, 3)] = rows.junction_w;
        h[(1, 2)] = rows.junction_vv;
        h[(1, 3)] = rows.junction_vw;
        h[(2, 0)] = rows.outlet;
        h[(3, 1)] = rows.inlet;
        CouplingMatrix(h)
    }

    pub fn spectral_radius(&self) -> f64 {
        self.0
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `Delta H Delta^-1` with `Delta = diag(exp(log_scale))`.
    fn scaled(&self, log_scale: &[f64; 4]) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.0[(i, j)] * (log_scale[i] - log_scale[j]).exp())
    }
}

fn spectral_norm(m: &Matrix4<f64>) -> f64 {
    m.singular_values().max()
}

/// Infimum over positive diagonal scalings of the induced 2-norm of `Delta H Delta^-1`.
///
/// The first diagonal entry is pinned to one; the remaining three
/// log-scalings are searched with multi-start Nelder-Mead. Deterministic for a
/// given seed.
pub fn sp1(h: &CouplingMatrix, seed: u64) -> Result<f64> {
    for row in 0..4 {
        for col in 0..4 {
            if !h.0[(row, col)].is_finite() {
                return Err(StabilityError::NonFinite { row, col });
            }
        }
    }
    if h.0.iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let objective = |x: &[f64; 3]| {
        // Far-out scalings only blow entries up; clamp to keep exp finite.
        let s = [0.0, x[0].clamp(-60.0, 60.0), x[1].clamp(-60.0, 60.0), x[2].clamp(-60.0, 60.0)];
        spectral_norm(&h.scaled(&s))
    };
    let starts: Vec<[f64; 3]> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..SP1_RESTARTS)
            .map(|k| {
                if k == 0 {
                    [0.0; 3]
                } else {
                    [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)]
                }
            })
            .collect()
    };
    let best = starts
        .par_iter()
        .map(|x0| {
            let mut x = *x0;
            let mut f = objective(&x);
            // Restart from the incumbent until a pass no longer improves.
            for _ in 0..20 {
                let (xn, fnew) = nelder_mead(&objective, x, 0.5, SP1_TOL);
                let improved = f - fnew > SP1_TOL;
                x = xn;
                f = fnew.min(f);
                if !improved {
                    break;
                }
            }
            f
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(best)
}

fn nelder_mead<F>(f: &F, x0: [f64; 3], step: f64, tol: f64) -> ([f64; 3], f64)
where
    F: Fn(&[f64; 3]) -> f64,
{
    const N: usize = 3;
    let mut simplex: Vec<([f64; N], f64)> = (0..=N)
        .map(|k| {
            let mut x = x0;
            if k > 0 {
                x[k - 1] += step;
            }
            (x, f(&x))
        })
        .collect();
    for _ in 0..4000 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[N].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= tol * 1e-3 && size < 1e-10 {
            break;
        }
        let mut centroid = [0.0; N];
        for (x, _) in &simplex[..N] {
            for d in 0..N {
                centroid[d] += x[d] / N as f64;
            }
        }
        let along = |t: f64| {
            let mut p = [0.0; N];
            for d in 0..N {
                p[d] = centroid[d] + t * (simplex[N].0[d] - centroid[d]);
            }
            p
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[N] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[N].1 {
                let x = along(-0.5);
                (x, f(&x))
            } else {
                let x = along(0.5);
                (x, f(&x))
            };
            if fc < simplex[N].1.min(fr) {
                simplex[N] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for (x, fx) in simplex[1..].iter_mut() {
                    for d in 0..N {
                        x[d] = best[d] + 0.5 * (x[d] - best[d]);
                    }
                    *fx = f(x);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedForm {
    /// `sqrt((|a| + sqrt(a^2 + 4|b|)) / 2)`; the boundary couplings are
    /// dissipative iff this is below one.
    pub value: f64,
    pub a: f64,
    pub b: f64,
}

impl ClosedForm {
    pub fn holds(&self) -> bool {
        self.value < 1.0
    }
}

/// Closed-form dissipativity measure of the network's boundary couplings.
pub fn closed_form_condition(net: &NetworkParams) -> ClosedForm {
    let rows = boundary_rows(net);
    let a = rows.junction_vw * rows.inlet;
    let b = rows.junction_vv * rows.outlet * rows.inlet * rows.junction_w;
    closed_form_from(a, b)
}

pub(crate) fn closed_form_from(a: f64, b: f64) -> ClosedForm {
    let value = ((a.abs() + (a * a + 4.0 * b.abs()).sqrt()) / 2.0).sqrt();
    ClosedForm { value, a, b }
}

/// `x(t) = coef_short x(t - kappa2) + coef_long x(t - kappa1 - kappa2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferenceModel {
    pub coef_short: f64,
    pub coef_long: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl DifferenceModel {
    pub fn new(coef_short: f64, coef_long: f64, kappa1: f64, kappa2: f64) -> Result<Self> {
        if !(kappa1 > 0.0 && kappa2 > 0.0) {
            return Err(StabilityError::InvalidModel("delays must be positive"));
        }
        if !(coef_short.is_finite() && coef_long.is_finite()) {
            return Err(StabilityError::InvalidModel("gains must be finite"));
        }
        Ok(DifferenceModel {
            coef_short,
            coef_long,
            kappa1,
            kappa2,
        })
    }

    pub fn round_trip(&self) -> f64 {
        self.kappa1 + self.kappa2
    }

    /// Delay-independent stability: `|coef_short| + |coef_long| < 1`.
    pub fn is_stable(&self) -> bool {
        self.coef_short.abs() + self.coef_long.abs() < 1.0
    }

    /// `x(t) - coef_short x(t-kappa2) - coef_long x(t-kappa1-kappa2)`.
    pub fn residual(&self, x: impl Fn(f64) -> f64, t: f64) -> f64 {
        x(t) - self.coef_short * x(t - self.kappa2) - self.coef_long * x(t - self.round_trip())
    }
}

/// Difference equation satisfied by `beta2(0, t)` in closed loop.
pub fn build_difference_model(net: &NetworkParams) -> Result<DifferenceModel> {
    let cf = closed_form_condition(net);
    DifferenceModel::new(cf.a, cf.b, net.ss1.kappa, net.ss2.kappa)
}

/// Exponential decay rate fitted to a peak envelope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecayFit {
    Rate(f64),
    /// Envelope fell below the fitting floor before two windows were available.
    Converged,
}

impl DecayFit {
    pub fn rate(&self) -> Option<f64> {
        match self {
            DecayFit::Rate(r) => Some(*r),
            DecayFit::Converged => None,
        }
    }
}

/// Envelope values below this are excluded from decay fits.
pub const FIT_FLOOR: f64 = 1e-14;

/// Least-squares slope of `log(max |x|)` over consecutive windows of length
/// `window`, starting at the first sample. Returns `-slope`.
pub fn fit_decay_rate(times: &[f64], values: &[f64], window: f64) -> DecayFit {
    let envelope = peak_envelope(times, values, window);
    let pts: Vec<(f64, f64)> = envelope
        .iter()
        .take_while(|(_, e)| *e > FIT_FLOOR)
        .map(|&(t, e)| (t, e.ln()))
        .collect();
    if pts.len() < 2 {
        return DecayFit::Converged;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    DecayFit::Rate(-sxy / sxx)
}

/// `(window start, max |x|)` for every complete window.
pub fn peak_envelope(times: &[f64], values: &[f64], window: f64) -> Vec<(f64, f64)> {
    let Some(&t0) = times.first() else {
        return Vec::new();
    };
    let t_end = *times.last().unwrap();
    let full = ((t_end - t0) / window + 1e-9).floor() as usize;
    let mut env = vec![0.0f64; full];
    for (&t, &x) in times.iter().zip(values) {
        let k = ((t - t0) / window).floor() as usize;
        if k < full {
            env[k] = env[k].max(x.abs());
        }
    }
    env.into_iter()
        .enumerate()
        .map(|(k, e)| (t0 + k as f64 * window, e))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceRun {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub rate: DecayFit,
    /// Largest shift between a delay and its grid-rounded value.
    pub delay_error: f64,
    /// Set when the gains violate `|coef_short| + |coef_long| < 1`.
    pub diverging: bool,
}

/// Iterates the difference equation on a uniform grid of step `dt`.
///
/// `history` supplies `x(t)` for `t` in `[-(kappa1+kappa2), 0)`; delays are
/// rounded to the nearest multiple of `dt`.
pub fn simulate_difference(
    model: &DifferenceModel,
    history: impl Fn(f64) -> f64,
    horizon: f64,
    dt: f64,
) -> Result<DifferenceRun> {
    if !(horizon > 0.0) {
        return Err(StabilityError::Horizon(horizon));
    }
    if !(dt > 0.0 && dt <= model.kappa2 / 200.0) {
        return Err(StabilityError::StepTooLarge {
            dt,
            kappa2: model.kappa2,
        });
    }
    let short = (model.kappa2 / dt).round() as usize;
    let long = (model.round_trip() / dt).round() as usize;
    let delay_error = (short as f64 * dt - model.kappa2)
        .abs()
        .max((long as f64 * dt - model.round_trip()).abs());
    let steps = (horizon / dt).round() as usize;
    let mut buf: Vec<f64> = (0..long)
        .map(|k| history(-((long - k) as f64) * dt))
        .collect();
    buf.reserve(steps + 1);
    for n in 0..=steps {
        let i = long + n;
        let x = model.coef_short * buf[i - short] + model.coef_long * buf[i - long];
        buf.push(x);
    }
    let values = buf.split_off(long);
    let times: Vec<f64> = (0..values.len()).map(|n| n as f64 * dt).collect();
    let rate = fit_decay_rate(&times, &values, model.round_trip());
    Ok(DifferenceRun {
        times,
        values,
        rate,
        delay_error,
        diverging: !model.is_stable(),
    })
}
