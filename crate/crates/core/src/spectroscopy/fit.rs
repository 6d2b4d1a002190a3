//! Levenberg–Marquardt fit of symmetric peak pairs on a flat background.
//!
//! Model: `b + Σ_k A_k [f(x − c_k; w_k) + f(x + c_k; w_k)]` with `w_k` the
//! full width at half maximum. Detunings are rescaled to O(1) internally and
//! widths are fitted through the logarithm of their excess over half the grid
//! spacing, so a peak cannot collapse between two samples.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{wilson_interval, Spectrum};
use crate::error::{Error, Result};

const FOUR_LN2: f64 = 4.0 * std::f64::consts::LN_2;
const MAX_ITER: usize = 1000;
const SIGNIFICANCE: f64 = 3.0;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeakModel {
    #[default]
    Gaussian,
    Lorentzian,
}

impl PeakModel {
    /// Unit-height profile and its derivatives with respect to the center
    /// and to `ln w`.
    fn eval(self, x: f64, c: f64, w: f64) -> (f64, f64, f64) {
        let d = x - c;
        match self {
            Self::Gaussian => {
                let g = (-FOUR_LN2 * d * d / (w * w)).exp();
                (g, g * 2.0 * FOUR_LN2 * d / (w * w), g * 2.0 * FOUR_LN2 * d * d / (w * w))
            }
            Self::Lorentzian => {
                let q = 4.0 * d * d / (w * w);
                let l = 1.0 / (1.0 + q);
                (l, l * l * 8.0 * d / (w * w), 2.0 * q * l * l)
            }
        }
    }
}

/// Which column of the spectrum is fitted.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalSource {
    /// Simulated excitation probability, unweighted.
    Probability,
    /// Sampled counts / shots, weighted by the 68 % Wilson half-width.
    #[default]
    Counts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub model: PeakModel,
    pub source: SignalSource,
    /// Initial |center| per pair (rad/s); detected from the data when absent.
    pub center_seeds: Option<Vec<f64>>,
    /// Initial FWHM (rad/s); estimated from the data when absent.
    pub width_seed: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakPair {
    /// |center| in rad/s; the pair sits at ±center.
    pub center: f64,
    pub center_err: f64,
    pub amplitude: f64,
    pub amplitude_err: f64,
    /// FWHM in rad/s.
    pub width: f64,
    pub width_err: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center: f64,
    pub center_err: f64,
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub width: f64,
    pub width_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Pairs ordered by decreasing amplitude.
    pub pairs: Vec<PeakPair>,
    pub background: f64,
    pub background_err: f64,
    /// Distance between the centers of the strongest pair (rad/s).
    pub splitting: f64,
    pub splitting_err: f64,
    /// √Σ r² of the (weighted) residuals.
    pub residual_norm: f64,
    pub model: PeakModel,
    pub source: SignalSource,
    pub iterations: usize,
    /// Number of distinct peaks: pairs whose halves overlap count once.
    pub resolved_peaks: usize,
}

impl FitResult {
    /// Every fitted peak, both halves of each pair, sorted by center.
    pub fn peaks(&self) -> Vec<Peak> {
        let mut out = Vec::new();
        for p in &self.pairs {
            for sign in [-1.0, 1.0] {
                out.push(Peak {
                    center: sign * p.center,
                    center_err: p.center_err,
                    amplitude: p.amplitude,
                    amplitude_err: p.amplitude_err,
                    width: p.width,
                    width_err: p.width_err,
                });
            }
        }
        out.sort_by(|a, b| a.center.total_cmp(&b.center));
        out
    }

    /// Model value at detuning `x` (rad/s).
    pub fn evaluate(&self, x: f64) -> f64 {
        self.background
            + self
                .pairs
                .iter()
                .map(|p| {
                    p.amplitude * (self.model.eval(x, p.center, p.width).0 + self.model.eval(x, -p.center, p.width).0)
                })
                .sum::<f64>()
    }
}

struct Problem<'a> {
    x: &'a [f64],
    y: &'a [f64],
    inv_sigma: &'a [f64],
    model: PeakModel,
    pairs: usize,
    /// Smallest representable FWHM; narrower spikes fall between grid points.
    w_floor: f64,
}

impl Problem<'_> {
    fn width(&self, u: f64) -> f64 {
        self.w_floor + u.exp()
    }

    fn width_param(&self, w: f64) -> f64 {
        (w - self.w_floor).max(1e-3 * self.w_floor).ln()
    }

    fn n_params(&self) -> usize {
        1 + 3 * self.pairs
    }

    /// Weighted residuals and Jacobian of the model (d model / d θ, weighted).
    fn eval(&self, theta: &[f64], jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let m = self.x.len();
        let mut r = DVector::zeros(m);
        let mut jac = jac;
        for i in 0..m {
            let x = self.x[i];
            let mut f = theta[0];
            if let Some(j) = jac.as_deref_mut() {
                j[(i, 0)] = self.inv_sigma[i];
            }
            for k in 0..self.pairs {
                let (c, a, u) = (theta[1 + 3 * k], theta[2 + 3 * k], theta[3 + 3 * k]);
                let w = self.width(u);
                let dw = (w - self.w_floor) / w;
                let (gp, dcp, dup) = self.model.eval(x, c, w);
                let (gm, dcm, dum) = self.model.eval(x, -c, w);
                f += a * (gp + gm);
                if let Some(j) = jac.as_deref_mut() {
                    let s = self.inv_sigma[i];
                    j[(i, 1 + 3 * k)] = s * a * (dcp - dcm);
                    j[(i, 2 + 3 * k)] = s * (gp + gm);
                    j[(i, 3 + 3 * k)] = s * a * (dup + dum) * dw;
                }
            }
            r[i] = (self.y[i] - f) * self.inv_sigma[i];
        }
        r
    }
}

struct LmSolution {
    theta: Vec<f64>,
    cost: f64,
    jtj: DMatrix<f64>,
    iterations: usize,
}

fn levenberg_marquardt(problem: &Problem<'_>, theta0: Vec<f64>) -> Option<LmSolution> {
    let p = problem.n_params();
    let m = problem.x.len();
    let mut theta = theta0;
    let mut jac = DMatrix::zeros(m, p);
    let mut r = problem.eval(&theta, Some(&mut jac));
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..MAX_ITER {
        iterations = it + 1;
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        if grad.amax() <= 1e-15 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut a = jtj.clone();
            for d in 0..p {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&grad),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            if trial.iter().any(|v| !v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let r_trial = problem.eval(&trial, None);
            let cost_trial = r_trial.norm_squared();
            if cost_trial <= cost {
                let rel = (cost - cost_trial) / cost.max(1e-300);
                let small_step = step.amax() <= 1e-10 * (1.0 + theta.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())));
                theta = trial;
                r = problem.eval(&theta, Some(&mut jac));
                cost = cost_trial;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-12 || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 2.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !accepted {
            // no downhill step left: a minimum to working precision
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return None;
    }
    let _ = problem.eval(&theta, Some(&mut jac));
    let jtj = jac.transpose() * &jac;
    Some(LmSolution { theta, cost, jtj, iterations })
}

/// Fit `n_peak_pairs` symmetric pairs with default options.
pub fn fit_peaks(spec: &Spectrum, n_peak_pairs: usize, model: PeakModel) -> Result<FitResult> {
    fit_peaks_with(spec, n_peak_pairs, &FitOptions { model, ..FitOptions::default() })
}

pub fn fit_peaks_with(spec: &Spectrum, n_peak_pairs: usize, options: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    if n_peak_pairs == 0 {
        return Err(Error::InvalidArgument("need at least one peak pair".into()));
    }
    let m = spec.len();
    if m < 4 * n_peak_pairs + 2 {
        return Err(Error::InvalidArgument(format!(
            "{m} points cannot constrain {n_peak_pairs} peak pairs (need {})",
            4 * n_peak_pairs + 2
        )));
    }

    let (y, inv_sigma): (Vec<f64>, Vec<f64>) = match options.source {
        SignalSource::Probability => (spec.p_excited.clone(), vec![1.0; m]),
        SignalSource::Counts => spec
            .counts
            .iter()
            .map(|&k| {
                let (lo, hi) = wilson_interval(k, spec.shots);
                (k as f64 / spec.shots as f64, 2.0 / (hi - lo))
            })
            .unzip(),
    };
    let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(y_max - y_min > 1e-12 * (1.0 + y_max.abs())) {
        return Err(Error::FitNonConvergence("flat spectrum: no peaks to fit".into()));
    }

    let scale = spec.detunings.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let x: Vec<f64> = spec.detunings.iter().map(|d| d / scale).collect();
    let spacing = x.windows(2).map(|w| (w[1] - w[0]).abs()).fold(f64::INFINITY, f64::min);

    let background0 = lower_decile_mean(&y);
    let seeds = match &options.center_seeds {
        Some(s) if s.len() == n_peak_pairs => s.iter().map(|c| c.abs() / scale).collect(),
        Some(s) => {
            return Err(Error::InvalidArgument(format!("{} center seeds for {n_peak_pairs} pairs", s.len())));
        }
        None => detect_centers(&x, &y, n_peak_pairs, spacing),
    };
    let width0 = options.width_seed.map(|w| w / scale).unwrap_or_else(|| estimate_width(&x, &y, background0, spacing));

    let problem = Problem {
        x: &x,
        y: &y,
        inv_sigma: &inv_sigma,
        model: options.model,
        pairs: n_peak_pairs,
        w_floor: 0.5 * spacing,
    };
    let mut last_reason = String::from("no attempt converged");
    for factor in [1.0, 0.5, 2.0, 0.25, 4.0] {
        let mut theta = vec![background0];
        for &c in &seeds {
            let amp = (interpolate(&x, &y, c) - background0).max(0.05 * (y_max - y_min));
            let amp = if c.abs() < 0.5 * width0 { 0.5 * amp } else { amp };
            theta.extend([c, amp, problem.width_param(width0 * factor)]);
        }
        let Some(sol) = levenberg_marquardt(&problem, theta) else {
            last_reason = "iteration limit reached".into();
            continue;
        };
        match assemble(&sol, &problem, scale, options) {
            Ok(r) => return Ok(r),
            Err(reason) => last_reason = reason,
        }
    }
    Err(Error::FitNonConvergence(last_reason))
}

fn assemble(
    sol: &LmSolution,
    problem: &Problem<'_>,
    scale: f64,
    options: &FitOptions,
) -> std::result::Result<FitResult, String> {
    let m = problem.x.len();
    let p = problem.n_params();
    let span = problem.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - problem.x.iter().cloned().fold(f64::INFINITY, f64::min);
    for k in 0..problem.pairs {
        let w = problem.width(sol.theta[3 + 3 * k]);
        if !(w > 1.01 * problem.w_floor) || w > 2.0 * span {
            return Err(format!("peak pair {k} width {:.3e} rad/s is outside the grid's range", w * scale));
        }
    }
    // a pair merged into one central peak has no center sensitivity; hold it at 0
    let merged: Vec<bool> =
        (0..problem.pairs).map(|k| sol.theta[1 + 3 * k].abs() < 0.25 * problem.width(sol.theta[3 + 3 * k])).collect();
    let free: Vec<usize> = (0..p).filter(|&i| i == 0 || (i - 1) % 3 != 0 || !merged[(i - 1) / 3]).collect();
    let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| sol.jtj[(free[a], free[b])]);
    let sub_cov = sub.try_inverse().ok_or("singular normal matrix")?;
    let mut cov = DMatrix::zeros(p, p);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            cov[(i, j)] = sub_cov[(a, b)];
        }
    }
    let s2 = match options.source {
        SignalSource::Probability => sol.cost / (m - free.len()).max(1) as f64,
        SignalSource::Counts => 1.0,
    };
    let err = |i: usize| (cov[(i, i)].max(0.0) * s2).sqrt();

    let mut pairs = Vec::with_capacity(problem.pairs);
    for (k, &merged) in merged.iter().enumerate().take(problem.pairs) {
        let (c, a, u) = (sol.theta[1 + 3 * k], sol.theta[2 + 3 * k], sol.theta[3 + 3 * k]);
        let w = problem.width(u);
        let (ce, ae, ue) = (err(1 + 3 * k), err(2 + 3 * k), err(3 + 3 * k));
        if !(a > 0.0) || a < SIGNIFICANCE * ae {
            return Err(format!("peak pair {k} is not significant (amplitude {a:.3e} ± {ae:.3e})"));
        }
        let c = if merged { 0.0 } else { c };
        pairs.push(PeakPair {
            center: c.abs() * scale,
            center_err: ce * scale,
            amplitude: a,
            amplitude_err: ae,
            width: w * scale,
            width_err: (w - problem.w_floor) * ue * scale,
        });
    }
    pairs.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    let resolved_peaks = pairs.iter().map(|p| if 2.0 * p.center < 0.5 * p.width { 1 } else { 2 }).sum();
    let strongest = pairs[0];
    Ok(FitResult {
        background: sol.theta[0],
        background_err: err(0),
        splitting: 2.0 * strongest.center,
        splitting_err: 2.0 * strongest.center_err,
        residual_norm: sol.cost.sqrt(),
        model: options.model,
        source: options.source,
        iterations: sol.iterations,
        resolved_peaks,
        pairs,
    })
}

fn lower_decile_mean(y: &[f64]) -> f64 {
    let mut s = y.to_vec();
    s.sort_by(f64::total_cmp);
    let k = (s.len() / 10).max(1);
    s[..k].iter().sum::<f64>() / k as f64
}

fn interpolate(x: &[f64], y: &[f64], at: f64) -> f64 {
    let i = x.partition_point(|&v| v < at).clamp(1, x.len() - 1);
    let t = ((at - x[i - 1]) / (x[i] - x[i - 1])).clamp(0.0, 1.0);
    y[i - 1] + t * (y[i] - y[i - 1])
}

/// Highest local maxima of the signal folded onto x ≥ 0.
fn detect_centers(x: &[f64], y: &[f64], pairs: usize, spacing: f64) -> Vec<f64> {
    let folded: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(xi, _)| **xi >= -0.5 * spacing)
        .map(|(&xi, _)| (xi.max(0.0), 0.5 * (interpolate(x, y, xi) + interpolate(x, y, -xi))))
        .collect();
    let mut maxima: Vec<(f64, f64)> = (0..folded.len())
        .filter(|&i| {
            let left = if i == 0 { f64::NEG_INFINITY } else { folded[i - 1].1 };
            let right = folded.get(i + 1).map_or(f64::NEG_INFINITY, |p| p.1);
            folded[i].1 >= left && folded[i].1 >= right
        })
        .map(|i| folded[i])
        .collect();
    maxima.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut chosen: Vec<f64> = Vec::new();
    for (c, _) in maxima {
        if chosen.iter().all(|&d| (d - c).abs() > 2.0 * spacing) {
            chosen.push(c);
        }
        if chosen.len() == pairs {
            break;
        }
    }
    let top = x.iter().cloned().fold(0.0_f64, f64::max);
    while chosen.len() < pairs {
        chosen.push(top * (chosen.len() + 1) as f64 / (pairs + 1) as f64);
    }
    chosen
}

/// Full width at half maximum of the tallest feature.
fn estimate_width(x: &[f64], y: &[f64], background: f64, spacing: f64) -> f64 {
    let (imax, &ymax) = y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    let half = background + 0.5 * (ymax - background);
    let mut lo = imax;
    while lo > 0 && y[lo] > half {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < y.len() && y[hi] > half {
        hi += 1;
    }
    (x[hi] - x[lo]).max(2.0 * spacing)
}
