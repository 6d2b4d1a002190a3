//! Phonon-number distribution from a multi-peak spectrum: Gaussian pairs at
//! the analytic doublet positions, one common width, non-negative amplitudes,
//! each divided by the simulated peak height of the pure Fock state.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InitialMotion, SignalSource, Spectrum};
use crate::algebra::{DensityMatrix, Level};
use crate::dynamics::propagator;
use crate::error::{Error, Result};
use crate::model::{doublet_center, fwhm_analytic, SidebandRegime, SystemConfig};
use crate::sequence::{probe_pulse, probe_system};

const FOUR_LN2: f64 = 4.0 * std::f64::consts::LN_2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalReconstruction {
    /// Normalized p_0 … p_{n_max}.
    pub populations: Vec<f64>,
    /// n̄ of the truncated geometric distribution fitted to the spectrum.
    pub n_bar_fit: f64,
    /// Σ n p_n of the reconstructed populations.
    pub n_bar_mean: f64,
    /// Peak positions |g_n| (rad/s).
    pub centers: Vec<f64>,
    /// Fitted Gaussian amplitudes before the height correction.
    pub amplitudes: Vec<f64>,
    /// Simulated single-Fock peak heights.
    pub heights: Vec<f64>,
    pub width: f64,
    pub background: f64,
    pub residual_norm: f64,
}

/// Approximate FWHM (rad/s) of the peak of Fock level `n`: the Fourier width
/// of a π probe of length `probe_duration` plus the dissipative width.
fn peak_fwhm(cfg: &SystemConfig, regime: SidebandRegime, n: usize, probe_duration: f64) -> f64 {
    let fourier = 1.6 * PI / probe_duration;
    let dissipative =
        if regime == SidebandRegime::Rsb && n == 0 { 0.0 } else { fwhm_analytic(cfg, regime, n).unwrap_or(0.0) };
    fourier + dissipative
}

/// Check that neighbouring peaks up to `n_max` are further apart than their
/// width. Returns the per-level FWHM estimates.
pub fn resolvability(
    cfg: &SystemConfig,
    regime: SidebandRegime,
    n_max: usize,
    probe_duration: f64,
) -> Result<Vec<f64>> {
    let centers = (0..=n_max).map(|n| doublet_center(cfg, regime, n)).collect::<Result<Vec<_>>>()?;
    let widths: Vec<f64> = (0..=n_max).map(|n| peak_fwhm(cfg, regime, n, probe_duration)).collect();
    for n in 0..n_max {
        let gap = (centers[n + 1] - centers[n]).abs();
        let width = widths[n].max(widths[n + 1]);
        if gap <= width {
            return Err(Error::Unresolvable(format!(
                "peaks of n = {n} and n = {} are {:.1} Hz apart, below the {:.1} Hz linewidth",
                n + 1,
                gap / (2.0 * PI),
                width / (2.0 * PI)
            )));
        }
    }
    Ok(widths)
}

/// Excitation at the upper doublet peak for the pure Fock states 0..=n_max.
pub fn peak_heights(cfg: &SystemConfig, regime: SidebandRegime, n_max: usize, probe_duration: f64) -> Result<Vec<f64>> {
    let space = cfg.space()?;
    (0..=n_max)
        .map(|n| {
            let motion = InitialMotion::Fock(n).density(cfg.fock_dim)?;
            let rho = DensityMatrix::with_level(Level::D, &motion)?;
            let center = doublet_center(cfg, regime, n)?;
            let out = probe_pulse(&rho, probe_duration, center, Some(regime), cfg)?;
            out.bright_population(&space)
        })
        .collect()
}

/// Reconstruct p_0 … p_{n_max} from a thermal-state spectrum taken with the
/// same system parameters `cfg`.
pub fn reconstruct_thermal(spec: &Spectrum, cfg: &SystemConfig, n_max: usize) -> Result<ThermalReconstruction> {
    reconstruct_thermal_with(spec, cfg, n_max, SignalSource::Counts)
}

pub fn reconstruct_thermal_with(
    spec: &Spectrum,
    cfg: &SystemConfig,
    n_max: usize,
    source: SignalSource,
) -> Result<ThermalReconstruction> {
    spec.validate()?;
    let regime = spec.regime;
    if regime == SidebandRegime::Carrier {
        return Err(Error::InvalidArgument("thermal reconstruction needs a sideband regime".into()));
    }
    if n_max + 2 >= cfg.fock_dim {
        return Err(Error::InvalidArgument(format!(
            "n_max = {n_max} too close to the {}-level truncation",
            cfg.fock_dim
        )));
    }
    let levels = n_max + 1;
    if spec.len() < 2 * levels + 2 {
        return Err(Error::InvalidArgument(format!("{} points cannot constrain {levels} peak pairs", spec.len())));
    }
    let widths = resolvability(cfg, regime, n_max, spec.probe_duration)?;
    let centers = (0..=n_max).map(|n| doublet_center(cfg, regime, n)).collect::<Result<Vec<_>>>()?;
    let heights = peak_heights(cfg, regime, n_max, spec.probe_duration)?;
    if let Some(n) = heights.iter().position(|&h| !(h > 1e-6)) {
        return Err(Error::Unresolvable(format!("Fock level {n} gives no probe response")));
    }

    // Unweighted: most tail points record zero counts, and their narrow Wilson
    // intervals would pin the small peaks to zero.
    let y: Vec<f64> = match source {
        SignalSource::Probability => spec.p_excited.clone(),
        SignalSource::Counts => spec.frequencies().collect(),
    };
    let inv_sigma = vec![1.0; spec.len()];

    let design = |w: f64| -> DMatrix<f64> {
        DMatrix::from_fn(spec.len(), levels + 1, |i, j| {
            let x = spec.detunings[i];
            let v = if j == levels {
                1.0
            } else {
                let c = centers[j];
                let g = |d: f64| (-FOUR_LN2 * d * d / (w * w)).exp();
                if c > 0.5 * w {
                    g(x - c) + g(x + c)
                } else {
                    g(x)
                }
            };
            v * inv_sigma[i]
        })
    };
    let rhs = DVector::from_iterator(spec.len(), y.iter().zip(&inv_sigma).map(|(v, s)| v * s));
    let solve = |w: f64| -> (DVector<f64>, f64) {
        let a = design(w);
        let x = nnls(&a, &rhs);
        let r = (&rhs - &a * &x).norm();
        (x, r)
    };

    let w0 = widths.iter().cloned().fold(0.0, f64::max);
    let width = golden_section(|w| solve(w).1, 0.3 * w0, 3.0 * w0, 1e-6 * w0);
    let (coef, residual_norm) = solve(width);

    let amplitudes: Vec<f64> = coef.iter().take(levels).cloned().collect();
    let weights: Vec<f64> = amplitudes.iter().zip(&heights).map(|(a, h)| a / h).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::FitNonConvergence("no peak with positive amplitude".into()));
    }
    let populations: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let n_bar_mean = populations.iter().enumerate().map(|(n, p)| n as f64 * p).sum();

    // n̄ from a geometric mixture of the simulated Fock-level responses fitted
    // to the spectrum itself; the per-level amplitudes are too noisy in the tail
    let responses = fock_responses(cfg, regime, n_max, &spec.detunings, spec.probe_duration)?;
    let shots = spec.shots as f64;
    let mixture = |n_bar: f64, i: usize| -> f64 {
        let x = n_bar / (n_bar + 1.0);
        (0..levels).map(|n| (1.0 - x) * x.powi(n as i32) * responses[i][n]).sum()
    };
    // weighted residual with the background profiled out (closed form, ≥ 0)
    let geometric_cost = |n_bar: f64, w: &[f64]| -> f64 {
        let r: Vec<f64> = (0..spec.len()).map(|i| y[i] - mixture(n_bar, i)).collect();
        let sw: f64 = w.iter().sum();
        let bg = (r.iter().zip(w).map(|(r, w)| r * w).sum::<f64>() / sw).max(0.0);
        r.iter().zip(w).map(|(r, w)| w * (r - bg).powi(2)).sum()
    };
    let mut var_weights = vec![1.0; spec.len()];
    let mut n_bar_fit = minimize_n_bar(|v| geometric_cost(v, &var_weights), levels);
    if source == SignalSource::Counts {
        // binomial variances from the first-pass model, floored at half a count
        var_weights = (0..spec.len())
            .map(|i| {
                let p = mixture(n_bar_fit, i).clamp(0.5 / shots, 1.0 - 0.5 / shots);
                shots / (p * (1.0 - p))
            })
            .collect();
        n_bar_fit = minimize_n_bar(|v| geometric_cost(v, &var_weights), levels);
    }

    Ok(ThermalReconstruction {
        populations,
        n_bar_fit,
        n_bar_mean,
        centers,
        amplitudes,
        heights,
        width,
        background: coef[levels],
        residual_norm,
    })
}

/// Probe response of every Fock level 0..=n_max at each detuning, indexed
/// `[point][n]`: the S-manifold population after probing |D, n⟩.
pub fn fock_responses(
    cfg: &SystemConfig,
    regime: SidebandRegime,
    n_max: usize,
    detunings: &[f64],
    probe_duration: f64,
) -> Result<Vec<Vec<f64>>> {
    let space = cfg.space()?;
    if n_max >= cfg.fock_dim {
        return Err(Error::InvalidArgument(format!(
            "Fock level {n_max} outside the {}-level truncation",
            cfg.fock_dim
        )));
    }
    let bright: Vec<usize> =
        (0..cfg.fock_dim).flat_map(|m| [space.index(Level::S, m), space.index(Level::SPrime, m)]).collect();
    detunings
        .par_iter()
        .map(|&delta| {
            let system = probe_system(delta, Some(regime), cfg)?;
            if system.is_closed() {
                // one propagator serves every initial Fock level
                let u = propagator(&system.hamiltonian, probe_duration)?;
                Ok((0..=n_max)
                    .map(|n| {
                        let col = space.index(Level::D, n);
                        bright.iter().map(|&k| u.get(k, col).norm_sqr()).sum()
                    })
                    .collect())
            } else {
                (0..=n_max)
                    .map(|n| {
                        let rho = DensityMatrix::basis(&space, Level::D, n);
                        probe_pulse(&rho, probe_duration, delta, Some(regime), cfg)?.bright_population(&space)
                    })
                    .collect()
            }
        })
        .collect()
}

fn minimize_n_bar(cost: impl Fn(f64) -> f64, levels: usize) -> f64 {
    // coarse scan first: the cost is flat for large n̄
    let hi = 4.0 * levels as f64;
    let steps = 400;
    let grid = |i: usize| hi * (i as f64 / steps as f64).powi(2);
    let mut best = 0;
    let mut best_cost = cost(0.0);
    for i in 1..=steps {
        let c = cost(grid(i));
        if c < best_cost {
            best = i;
            best_cost = c;
        }
    }
    golden_section(cost, grid(best.saturating_sub(1)), grid((best + 1).min(steps)), 1e-10)
}

/// Mean n̄ of the geometric distribution, truncated to the same levels, that
/// best matches `populations` in least squares.
pub fn fit_geometric(populations: &[f64]) -> f64 {
    let k = populations.len();
    let cost = |n_bar: f64| -> f64 {
        let x = n_bar / (n_bar + 1.0);
        let q: Vec<f64> = (0..k).map(|n| x.powi(n as i32)).collect();
        let z: f64 = q.iter().sum();
        q.iter().zip(populations).map(|(q, p)| (q / z - p).powi(2)).sum()
    };
    minimize_n_bar(cost, k)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Lawson–Hanson non-negative least squares: min ‖Ax − b‖ subject to x ≥ 0.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.norm() * b.norm().max(1.0);
    for _ in 0..3 * n + 10 {
        let grad = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j]).max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        match candidate {
            Some(j) if grad[j] > tol => passive[j] = true,
            _ => break,
        }
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = DMatrix::from_fn(a.nrows(), idx.len(), |i, k| a[(i, idx[k])]);
            let z_sub = match sub.clone().svd(true, true).solve(b, 1e-14) {
                Ok(z) => z,
                Err(_) => return x,
            };
            let mut z = DVector::zeros(n);
            for (k, &j) in idx.iter().enumerate() {
                z[j] = z_sub[k];
            }
            if idx.iter().all(|&j| z[j] > 0.0) {
                x = z;
                break;
            }
            let alpha =
                idx.iter().filter(|&&j| z[j] <= 0.0).map(|&j| x[j] / (x[j] - z[j])).fold(f64::INFINITY, f64::min);
            for j in 0..n {
                x[j] += alpha * (z[j] - x[j]);
                if passive[j] && x[j] <= 1e-15 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        let x = nnls(&a, &b);
        assert!((x[0] - 1.0).abs() < 1e-10 && (x[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn nnls_clips_negative_direction() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DVector::from_row_slice(&[-1.0, 2.0, 0.0]);
        let x = nnls(&a, &b);
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_fit_recovers_mean() {
        for n_bar in [0.0, 0.3, 0.81, 2.23] {
            let x: f64 = n_bar / (n_bar + 1.0);
            let q: Vec<f64> = (0..12).map(|n| x.powi(n)).collect();
            let z: f64 = q.iter().sum();
            let p: Vec<f64> = q.iter().map(|v| v / z).collect();
            assert!((fit_geometric(&p) - n_bar).abs() < 1e-6, "{n_bar}");
        }
    }

    #[test]
    fn neighbouring_peaks_merge_at_high_n() {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 40;
        assert!(resolvability(&cfg, SidebandRegime::Bsb, 12, 700e-6).is_ok());
        assert!(matches!(resolvability(&cfg, SidebandRegime::Bsb, 25, 700e-6), Err(Error::Unresolvable(_))));
    }
}
