//! Probe-detuning scans of the Autler–Townes doublet, shot sampling, peak
//! fitting and the analyses built on it.

mod fit;
mod scaling;
mod thermal;

pub use fit::{fit_peaks, fit_peaks_with, FitOptions, FitResult, Peak, PeakModel, PeakPair, SignalSource};
pub use scaling::{extract_scaling, ScalingFit, ScalingPoint};
pub use thermal::{
    fit_geometric, fock_responses, peak_heights, reconstruct_thermal, reconstruct_thermal_with, resolvability,
    ThermalReconstruction,
};

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{check_truncation, DensityMatrix, Level};
use crate::error::{Error, Result};
use crate::model::{coupling_g, thermal_density, SidebandRegime, SystemConfig, DEFAULT_PROBE_TIME};
use crate::sequence::probe_pulse;

/// Default number of detuning points per scan.
pub const DEFAULT_POINTS: usize = 161;
/// Default number of projective measurements per detuning point.
pub const DEFAULT_SHOTS: u64 = 100;
/// Half-span of the default grid in units of the outermost analytic peak.
pub const GRID_SPAN_FACTOR: f64 = 1.6;

/// z-score of a two-sided 68.27 % interval.
const Z_68: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMotion {
    Fock(usize),
    Thermal(f64),
}

impl InitialMotion {
    pub fn density(&self, fock_dim: usize) -> Result<DensityMatrix> {
        match *self {
            Self::Fock(n) => {
                if n >= fock_dim {
                    return Err(Error::InvalidArgument(format!(
                        "Fock level {n} outside the {fock_dim}-level truncation"
                    )));
                }
                let mut m = ndarray::Array2::zeros((fock_dim, fock_dim));
                m[[n, n]] = num_complex::Complex64::new(1.0, 0.0);
                DensityMatrix::new(m)
            }
            Self::Thermal(n_bar) => thermal_density(n_bar, fock_dim),
        }
    }
}

/// Detuning sweep of the probe with the coupling field on in `regime`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPlan {
    /// rad/s
    pub detuning_min: f64,
    /// rad/s
    pub detuning_max: f64,
    pub n_points: usize,
    pub probe_duration: f64,
    pub shots_per_point: u64,
    pub regime: SidebandRegime,
    pub initial_state: InitialMotion,
}

impl ScanPlan {
    /// Symmetric grid reaching `GRID_SPAN_FACTOR` times the outermost peak
    /// of Fock level `n_max`.
    pub fn centered(cfg: &SystemConfig, regime: SidebandRegime, n_max: usize, initial_state: InitialMotion) -> Self {
        let reach = coupling_g(cfg) * (regime.n_eff(n_max).max(1) as f64).sqrt();
        let half = if reach > 0.0 { GRID_SPAN_FACTOR * reach } else { 8.0 * PI / DEFAULT_PROBE_TIME };
        Self {
            detuning_min: -half,
            detuning_max: half,
            n_points: DEFAULT_POINTS,
            probe_duration: DEFAULT_PROBE_TIME,
            shots_per_point: DEFAULT_SHOTS,
            regime,
            initial_state,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 scan points, got {}", self.n_points)));
        }
        if self.shots_per_point < 1 {
            return Err(Error::InvalidArgument("need at least one shot per point".into()));
        }
        if !(self.detuning_min < self.detuning_max) || !self.detuning_min.is_finite() || !self.detuning_max.is_finite()
        {
            return Err(Error::InvalidArgument("detuning range must be finite and increasing".into()));
        }
        if !(self.probe_duration > 0.0) {
            return Err(Error::InvalidArgument("probe duration must be positive".into()));
        }
        if let InitialMotion::Thermal(n_bar) = self.initial_state {
            if !(n_bar >= 0.0) {
                return Err(Error::InvalidArgument("thermal n_bar must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn detunings(&self) -> Vec<f64> {
        let step = (self.detuning_max - self.detuning_min) / (self.n_points - 1) as f64;
        (0..self.n_points).map(|i| self.detuning_min + step * i as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// rad/s
    pub detunings: Vec<f64>,
    pub p_excited: Vec<f64>,
    pub counts: Vec<u64>,
    pub shots: u64,
    pub regime: SidebandRegime,
    pub probe_duration: f64,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.detunings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detunings.is_empty()
    }

    pub fn detunings_hz(&self) -> Vec<f64> {
        self.detunings.iter().map(|d| d / (2.0 * PI)).collect()
    }

    pub fn frequencies(&self) -> impl Iterator<Item = f64> + '_ {
        self.counts.iter().map(move |&c| c as f64 / self.shots as f64)
    }

    /// 68 % Wilson interval of every point.
    pub fn wilson_intervals(&self) -> Vec<(f64, f64)> {
        self.counts.iter().map(|&c| wilson_interval(c, self.shots)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.detunings.len();
        if self.p_excited.len() != n || self.counts.len() != n {
            return Err(Error::InvalidArgument("spectrum columns differ in length".into()));
        }
        if self.counts.iter().any(|&c| c > self.shots) {
            return Err(Error::InvalidArgument("counts exceed shots".into()));
        }
        Ok(())
    }
}

/// 68 % Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = Z_68 * Z_68;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z_68 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Independent generator for scan point `index`.
pub fn point_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Binomial draw of `shots` projective measurements with success `p`.
pub fn sample_counts(p: f64, shots: u64, rng: &mut ChaCha8Rng) -> Result<u64> {
    let p = p.clamp(0.0, 1.0);
    let dist = Binomial::new(shots, p).map_err(|e| Error::InvalidArgument(format!("binomial: {e}")))?;
    Ok(dist.sample(rng))
}

/// Simulate the scan: at each detuning, start from |D⟩ ⊗ motion, apply the
/// probe with the coupling field on, and record the S-manifold population
/// plus a binomial sample of it. Points run in parallel on the current
/// rayon pool; the result does not depend on the pool size.
pub fn scan_spectrum(plan: &ScanPlan, cfg: &SystemConfig, rng_seed: u64) -> Result<Spectrum> {
    plan.validate()?;
    cfg.validate()?;
    let space = cfg.space()?;
    let initial = DensityMatrix::with_level(Level::D, &plan.initial_state.density(cfg.fock_dim)?)?;
    check_truncation(&initial, &space)?;

    let detunings = plan.detunings();
    let points = detunings
        .par_iter()
        .enumerate()
        .map(|(i, &delta)| -> Result<(f64, u64)> {
            let out = probe_pulse(&initial, plan.probe_duration, delta, Some(plan.regime), cfg)?;
            let p = out.bright_population(&space)?.clamp(0.0, 1.0);
            let counts = sample_counts(p, plan.shots_per_point, &mut point_rng(rng_seed, i as u64))?;
            Ok((p, counts))
        })
        .collect::<Result<Vec<_>>>()?;
    let (p_excited, counts) = points.into_iter().unzip();
    Ok(Spectrum {
        detunings,
        p_excited,
        counts,
        shots: plan.shots_per_point,
        regime: plan.regime,
        probe_duration: plan.probe_duration,
    })
}

/// Sideband Rabi rate `|g|√(n+1)` of the blue sideband; stands in for a
/// Rabi-flopping calibration.
pub fn analytic_bsb_rabi_rate(cfg: &SystemConfig, n: usize) -> f64 {
    coupling_g(cfg) * ((n + 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_interval_contains_estimate() {
        let (lo, hi) = wilson_interval(30, 100);
        assert!(lo < 0.3 && hi > 0.3);
        let (lo, hi) = wilson_interval(0, 100);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.05);
        let (lo, hi) = wilson_interval(100, 100);
        assert!(lo > 0.95 && hi > 0.999);
    }

    #[test]
    fn wilson_interval_closed_form() {
        // k = 5, n = 20, z = 1: center (0.25 + 0.025)/1.05, half √(0.009375 + 0.000625)/1.05
        let (lo, hi) = wilson_interval(5, 20);
        let c = 0.275 / 1.05;
        let h = 0.01f64.sqrt() / 1.05;
        assert!((lo - (c - h)).abs() < 1e-15);
        assert!((hi - (c + h)).abs() < 1e-15);
    }

    #[test]
    fn plan_validation() {
        let cfg = SystemConfig::bsb_preset();
        let mut plan = ScanPlan::centered(&cfg, SidebandRegime::Bsb, 0, InitialMotion::Fock(0));
        assert!(plan.validate().is_ok());
        plan.n_points = 2;
        assert!(plan.validate().is_err());
        plan.n_points = 5;
        plan.shots_per_point = 0;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn grid_is_symmetric() {
        let cfg = SystemConfig::bsb_preset();
        let plan = ScanPlan::centered(&cfg, SidebandRegime::Bsb, 3, InitialMotion::Fock(0));
        let d = plan.detunings();
        assert_eq!(d.len(), DEFAULT_POINTS);
        for i in 0..d.len() {
            assert!((d[i] + d[d.len() - 1 - i]).abs() < 1e-9 * d[d.len() - 1]);
        }
        assert!((d[d.len() - 1] - GRID_SPAN_FACTOR * coupling_g(&cfg) * 2.0).abs() < 1e-6);
    }

    #[test]
    fn rsb_ground_state_grid_uses_first_doublet() {
        let cfg = SystemConfig::rsb_preset();
        let plan = ScanPlan::centered(&cfg, SidebandRegime::Rsb, 0, InitialMotion::Fock(0));
        assert!(plan.detuning_max > 0.0);
    }
}
