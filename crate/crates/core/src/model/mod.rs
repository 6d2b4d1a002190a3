//! Physical model: system parameters, Hamiltonians, collapse operators and
//! closed-form dressed-state quantities.
//!
//! All frequencies are angular (rad/s) and Hamiltonians carry no ħ/2
//! prefactor: a coupling `Ω (σ + σ†)` drives a resonant π pulse in
//! `π / (2Ω)` and splits a resonant doublet by `2Ω`.

mod dressed;
mod hamiltonian;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::algebra::HilbertSpec;
use crate::dynamics::IntegratorSettings;
use crate::error::{Error, Result};

pub use dressed::{
    dressed_analysis, fwhm_analytic, golden_rule_width, thermal_density, thermal_populations, DressedTriple,
    GoldenRuleTerm, GoldenRuleWidth,
};
pub use hamiltonian::{
    build_lab_hamiltonian, build_rwa_hamiltonian, collapse_operators, interaction_picture_hamiltonian,
    lamb_dicke_exponential, probe_factor, sideband_element, sideband_operator, LabFrame,
};

/// Probe pulse length used for the Autler-Townes scans, 700 μs.
pub const DEFAULT_PROBE_TIME: f64 = 700e-6;

/// Truncation used unless a run asks for more.
pub const DEFAULT_FOCK_DIM: usize = 20;

/// Which motional resonance the coupling field addresses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SidebandRegime {
    Carrier,
    Rsb,
    Bsb,
}

impl SidebandRegime {
    /// Coupling-field detuning that makes this regime resonant.
    pub fn resonant_detuning(self, nu: f64) -> f64 {
        match self {
            SidebandRegime::Carrier => 0.0,
            SidebandRegime::Rsb => -nu,
            SidebandRegime::Bsb => nu,
        }
    }

    /// Regime whose resonance lies closest to `delta_c`.
    pub fn nearest(delta_c: f64, nu: f64) -> Self {
        [SidebandRegime::Carrier, SidebandRegime::Rsb, SidebandRegime::Bsb]
            .into_iter()
            .min_by(|a, b| {
                (delta_c - a.resonant_detuning(nu)).abs().total_cmp(&(delta_c - b.resonant_detuning(nu)).abs())
            })
            .unwrap_or(SidebandRegime::Carrier)
    }

    /// Change in phonon number from the ground-side state to the excited-side state.
    pub fn phonon_shift(self) -> i64 {
        match self {
            SidebandRegime::Carrier => 0,
            SidebandRegime::Rsb => -1,
            SidebandRegime::Bsb => 1,
        }
    }

    /// Effective phonon number entering the sideband coupling `g √n_eff`.
    pub fn n_eff(self, n: usize) -> usize {
        match self {
            SidebandRegime::Rsb => n,
            SidebandRegime::Bsb => n + 1,
            SidebandRegime::Carrier => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SidebandRegime::Carrier => "carrier",
            SidebandRegime::Rsb => "rsb",
            SidebandRegime::Bsb => "bsb",
        }
    }
}

/// Order of the Lamb-Dicke expansion used for motional matrix elements.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingOrder {
    /// `g √n` sideband elements and a motion-independent probe.
    #[default]
    FirstOrder,
    /// Matrix elements of the (truncated) exponential `exp(±iη(a + a†))`.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Lamb-Dicke parameter of the coupling beam.
    pub eta: f64,
    /// Lamb-Dicke parameter of the probe beam; defaults to `eta`.
    pub eta_probe: Option<f64>,
    /// Carrier Rabi rate of the coupling field.
    pub omega_c: f64,
    /// Probe Rabi rate.
    pub omega_p: f64,
    /// Carrier Rabi rate of the beam used for π pulses.
    pub omega_pulse: f64,
    /// Motional mode frequency.
    pub nu: f64,
    pub delta_c: f64,
    pub delta_p: f64,
    /// Spontaneous decay rate of D'.
    pub gamma_sd: f64,
    /// Motional damping rate.
    pub kappa: f64,
    pub n_th_env: f64,
    pub phi_p: f64,
    pub phi_c: f64,
    pub fock_dim: usize,
    pub order: CouplingOrder,
    pub integrator: IntegratorSettings,
}

impl SystemConfig {
    /// Blue-sideband run: η = 0.0609, ground-state sideband coupling
    /// 2π·10.05 kHz, mode at 2π·1.3433 MHz.
    pub fn bsb_preset() -> Self {
        Self::preset(0.0609, 2.0 * PI * 10.05e3, 2.0 * PI * 1.3433e6, SidebandRegime::Bsb)
    }

    /// Red-sideband run: η = 0.0605, ground-state sideband coupling
    /// 2π·11.08 kHz, mode at 2π·1.36 MHz.
    pub fn rsb_preset() -> Self {
        Self::preset(0.0605, 2.0 * PI * 11.08e3, 2.0 * PI * 1.36e6, SidebandRegime::Rsb)
    }

    fn preset(eta: f64, omega0: f64, nu: f64, regime: SidebandRegime) -> Self {
        let omega_c = omega0 / eta;
        Self {
            eta,
            eta_probe: None,
            omega_c,
            omega_p: omega_p_for_probe_time(DEFAULT_PROBE_TIME),
            omega_pulse: omega_c,
            nu,
            delta_c: regime.resonant_detuning(nu),
            delta_p: 0.0,
            gamma_sd: 0.0,
            kappa: 0.0,
            n_th_env: 0.0,
            phi_p: 0.0,
            phi_c: 0.0,
            fock_dim: DEFAULT_FOCK_DIM,
            order: CouplingOrder::FirstOrder,
            integrator: IntegratorSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.eta,
            self.omega_c,
            self.omega_p,
            self.omega_pulse,
            self.nu,
            self.delta_c,
            self.delta_p,
            self.gamma_sd,
            self.kappa,
            self.n_th_env,
            self.phi_p,
            self.phi_c,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite system parameter".into()));
        }
        if self.eta < 0.0 || self.eta_probe.is_some_and(|e| !(e >= 0.0)) {
            return Err(Error::InvalidArgument("Lamb-Dicke parameters must be non-negative".into()));
        }
        if self.gamma_sd < 0.0 || self.kappa < 0.0 || self.n_th_env < 0.0 {
            return Err(Error::InvalidArgument("rates and n_th_env must be non-negative".into()));
        }
        if self.omega_c < 0.0 || self.omega_p < 0.0 || self.omega_pulse < 0.0 {
            return Err(Error::InvalidArgument("Rabi rates must be non-negative".into()));
        }
        HilbertSpec::new(self.fock_dim)?;
        self.integrator.validate()
    }

    pub fn space(&self) -> Result<HilbertSpec> {
        HilbertSpec::new(self.fock_dim)
    }

    pub fn probe_eta(&self) -> f64 {
        self.eta_probe.unwrap_or(self.eta)
    }

    /// Regime selected by the coupling detuning.
    pub fn regime(&self) -> SidebandRegime {
        SidebandRegime::nearest(self.delta_c, self.nu)
    }

    pub fn has_dissipation(&self) -> bool {
        self.gamma_sd > 0.0 || self.kappa > 0.0
    }

    /// η²(2N_F + 1) when it exceeds 0.1: the truncated space reaches Fock
    /// levels where the first-order expansion is no longer accurate.
    pub fn lamb_dicke_diagnostic(&self) -> Option<f64> {
        let x = self.eta * self.eta * (2.0 * self.fock_dim as f64 + 1.0);
        (x > 0.1).then_some(x)
    }

    /// Copy with all dissipation switched off.
    pub fn closed(&self) -> Self {
        Self { gamma_sd: 0.0, kappa: 0.0, ..self.clone() }
    }
}

/// Magnitude of the first-order sideband coupling, `|g| = η Ω_C`.
pub fn coupling_g(cfg: &SystemConfig) -> f64 {
    cfg.eta * cfg.omega_c
}

/// Probe Rabi rate for which a probe of length `t` is a π pulse on one
/// dressed component (coupling `Ω_P/√2`).
pub fn omega_p_for_probe_time(t: f64) -> f64 {
    PI / (std::f64::consts::SQRT_2 * t)
}

/// Coupling-field matrix element ⟨S,n|H|D',n±1⟩ for the probed Fock level `n`
/// in `regime`, using the config's coupling order.
pub fn doublet_coupling(cfg: &SystemConfig, regime: SidebandRegime, n: usize) -> Result<num_complex::Complex64> {
    let k = sideband_element(-cfg.eta, regime, cfg.order, n, cfg.fock_dim)?;
    Ok(num_complex::Complex64::from_polar(cfg.omega_c, -cfg.phi_c) * k)
}

/// Weak-probe resonance position `|g_n|` of Fock level `n`: the probe sees
/// peaks at `Δ_P = ±doublet_center`.
pub fn doublet_center(cfg: &SystemConfig, regime: SidebandRegime, n: usize) -> Result<f64> {
    Ok(doublet_coupling(cfg, regime, n)?.norm())
}

/// Probe Rabi rate seen by Fock level `n` (constant at first order).
pub fn probe_rabi(cfg: &SystemConfig, n: usize) -> Result<f64> {
    Ok(cfg.omega_p * probe_factor(cfg.probe_eta(), cfg.order, n, cfg.fock_dim)?)
}

/// Probe length that is a π pulse from |D,n⟩ into one dressed state.
pub fn probe_pi_time(cfg: &SystemConfig, n: usize) -> Result<f64> {
    let rabi = probe_rabi(cfg, n)?;
    if rabi <= 0.0 {
        return Err(Error::InvalidArgument("probe Rabi rate is zero".into()));
    }
    Ok(PI / (std::f64::consts::SQRT_2 * rabi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coupling_strength_from_preset() {
        let cfg = SystemConfig::bsb_preset();
        let g = coupling_g(&cfg);
        assert!((g - 2.0 * PI * 10.05e3).abs() < 1e-9 * g);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.regime(), SidebandRegime::Bsb);
        assert_eq!(SystemConfig::rsb_preset().regime(), SidebandRegime::Rsb);
    }

    #[test]
    fn coupling_scales_linearly() {
        let mut cfg = SystemConfig::bsb_preset();
        let g1 = coupling_g(&cfg);
        cfg.omega_c *= 2.0;
        assert!((coupling_g(&cfg) - 2.0 * g1).abs() < 1e-9 * g1);
        cfg.eta = 0.0;
        assert_eq!(coupling_g(&cfg), 0.0);
    }

    #[test]
    fn regime_resolution() {
        let nu = 1.0e6;
        assert_eq!(SidebandRegime::nearest(0.0, nu), SidebandRegime::Carrier);
        assert_eq!(SidebandRegime::nearest(0.9e6, nu), SidebandRegime::Bsb);
        assert_eq!(SidebandRegime::nearest(-1.1e6, nu), SidebandRegime::Rsb);
    }

    #[test]
    fn lamb_dicke_diagnostic_threshold() {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 10;
        assert!(cfg.lamb_dicke_diagnostic().is_none());
        cfg.fock_dim = 20;
        assert!(cfg.lamb_dicke_diagnostic().is_some());
        cfg.fock_dim = 10;
        cfg.eta = 0.1;
        assert!(cfg.lamb_dicke_diagnostic().is_some());
    }

    #[test]
    fn probe_pulse_is_pi_at_default_time() {
        let cfg = SystemConfig::bsb_preset();
        let t = probe_pi_time(&cfg, 0).unwrap();
        assert!((t - DEFAULT_PROBE_TIME).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.kappa = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 1;
        assert!(cfg.validate().is_err());
    }
}
