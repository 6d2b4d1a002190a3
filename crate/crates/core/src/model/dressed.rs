//! Closed-form dressed states of the three-level blocks, golden-rule
//! linewidths and thermal phonon states.
//!
//! For the probed Fock level `n` the coupling field on a sideband closes a
//! block `{|S,n⟩, |D,n⟩, |D',n±1⟩}` (`n+1` on the blue sideband, `n−1` on the
//! red). With probe element `p` and coupling element `G` the block is
//!
//! ```text
//!     [ 0   p   G ]
//!     [ p*  0   0 ]      eigenvalues 0, ±E,  E = √(|G|² + |p|²)
//!     [ G*  0   0 ]
//! ```
//!
//! with dark state `(0, G, −p)/E` and `|±⟩ = (1, ±p*/E, ±G*/E)/√2`.

use ndarray as nd;
use num_complex::Complex64 as C64;
use serde::Serialize;

use super::{doublet_coupling, probe_rabi, SidebandRegime, SystemConfig};
use crate::algebra::{DensityMatrix, HilbertSpec, Level};
use crate::error::{Error, Result};

use super::collapse_operators;

#[derive(Clone, Debug, Serialize)]
pub struct DressedTriple {
    pub n: usize,
    pub regime: SidebandRegime,
    pub n_eff: usize,
    pub e_minus: f64,
    pub e_zero: f64,
    pub e_plus: f64,
    /// Block basis: |S,n⟩, |D,n⟩ and, when it exists, the coupled |D',m⟩.
    pub basis: [(Level, Option<usize>); 3],
    pub dark_state: [C64; 3],
    pub plus_state: [C64; 3],
    pub minus_state: [C64; 3],
    /// Set when the coupling field does not reach this Fock level (red
    /// sideband of `n = 0`): the probe sees an unshifted line.
    pub no_sideband_coupling: bool,
    /// Probe and coupling elements of the block, `p` and `G`.
    pub probe_element: C64,
    pub coupling_element: C64,
}

impl DressedTriple {
    /// The 3×3 block Hamiltonian at resonance.
    pub fn block(&self) -> nd::Array2<C64> {
        let (p, g) = (self.probe_element, self.coupling_element);
        let z = C64::new(0.0, 0.0);
        nd::array![[z, p, g], [p.conj(), z, z], [g.conj(), z, z]]
    }
}

/// Closed-form eigenvalues and eigenvectors of the resonant block for
/// probed Fock level `n`, using the config's coupling order.
pub fn dressed_analysis(cfg: &SystemConfig, regime: SidebandRegime, n: usize) -> Result<DressedTriple> {
    cfg.validate()?;
    let partner = n as i64 + regime.phonon_shift();
    let no_coupling = partner < 0;
    let g = doublet_coupling(cfg, regime, n)?;
    let p = C64::from_polar(probe_rabi(cfg, n)?, cfg.phi_p);
    let e = (g.norm_sqr() + p.norm_sqr()).sqrt();

    let z = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let (dark, plus, minus) = if e == 0.0 {
        ([z, z, one], [one, z, z], [z, one, z])
    } else if no_coupling {
        // two-level probe line; the formal third state is the dark one
        ([z, z, one], [C64::new(r, 0.0), p.conj() / e * r, z], [C64::new(r, 0.0), -p.conj() / e * r, z])
    } else {
        (
            [z, g / e, -p / e],
            [C64::new(r, 0.0), p.conj() / e * r, g.conj() / e * r],
            [C64::new(r, 0.0), -p.conj() / e * r, -g.conj() / e * r],
        )
    };

    Ok(DressedTriple {
        n,
        regime,
        n_eff: if no_coupling { 0 } else { regime.n_eff(n) },
        e_minus: -e,
        e_zero: 0.0,
        e_plus: e,
        basis: [(Level::S, Some(n)), (Level::D, Some(n)), (Level::DPrime, (!no_coupling).then_some(partner as usize))],
        dark_state: dark,
        plus_state: plus,
        minus_state: minus,
        no_sideband_coupling: no_coupling,
        probe_element: p,
        coupling_element: g,
    })
}

/// Lorentzian FWHM of the upper dressed resonance:
/// RSB `Γ + κ[2n(2n̄+1) − 1]`, BSB `Γ + κ[2n(2n̄+1) + 4n̄ + 1]`.
/// On the carrier the same golden-rule sum gives `Γ + κ[2n(2n̄+1) + 2n̄]`.
pub fn fwhm_analytic(cfg: &SystemConfig, regime: SidebandRegime, n: usize) -> Result<f64> {
    let (gamma, kappa, nth) = (cfg.gamma_sd, cfg.kappa, cfg.n_th_env);
    let nf = n as f64;
    let bracket = match regime {
        SidebandRegime::Rsb => {
            if n == 0 {
                return Err(Error::InvalidArgument("red-sideband linewidth needs n >= 1".into()));
            }
            2.0 * nf * (2.0 * nth + 1.0) - 1.0
        }
        SidebandRegime::Bsb => 2.0 * nf * (2.0 * nth + 1.0) + 4.0 * nth + 1.0,
        SidebandRegime::Carrier => 2.0 * nf * (2.0 * nth + 1.0) + 2.0 * nth,
    };
    Ok(gamma + kappa * bracket)
}

#[derive(Clone, Debug, Serialize)]
pub struct GoldenRuleTerm {
    pub channel: usize,
    pub final_level: Level,
    pub final_fock: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GoldenRuleWidth {
    pub total: f64,
    pub terms: Vec<GoldenRuleTerm>,
    /// ‖C|+⟩‖² summed over channels; equals `total` when the listed final
    /// states exhaust every decay path.
    pub full_norm: f64,
}

/// Numerical Fermi-golden-rule width `Σ |⟨f|C|+⟩|²` of the strong-coupling
/// dressed state `|+⟩ = (|S,n⟩ + e^{iθ}|D',m⟩)/√2`, evaluated on the full
/// composite space with the model's collapse operators.
pub fn golden_rule_width(cfg: &SystemConfig, regime: SidebandRegime, n: usize) -> Result<GoldenRuleWidth> {
    let space = cfg.space()?;
    let partner = n as i64 + regime.phonon_shift();
    if partner < 0 {
        return Err(Error::InvalidArgument("red-sideband linewidth needs n >= 1".into()));
    }
    let partner = partner as usize;
    if n + 2 >= space.fock_dim() || partner + 2 >= space.fock_dim() {
        return Err(Error::InvalidArgument(format!(
            "Fock truncation {} too small for golden-rule sum at n = {n}",
            space.fock_dim()
        )));
    }
    let g = doublet_coupling(cfg, regime, n)?;
    let phase = if g.norm() > 0.0 { g.conj() / g.norm() } else { C64::new(1.0, 0.0) };
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut plus = nd::Array1::<C64>::zeros(space.dim());
    plus[space.index(Level::S, n)] = C64::new(r, 0.0);
    plus[space.index(Level::DPrime, partner)] = phase * r;

    // decay lands on S; phonon loss/gain shift each component by ∓1
    let finals = |channel: usize| -> Vec<(Level, usize)> {
        match channel {
            0 => vec![(Level::S, partner)],
            1 => {
                let mut v = Vec::new();
                if n > 0 {
                    v.push((Level::S, n - 1));
                }
                if partner > 0 {
                    v.push((Level::DPrime, partner - 1));
                }
                v
            }
            _ => vec![(Level::S, n + 1), (Level::DPrime, partner + 1)],
        }
    };

    let mut channels = Vec::new();
    if cfg.gamma_sd > 0.0 {
        channels.push(0);
    }
    if cfg.kappa > 0.0 {
        channels.push(1);
        if cfg.n_th_env > 0.0 {
            channels.push(2);
        }
    }
    let ops = collapse_operators(cfg)?;
    debug_assert_eq!(ops.len(), channels.len());

    let mut terms = Vec::new();
    let mut full_norm = 0.0;
    for (op, &channel) in ops.iter().zip(&channels) {
        let out = op.apply(&plus);
        full_norm += out.iter().map(|z| z.norm_sqr()).sum::<f64>();
        for (level, fock) in finals(channel) {
            terms.push(GoldenRuleTerm {
                channel,
                final_level: level,
                final_fock: fock,
                rate: out[space.index(level, fock)].norm_sqr(),
            });
        }
    }
    let total = terms.iter().map(|t| t.rate).sum();
    Ok(GoldenRuleWidth { total, terms, full_norm })
}

/// Geometric phonon distribution `n̄ⁿ/(n̄+1)^{n+1}`, renormalized on the
/// truncated space.
pub fn thermal_populations(n_bar: f64, fock_dim: usize) -> Result<Vec<f64>> {
    if !(n_bar >= 0.0) || !n_bar.is_finite() {
        return Err(Error::InvalidArgument(format!("mean phonon number must be >= 0, got {n_bar}")));
    }
    HilbertSpec::new(fock_dim)?;
    let ratio = n_bar / (n_bar + 1.0);
    let mut p: Vec<f64> = (0..fock_dim).map(|n| ratio.powi(n as i32) / (n_bar + 1.0)).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

pub fn thermal_density(n_bar: f64, fock_dim: usize) -> Result<DensityMatrix> {
    let p = thermal_populations(n_bar, fock_dim)?;
    let diag = nd::Array1::from_iter(p.into_iter().map(|x| C64::new(x, 0.0)));
    Ok(DensityMatrix::from_matrix_unchecked(nd::Array2::from_diag(&diag)))
}
