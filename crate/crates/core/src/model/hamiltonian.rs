use ndarray as nd;
use num_complex::Complex64 as C64;

use super::{CouplingOrder, SidebandRegime, SystemConfig};
use crate::algebra::{annihilation, expm_hermitian, sigma, tensor, HilbertSpec, Level, Operator, INTERNAL_DIM};
use crate::error::{Error, Result};

/// Extra Fock levels used when exponentiating `η(a + a†)`, so the cropped
/// block is free of truncation artefacts.
const EXPONENTIAL_PADDING: usize = 32;

/// `exp(iη(a + a†))` restricted to the lowest `fock_dim` levels.
///
/// The exponential is taken on a padded space and cropped, so the returned
/// elements match the untruncated oscillator to roundoff for moderate η.
pub fn lamb_dicke_exponential(eta: f64, fock_dim: usize) -> Result<nd::Array2<C64>> {
    if eta == 0.0 {
        return Ok(nd::Array2::eye(fock_dim));
    }
    let padded = fock_dim + EXPONENTIAL_PADDING;
    let a = annihilation(padded)?;
    let x = &a + &a.dagger();
    let e = expm_hermitian(&x, C64::new(0.0, eta))?;
    Ok(e.matrix().slice(nd::s![..fock_dim, ..fock_dim]).to_owned())
}

/// Motional operator `K` multiplying `|g⟩⟨e|` for a field addressing
/// `regime`, built from `exp(iη_s(a + a†))` with signed Lamb-Dicke factor
/// `eta_signed`. Blue sideband elements sit at `K[n, n+1]`, red at `K[n+1, n]`.
pub fn sideband_operator(
    eta_signed: f64,
    regime: SidebandRegime,
    order: CouplingOrder,
    fock_dim: usize,
) -> Result<Operator> {
    let mut k = nd::Array2::<C64>::zeros((fock_dim, fock_dim));
    let i_eta = C64::new(0.0, eta_signed);
    match order {
        CouplingOrder::FirstOrder => match regime {
            SidebandRegime::Carrier => k.diag_mut().fill(C64::new(1.0, 0.0)),
            SidebandRegime::Bsb => {
                for n in 0..fock_dim - 1 {
                    k[[n, n + 1]] = i_eta * ((n + 1) as f64).sqrt();
                }
            }
            SidebandRegime::Rsb => {
                for n in 0..fock_dim - 1 {
                    k[[n + 1, n]] = i_eta * ((n + 1) as f64).sqrt();
                }
            }
        },
        CouplingOrder::Exact => {
            let e = lamb_dicke_exponential(eta_signed, fock_dim)?;
            match regime {
                SidebandRegime::Carrier => {
                    for n in 0..fock_dim {
                        k[[n, n]] = e[[n, n]];
                    }
                }
                SidebandRegime::Bsb => {
                    for n in 0..fock_dim - 1 {
                        k[[n, n + 1]] = e[[n, n + 1]];
                    }
                }
                SidebandRegime::Rsb => {
                    for n in 0..fock_dim - 1 {
                        k[[n + 1, n]] = e[[n + 1, n]];
                    }
                }
            }
        }
    }
    Operator::new(k)
}

/// Element of [`sideband_operator`] connecting ground-side Fock level `n`
/// to its partner. Zero for the red sideband of `n = 0`.
pub fn sideband_element(
    eta_signed: f64,
    regime: SidebandRegime,
    order: CouplingOrder,
    n: usize,
    fock_dim: usize,
) -> Result<C64> {
    let partner = n as i64 + regime.phonon_shift();
    if n >= fock_dim || partner >= fock_dim as i64 {
        return Err(Error::InvalidArgument(format!(
            "Fock level {n} has no {} partner inside a {fock_dim}-level truncation",
            regime.label()
        )));
    }
    if partner < 0 {
        return Ok(C64::new(0.0, 0.0));
    }
    let k = sideband_operator(eta_signed, regime, order, fock_dim)?;
    Ok(k.get(n, partner as usize))
}

/// Probe carrier strength of Fock level `n` relative to the ground state,
/// `⟨n|e^{iη'(a+a†)}|n⟩ / ⟨0|e^{iη'(a+a†)}|0⟩` (`1` at first order).
pub fn probe_factor(eta_probe: f64, order: CouplingOrder, n: usize, fock_dim: usize) -> Result<f64> {
    if n >= fock_dim {
        return Err(Error::InvalidArgument(format!("Fock level {n} outside truncation {fock_dim}")));
    }
    Ok(probe_factors(eta_probe, order, fock_dim)?[n])
}

fn probe_factors(eta_probe: f64, order: CouplingOrder, fock_dim: usize) -> Result<Vec<f64>> {
    match order {
        CouplingOrder::FirstOrder => Ok(vec![1.0; fock_dim]),
        CouplingOrder::Exact => {
            let e = lamb_dicke_exponential(eta_probe, fock_dim)?;
            let c0 = e[[0, 0]].re;
            Ok((0..fock_dim).map(|n| e[[n, n]].re / c0).collect())
        }
    }
}

/// Rotating-frame Hamiltonian with the coupling field on `regime` and the
/// probe on S↔D:
///
/// `H = −Δ_P σ_DD − δ_C σ_D'D' + Ω_P e^{iφ_P} σ_SD ⊗ F + Ω_C e^{−iφ_C} σ_SD' ⊗ K + h.c.`
///
/// where `δ_C` is the coupling detuning measured from the regime's
/// resonance, `F` the probe's motional factor and `K` the sideband operator
/// with `exp(−iη(a+a†))` elements.
pub fn build_rwa_hamiltonian(cfg: &SystemConfig, regime: SidebandRegime, order: CouplingOrder) -> Result<Operator> {
    let space = cfg.space()?;
    let nf = space.fock_dim();
    let mut h = nd::Array2::<C64>::zeros((space.dim(), space.dim()));

    let residual = cfg.delta_c - regime.resonant_detuning(cfg.nu);
    for n in 0..nf {
        h[[space.index(Level::D, n), space.index(Level::D, n)]] -= cfg.delta_p;
        h[[space.index(Level::DPrime, n), space.index(Level::DPrime, n)]] -= residual;
    }

    let probe = C64::from_polar(cfg.omega_p, cfg.phi_p);
    for (n, f) in probe_factors(cfg.probe_eta(), order, nf)?.into_iter().enumerate() {
        let (s, d) = (space.index(Level::S, n), space.index(Level::D, n));
        h[[s, d]] += probe * f;
        h[[d, s]] += (probe * f).conj();
    }

    let coupling = C64::from_polar(cfg.omega_c, -cfg.phi_c);
    let k = sideband_operator(-cfg.eta, regime, order, nf)?;
    for ((i, j), &kij) in k.matrix().indexed_iter() {
        if kij == C64::new(0.0, 0.0) {
            continue;
        }
        let (s, dp) = (space.index(Level::S, i), space.index(Level::DPrime, j));
        h[[s, dp]] += coupling * kij;
        h[[dp, s]] += (coupling * kij).conj();
    }

    let h = Operator::new(h)?;
    let dev = h.hermitian_deviation();
    if dev > 1e-12 * (1.0 + cfg.omega_c + cfg.omega_p) {
        return Err(Error::NotHermitian { deviation: dev });
    }
    Ok(h)
}

/// Bare level frequencies for the lab-frame Hamiltonian. S and S' sit at zero.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LabFrame {
    pub omega_d: f64,
    pub omega_dp: f64,
}

fn bare_energies(space: &HilbertSpec, cfg: &SystemConfig, lab: &LabFrame) -> Vec<f64> {
    let mut e = vec![0.0; space.dim()];
    for level in Level::ALL {
        let base = match level {
            Level::D => lab.omega_d,
            Level::DPrime => lab.omega_dp,
            Level::S | Level::SPrime => 0.0,
        };
        for n in 0..space.fock_dim() {
            e[space.index(level, n)] = base + cfg.nu * n as f64;
        }
    }
    e
}

/// Interaction part of the lab-frame Hamiltonian at time `t`: probe on S↔D at
/// `ω_P = ω_D + Δ_P`, coupling on S↔D' at `ω_C = ω_D' + Δ_C` carrying the
/// full `exp(±iη(a + a†))` motional factor.
fn lab_interaction(cfg: &SystemConfig, lab: &LabFrame, space: &HilbertSpec, t: f64) -> Result<nd::Array2<C64>> {
    let nf = space.fock_dim();
    let omega_probe = lab.omega_d + cfg.delta_p;
    let omega_coupling = lab.omega_dp + cfg.delta_c;

    let probe_internal = &sigma(Level::S, Level::D) + &sigma(Level::D, Level::S);
    let probe = tensor(&probe_internal, &Operator::identity(nf))
        .scale(C64::new(2.0 * cfg.omega_p * (omega_probe * t + cfg.phi_p).cos(), 0.0));

    let e = Operator::new(lamb_dicke_exponential(cfg.eta, nf)?)?;
    let phase = C64::from_polar(1.0, cfg.phi_c - omega_coupling * t);
    let motion = &e.scale(phase) + &e.dagger().scale(phase.conj());
    let coupling_internal = &sigma(Level::S, Level::DPrime) + &sigma(Level::DPrime, Level::S);
    let coupling = tensor(&coupling_internal, &motion).scale(C64::new(cfg.omega_c, 0.0));

    Ok((&probe + &coupling).into_inner())
}

/// `H₀ + H_int(t)` in the lab frame, with
/// `H₀ = ω_D σ_DD + ω_D' σ_D'D' + ν a†a`.
pub fn build_lab_hamiltonian(cfg: &SystemConfig, lab: &LabFrame, t: f64) -> Result<Operator> {
    let space = cfg.space()?;
    let mut h = lab_interaction(cfg, lab, &space, t)?;
    for (i, e) in bare_energies(&space, cfg, lab).into_iter().enumerate() {
        h[[i, i]] += e;
    }
    Operator::new(h)
}

/// `e^{iH₀t} H_int(t) e^{−iH₀t}`.
pub fn interaction_picture_hamiltonian(cfg: &SystemConfig, lab: &LabFrame, t: f64) -> Result<Operator> {
    let space = cfg.space()?;
    let mut h = lab_interaction(cfg, lab, &space, t)?;
    let e = bare_energies(&space, cfg, lab);
    for ((i, j), hij) in h.indexed_iter_mut() {
        if *hij != C64::new(0.0, 0.0) {
            *hij *= C64::from_polar(1.0, (e[i] - e[j]) * t);
        }
    }
    Operator::new(h)
}

/// Collapse operators in the order (atomic decay, phonon loss, phonon gain):
/// `√(2Γ) σ_SD'`, `√(2κ(n_th+1)) a`, `√(2κ n_th) a†`. Zero-rate channels are
/// omitted.
pub fn collapse_operators(cfg: &SystemConfig) -> Result<Vec<Operator>> {
    let space = cfg.space()?;
    let nf = space.fock_dim();
    let mut out = Vec::with_capacity(3);
    if cfg.gamma_sd > 0.0 {
        let decay = tensor(&sigma(Level::S, Level::DPrime), &Operator::identity(nf));
        out.push(decay.scale(C64::new((2.0 * cfg.gamma_sd).sqrt(), 0.0)));
    }
    if cfg.kappa > 0.0 {
        let a = space.lift_motional(&annihilation(nf)?)?;
        out.push(a.scale(C64::new((2.0 * cfg.kappa * (cfg.n_th_env + 1.0)).sqrt(), 0.0)));
        if cfg.n_th_env > 0.0 {
            out.push(a.dagger().scale(C64::new((2.0 * cfg.kappa * cfg.n_th_env).sqrt(), 0.0)));
        }
    }
    debug_assert!(out.iter().all(|c| c.dim() == INTERNAL_DIM * nf));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::algebra::eig_hermitian;

    fn desk_config() -> SystemConfig {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 8;
        cfg
    }

    /// e^{-x/2} L_n(x), the diagonal displacement element at x = η².
    fn laguerre_diag(eta: f64, n: usize) -> f64 {
        let x = eta * eta;
        let (mut l0, mut l1) = (1.0, 1.0 - x);
        if n == 0 {
            return (-x / 2.0).exp();
        }
        for k in 1..n {
            let k = k as f64;
            let l2 = ((2.0 * k + 1.0 - x) * l1 - k * l0) / (k + 1.0);
            l0 = l1;
            l1 = l2;
        }
        (-x / 2.0).exp() * l1
    }

    /// exp(M) by scaling and squaring a Taylor series, independent of the
    /// eigendecomposition route.
    fn expm_taylor(m: &nd::Array2<C64>) -> nd::Array2<C64> {
        let norm: f64 = m.iter().map(|z| z.norm()).sum();
        let squarings = (norm.log2().ceil().max(0.0) as i32) + 4;
        let scaled = m / C64::new(2f64.powi(squarings), 0.0);
        let mut term = nd::Array2::<C64>::eye(m.nrows());
        let mut acc = term.clone();
        for k in 1..30 {
            term = term.dot(&scaled) / C64::new(k as f64, 0.0);
            acc += &term;
        }
        for _ in 0..squarings {
            acc = acc.dot(&acc);
        }
        acc
    }

    #[test]
    fn exponential_matches_laguerre_and_taylor() {
        let eta = 0.0609;
        let e = lamb_dicke_exponential(eta, 12).unwrap();
        for n in 0..12 {
            assert!((e[[n, n]].re - laguerre_diag(eta, n)).abs() < 1e-13, "n={n}");
        }
        let nf = 60;
        let a = annihilation(nf).unwrap();
        let x = (&a + &a.dagger()).into_inner() * C64::new(0.0, eta);
        let taylor = expm_taylor(&x);
        for i in 0..12 {
            for j in 0..12 {
                assert!((taylor[[i, j]] - e[[i, j]]).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn exact_probe_factor_tracks_first_order_suppression() {
        let eta = 0.0609;
        let f5 = probe_factor(eta, CouplingOrder::Exact, 5, 20).unwrap();
        let first = 1.0 - eta * eta * 5.0;
        assert!(((f5 - first) / first).abs() < 1e-4);
        assert_eq!(probe_factor(eta, CouplingOrder::FirstOrder, 5, 20).unwrap(), 1.0);
    }

    #[test]
    fn exact_sideband_deviation_is_second_order() {
        let eta = 0.06;
        for regime in [SidebandRegime::Rsb, SidebandRegime::Bsb] {
            for n in 0..=8 {
                let n_eff = regime.n_eff(n) as f64;
                let first = sideband_element(eta, regime, CouplingOrder::FirstOrder, n, 30).unwrap().norm();
                if first == 0.0 {
                    continue;
                }
                let exact = sideband_element(eta, regime, CouplingOrder::Exact, n, 30).unwrap().norm();
                let dev = (first - exact).abs() / first;
                // leading term η² n_eff / 2
                assert!((dev / (eta * eta * n_eff / 2.0) - 1.0).abs() < 0.02, "{regime:?} n={n}: {dev}");
                if n_eff <= 5.0 {
                    assert!(dev < 0.01);
                }
            }
        }
    }

    #[test]
    fn hamiltonians_are_hermitian() {
        let cfg = desk_config();
        for regime in [SidebandRegime::Carrier, SidebandRegime::Rsb, SidebandRegime::Bsb] {
            for order in [CouplingOrder::FirstOrder, CouplingOrder::Exact] {
                let h = build_rwa_hamiltonian(&cfg, regime, order).unwrap();
                assert!(h.hermitian_deviation() <= 1e-12 * cfg.omega_c, "{regime:?} {order:?}");
            }
        }
    }

    #[test]
    fn zero_eta_exact_reduces_to_probe() {
        let mut cfg = desk_config();
        cfg.eta = 0.0;
        let h = build_rwa_hamiltonian(&cfg, SidebandRegime::Bsb, CouplingOrder::Exact).unwrap();
        let space = cfg.space().unwrap();
        for n in 0..cfg.fock_dim {
            let s = space.index(Level::S, n);
            assert!((h.get(s, space.index(Level::D, n)).re - cfg.omega_p).abs() < 1e-9);
            for m in 0..cfg.fock_dim {
                assert_eq!(h.get(s, space.index(Level::DPrime, m)), C64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn rsb_block_has_dark_state_and_doublet() {
        let mut cfg = desk_config();
        cfg.delta_c = -cfg.nu;
        let h = build_rwa_hamiltonian(&cfg, SidebandRegime::Rsb, CouplingOrder::FirstOrder).unwrap();
        let space = cfg.space().unwrap();
        let g = cfg.eta * cfg.omega_c;
        for n in 1..5 {
            let idx = [space.index(Level::S, n), space.index(Level::D, n), space.index(Level::DPrime, n - 1)];
            let block = nd::Array2::from_shape_fn((3, 3), |(i, j)| h.get(idx[i], idx[j]));
            let e = eig_hermitian(&Operator::new(block).unwrap()).unwrap();
            let ep = (g * g * n as f64 + cfg.omega_p * cfg.omega_p).sqrt();
            assert!((e.values[0] + ep).abs() < 1e-9 * ep);
            assert!(e.values[1].abs() < 1e-9 * ep);
            assert!((e.values[2] - ep).abs() < 1e-9 * ep);
        }
    }

    #[test]
    fn bsb_ground_gap_is_twice_g() {
        let mut cfg = desk_config();
        cfg.omega_p = 0.0;
        let h = build_rwa_hamiltonian(&cfg, SidebandRegime::Bsb, CouplingOrder::FirstOrder).unwrap();
        let space = cfg.space().unwrap();
        let idx = [space.index(Level::S, 0), space.index(Level::DPrime, 1)];
        let block = nd::Array2::from_shape_fn((2, 2), |(i, j)| h.get(idx[i], idx[j]));
        let e = eig_hermitian(&Operator::new(block).unwrap()).unwrap();
        let g = cfg.eta * cfg.omega_c;
        assert!((e.values[1] - e.values[0] - 2.0 * g).abs() < 1e-9 * g);
    }

    #[test]
    fn lab_hamiltonian_at_rest() {
        let mut cfg = desk_config();
        cfg.omega_p = 0.0;
        cfg.omega_c = 0.0;
        let lab = LabFrame { omega_d: 5.0, omega_dp: 7.0 };
        let h = build_lab_hamiltonian(&cfg, &lab, 0.0).unwrap();
        let space = cfg.space().unwrap();
        for level in Level::ALL {
            for n in 0..cfg.fock_dim {
                let i = space.index(level, n);
                let base = match level {
                    Level::D => 5.0,
                    Level::DPrime => 7.0,
                    _ => 0.0,
                };
                assert!((h.get(i, i).re - (base + cfg.nu * n as f64)).abs() < 1e-6);
            }
        }
        assert!((&h - &Operator::from_diag(&h.matrix().diag().to_vec())).frobenius_norm() < 1e-9);
    }

    #[test]
    fn lab_probe_element_at_t0() {
        let mut cfg = desk_config();
        cfg.phi_p = 0.3;
        let lab = LabFrame { omega_d: 5.0, omega_dp: 7.0 };
        let h = build_lab_hamiltonian(&cfg, &lab, 0.0).unwrap();
        let space = cfg.space().unwrap();
        let elem = h.get(space.index(Level::S, 0), space.index(Level::D, 0));
        assert!((elem.re - 2.0 * cfg.omega_p * 0.3f64.cos()).abs() < 1e-9);
        assert!(h.is_hermitian(1e-9));
    }

    /// Averaging the interaction-picture Hamiltonian over one motional period
    /// with commensurate frequencies keeps exactly the resonant terms.
    #[test]
    fn stroboscopic_average_reproduces_rwa() {
        let nu = 1.0;
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 6;
        cfg.nu = nu;
        cfg.eta = 0.3;
        cfg.omega_c = 0.02;
        cfg.omega_p = 0.0;
        cfg.phi_c = 0.4;
        let lab = LabFrame { omega_d: 11.0 * nu, omega_dp: 17.0 * nu };
        let samples = 512;
        let period = 2.0 * PI / nu;

        for regime in [SidebandRegime::Bsb, SidebandRegime::Rsb, SidebandRegime::Carrier] {
            cfg.delta_c = regime.resonant_detuning(nu);
            let mut avg = nd::Array2::<C64>::zeros((24, 24));
            for k in 0..samples {
                let t = period * k as f64 / samples as f64;
                avg += interaction_picture_hamiltonian(&cfg, &lab, t).unwrap().matrix();
            }
            avg /= C64::new(samples as f64, 0.0);
            let rwa = build_rwa_hamiltonian(&cfg, regime, CouplingOrder::Exact).unwrap();
            let err = (&Operator::new(avg).unwrap() - &rwa).frobenius_norm();
            assert!(err < 1e-12, "{regime:?}: {err:e}");
        }

        // probe only: motion-independent carrier
        cfg.omega_c = 0.0;
        cfg.omega_p = 0.05;
        cfg.phi_p = -0.7;
        cfg.delta_c = nu;
        let mut avg = nd::Array2::<C64>::zeros((24, 24));
        for k in 0..samples {
            let t = period * k as f64 / samples as f64;
            avg += interaction_picture_hamiltonian(&cfg, &lab, t).unwrap().matrix();
        }
        avg /= C64::new(samples as f64, 0.0);
        let rwa = build_rwa_hamiltonian(&cfg, SidebandRegime::Bsb, CouplingOrder::FirstOrder).unwrap();
        assert!((&Operator::new(avg).unwrap() - &rwa).frobenius_norm() < 1e-12);
    }

    #[test]
    fn collapse_operator_set() {
        let mut cfg = desk_config();
        assert!(collapse_operators(&cfg).unwrap().is_empty());
        cfg.gamma_sd = 2.0 * PI * 10.0;
        cfg.kappa = 2.0 * PI * 1.0;
        cfg.n_th_env = 0.0;
        assert_eq!(collapse_operators(&cfg).unwrap().len(), 2);
        cfg.n_th_env = 0.5;
        let ops = collapse_operators(&cfg).unwrap();
        assert_eq!(ops.len(), 3);
        let space = cfg.space().unwrap();
        let a = space.lift_motional(&annihilation(cfg.fock_dim).unwrap()).unwrap();
        let a_norm = a.frobenius_norm();
        let sd = tensor(&sigma(Level::S, Level::DPrime), &Operator::identity(cfg.fock_dim)).frobenius_norm();
        assert!((ops[0].frobenius_norm() - (2.0 * cfg.gamma_sd).sqrt() * sd).abs() < 1e-9);
        assert!((ops[1].frobenius_norm() - (2.0 * cfg.kappa * 1.5).sqrt() * a_norm).abs() < 1e-9);
        assert!((ops[2].frobenius_norm() - (2.0 * cfg.kappa * 0.5).sqrt() * a_norm).abs() < 1e-9);
    }
}
