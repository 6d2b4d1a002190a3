//! Time evolution: closed-system propagation through the spectral
//! decomposition of H, and Lindblad master-equation integration in matrix
//! form (no superoperator is ever built).

use std::f64::consts::PI;

use ndarray as nd;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    check_truncation, eig_hermitian, expectation, hermitian_deviation, sigma, tensor, DensityMatrix, HilbertSpec,
    Level, Operator,
};
use crate::error::{Error, Result};
use crate::model::{collapse_operators, sideband_operator, CouplingOrder, SidebandRegime, SystemConfig};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorMethod {
    FixedRk4,
    #[default]
    AdaptiveRk45,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSettings {
    pub method: IntegratorMethod,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest step; the step size of `FixedRk4`.
    pub max_step: Option<f64>,
    pub max_steps: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            method: IntegratorMethod::AdaptiveRk45,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: None,
            max_steps: 2_000_000,
        }
    }
}

impl IntegratorSettings {
    pub fn fixed_rk4(step: f64) -> Self {
        Self { method: IntegratorMethod::FixedRk4, max_step: Some(step), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x <= 1e-2;
        if !ok(self.rel_tol) || !ok(self.abs_tol) {
            return Err(Error::InvalidArgument(format!(
                "integrator tolerances must lie in (0, 1e-2], got rel {} abs {}",
                self.rel_tol, self.abs_tol
            )));
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument("max_step must be positive".into()));
            }
        }
        if self.method == IntegratorMethod::FixedRk4 && self.max_step.is_none() {
            return Err(Error::InvalidArgument("FixedRk4 needs max_step".into()));
        }
        Ok(())
    }
}

/// Hamiltonian, collapse operators and (optionally) the composite space used
/// for the Fock truncation guard.
#[derive(Clone, Debug)]
pub struct OpenSystem {
    pub hamiltonian: Operator,
    pub collapses: Vec<Operator>,
    pub space: Option<HilbertSpec>,
}

impl OpenSystem {
    pub fn new(hamiltonian: Operator, collapses: Vec<Operator>) -> Self {
        Self { hamiltonian, collapses, space: None }
    }

    pub fn guarded(mut self, space: HilbertSpec) -> Self {
        self.space = Some(space);
        self
    }

    pub fn is_closed(&self) -> bool {
        self.collapses.is_empty()
    }

    fn check(&self, rho: &DensityMatrix) -> Result<()> {
        let d = rho.dim();
        if self.hamiltonian.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.hamiltonian.dim() });
        }
        if let Some(c) = self.collapses.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
        }
        if let Some(space) = &self.space {
            if space.dim() != d {
                return Err(Error::DimensionMismatch { expected: space.dim(), got: d });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub max_trace_error: f64,
    pub max_hermitian_error: f64,
    /// Smallest eigenvalue seen at the sampled checkpoints.
    pub min_eigenvalue: f64,
    pub steps: usize,
    pub rejected_steps: usize,
    /// Set when the trace or positivity bounds were exceeded.
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservableSeries {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EvolutionResult {
    pub final_state: DensityMatrix,
    pub times: Vec<f64>,
    pub observables: Vec<ObservableSeries>,
    pub diagnostics: Diagnostics,
}

const EIG_CHECK_INTERVAL: usize = 250;

/// Row-compressed complex matrix for the right-hand side.
#[derive(Clone, Debug)]
struct Sparse {
    rows: Vec<Vec<(usize, C64)>>,
}

impl Sparse {
    fn from_dense(m: &nd::Array2<C64>) -> Self {
        let rows = m
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().filter(|(_, z)| **z != C64::new(0.0, 0.0)).map(|(j, z)| (j, *z)).collect())
            .collect();
        Self { rows }
    }

    /// out = self · x
    fn mul_dense(&self, x: &nd::Array2<C64>, out: &mut nd::Array2<C64>) {
        out.fill(C64::new(0.0, 0.0));
        for (i, row) in self.rows.iter().enumerate() {
            let mut out_row = out.row_mut(i);
            for &(k, v) in row {
                out_row.scaled_add(v, &x.row(k));
            }
        }
    }
}

/// dρ/dt = A + A† + Σ C ρ C†, with A = −i H_eff ρ and H_eff = H − (i/2) Σ C†C.
struct LindbladRhs {
    h_eff: Sparse,
    collapses: Vec<Sparse>,
    scratch: nd::Array2<C64>,
    scratch2: nd::Array2<C64>,
}

impl LindbladRhs {
    fn new(system: &OpenSystem) -> Self {
        let d = system.hamiltonian.dim();
        let mut h_eff = system.hamiltonian.matrix().clone();
        for c in &system.collapses {
            let cdc = c.dagger().dot(c);
            h_eff.scaled_add(C64::new(0.0, -0.5), cdc.matrix());
        }
        Self {
            h_eff: Sparse::from_dense(&h_eff),
            collapses: system.collapses.iter().map(|c| Sparse::from_dense(c.matrix())).collect(),
            scratch: nd::Array2::zeros((d, d)),
            scratch2: nd::Array2::zeros((d, d)),
        }
    }

    fn eval(&mut self, rho: &nd::Array2<C64>, out: &mut nd::Array2<C64>) {
        self.h_eff.mul_dense(rho, &mut self.scratch);
        // A = -i H_eff ρ ; out = A + A†
        let n = rho.nrows();
        for i in 0..n {
            for j in 0..n {
                let a_ij = self.scratch[[i, j]];
                let a_ji = self.scratch[[j, i]];
                out[[i, j]] = C64::new(a_ij.im, -a_ij.re) + C64::new(a_ji.im, -a_ji.re).conj();
            }
        }
        for c in &self.collapses {
            c.mul_dense(rho, &mut self.scratch);
            let adj = self.scratch.t().mapv(|z| z.conj());
            c.mul_dense(&adj, &mut self.scratch2);
            *out += &self.scratch2;
        }
    }
}

struct Recorder<'a> {
    observables: &'a [(String, Operator)],
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    diag: Diagnostics,
    accepted_since_eig: usize,
}

impl<'a> Recorder<'a> {
    fn new(observables: &'a [(String, Operator)]) -> Self {
        Self {
            observables,
            times: Vec::new(),
            values: vec![Vec::new(); observables.len()],
            diag: Diagnostics { min_eigenvalue: f64::INFINITY, ..Diagnostics::default() },
            accepted_since_eig: 0,
        }
    }

    fn record(&mut self, t: f64, rho: &nd::Array2<C64>, force_eig: bool) -> Result<()> {
        let state = DensityMatrix::from_matrix_unchecked(rho.clone());
        self.times.push(t);
        for (k, (_, op)) in self.observables.iter().enumerate() {
            self.values[k].push(expectation(&state, op)?.re);
        }
        let tr = state.trace();
        self.diag.max_trace_error = self.diag.max_trace_error.max((tr - 1.0).abs());
        self.diag.max_hermitian_error = self.diag.max_hermitian_error.max(hermitian_deviation(rho));
        self.accepted_since_eig += 1;
        if force_eig || self.accepted_since_eig >= EIG_CHECK_INTERVAL {
            self.accepted_since_eig = 0;
            let sym = DensityMatrix::from_matrix_unchecked(rho.clone()).hermitize_normalized();
            self.diag.min_eigenvalue = self.diag.min_eigenvalue.min(sym.min_eigenvalue()?);
        }
        Ok(())
    }

    fn finish(mut self, final_state: DensityMatrix) -> EvolutionResult {
        self.diag.flagged = self.diag.max_trace_error > crate::algebra::TRACE_TOL
            || self.diag.min_eigenvalue < crate::algebra::EIGEN_FLOOR;
        let observables = self
            .observables
            .iter()
            .zip(self.values)
            .map(|((name, _), values)| ObservableSeries { name: name.clone(), values })
            .collect();
        EvolutionResult { final_state, times: self.times, observables, diagnostics: self.diag }
    }
}

// Dormand–Prince 5(4) tableau
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

/// Integrate the Lindblad equation
/// `dρ/dt = −i[H, ρ] + Σ_k (C_k ρ C_k† − ½{C_k†C_k, ρ})` for `duration`.
///
/// Observables are recorded at t = 0 and after every accepted step.
pub fn evolve_lindblad(
    rho0: &DensityMatrix,
    system: &OpenSystem,
    duration: f64,
    settings: &IntegratorSettings,
    observables: &[(String, Operator)],
) -> Result<EvolutionResult> {
    system.check(rho0)?;
    settings.validate()?;
    if !(duration >= 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be >= 0, got {duration}")));
    }
    let mut rec = Recorder::new(observables);
    rec.record(0.0, rho0.matrix(), true)?;
    if duration == 0.0 {
        return Ok(rec.finish(rho0.clone()));
    }

    let mut rhs = LindbladRhs::new(system);
    let y = match settings.method {
        IntegratorMethod::FixedRk4 => integrate_rk4(&mut rhs, rho0, duration, settings, &mut rec)?,
        IntegratorMethod::AdaptiveRk45 => integrate_rk45(&mut rhs, rho0, duration, settings, &mut rec)?,
    };
    let final_state = DensityMatrix::from_matrix_unchecked(y);
    if let Some(space) = &system.space {
        check_truncation(&final_state, space)?;
    }
    Ok(rec.finish(final_state))
}

fn integrate_rk4(
    rhs: &mut LindbladRhs,
    rho0: &DensityMatrix,
    duration: f64,
    settings: &IntegratorSettings,
    rec: &mut Recorder<'_>,
) -> Result<nd::Array2<C64>> {
    let h_max = settings.max_step.unwrap_or(duration);
    let steps = (duration / h_max).ceil().max(1.0) as usize;
    if steps > settings.max_steps {
        return Err(Error::Integration { time: 0.0, reason: format!("{steps} steps exceed the step budget") });
    }
    let h = duration / steps as f64;
    let d = rho0.dim();
    let mut y = rho0.matrix().clone();
    let mut k: [nd::Array2<C64>; 4] = std::array::from_fn(|_| nd::Array2::zeros((d, d)));
    let mut tmp = nd::Array2::<C64>::zeros((d, d));
    let hc = C64::new(h, 0.0);
    for step in 0..steps {
        rhs.eval(&y, &mut k[0]);
        tmp.assign(&y);
        tmp.scaled_add(hc * 0.5, &k[0]);
        rhs.eval(&tmp, &mut k[1]);
        tmp.assign(&y);
        tmp.scaled_add(hc * 0.5, &k[1]);
        rhs.eval(&tmp, &mut k[2]);
        tmp.assign(&y);
        tmp.scaled_add(hc, &k[2]);
        rhs.eval(&tmp, &mut k[3]);
        y.scaled_add(hc / 6.0, &k[0]);
        y.scaled_add(hc / 3.0, &k[1]);
        y.scaled_add(hc / 3.0, &k[2]);
        y.scaled_add(hc / 6.0, &k[3]);
        rec.diag.steps += 1;
        rec.record((step + 1) as f64 * h, &y, step + 1 == steps)?;
    }
    Ok(y)
}

fn integrate_rk45(
    rhs: &mut LindbladRhs,
    rho0: &DensityMatrix,
    duration: f64,
    settings: &IntegratorSettings,
    rec: &mut Recorder<'_>,
) -> Result<nd::Array2<C64>> {
    let d = rho0.dim();
    let mut y = rho0.matrix().clone();
    let mut k: Vec<nd::Array2<C64>> = (0..7).map(|_| nd::Array2::zeros((d, d))).collect();
    let mut stage = nd::Array2::<C64>::zeros((d, d));
    let mut y5 = nd::Array2::<C64>::zeros((d, d));
    let h_max = settings.max_step.unwrap_or(duration).min(duration);

    rhs.eval(&y, &mut k[0]);
    let f0 = k[0].iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    let mut h = if f0 > 0.0 { (0.01 / f0).min(h_max) } else { h_max };
    let h_min = duration * 1e-14;
    let mut t = 0.0;
    let mut attempts = 0usize;

    while t < duration {
        attempts += 1;
        if attempts > settings.max_steps {
            return Err(Error::Integration { time: t, reason: "step budget exhausted".into() });
        }
        let last = t + h >= duration;
        if last {
            h = duration - t;
        }
        for s in 1..7 {
            stage.assign(&y);
            for (j, &a) in DP_A[s].iter().enumerate().take(s) {
                if a != 0.0 {
                    stage.scaled_add(C64::new(h * a, 0.0), &k[j]);
                }
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            rhs.eval(&stage, &mut tail[0]);
            let _ = DP_C[s];
        }
        // stage 6 was evaluated at the 5th-order solution (FSAL)
        y5.assign(&y);
        for (j, &b) in DP_B5.iter().enumerate() {
            if b != 0.0 {
                y5.scaled_add(C64::new(h * b, 0.0), &k[j]);
            }
        }
        let mut err = 0.0_f64;
        for idx in 0..d * d {
            let (i, j) = (idx / d, idx % d);
            let mut e = C64::new(0.0, 0.0);
            for (s, (&b5, &b4)) in DP_B5.iter().zip(DP_B4.iter()).enumerate() {
                e += k[s][[i, j]] * (b5 - b4);
            }
            let scale = settings.abs_tol + settings.rel_tol * y[[i, j]].norm().max(y5[[i, j]].norm());
            err = err.max((e * h).norm() / scale);
        }

        if err <= 1.0 {
            t = if last { duration } else { t + h };
            std::mem::swap(&mut y, &mut y5);
            k.swap(0, 6);
            rec.diag.steps += 1;
            rec.record(t, &y, t >= duration)?;
        } else {
            rec.diag.rejected_steps += 1;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = (h * factor).min(h_max);
        if h < h_min {
            return Err(Error::Integration { time: t, reason: format!("step size underflow ({h:e})") });
        }
    }
    Ok(y)
}

/// `ρ(t) = U ρ U†` with `U = exp(−iHt)` from the eigendecomposition of H.
pub fn evolve_unitary(
    rho0: &DensityMatrix,
    system: &OpenSystem,
    duration: f64,
    observables: &[(String, Operator)],
) -> Result<EvolutionResult> {
    system.check(rho0)?;
    if !system.is_closed() {
        return Err(Error::InvalidArgument("unitary propagation of a dissipative system".into()));
    }
    let mut rec = Recorder::new(observables);
    rec.record(0.0, rho0.matrix(), false)?;
    let final_state = if duration == 0.0 {
        rho0.clone()
    } else {
        let u = propagator(&system.hamiltonian, duration)?;
        conjugate(&u, rho0)
    };
    if let Some(space) = &system.space {
        check_truncation(&final_state, space)?;
    }
    rec.diag.steps = 1;
    rec.record(duration, final_state.matrix(), true)?;
    Ok(rec.finish(final_state))
}

/// Closed systems go through the exact propagator, open ones through the
/// Lindblad integrator.
pub fn evolve(
    rho0: &DensityMatrix,
    system: &OpenSystem,
    duration: f64,
    settings: &IntegratorSettings,
    observables: &[(String, Operator)],
) -> Result<EvolutionResult> {
    if system.is_closed() {
        evolve_unitary(rho0, system, duration, observables)
    } else {
        evolve_lindblad(rho0, system, duration, settings, observables)
    }
}

/// `exp(−iHt)`.
pub fn propagator(h: &Operator, t: f64) -> Result<Operator> {
    let eig = eig_hermitian(h)?;
    Operator::new(eig.reconstruct_with(|l| C64::from_polar(1.0, -l * t)))
}

/// `U ρ U†`, symmetrized and renormalized against roundoff.
pub fn conjugate(u: &Operator, rho: &DensityMatrix) -> DensityMatrix {
    let m = u.matrix().dot(rho.matrix()).dot(&u.matrix().t().mapv(|z| z.conj()));
    DensityMatrix::from_matrix_unchecked(m).hermitize_normalized()
}

/// A laser-driven transition between a fluorescing level (`S`, `S'`) and a
/// metastable one (`D`, `D'`), on the carrier or a motional sideband.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub ground: Level,
    pub excited: Level,
    pub sideband: SidebandRegime,
}

impl Transition {
    pub fn new(ground: Level, excited: Level, sideband: SidebandRegime) -> Result<Self> {
        if !ground.is_bright() || excited.is_bright() {
            return Err(Error::InvalidArgument(format!(
                "transition {ground} <-> {excited} must join an S level to a D level"
            )));
        }
        Ok(Self { ground, excited, sideband })
    }

    pub fn carrier(ground: Level, excited: Level) -> Result<Self> {
        Self::new(ground, excited, SidebandRegime::Carrier)
    }

    /// Fock level on the excited side for ground-side level `n`.
    pub fn partner(&self, n: usize) -> Option<usize> {
        let m = n as i64 + self.sideband.phonon_shift();
        (m >= 0).then_some(m as usize)
    }
}

/// A coherent pulse on `transition`: rotation `area` (π transfers the
/// calibration level completely) with laser phase `phase`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    pub transition: Transition,
    pub area: f64,
    pub phase: f64,
    /// Ground-side Fock level whose Rabi rate sets the pulse length.
    pub calibrate_n: usize,
}

impl Pulse {
    pub fn pi(transition: Transition, calibrate_n: usize) -> Self {
        Self { transition, area: PI, phase: 0.0, calibrate_n }
    }
}

/// `Ω_pulse (e^{iφ} |g⟩⟨e| ⊗ K + h.c.)` for the pulse's transition.
pub fn pulse_hamiltonian(
    cfg: &SystemConfig,
    transition: &Transition,
    order: CouplingOrder,
    phase: f64,
) -> Result<Operator> {
    let nf = cfg.fock_dim;
    let k = sideband_operator(-cfg.eta, transition.sideband, order, nf)?;
    let up = tensor(&sigma(transition.ground, transition.excited), &k).scale(C64::from_polar(cfg.omega_pulse, phase));
    Ok(&up + &up.dagger())
}

/// Length of `pulse` given the Rabi rate of its calibration level.
pub fn pulse_duration(cfg: &SystemConfig, pulse: &Pulse, order: CouplingOrder) -> Result<f64> {
    let nf = cfg.fock_dim;
    let n = pulse.calibrate_n;
    let m = pulse.transition.partner(n).filter(|&m| m < nf && n < nf).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "calibration level {n} has no {} partner in a {nf}-level truncation",
            pulse.transition.sideband.label()
        ))
    })?;
    let k = sideband_operator(-cfg.eta, pulse.transition.sideband, order, nf)?;
    let rate = cfg.omega_pulse * k.get(n, m).norm();
    if rate <= 0.0 {
        return Err(Error::InvalidArgument("pulse Rabi rate is zero".into()));
    }
    Ok(pulse.area / (2.0 * rate))
}

/// Apply `pulse` with the config's dissipation active during the pulse.
pub fn apply_pulse(state: &DensityMatrix, pulse: &Pulse, cfg: &SystemConfig) -> Result<DensityMatrix> {
    let space = cfg.space()?;
    let h = pulse_hamiltonian(cfg, &pulse.transition, cfg.order, pulse.phase)?;
    let t = pulse_duration(cfg, pulse, cfg.order)?;
    let system = OpenSystem::new(h, collapse_operators(cfg)?).guarded(space);
    Ok(evolve(state, &system, t, &cfg.integrator, &[])?.final_state)
}

/// π pulse on `transition`, timed for ground-side Fock level `calibrate_n`:
/// `t_π = π / (2 Ω_eff)`.
pub fn apply_pi_pulse(
    state: &DensityMatrix,
    transition: Transition,
    order: CouplingOrder,
    calibrate_n: usize,
    cfg: &SystemConfig,
) -> Result<DensityMatrix> {
    let cfg = SystemConfig { order, ..cfg.clone() };
    apply_pulse(state, &Pulse::pi(transition, calibrate_n), &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{annihilation, projector};

    fn two_level_probe(omega: f64) -> (OpenSystem, HilbertSpec) {
        let space = HilbertSpec::new(2).unwrap();
        let internal = &sigma(Level::S, Level::D) + &sigma(Level::D, Level::S);
        let h = tensor(&internal, &Operator::identity(2)).scale(C64::new(omega, 0.0));
        (OpenSystem::new(h, vec![]), space)
    }

    #[test]
    fn zero_duration_is_identity() {
        let (sys, space) = two_level_probe(1.0);
        let rho = DensityMatrix::basis(&space, Level::D, 0);
        let out = evolve_lindblad(&rho, &sys, 0.0, &IntegratorSettings::default(), &[]).unwrap();
        assert_eq!(out.final_state, rho);
        assert!(evolve_lindblad(&rho, &sys, -1.0, &IntegratorSettings::default(), &[]).is_err());
    }

    #[test]
    fn unitary_rabi_and_purity() {
        let omega = 3.0;
        let (sys, space) = two_level_probe(omega);
        let rho = DensityMatrix::basis(&space, Level::D, 0);
        let p_s = space.lift_internal(&projector(Level::S)).unwrap();
        let obs = vec![("p_s".to_string(), p_s)];
        let out = evolve_lindblad(&rho, &sys, 1.7, &IntegratorSettings::default(), &obs).unwrap();
        for (t, p) in out.times.iter().zip(&out.observables[0].values) {
            assert!((p - (omega * t).sin().powi(2)).abs() < 1e-6);
        }
        let exact = evolve(&rho, &sys, 1.7, &IntegratorSettings::default(), &[]).unwrap().final_state;
        assert!((exact.purity() - 1.0).abs() < 1e-8);
        let diff = (out.final_state.matrix() - exact.matrix()).iter().fold(0.0_f64, |m, z| m.max(z.norm()));
        assert!(diff < 1e-7);

        let tight = IntegratorSettings { rel_tol: 1e-10, abs_tol: 1e-12, ..Default::default() };
        let out = evolve_lindblad(&rho, &sys, 1.7, &tight, &[]).unwrap();
        assert!((out.final_state.purity() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn single_mode_decay() {
        let kappa: f64 = 0.35;
        let nf = 4;
        let a = annihilation(nf).unwrap().scale(C64::new((2.0 * kappa).sqrt(), 0.0));
        let sys = OpenSystem::new(Operator::zeros(nf), vec![a]);
        let mut m = nd::Array2::zeros((nf, nf));
        m[[1, 1]] = C64::new(1.0, 0.0);
        let rho = DensityMatrix::new(m).unwrap();
        let mut proj = nd::Array2::zeros((nf, nf));
        proj[[1, 1]] = C64::new(1.0, 0.0);
        let obs = vec![("p1".to_string(), Operator::new(proj).unwrap())];
        let out = evolve_lindblad(&rho, &sys, 5.0, &IntegratorSettings::default(), &obs).unwrap();
        for (t, p) in out.times.iter().zip(&out.observables[0].values) {
            assert!((p - (-2.0 * kappa * t).exp()).abs() < 1e-6);
        }
        assert!(out.diagnostics.max_trace_error < 1e-8);
        assert!(out.diagnostics.min_eigenvalue > -1e-9);
    }

    #[test]
    fn fixed_rk4_converges_at_fourth_order() {
        let omega = 2.0;
        let (sys, space) = two_level_probe(omega);
        let rho = DensityMatrix::basis(&space, Level::D, 0);
        let p_s = space.lift_internal(&projector(Level::S)).unwrap();
        let t = 2.0;
        let exact = (omega * t).sin().powi(2);
        let err = |h: f64| {
            let out = evolve_lindblad(&rho, &sys, t, &IntegratorSettings::fixed_rk4(h), &[]).unwrap();
            (expectation(&out.final_state, &p_s).unwrap().re - exact).abs()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn tolerance_validation() {
        let s = IntegratorSettings { rel_tol: 0.5, ..Default::default() };
        assert!(s.validate().is_err());
        let s = IntegratorSettings { method: IntegratorMethod::FixedRk4, max_step: None, ..Default::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn transitions_must_join_s_and_d() {
        assert!(Transition::carrier(Level::S, Level::SPrime).is_err());
        assert!(Transition::carrier(Level::D, Level::S).is_err());
        assert!(Transition::carrier(Level::SPrime, Level::DPrime).is_ok());
    }

    #[test]
    fn carrier_pi_pulse_transfers_d_to_s() {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 6;
        let space = cfg.space().unwrap();
        let rho = DensityMatrix::basis(&space, Level::D, 0);
        let tr = Transition::carrier(Level::S, Level::D).unwrap();
        let out = apply_pi_pulse(&rho, tr, CouplingOrder::FirstOrder, 0, &cfg).unwrap();
        assert!((out.matrix()[[space.index(Level::S, 0), space.index(Level::S, 0)]].re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bsb_pi_pulse_calibration() {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 6;
        let space = cfg.space().unwrap();
        let tr = Transition::new(Level::S, Level::DPrime, SidebandRegime::Bsb).unwrap();

        let rho = DensityMatrix::basis(&space, Level::S, 0);
        let out = apply_pi_pulse(&rho, tr, CouplingOrder::FirstOrder, 0, &cfg).unwrap();
        let i = space.index(Level::DPrime, 1);
        assert!((out.matrix()[[i, i]].re - 1.0).abs() < 1e-12);

        // same pulse on |S,1⟩ runs at √2 times the rate
        let rho = DensityMatrix::basis(&space, Level::S, 1);
        let out = apply_pi_pulse(&rho, tr, CouplingOrder::FirstOrder, 0, &cfg).unwrap();
        let i = space.index(Level::DPrime, 2);
        let expected = (PI * 2f64.sqrt() / 2.0).sin().powi(2);
        assert!((out.matrix()[[i, i]].re - expected).abs() < 1e-12);
        assert!((expected - 0.633).abs() < 1e-3);
    }

    #[test]
    fn pulse_calibration_outside_truncation() {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 4;
        let tr = Transition::new(Level::S, Level::D, SidebandRegime::Bsb).unwrap();
        assert!(pulse_duration(&cfg, &Pulse::pi(tr, 3), CouplingOrder::FirstOrder).is_err());
        let tr = Transition::new(Level::S, Level::D, SidebandRegime::Rsb).unwrap();
        assert!(pulse_duration(&cfg, &Pulse::pi(tr, 0), CouplingOrder::FirstOrder).is_err());
    }
}
