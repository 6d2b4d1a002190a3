//! Pulse-sequence protocols: Fock-state preparation, single-shot
//! Autler–Townes phonon-number detection (destructive and non-demolition),
//! sequential search, and Fock-state creation from a non-demolition result.
//!
//! Fluorescence detection is a two-outcome instrument on the S manifold
//! projector with classical readout errors.

use std::f64::consts::FRAC_PI_2;

use ndarray as nd;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{check_truncation, DensityMatrix, HilbertSpec, Level, Operator};
use crate::dynamics::{
    apply_pulse, conjugate, evolve, propagator, pulse_duration, pulse_hamiltonian, OpenSystem, Pulse, Transition,
};
use crate::error::{Error, Result};
use crate::model::{
    build_rwa_hamiltonian, collapse_operators, doublet_center, probe_pi_time, thermal_density, SidebandRegime,
    SystemConfig,
};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Bright,
    Dark,
}

impl Outcome {
    pub fn flipped(self) -> Self {
        match self {
            Self::Bright => Self::Dark,
            Self::Dark => Self::Bright,
        }
    }
}

/// What fluorescence does to the motion.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Demolition {
    /// A scattering ion ends up with a thermal motional state of mean `n_bar_reset`.
    ScrambleMotion { n_bar_reset: f64 },
    #[default]
    Preserve,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionModel {
    /// Probability that a dark ion reads bright.
    pub eps_bright: f64,
    /// Probability that a bright ion reads dark.
    pub eps_dark: f64,
    pub demolition: Demolition,
}

/// Outcome probabilities and normalized conditional states of one detection.
#[derive(Clone, Debug)]
pub struct DetectionBranches {
    pub p_bright: f64,
    pub bright_state: Option<DensityMatrix>,
    pub dark_state: Option<DensityMatrix>,
}

impl DetectionBranches {
    pub fn probability(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Bright => self.p_bright,
            Outcome::Dark => 1.0 - self.p_bright,
        }
    }

    pub fn state(&self, outcome: Outcome) -> Option<&DensityMatrix> {
        match outcome {
            Outcome::Bright => self.bright_state.as_ref(),
            Outcome::Dark => self.dark_state.as_ref(),
        }
    }
}

impl DetectionModel {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("eps_bright", self.eps_bright), ("eps_dark", self.eps_dark)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if let Demolition::ScrambleMotion { n_bar_reset } = self.demolition {
            if !(n_bar_reset >= 0.0) {
                return Err(Error::InvalidArgument("n_bar_reset must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Split `rho` into the reported-bright and reported-dark branches.
    pub fn branches(&self, rho: &DensityMatrix, space: &HilbertSpec) -> Result<DetectionBranches> {
        self.validate()?;
        if rho.dim() != space.dim() {
            return Err(Error::DimensionMismatch { expected: space.dim(), got: rho.dim() });
        }
        let nf = space.fock_dim();
        let bright = |i: usize| Level::ALL[i / nf].is_bright();
        let m = rho.matrix();
        let lit =
            nd::Array2::from_shape_fn(
                m.dim(),
                |(i, j)| if bright(i) && bright(j) { m[[i, j]] } else { C64::new(0.0, 0.0) },
            );
        let unlit =
            nd::Array2::from_shape_fn(
                m.dim(),
                |(i, j)| if !bright(i) && !bright(j) { m[[i, j]] } else { C64::new(0.0, 0.0) },
            );
        let p_lit = lit.diag().sum().re.max(0.0);
        let p_unlit = unlit.diag().sum().re.max(0.0);

        let lit = match self.demolition {
            Demolition::Preserve => lit,
            Demolition::ScrambleMotion { n_bar_reset } if p_lit > 0.0 => {
                let internal = DensityMatrix::from_matrix_unchecked(lit).internal_reduced(space)?;
                DensityMatrix::product(&internal, &thermal_density(n_bar_reset, nf)?)?.into_inner()
            }
            Demolition::ScrambleMotion { .. } => lit,
        };

        let mix = |w_lit: f64, w_unlit: f64| -> (f64, Option<DensityMatrix>) {
            let p = w_lit * p_lit + w_unlit * p_unlit;
            if p <= 0.0 {
                return (0.0, None);
            }
            let m = lit.mapv(|z| z * w_lit) + unlit.mapv(|z| z * w_unlit);
            (p, Some(DensityMatrix::from_matrix_unchecked(m).hermitize_normalized()))
        };
        let (p_b, bright_state) = mix(1.0 - self.eps_dark, self.eps_bright);
        let (p_d, dark_state) = mix(self.eps_dark, 1.0 - self.eps_bright);
        let p_bright = p_b / (p_b + p_d);
        Ok(DetectionBranches { p_bright, bright_state, dark_state })
    }

    /// Draw one outcome and return it with the conditional state.
    pub fn sample(
        &self,
        rho: &DensityMatrix,
        space: &HilbertSpec,
        rng: &mut impl Rng,
    ) -> Result<(Outcome, f64, DensityMatrix)> {
        let br = self.branches(rho, space)?;
        let outcome = if rng.random::<f64>() < br.p_bright { Outcome::Bright } else { Outcome::Dark };
        let state = br.state(outcome).cloned().ok_or_else(|| Error::InvalidState("sampled an empty branch".into()))?;
        Ok((outcome, br.p_bright, state))
    }
}

#[derive(Clone, Debug)]
pub struct MeasurementRecord {
    pub outcomes: Vec<Outcome>,
    /// Bright probability at each detection, before sampling.
    pub bright_probabilities: Vec<f64>,
    pub post_state: DensityMatrix,
    pub shot_seed: u64,
}

impl MeasurementRecord {
    fn new(state: DensityMatrix, shot_seed: u64) -> Self {
        Self { outcomes: Vec::new(), bright_probabilities: Vec::new(), post_state: state, shot_seed }
    }

    fn detect(&mut self, detection: &DetectionModel, space: &HilbertSpec, rng: &mut impl Rng) -> Result<Outcome> {
        let (outcome, p, state) = detection.sample(&self.post_state, space, rng)?;
        self.outcomes.push(outcome);
        self.bright_probabilities.push(p);
        self.post_state = state;
        Ok(outcome)
    }

    pub fn last_outcome(&self) -> Option<Outcome> {
        self.outcomes.last().copied()
    }
}

/// How the D' population is handled before detection.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferVariant {
    /// Carrier π D' → S': a match fluoresces and the motion is lost.
    ToSPrime,
    /// Carrier π S ↔ D: a match stays dark and keeps its motional state.
    CarrierDs,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionVariant {
    #[default]
    Destructive,
    Qnd,
}

impl DetectionVariant {
    pub fn transfer(self) -> TransferVariant {
        match self {
            Self::Destructive => TransferVariant::ToSPrime,
            Self::Qnd => TransferVariant::CarrierDs,
        }
    }

    /// Outcome that signals "the probed Fock level is occupied".
    pub fn positive(self) -> Outcome {
        match self {
            Self::Destructive => Outcome::Bright,
            Self::Qnd => Outcome::Dark,
        }
    }
}

/// Which peak of the Autler–Townes doublet the probe addresses.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Plus,
    Minus,
}

impl Branch {
    pub fn sign(self) -> f64 {
        match self {
            Self::Plus => 1.0,
            Self::Minus => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionInit {
    Fock(usize),
    Thermal(f64),
}

/// One step of a pulse sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PulseOp {
    /// Ideal reset to |level⟩ ⊗ motion.
    Initialize {
        level: Level,
        motion: MotionInit,
    },
    PiPulse {
        transition: Transition,
        calibrate_n: usize,
    },
    /// Arbitrary rotation on a transition.
    Rotation {
        transition: Transition,
        area: f64,
        phase: f64,
        calibrate_n: usize,
    },
    /// Probe on S ↔ D at `detuning` for `duration`; the coupling field is on
    /// in `regime`, or off when absent.
    ProbePulse {
        duration: f64,
        detuning: f64,
        regime: Option<SidebandRegime>,
    },
    Detect,
    TransferStep {
        variant: TransferVariant,
    },
    /// Continue with one of two sub-sequences depending on the last outcome.
    BranchOnOutcome {
        on_bright: Vec<PulseOp>,
        on_dark: Vec<PulseOp>,
    },
}

impl PulseOp {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::ProbePulse { duration, .. } if !(*duration > 0.0) => {
                Err(Error::InvalidArgument(format!("probe duration must be positive, got {duration}")))
            }
            Self::BranchOnOutcome { on_bright, on_dark } => {
                on_bright.iter().chain(on_dark).try_for_each(Self::validate)
            }
            _ => Ok(()),
        }
    }
}

/// Seeded generator for one shot.
pub fn shot_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn carrier_ds() -> Transition {
    Transition { ground: Level::S, excited: Level::D, sideband: SidebandRegime::Carrier }
}

fn carrier_spdp() -> Transition {
    Transition { ground: Level::SPrime, excited: Level::DPrime, sideband: SidebandRegime::Carrier }
}

/// Probe pulse on S ↔ D with the coupling field on in `regime` (or off).
pub fn probe_pulse(
    state: &DensityMatrix,
    duration: f64,
    detuning: f64,
    regime: Option<SidebandRegime>,
    cfg: &SystemConfig,
) -> Result<DensityMatrix> {
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("probe duration must be positive, got {duration}")));
    }
    let system = probe_system(detuning, regime, cfg)?;
    Ok(evolve(state, &system, duration, &cfg.integrator, &[])?.final_state)
}

/// Generator of the probe step at `detuning`, with the coupling field on in
/// `regime` or off for `None`.
pub fn probe_system(detuning: f64, regime: Option<SidebandRegime>, cfg: &SystemConfig) -> Result<OpenSystem> {
    let mut probe_cfg = cfg.clone();
    probe_cfg.delta_p = detuning;
    let regime = match regime {
        Some(r) => {
            probe_cfg.delta_c = cfg.delta_c - cfg.regime().resonant_detuning(cfg.nu) + r.resonant_detuning(cfg.nu);
            r
        }
        None => {
            probe_cfg.omega_c = 0.0;
            cfg.regime()
        }
    };
    let h = build_rwa_hamiltonian(&probe_cfg, regime, cfg.order)?;
    Ok(OpenSystem::new(h, collapse_operators(cfg)?).guarded(cfg.space()?))
}

pub fn transfer(
    state: &DensityMatrix,
    variant: TransferVariant,
    calibrate_n: usize,
    cfg: &SystemConfig,
) -> Result<DensityMatrix> {
    let transition = match variant {
        TransferVariant::ToSPrime => carrier_spdp(),
        TransferVariant::CarrierDs => carrier_ds(),
    };
    apply_pulse(state, &Pulse::pi(transition, calibrate_n), cfg)
}

/// How BSB π times are chosen while climbing the Fock ladder.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderCalibration {
    /// Each BSB π pulse is timed for the level it starts from.
    #[default]
    PerRung,
    /// Every pulse uses the Rabi rate of one fixed level.
    Fixed(usize),
}

/// Climb from |S,0⟩ to |S,n⟩ with alternating S ↔ D blue-sideband and
/// carrier π pulses. With `herald`, the ion is detected after every sideband
/// pulse and the run stops on a bright result. Returns the record and whether
/// the preparation completed.
pub fn prepare_fock(
    n: usize,
    cfg: &SystemConfig,
    herald: bool,
    detection: &DetectionModel,
    rng_seed: u64,
) -> Result<(MeasurementRecord, bool)> {
    prepare_fock_with(n, cfg, herald, LadderCalibration::PerRung, detection, rng_seed)
}

pub fn prepare_fock_with(
    n: usize,
    cfg: &SystemConfig,
    herald: bool,
    calibration: LadderCalibration,
    detection: &DetectionModel,
    rng_seed: u64,
) -> Result<(MeasurementRecord, bool)> {
    let space = cfg.space()?;
    if n + 2 >= cfg.fock_dim {
        return Err(Error::InvalidArgument(format!("Fock level {n} too close to the truncation {}", cfg.fock_dim)));
    }
    let mut rng = shot_rng(rng_seed);
    let mut record = MeasurementRecord::new(DensityMatrix::basis(&space, Level::S, 0), rng_seed);
    let bsb = Transition { ground: Level::S, excited: Level::D, sideband: SidebandRegime::Bsb };
    for k in 0..n {
        let cal = match calibration {
            LadderCalibration::PerRung => k,
            LadderCalibration::Fixed(m) => m,
        };
        record.post_state = apply_pulse(&record.post_state, &Pulse::pi(bsb, cal), cfg)?;
        if herald && record.detect(detection, &space, &mut rng)? == Outcome::Bright {
            return Ok((record, false));
        }
        record.post_state = apply_pulse(&record.post_state, &Pulse::pi(carrier_ds(), k + 1), cfg)?;
    }
    Ok((record, true))
}

/// State just before the detection of [`detect_fock`]: probe π pulse on the
/// `branch` peak of Fock level `probe_n`, then the variant's transfer pulse.
pub fn probe_and_transfer(
    state: &DensityMatrix,
    probe_n: usize,
    branch: Branch,
    variant: DetectionVariant,
    cfg: &SystemConfig,
) -> Result<DensityMatrix> {
    FockProbe::new(probe_n, branch, variant, cfg)?.apply(state)
}

/// Exact probability that a single detection of `probe_n` is positive.
pub fn positive_probability(
    state: &DensityMatrix,
    probe_n: usize,
    branch: Branch,
    variant: DetectionVariant,
    cfg: &SystemConfig,
    detection: &DetectionModel,
) -> Result<f64> {
    let pre = probe_and_transfer(state, probe_n, branch, variant, cfg)?;
    let br = detection.branches(&pre, &cfg.space()?)?;
    Ok(br.probability(variant.positive()))
}

/// Single-shot test of whether the ion occupies Fock level `probe_n`.
/// `state` should have its population in D.
pub fn detect_fock(
    state: &DensityMatrix,
    probe_n: usize,
    branch: Branch,
    variant: DetectionVariant,
    cfg: &SystemConfig,
    detection: &DetectionModel,
    rng_seed: u64,
) -> Result<MeasurementRecord> {
    let mut rng = shot_rng(rng_seed);
    detect_fock_with_rng(state, probe_n, branch, variant, cfg, detection, rng_seed, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn detect_fock_with_rng(
    state: &DensityMatrix,
    probe_n: usize,
    branch: Branch,
    variant: DetectionVariant,
    cfg: &SystemConfig,
    detection: &DetectionModel,
    rng_seed: u64,
    rng: &mut impl Rng,
) -> Result<MeasurementRecord> {
    let pre = probe_and_transfer(state, probe_n, branch, variant, cfg)?;
    let mut record = MeasurementRecord::new(pre, rng_seed);
    record.detect(detection, &cfg.space()?, rng)?;
    Ok(record)
}

/// A detection of one Fock level, with the probe and transfer propagator
/// precomputed when the system is closed.
#[derive(Clone, Debug)]
pub struct FockProbe {
    pub probe_n: usize,
    pub branch: Branch,
    pub variant: DetectionVariant,
    cfg: SystemConfig,
    unitary: Option<Operator>,
}

impl FockProbe {
    pub fn new(probe_n: usize, branch: Branch, variant: DetectionVariant, cfg: &SystemConfig) -> Result<Self> {
        let mut probe = Self { probe_n, branch, variant, cfg: cfg.clone(), unitary: None };
        if !cfg.has_dissipation() {
            let (h_probe, t_probe) = probe.probe_hamiltonian()?;
            let pulse = Pulse::pi(probe.transfer_transition(), probe_n);
            let h_transfer = pulse_hamiltonian(cfg, &pulse.transition, cfg.order, pulse.phase)?;
            let t_transfer = pulse_duration(cfg, &pulse, cfg.order)?;
            let u = propagator(&h_transfer, t_transfer)?.dot(&propagator(&h_probe, t_probe)?);
            probe.unitary = Some(u);
        }
        Ok(probe)
    }

    fn probe_hamiltonian(&self) -> Result<(Operator, f64)> {
        let cfg = &self.cfg;
        let regime = cfg.regime();
        let reach = self.probe_n as i64 + regime.phonon_shift().max(0);
        if reach + 1 >= cfg.fock_dim as i64 {
            return Err(Error::InvalidArgument(format!(
                "probed level {} has no partner inside the {}-level truncation",
                self.probe_n, cfg.fock_dim
            )));
        }
        let mut probe_cfg = cfg.clone();
        probe_cfg.delta_p = self.branch.sign() * doublet_center(cfg, regime, self.probe_n)?;
        let h = build_rwa_hamiltonian(&probe_cfg, regime, cfg.order)?;
        Ok((h, probe_pi_time(cfg, self.probe_n)?))
    }

    fn transfer_transition(&self) -> Transition {
        match self.variant.transfer() {
            TransferVariant::ToSPrime => carrier_spdp(),
            TransferVariant::CarrierDs => carrier_ds(),
        }
    }

    /// State just before detection.
    pub fn apply(&self, state: &DensityMatrix) -> Result<DensityMatrix> {
        let space = self.cfg.space()?;
        match &self.unitary {
            Some(u) => {
                if state.dim() != u.dim() {
                    return Err(Error::DimensionMismatch { expected: u.dim(), got: state.dim() });
                }
                let out = conjugate(u, state);
                check_truncation(&out, &space)?;
                Ok(out)
            }
            None => {
                let (h, t) = self.probe_hamiltonian()?;
                let system = OpenSystem::new(h, collapse_operators(&self.cfg)?).guarded(space);
                let probed = evolve(state, &system, t, &self.cfg.integrator, &[])?.final_state;
                transfer(&probed, self.variant.transfer(), self.probe_n, &self.cfg)
            }
        }
    }
}

/// Candidate-by-candidate search on a single ion, reusable across shots.
#[derive(Clone, Debug)]
pub struct SequentialSearch {
    probes: Vec<FockProbe>,
    reinit: Vec<Option<Operator>>,
    variant: DetectionVariant,
    cfg: SystemConfig,
}

impl SequentialSearch {
    pub fn new(candidates: &[usize], variant: DetectionVariant, cfg: &SystemConfig) -> Result<Self> {
        let probes =
            candidates.iter().map(|&m| FockProbe::new(m, Branch::Plus, variant, cfg)).collect::<Result<Vec<_>>>()?;
        let reinit = candidates
            .iter()
            .map(|&m| {
                if cfg.has_dissipation() || variant != DetectionVariant::Qnd {
                    return Ok(None);
                }
                let pulse = Pulse::pi(carrier_ds(), m);
                let h = pulse_hamiltonian(cfg, &pulse.transition, cfg.order, 0.0)?;
                Ok(Some(propagator(&h, pulse_duration(cfg, &pulse, cfg.order)?)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { probes, reinit, variant, cfg: cfg.clone() })
    }

    /// Returns the first positive candidate (if any) and the record.
    pub fn run(
        &self,
        state: &DensityMatrix,
        detection: &DetectionModel,
        rng_seed: u64,
    ) -> Result<(Option<usize>, MeasurementRecord)> {
        let space = self.cfg.space()?;
        let mut rng = shot_rng(rng_seed);
        let mut record = MeasurementRecord::new(state.clone(), rng_seed);
        for (probe, reinit) in self.probes.iter().zip(&self.reinit) {
            record.post_state = probe.apply(&record.post_state)?;
            let outcome = record.detect(detection, &space, &mut rng)?;
            if outcome == self.variant.positive() {
                return Ok((Some(probe.probe_n), record));
            }
            if self.variant == DetectionVariant::Qnd {
                record.post_state = match reinit {
                    Some(u) => conjugate(u, &record.post_state),
                    None => apply_pulse(&record.post_state, &Pulse::pi(carrier_ds(), probe.probe_n), &self.cfg)?,
                };
            }
        }
        Ok((None, record))
    }
}

/// Test `candidates` in order on the same ion until one is positive.
///
/// After a negative non-demolition test the ion is bright in S; a carrier π
/// pulse returns it to D before the next candidate.
pub fn sequential_search(
    state: &DensityMatrix,
    candidates: &[usize],
    variant: DetectionVariant,
    cfg: &SystemConfig,
    detection: &DetectionModel,
    rng_seed: u64,
) -> Result<(Option<usize>, MeasurementRecord)> {
    SequentialSearch::new(candidates, variant, cfg)?.run(state, detection, rng_seed)
}

#[derive(Clone, Debug)]
pub struct FockCreation {
    pub state: DensityMatrix,
    pub fock_populations: Vec<f64>,
}

/// Map the non-demolition superposition of |D,n⟩ and |D',n±1⟩ onto a single
/// motional level: a sideband π pulse D',n±1 → S,n followed by a carrier
/// π/2 pulse on S ↔ D with laser phase `pi2_phase`.
pub fn create_fock_post_measurement(
    state: &DensityMatrix,
    n: usize,
    cfg: &SystemConfig,
    pi2_phase: f64,
) -> Result<FockCreation> {
    let space = cfg.space()?;
    let regime = cfg.regime();
    if regime == SidebandRegime::Carrier {
        return Err(Error::InvalidArgument("Fock creation needs a sideband coupling regime".into()));
    }
    let sideband = Transition { ground: Level::S, excited: Level::DPrime, sideband: regime };
    match sideband.partner(n) {
        Some(m) if m + 1 < cfg.fock_dim && n + 1 < cfg.fock_dim => {}
        _ => {
            return Err(Error::InvalidArgument(format!(
                "Fock level {n} has no sideband partner inside the {}-level truncation",
                cfg.fock_dim
            )))
        }
    }
    let after_pi = apply_pulse(state, &Pulse::pi(sideband, n), cfg)?;
    let half = Pulse { transition: carrier_ds(), area: FRAC_PI_2, phase: pi2_phase, calibrate_n: n };
    let out = apply_pulse(&after_pi, &half, cfg)?;
    let fock_populations = out.fock_populations(&space)?;
    Ok(FockCreation { state: out, fock_populations })
}

/// Result of running a [`PulseOp`] list.
pub type SequenceOutcome = MeasurementRecord;

/// Interpret `ops` starting from `initial`, with one random stream per run.
pub fn run_sequence(
    ops: &[PulseOp],
    initial: &DensityMatrix,
    cfg: &SystemConfig,
    detection: &DetectionModel,
    rng_seed: u64,
) -> Result<SequenceOutcome> {
    let space = cfg.space()?;
    let mut rng = shot_rng(rng_seed);
    let mut record = MeasurementRecord::new(initial.clone(), rng_seed);
    run_ops(ops, &mut record, cfg, detection, &space, &mut rng)?;
    Ok(record)
}

fn run_ops(
    ops: &[PulseOp],
    record: &mut MeasurementRecord,
    cfg: &SystemConfig,
    detection: &DetectionModel,
    space: &HilbertSpec,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for op in ops {
        op.validate()?;
        match op {
            PulseOp::Initialize { level, motion } => {
                let motion = match motion {
                    MotionInit::Fock(n) => {
                        if *n >= cfg.fock_dim {
                            return Err(Error::InvalidArgument(format!("Fock level {n} outside truncation")));
                        }
                        let mut m = nd::Array2::zeros((cfg.fock_dim, cfg.fock_dim));
                        m[[*n, *n]] = C64::new(1.0, 0.0);
                        DensityMatrix::new(m)?
                    }
                    MotionInit::Thermal(n_bar) => thermal_density(*n_bar, cfg.fock_dim)?,
                };
                record.post_state = DensityMatrix::with_level(*level, &motion)?;
            }
            PulseOp::PiPulse { transition, calibrate_n } => {
                let t = Transition::new(transition.ground, transition.excited, transition.sideband)?;
                record.post_state = apply_pulse(&record.post_state, &Pulse::pi(t, *calibrate_n), cfg)?;
            }
            PulseOp::Rotation { transition, area, phase, calibrate_n } => {
                let t = Transition::new(transition.ground, transition.excited, transition.sideband)?;
                let pulse = Pulse { transition: t, area: *area, phase: *phase, calibrate_n: *calibrate_n };
                record.post_state = apply_pulse(&record.post_state, &pulse, cfg)?;
            }
            PulseOp::ProbePulse { duration, detuning, regime } => {
                record.post_state = probe_pulse(&record.post_state, *duration, *detuning, *regime, cfg)?;
            }
            PulseOp::Detect => {
                record.detect(detection, space, rng)?;
            }
            PulseOp::TransferStep { variant } => {
                record.post_state = transfer(&record.post_state, *variant, 0, cfg)?;
            }
            PulseOp::BranchOnOutcome { on_bright, on_dark } => {
                let last = record
                    .last_outcome()
                    .ok_or_else(|| Error::InvalidArgument("branch before any detection".into()))?;
                let branch = if last == Outcome::Bright { on_bright } else { on_dark };
                run_ops(branch, record, cfg, detection, space, rng)?;
            }
        }
    }
    Ok(())
}

/// P(positive | prepared n, probed m) for ideal Fock inputs |D,n⟩, with a
/// sampled shot record per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    pub prepared: Vec<usize>,
    pub probed: Vec<usize>,
    pub variant: DetectionVariant,
    pub branch: Branch,
    /// `[prepared][probed]`
    pub probabilities: Vec<Vec<f64>>,
    /// Positive outcomes per cell out of `shots`.
    pub counts: Vec<Vec<u64>>,
    pub shots: u64,
    /// Per-cell outcome of every shot, `[prepared][probed][shot]`.
    #[serde(skip)]
    pub outcomes: Vec<Vec<Vec<Outcome>>>,
}

impl ResponseMatrix {
    /// Each diagonal entry exceeds the sum of the other entries in its row.
    /// Only rows whose prepared level is also probed are checked.
    pub fn is_diagonally_dominant(&self) -> bool {
        self.prepared.iter().enumerate().all(|(i, n)| match self.probed.iter().position(|m| m == n) {
            Some(j) => {
                let row = &self.probabilities[i];
                let off: f64 = row.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, p)| p.abs()).sum();
                row[j] > off
            }
            None => true,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn response_matrix(
    prepared: &[usize],
    probed: &[usize],
    branch: Branch,
    variant: DetectionVariant,
    cfg: &SystemConfig,
    detection: &DetectionModel,
    shots: u64,
    rng_seed: u64,
) -> Result<ResponseMatrix> {
    if prepared.is_empty() || probed.is_empty() {
        return Err(Error::InvalidArgument("prepared and probed level lists must be non-empty".into()));
    }
    let space = cfg.space()?;
    if let Some(&n) = prepared.iter().find(|&&n| n + 2 >= cfg.fock_dim) {
        return Err(Error::InvalidArgument(format!("prepared level {n} too close to the truncation {}", cfg.fock_dim)));
    }
    let probes = probed.par_iter().map(|&m| FockProbe::new(m, branch, variant, cfg)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..prepared.len()).flat_map(|i| (0..probed.len()).map(move |j| (i, j))).collect();
    let results = cells
        .par_iter()
        .map(|&(i, j)| -> Result<(f64, Vec<Outcome>)> {
            let state = DensityMatrix::basis(&space, Level::D, prepared[i]);
            let pre = probes[j].apply(&state)?;
            let p = detection.branches(&pre, &space)?.probability(variant.positive());
            let mut rng = shot_rng(rng_seed);
            rng.set_stream((i * probed.len() + j) as u64);
            let outcomes = (0..shots)
                .map(|_| if rng.random::<f64>() < p { variant.positive() } else { variant.positive().flipped() })
                .collect();
            Ok((p, outcomes))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut probabilities = vec![vec![0.0; probed.len()]; prepared.len()];
    let mut counts = vec![vec![0; probed.len()]; prepared.len()];
    let mut outcomes = vec![vec![Vec::new(); probed.len()]; prepared.len()];
    for (&(i, j), (p, o)) in cells.iter().zip(results) {
        probabilities[i][j] = p;
        counts[i][j] = o.iter().filter(|&&x| x == variant.positive()).count() as u64;
        outcomes[i][j] = o;
    }
    Ok(ResponseMatrix {
        prepared: prepared.to_vec(),
        probed: probed.to_vec(),
        variant,
        branch,
        probabilities,
        counts,
        shots,
        outcomes,
    })
}

/// Rotation angle that leaves a fraction `p` of the calibration level transferred.
pub fn area_for_transfer(p: f64) -> f64 {
    2.0 * p.clamp(0.0, 1.0).sqrt().asin()
}
