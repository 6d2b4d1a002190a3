//! The subcommands. Each writes its outputs, then `resolved_config.toml` and
//! `manifest.json`; a failed fit still leaves the spectrum and manifest.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use atphonon::algebra::{DensityMatrix, Level};
use atphonon::model::{thermal_populations, SidebandRegime, SystemConfig};
use atphonon::sequence::{response_matrix, run_sequence, Outcome};
use atphonon::spectroscopy::{
    extract_scaling, fit_peaks_with, reconstruct_thermal_with, resolvability, scan_spectrum, FitResult, InitialMotion,
    ScalingFit, Spectrum,
};
use serde::Serialize;
use toml::Value;

use crate::config::{LoadedConfig, OutputFormat};
use crate::error::CliError;
use crate::output::{num, OutputDir};
use crate::Command;

const TWO_PI: f64 = 2.0 * PI;

pub fn execute(command: &Command, mut loaded: LoadedConfig, out: &Path) -> Result<(), CliError> {
    let mut dir = OutputDir::create(out)?;
    // the thermal command may enlarge the truncation; settle that first so
    // the echoed configuration is the one that ran
    if let Command::Thermal { .. } = command {
        prepare_thermal(&mut loaded)?;
    }
    dir.write_text("resolved_config.toml", &loaded.resolved_toml())?;
    let result = match command {
        Command::Spectrum { .. } => spectrum(&loaded, &mut dir),
        Command::Detect { .. } => detect(&loaded, &mut dir),
        Command::Thermal { .. } => thermal(&loaded, &mut dir),
        Command::Scaling { .. } => scaling(&loaded, &mut dir),
        Command::RunSequence => sequence(&loaded, &mut dir),
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => e.to_string(),
    };
    // a configuration error leaves nothing worth describing
    if !matches!(result, Err(CliError::Config(_))) {
        write_manifest(&mut dir, command.name(), &loaded, &status)?;
    }
    result
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    status: &'a str,
    config: &'a toml::Table,
    outputs: Vec<String>,
}

fn write_manifest(dir: &mut OutputDir, command: &str, loaded: &LoadedConfig, status: &str) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: "atphonon",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: loaded.seed(),
        status,
        config: &loaded.table,
        outputs: dir.files().to_vec(),
    };
    dir.write_json("manifest.json", &manifest)
}

fn format(loaded: &LoadedConfig) -> OutputFormat {
    loaded.config.output.format
}

#[derive(Serialize)]
struct SpectrumJson<'a> {
    detuning_hz: Vec<f64>,
    p_excited: &'a [f64],
    counts: &'a [u64],
    shots: u64,
    regime: SidebandRegime,
    probe_duration: f64,
}

fn write_spectrum(dir: &mut OutputDir, spec: &Spectrum, format: OutputFormat) -> Result<(), CliError> {
    match format {
        OutputFormat::Csv => {
            let rows: Vec<Vec<String>> = spec
                .detunings_hz()
                .iter()
                .zip(&spec.p_excited)
                .zip(&spec.counts)
                .map(|((d, p), k)| vec![num(*d), num(*p), k.to_string(), spec.shots.to_string()])
                .collect();
            dir.write_csv("spectrum.csv", &["detuning_hz", "p_excited", "counts", "shots"], &rows)
        }
        OutputFormat::Json => dir.write_json(
            "spectrum.json",
            &SpectrumJson {
                detuning_hz: spec.detunings_hz(),
                p_excited: &spec.p_excited,
                counts: &spec.counts,
                shots: spec.shots,
                regime: spec.regime,
                probe_duration: spec.probe_duration,
            },
        ),
    }
}

#[derive(Serialize)]
struct PeakJson {
    center_hz: f64,
    center_err_hz: f64,
    amplitude: f64,
    amplitude_err: f64,
    width_hz: f64,
    width_err_hz: f64,
}

#[derive(Serialize)]
struct FitJson {
    model: atphonon::spectroscopy::PeakModel,
    source: atphonon::spectroscopy::SignalSource,
    splitting_hz: f64,
    splitting_err_hz: f64,
    background: f64,
    background_err: f64,
    residual_norm: f64,
    resolved_peaks: usize,
    iterations: usize,
    peaks: Vec<PeakJson>,
}

impl From<&FitResult> for FitJson {
    fn from(f: &FitResult) -> Self {
        let mut peaks: Vec<PeakJson> = f
            .peaks()
            .iter()
            .map(|p| PeakJson {
                center_hz: p.center / TWO_PI,
                center_err_hz: p.center_err / TWO_PI,
                amplitude: p.amplitude,
                amplitude_err: p.amplitude_err,
                width_hz: p.width / TWO_PI,
                width_err_hz: p.width_err / TWO_PI,
            })
            .collect();
        // a merged pair is one peak at the origin
        peaks.dedup_by(|a, b| a.center_hz == 0.0 && b.center_hz == 0.0);
        Self {
            model: f.model,
            source: f.source,
            splitting_hz: f.splitting / TWO_PI,
            splitting_err_hz: f.splitting_err / TWO_PI,
            background: f.background,
            background_err: f.background_err,
            residual_norm: f.residual_norm,
            resolved_peaks: f.resolved_peaks,
            iterations: f.iterations,
            peaks,
        }
    }
}

fn spectrum(loaded: &LoadedConfig, dir: &mut OutputDir) -> Result<(), CliError> {
    let cfg = loaded.system()?;
    let (initial, n_max) = loaded.spectrum_motion()?;
    let plan = loaded.scan_plan(&cfg, initial, n_max)?;
    let spec = scan_spectrum(&plan, &cfg, loaded.seed())?;
    write_spectrum(dir, &spec, format(loaded))?;
    let fit = fit_peaks_with(&spec, loaded.config.fit.pairs, &loaded.fit_options())?;
    dir.write_json("fit.json", &FitJson::from(&fit))
}

#[derive(Serialize)]
struct ResponseJson<'a> {
    variant: atphonon::sequence::DetectionVariant,
    branch: atphonon::sequence::Branch,
    positive_outcome: Outcome,
    shots: u64,
    prepared: &'a [usize],
    probed: &'a [usize],
    /// `[prepared][probed]`
    probabilities: &'a [Vec<f64>],
    counts: &'a [Vec<u64>],
    diagonally_dominant: bool,
}

#[derive(Serialize)]
struct ShotJson {
    prepared: usize,
    probed: usize,
    shot: u64,
    outcome: Outcome,
}

fn detect(loaded: &LoadedConfig, dir: &mut OutputDir) -> Result<(), CliError> {
    let cfg = loaded.system()?;
    let d = &loaded.config.detect;
    if d.prepared.is_empty() || d.probed.is_empty() {
        return Err(CliError::Config("detect.prepared and detect.probed must be non-empty".into()));
    }
    let model = d.model();
    model.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let m = response_matrix(&d.prepared, &d.probed, d.branch, d.variant, &cfg, &model, d.shots, loaded.seed())?;
    dir.write_json(
        "response.json",
        &ResponseJson {
            variant: m.variant,
            branch: m.branch,
            positive_outcome: m.variant.positive(),
            shots: m.shots,
            prepared: &m.prepared,
            probed: &m.probed,
            probabilities: &m.probabilities,
            counts: &m.counts,
            diagonally_dominant: m.is_diagonally_dominant(),
        },
    )?;
    let mut shots = Vec::new();
    for (i, &n) in m.prepared.iter().enumerate() {
        for (j, &p) in m.probed.iter().enumerate() {
            for (k, &o) in m.outcomes[i][j].iter().enumerate() {
                shots.push(ShotJson { prepared: n, probed: p, shot: k as u64, outcome: o });
            }
        }
    }
    match format(loaded) {
        OutputFormat::Csv => {
            let label = |o: Outcome| if o == Outcome::Bright { "bright" } else { "dark" };
            let rows: Vec<Vec<String>> = shots
                .iter()
                .map(|s| {
                    vec![s.prepared.to_string(), s.probed.to_string(), s.shot.to_string(), label(s.outcome).into()]
                })
                .collect();
            dir.write_csv("shots.csv", &["prepared", "probed", "shot", "outcome"], &rows)
        }
        OutputFormat::Json => dir.write_json("shots.json", &shots),
    }
}

/// Population tolerated in the top two Fock levels of the initial thermal
/// state; the guard limit on the evolved state is larger.
const THERMAL_TAIL: f64 = 1e-7;

/// Enlarge the truncation for the thermal state and pick `n_max` if unset.
fn prepare_thermal(loaded: &mut LoadedConfig) -> Result<(), CliError> {
    let n_bar = loaded.config.thermal.n_bar;
    if n_bar.is_nan() || n_bar < 0.0 {
        return Err(CliError::Config(format!("thermal.n_bar must be >= 0, got {n_bar}")));
    }
    let cfg = loaded.system()?;
    let mut fock_dim = cfg.fock_dim;
    loop {
        let p = thermal_populations(n_bar, fock_dim)?;
        if p[fock_dim - 2] + p[fock_dim - 1] < THERMAL_TAIL {
            break;
        }
        fock_dim += 1;
    }
    // one spare level for the sideband partner of the top occupied level
    if fock_dim > cfg.fock_dim {
        fock_dim += 1;
        loaded.set("system.fock_dim", Value::Integer(fock_dim as i64))?;
        eprintln!("note: system.fock_dim raised to {fock_dim} for n_bar = {n_bar}");
    }
    if loaded.config.thermal.n_max.is_none() {
        let cfg = loaded.system()?;
        let regime = loaded.config.scan.regime.unwrap_or_else(|| cfg.regime());
        let duration = loaded.config.scan.probe_duration.unwrap_or(atphonon::model::DEFAULT_PROBE_TIME);
        // levels holding all but 1e-3 of the population, within the resolvable range
        let x = n_bar / (n_bar + 1.0);
        let mut n_max = 0;
        while x.powi(n_max as i32 + 1) > 1e-3 && n_max + 3 < cfg.fock_dim {
            n_max += 1;
        }
        let n_max = n_max.min(max_resolvable(&cfg, regime, duration, cfg.fock_dim - 3)).max(1);
        loaded.set("thermal.n_max", Value::Integer(n_max as i64))?;
    }
    Ok(())
}

fn max_resolvable(cfg: &SystemConfig, regime: SidebandRegime, duration: f64, limit: usize) -> usize {
    (0..=limit).take_while(|&k| resolvability(cfg, regime, k, duration).is_ok()).last().unwrap_or(0)
}

#[derive(Serialize)]
struct ThermalJson {
    n_bar_input: f64,
    n_max: usize,
    fock_dim: usize,
    n_bar_fit: f64,
    n_bar_mean: f64,
    populations: Vec<f64>,
    centers_hz: Vec<f64>,
    amplitudes: Vec<f64>,
    heights: Vec<f64>,
    width_hz: f64,
    background: f64,
    residual_norm: f64,
    /// Levels 0..k whose neighbouring peaks are all further apart than their width.
    resolvable_pairs: usize,
}

fn thermal(loaded: &LoadedConfig, dir: &mut OutputDir) -> Result<(), CliError> {
    let cfg = loaded.system()?;
    let t = &loaded.config.thermal;
    let n_max = t.n_max.expect("set by prepare_thermal");
    let plan = loaded.scan_plan(&cfg, InitialMotion::Thermal(t.n_bar), n_max)?;
    let spec = scan_spectrum(&plan, &cfg, loaded.seed())?;
    write_spectrum(dir, &spec, format(loaded))?;
    let r = reconstruct_thermal_with(&spec, &cfg, n_max, loaded.config.fit.source)?;
    let resolvable = max_resolvable(&cfg, plan.regime, plan.probe_duration, cfg.fock_dim.saturating_sub(3)) + 1;
    dir.write_json(
        "thermal.json",
        &ThermalJson {
            n_bar_input: t.n_bar,
            n_max,
            fock_dim: cfg.fock_dim,
            n_bar_fit: r.n_bar_fit,
            n_bar_mean: r.n_bar_mean,
            populations: r.populations.clone(),
            centers_hz: r.centers.iter().map(|c| c / TWO_PI).collect(),
            amplitudes: r.amplitudes.clone(),
            heights: r.heights.clone(),
            width_hz: r.width / TWO_PI,
            background: r.background,
            residual_norm: r.residual_norm,
            resolvable_pairs: resolvable,
        },
    )
}

#[derive(Serialize)]
struct ScalingRow {
    n: usize,
    splitting_hz: f64,
    sigma_hz: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    flag: Option<&'static str>,
}

#[derive(Serialize)]
struct ScalingFitJson {
    amplitude_hz: f64,
    amplitude_err_hz: f64,
    offset: usize,
    exponent: f64,
    max_ratio_deviation: f64,
    ratios: Vec<(usize, f64, f64)>,
}

#[derive(Serialize)]
struct ScalingJson {
    regime: SidebandRegime,
    points: Vec<ScalingRow>,
    fit: Option<ScalingFitJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

fn scaling(loaded: &LoadedConfig, dir: &mut OutputDir) -> Result<(), CliError> {
    let cfg = loaded.system()?;
    let s = &loaded.config.scaling;
    if s.n.is_empty() {
        return Err(CliError::Config("scaling.n must list at least one level".into()));
    }
    let regime = s.regime.unwrap_or_else(|| cfg.regime());
    if regime == SidebandRegime::Carrier {
        return Err(CliError::Config("scaling needs the bsb or rsb regime".into()));
    }
    let mut levels = s.n.clone();
    levels.sort_unstable();
    levels.dedup();

    let mut rows = Vec::new();
    let mut failure = None;
    for &n in &levels {
        if regime.n_eff(n) == 0 {
            rows.push(ScalingRow { n, splitting_hz: 0.0, sigma_hz: 0.0, flag: Some("no sideband coupling") });
            continue;
        }
        let mut level_cfg = loaded.clone();
        level_cfg.set("scan.regime", Value::String(regime.label().to_lowercase()))?;
        let plan = level_cfg.scan_plan(&cfg, InitialMotion::Fock(n), n)?;
        let spec = scan_spectrum(&plan, &cfg, loaded.seed().wrapping_add(n as u64))?;
        match fit_peaks_with(&spec, 1, &loaded.fit_options()) {
            Ok(fit) => rows.push(ScalingRow {
                n,
                splitting_hz: fit.splitting / TWO_PI,
                sigma_hz: fit.splitting_err / TWO_PI,
                flag: None,
            }),
            Err(e) => {
                failure.get_or_insert(CliError::Fit(format!("n = {n}: {e}")));
                rows.push(ScalingRow { n, splitting_hz: f64::NAN, sigma_hz: f64::NAN, flag: Some("fit failed") });
            }
        }
    }

    match format(loaded) {
        OutputFormat::Csv => {
            let table: Vec<Vec<String>> =
                rows.iter().map(|r| vec![r.n.to_string(), num(r.splitting_hz), num(r.sigma_hz)]).collect();
            dir.write_csv("scaling.csv", &["n", "splitting_hz", "sigma_hz"], &table)?;
        }
        OutputFormat::Json => dir.write_json("scaling_table.json", &rows)?,
    }

    let usable: BTreeMap<usize, (f64, f64)> =
        rows.iter().filter(|r| r.flag.is_none()).map(|r| (r.n, (r.splitting_hz, r.sigma_hz))).collect();
    let (fit, note) = if usable.len() >= 3 {
        let f: ScalingFit = extract_scaling(&usable, regime)?;
        let json = ScalingFitJson {
            amplitude_hz: f.amplitude,
            amplitude_err_hz: f.amplitude_err,
            offset: f.offset,
            exponent: f.exponent,
            max_ratio_deviation: f.max_ratio_deviation,
            ratios: f.points.iter().map(|p| (p.n, p.ratio, p.expected_ratio)).collect(),
        };
        (Some(json), None)
    } else {
        (None, Some(format!("{} usable level(s); the scaling fit needs 3", usable.len())))
    };
    dir.write_json("scaling.json", &ScalingJson { regime, points: rows, fit, note })?;
    failure.map_or(Ok(()), Err)
}

#[derive(Serialize)]
struct ShotRecordJson {
    shot: u64,
    seed: u64,
    outcomes: Vec<Outcome>,
    bright_probabilities: Vec<f64>,
    /// S, S', D, D'
    level_populations: Vec<f64>,
    fock_populations: Vec<f64>,
}

fn sequence(loaded: &LoadedConfig, dir: &mut OutputDir) -> Result<(), CliError> {
    let cfg = loaded.system()?;
    let s = &loaded.config.sequence;
    if s.ops.is_empty() {
        return Err(CliError::Config("sequence.ops is empty".into()));
    }
    let ops = s.angular_ops();
    let model = loaded.config.detect.model();
    let space = cfg.space()?;
    let initial = DensityMatrix::basis(&space, Level::S, 0);
    let mut records = Vec::new();
    for shot in 0..s.shots {
        let seed = loaded.seed().wrapping_add(shot);
        let r = run_sequence(&ops, &initial, &cfg, &model, seed)?;
        records.push(ShotRecordJson {
            shot,
            seed,
            outcomes: r.outcomes.clone(),
            bright_probabilities: r.bright_probabilities.clone(),
            level_populations: Level::ALL
                .iter()
                .map(|&l| r.post_state.level_population(&space, l))
                .collect::<Result<_, _>>()?,
            fock_populations: r.post_state.fock_populations(&space)?,
        });
    }
    dir.write_json("sequence.json", &records)
}
