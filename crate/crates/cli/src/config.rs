//! Run configuration: a TOML document layered over a named preset, with
//! `--set` overrides. Frequencies are cyclic (Hz) in the file and angular
//! (rad/s) everywhere else.

use std::f64::consts::PI;
use std::path::Path;

use atphonon::dynamics::IntegratorSettings;
use atphonon::model::{omega_p_for_probe_time, CouplingOrder, SidebandRegime, SystemConfig, DEFAULT_PROBE_TIME};
use atphonon::sequence::{Branch, Demolition, DetectionModel, DetectionVariant, PulseOp};
use atphonon::spectroscopy::{
    FitOptions, InitialMotion, PeakModel, ScanPlan, SignalSource, DEFAULT_POINTS, DEFAULT_SHOTS,
};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

const TWO_PI: f64 = 2.0 * PI;

const BSB_PRESET: &str = r#"
[system]
eta = 0.0609
omega0 = 10050.0
nu = 1343300.0
delta_c = 1343300.0
probe_time = 0.0007
"#;

const RSB_PRESET: &str = r#"
[system]
eta = 0.0605
omega0 = 11080.0
nu = 1360000.0
delta_c = -1360000.0
probe_time = 0.0007
"#;

/// Pairs of keys that set the same quantity; a user value for one drops the
/// preset value of the other.
const ALTERNATIVES: [(&str, &str); 2] = [("omega0", "omega_c"), ("probe_time", "omega_p")];

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Bsb,
    Rsb,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: Option<u64>,
    pub system: SystemSection,
    pub integrator: IntegratorSettings,
    pub scan: ScanSection,
    pub fit: FitSection,
    pub detect: DetectSection,
    pub thermal: ThermalSection,
    pub scaling: ScalingSection,
    pub sequence: SequenceSection,
    pub output: OutputSection,
}

/// Physical parameters. Frequencies in Hz, rates in 1/s, phases in rad.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub eta: Option<f64>,
    pub eta_probe: Option<f64>,
    /// Ground-state sideband coupling η·Ω_C; alternative to `omega_c`.
    pub omega0: Option<f64>,
    pub omega_c: Option<f64>,
    pub omega_p: Option<f64>,
    /// Probe length that is a π pulse into one dressed state; alternative to `omega_p`.
    pub probe_time: Option<f64>,
    pub omega_pulse: Option<f64>,
    pub nu: Option<f64>,
    pub delta_c: Option<f64>,
    pub delta_p: Option<f64>,
    pub gamma_sd: Option<f64>,
    pub kappa: Option<f64>,
    pub n_th_env: Option<f64>,
    pub phi_p: Option<f64>,
    pub phi_c: Option<f64>,
    pub fock_dim: Option<usize>,
    pub order: Option<CouplingOrder>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    /// Hz; defaults to a symmetric grid around the doublet of `n_max`.
    pub detuning_min: Option<f64>,
    pub detuning_max: Option<f64>,
    pub n_points: Option<usize>,
    /// s
    pub probe_duration: Option<f64>,
    pub shots_per_point: Option<u64>,
    pub regime: Option<SidebandRegime>,
    pub fock: Option<usize>,
    pub n_bar: Option<f64>,
    pub n_max: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub model: PeakModel,
    pub source: SignalSource,
    pub pairs: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self { model: PeakModel::Gaussian, source: SignalSource::Counts, pairs: 1 }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemolitionKind {
    #[default]
    Preserve,
    ScrambleMotion,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    pub prepared: Vec<usize>,
    pub probed: Vec<usize>,
    pub variant: DetectionVariant,
    pub branch: Branch,
    pub shots: u64,
    pub eps_bright: f64,
    pub eps_dark: f64,
    pub demolition: DemolitionKind,
    pub n_bar_reset: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            prepared: (0..=8).collect(),
            probed: (0..=8).collect(),
            variant: DetectionVariant::Destructive,
            branch: Branch::Plus,
            shots: 100,
            eps_bright: 0.0,
            eps_dark: 0.0,
            demolition: DemolitionKind::Preserve,
            n_bar_reset: 0.0,
        }
    }
}

impl DetectSection {
    pub fn model(&self) -> DetectionModel {
        let demolition = match self.demolition {
            DemolitionKind::Preserve => Demolition::Preserve,
            DemolitionKind::ScrambleMotion => Demolition::ScrambleMotion { n_bar_reset: self.n_bar_reset },
        };
        DetectionModel { eps_bright: self.eps_bright, eps_dark: self.eps_dark, demolition }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThermalSection {
    pub n_bar: f64,
    pub n_max: Option<usize>,
}

impl Default for ThermalSection {
    fn default() -> Self {
        Self { n_bar: 0.81, n_max: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    pub n: Vec<usize>,
    pub regime: Option<SidebandRegime>,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self { n: (0..=5).collect(), regime: None }
    }
}

/// Pulse list for `run-sequence`; probe detunings are in Hz.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSection {
    pub ops: Vec<PulseOp>,
    pub shots: u64,
}

impl Default for SequenceSection {
    fn default() -> Self {
        Self { ops: Vec::new(), shots: 1 }
    }
}

impl SequenceSection {
    /// Ops with detunings converted to rad/s.
    pub fn angular_ops(&self) -> Vec<PulseOp> {
        fn convert(op: &PulseOp) -> PulseOp {
            match op {
                PulseOp::ProbePulse { duration, detuning, regime } => {
                    PulseOp::ProbePulse { duration: *duration, detuning: TWO_PI * detuning, regime: *regime }
                }
                PulseOp::BranchOnOutcome { on_bright, on_dark } => PulseOp::BranchOnOutcome {
                    on_bright: on_bright.iter().map(convert).collect(),
                    on_dark: on_dark.iter().map(convert).collect(),
                },
                other => other.clone(),
            }
        }
        self.ops.iter().map(convert).collect()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub format: OutputFormat,
}

/// A parsed configuration together with the fully merged table it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub table: Table,
}

impl LoadedConfig {
    /// Read `path` (if any), apply `overrides` (`key.path=value`), layer the
    /// result over its preset and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                // typed parse first so unknown keys and type errors carry a position
                toml::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        Self::from_table(user, overrides)
    }

    pub fn from_table(mut user: Table, overrides: &[String]) -> Result<Self, CliError> {
        for item in overrides {
            apply_override(&mut user, item)?;
        }
        let preset: Preset = match user.get("preset") {
            Some(v) => v.clone().try_into().map_err(|e| CliError::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut table: Table = toml::from_str(match preset {
            Preset::Bsb => BSB_PRESET,
            Preset::Rsb => RSB_PRESET,
        })
        .expect("built-in preset parses");
        table.insert("preset".into(), Value::String(format!("{preset:?}").to_lowercase()));

        if let (Some(Value::Table(base)), Some(Value::Table(mine))) = (table.get_mut("system"), user.get("system")) {
            for (a, b) in ALTERNATIVES {
                if mine.contains_key(a) && mine.contains_key(b) {
                    return Err(CliError::Config(format!("system.{a} and system.{b} set the same quantity; give one")));
                }
                if mine.contains_key(a) {
                    base.remove(b);
                }
                if mine.contains_key(b) {
                    base.remove(a);
                }
            }
        }
        merge(&mut table, user);
        let config = deserialize(&table)?;
        let loaded = Self { config, table };
        loaded.system()?;
        Ok(loaded)
    }

    /// Replace one value in the merged table and re-validate.
    pub fn set(&mut self, path: &str, value: Value) -> Result<(), CliError> {
        insert_path(&mut self.table, path, value)?;
        self.config = deserialize(&self.table)?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.config.seed.unwrap_or(1)
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string(&self.table).expect("config tables serialize")
    }

    pub fn system(&self) -> Result<SystemConfig, CliError> {
        let s = &self.config.system;
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| CliError::Config(format!("system.{name} is required")));
        let eta = need(s.eta, "eta")?;
        let omega_c = match (s.omega_c, s.omega0) {
            (Some(c), _) => TWO_PI * c,
            (None, Some(o)) if eta > 0.0 => TWO_PI * o / eta,
            (None, Some(_)) => {
                return Err(CliError::Config("system.omega0 needs eta > 0; give omega_c instead".into()))
            }
            (None, None) => return Err(CliError::Config("system.omega_c or system.omega0 is required".into())),
        };
        let omega_p = match (s.omega_p, s.probe_time) {
            (Some(p), _) => TWO_PI * p,
            (None, Some(t)) if t > 0.0 => omega_p_for_probe_time(t),
            (None, Some(t)) => return Err(CliError::Config(format!("system.probe_time must be positive, got {t}"))),
            (None, None) => omega_p_for_probe_time(DEFAULT_PROBE_TIME),
        };
        let cfg = SystemConfig {
            eta,
            eta_probe: s.eta_probe,
            omega_c,
            omega_p,
            omega_pulse: s.omega_pulse.map_or(omega_c, |v| TWO_PI * v),
            nu: TWO_PI * need(s.nu, "nu")?,
            delta_c: TWO_PI * need(s.delta_c, "delta_c")?,
            delta_p: TWO_PI * s.delta_p.unwrap_or(0.0),
            gamma_sd: s.gamma_sd.unwrap_or(0.0),
            kappa: s.kappa.unwrap_or(0.0),
            n_th_env: s.n_th_env.unwrap_or(0.0),
            phi_p: s.phi_p.unwrap_or(0.0),
            phi_c: s.phi_c.unwrap_or(0.0),
            fock_dim: s.fock_dim.unwrap_or(atphonon::model::DEFAULT_FOCK_DIM),
            order: s.order.unwrap_or_default(),
            integrator: self.config.integrator.clone(),
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Scan plan for `initial`, centered on the doublet of `n_max` unless the
    /// range is given explicitly.
    pub fn scan_plan(&self, cfg: &SystemConfig, initial: InitialMotion, n_max: usize) -> Result<ScanPlan, CliError> {
        let s = &self.config.scan;
        let regime = s.regime.unwrap_or_else(|| cfg.regime());
        let mut plan = ScanPlan::centered(cfg, regime, n_max, initial);
        match (s.detuning_min, s.detuning_max) {
            (Some(lo), Some(hi)) => {
                plan.detuning_min = TWO_PI * lo;
                plan.detuning_max = TWO_PI * hi;
            }
            (None, None) => {}
            _ => return Err(CliError::Config("scan.detuning_min and scan.detuning_max go together".into())),
        }
        plan.n_points = s.n_points.unwrap_or(DEFAULT_POINTS);
        plan.shots_per_point = s.shots_per_point.unwrap_or(DEFAULT_SHOTS);
        plan.probe_duration = s.probe_duration.unwrap_or(DEFAULT_PROBE_TIME);
        plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(plan)
    }

    /// Initial motion and grid level of the `spectrum` command.
    pub fn spectrum_motion(&self) -> Result<(InitialMotion, usize), CliError> {
        let s = &self.config.scan;
        match (s.fock, s.n_bar) {
            (Some(_), Some(_)) => Err(CliError::Config("scan.fock and scan.n_bar are exclusive".into())),
            (_, Some(n_bar)) => Ok((InitialMotion::Thermal(n_bar), s.n_max.unwrap_or(0))),
            (fock, None) => {
                let n = fock.unwrap_or(0);
                Ok((InitialMotion::Fock(n), s.n_max.unwrap_or(n)))
            }
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { model: self.config.fit.model, source: self.config.fit.source, ..FitOptions::default() }
    }
}

fn deserialize(table: &Table) -> Result<RunConfig, CliError> {
    Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let (key, raw) =
        item.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
    let raw = raw.trim();
    // bare words that are not TOML literals are taken as strings
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    insert_path(table, key.trim(), value)
}

fn insert_path(table: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key '{path}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("'{part}' in '{path}' is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_library_preset() {
        let cfg = LoadedConfig::from_table(Table::new(), &[]).unwrap().system().unwrap();
        assert_eq!(cfg, SystemConfig::bsb_preset());
        let rsb = LoadedConfig::from_table(Table::new(), &["preset=rsb".into()]).unwrap().system().unwrap();
        assert_eq!(rsb, SystemConfig::rsb_preset());
    }

    #[test]
    fn overrides_convert_hz() {
        let loaded =
            LoadedConfig::from_table(Table::new(), &["system.omega_c=1000".into(), "system.fock_dim=12".into()])
                .unwrap();
        let cfg = loaded.system().unwrap();
        assert_eq!(cfg.omega_c, TWO_PI * 1000.0);
        assert_eq!(cfg.fock_dim, 12);
        assert!(!loaded.table["system"].as_table().unwrap().contains_key("omega0"));
    }

    #[test]
    fn rejects_unknown_and_conflicting_keys() {
        assert!(LoadedConfig::from_table(Table::new(), &["system.omega_q=1".into()]).is_err());
        assert!(LoadedConfig::from_table(Table::new(), &["system.omega0=1".into(), "system.omega_c=2".into()]).is_err());
        assert!(LoadedConfig::from_table(Table::new(), &["nonsense".into()]).is_err());
        assert!(LoadedConfig::from_table(Table::new(), &["preset=carrier".into()]).is_err());
    }

    #[test]
    fn resolved_table_round_trips() {
        let loaded = LoadedConfig::from_table(Table::new(), &["seed=9".into(), "scan.fock=2".into()]).unwrap();
        let again = LoadedConfig::from_table(toml::from_str(&loaded.resolved_toml()).unwrap(), &[]).unwrap();
        assert_eq!(again.table, loaded.table);
        assert_eq!(again.system().unwrap(), loaded.system().unwrap());
        assert_eq!(again.seed(), 9);
    }
}
