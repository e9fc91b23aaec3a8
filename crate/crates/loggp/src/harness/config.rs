//! Experiment configuration: a versioned JSON schema covering the plant,
//! reference geometry, controller gains, GP settings, cohort, and rates.

use crate::control::{ControllerKind, Gains, ReferenceConfig};
use crate::gp::Hyperparameters;
use crate::human::{CohortRanges, PatientParams};
use crate::plant::{CartesianStage, PlantModel, TwoLinkArm};
use crate::tree::{RpropConfig, TreeConfig};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::HarnessError;

/// Environment variable overriding the output directory (the only
/// environment override the harness honors).
pub const OUT_DIR_ENV: &str = "LOGGP_OUT_DIR";

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub plant: PlantConfig,
    pub reference: ReferenceConfig,
    /// Reference repetitions per trial; trial length is this times the period.
    pub periods_per_trial: u32,
    /// Simulation/device rate (Hz); must be a multiple of the GP rate.
    pub device_rate_hz: u32,
    /// GP update and prediction rate (Hz).
    pub gp_rate_hz: u32,
    pub gains: GainTable,
    pub gp: GpSettings,
    pub cohort: CohortConfig,
    pub noise: NoiseSettings,
    /// Component-wise control clamp (N), the output force limitation.
    pub u_max: f64,
    /// Output directory; overridden by `LOGGP_OUT_DIR` and `--out`.
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            plant: PlantConfig::default(),
            reference: ReferenceConfig::default(),
            periods_per_trial: 5,
            device_rate_hz: 4000,
            gp_rate_hz: 200,
            gains: GainTable::default(),
            gp: GpSettings::default(),
            cohort: CohortConfig::default(),
            noise: NoiseSettings::default(),
            u_max: 40.0,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.device_rate_hz == 0 || self.gp_rate_hz == 0 {
            return fail("rates must be positive".into());
        }
        if self.device_rate_hz % self.gp_rate_hz != 0 {
            return fail(format!(
                "gp_rate_hz {} must divide device_rate_hz {}",
                self.gp_rate_hz, self.device_rate_hz
            ));
        }
        if self.periods_per_trial == 0 {
            return fail("periods_per_trial must be positive".into());
        }
        if !(self.u_max > 0.0) {
            return fail("u_max must be positive".into());
        }
        if self.gp.n_bar < 2 {
            return fail("n_bar must be at least 2".into());
        }
        if !(self.gp.overlap_ratio > 0.0 && self.gp.overlap_ratio < 1.0) {
            return fail("overlap_ratio must lie in (0, 1)".into());
        }
        if self.cohort.size == 0 {
            return fail("cohort size must be positive".into());
        }
        self.gp
            .tree_config(self.plant.dof(), self.trial_length())
            .map(|_| ())
            .map_err(|e| HarnessError::Config(format!("gp settings: {e}")))?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Trial length in seconds.
    pub fn trial_length(&self) -> f64 {
        f64::from(self.periods_per_trial) * self.reference.period
    }

    /// Device integration step (s).
    pub fn device_dt(&self) -> f64 {
        1.0 / f64::from(self.device_rate_hz)
    }

    /// GP tick interval (s).
    pub fn gp_tau(&self) -> f64 {
        1.0 / f64::from(self.gp_rate_hz)
    }

    /// Device steps per GP tick.
    pub fn substeps(&self) -> u32 {
        self.device_rate_hz / self.gp_rate_hz
    }

    /// Output directory precedence: explicit CLI path, then the
    /// `LOGGP_OUT_DIR` environment variable, then the config, then `./out`.
    pub fn resolve_out_dir(&self, cli: Option<PathBuf>) -> PathBuf {
        cli.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantConfig {
    CartesianStage {
        masses: [f64; 2],
        workspace_limit: [f64; 2],
    },
    TwoLinkArm {
        masses: [f64; 2],
        lengths: [f64; 2],
        gravity: f64,
        workspace_limit: [f64; 2],
    },
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self::CartesianStage { masses: [6.0, 4.0], workspace_limit: [0.20, 0.20] }
    }
}

impl PlantConfig {
    pub fn dof(&self) -> usize {
        2
    }

    pub fn build(&self) -> Box<dyn PlantModel> {
        match self {
            Self::CartesianStage { masses, workspace_limit } => Box::new(CartesianStage {
                masses: DVector::from_column_slice(masses),
                limit: DVector::from_column_slice(workspace_limit),
            }),
            Self::TwoLinkArm { masses, lengths, gravity, workspace_limit } => {
                Box::new(TwoLinkArm {
                    masses: *masses,
                    lengths: *lengths,
                    gravity: *gravity,
                    limit: DVector::from_column_slice(workspace_limit),
                })
            }
        }
    }
}

/// PD gains per controller variant (stock values from the study protocol).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainTable {
    pub low: Gains,
    pub high: Gains,
    pub gp: Gains,
    pub tuned: Gains,
}

impl Default for GainTable {
    fn default() -> Self {
        Self {
            low: ControllerKind::LowGain.default_gains(),
            high: ControllerKind::HighGain.default_gains(),
            gp: ControllerKind::Gp.default_gains(),
            tuned: ControllerKind::TunedPd.default_gains(),
        }
    }
}

impl GainTable {
    pub fn for_kind(&self, kind: ControllerKind) -> Gains {
        match kind {
            ControllerKind::LowGain => self.low,
            ControllerKind::HighGain => self.high,
            ControllerKind::Gp => self.gp,
            ControllerKind::TunedPd => self.tuned,
        }
    }
}

/// Whether a patient's learned model carries across their runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpPersistence {
    /// One model per patient, trained in the training-phase run and kept
    /// through the four test runs.
    Patient,
    /// A fresh model every run.
    Run,
}

/// Expected full ranges of the input blocks, used for initial lengthscales
/// (one half of the range per dimension).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRanges {
    pub q: f64,
    pub qdot: f64,
    pub qddot: f64,
    /// Range of the time input; zero means "use the trial length".
    pub t: f64,
}

impl Default for InputRanges {
    fn default() -> Self {
        Self { q: 0.2, qdot: 0.4, qddot: 4.0, t: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSettings {
    pub n_bar: usize,
    pub overlap_ratio: f64,
    pub rprop: RpropConfig,
    pub init_sigma_f: f64,
    pub init_sigma_on: f64,
    pub input_ranges: InputRanges,
    pub adapt: bool,
    pub freeze_noise: bool,
    pub persistence: GpPersistence,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            n_bar: 100,
            overlap_ratio: 0.1,
            rprop: RpropConfig::default(),
            init_sigma_f: 2.0,
            init_sigma_on: 0.5,
            input_ranges: InputRanges::default(),
            adapt: true,
            freeze_noise: false,
            persistence: GpPersistence::Patient,
        }
    }
}

impl GpSettings {
    /// Tree configuration for a `dof`-axis plant; initial lengthscales are
    /// half the configured input range per dimension.
    pub fn tree_config(&self, dof: usize, trial_length: f64) -> Result<TreeConfig, HarnessError> {
        let r = &self.input_ranges;
        let t_range = if r.t > 0.0 { r.t } else { trial_length };
        let mut lengthscales = Vec::with_capacity(3 * dof + 1);
        for range in [r.q, r.qdot, r.qddot] {
            lengthscales.extend(std::iter::repeat(0.5 * range).take(dof));
        }
        lengthscales.push(0.5 * t_range);
        let init_hyper = Hyperparameters::new(self.init_sigma_f, lengthscales, self.init_sigma_on)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let mut cfg = TreeConfig::new(init_hyper);
        cfg.n_bar = self.n_bar;
        cfg.overlap_ratio = self.overlap_ratio;
        cfg.adapt = self.adapt;
        cfg.freeze_noise = self.freeze_noise;
        cfg.rprop = self.rprop.clone();
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub size: usize,
    pub master_seed: u64,
    /// Sampling intervals for the synthetic cohort. The defaults here are the
    /// study's calibrated cohort (interaction forces sized so the compliant
    /// variants separate); `CohortRanges::default()` holds the wider baseline.
    pub ranges: CohortRanges,
    /// When set, patients are loaded from this JSON file instead of sampled.
    pub cohort_file: Option<PathBuf>,
    /// The fixed individual the tuned-gain controller was calibrated on.
    pub surrogate: PatientParams,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            size: 9,
            master_seed: 7,
            ranges: study_cohort_ranges(),
            cohort_file: None,
            surrogate: default_surrogate(),
        }
    }
}

/// Cohort intervals calibrated for the default study: moderate interaction
/// forces with proficiency-driven distortion diversity.
pub fn study_cohort_ranges() -> CohortRanges {
    CohortRanges {
        stiffness: (15.0, 40.0),
        damping: (1.0, 8.0),
        proficiency: (0.2, 0.95),
        perception_gain: (0.6, 1.1),
        fatigue_timescale: (60.0, 600.0),
        tremor_amplitude: (0.0, 0.5),
    }
}

/// The surrogate individual: firm, quick-fatiguing, and fairly proficient,
/// the profile the tuned PD gains are balanced for.
pub fn default_surrogate() -> PatientParams {
    PatientParams {
        stiffness: vec![180.0, 180.0],
        damping: vec![10.0, 10.0],
        proficiency: 0.85,
        perception_gain: 0.8,
        fatigue_timescale: 90.0,
        tremor_amplitude: 0.2,
        seed: 4242,
        tremor_seed: 4242,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    pub enabled: bool,
    pub sigma_q: f64,
    pub sigma_qdot: f64,
}

impl Default for NoiseSettings {
    fn default() -> Self {
        Self { enabled: true, sigma_q: 1e-5, sigma_qdot: 1e-3 }
    }
}
