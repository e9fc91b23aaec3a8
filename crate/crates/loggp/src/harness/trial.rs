//! One closed-loop trial: the plant stepped at device rate, the learner
//! updated and queried at GP rate, the control law reassembled every device
//! step with the GP feedforward held between ticks.

use crate::control::{assemble_control, ctc_torque, pd_torque, ControllerKind, ReferencePath};
use crate::human::{PatientField, PatientParams};
use crate::plant::{
    forward_accel, pack_x, residual_sample, PlantError, PlantState, SensorEmulator,
};
use crate::tree::VectorPredictor;
use nalgebra::DVector;
use serde::Serialize;
use std::time::Instant;

use super::config::ExperimentConfig;
use super::HarnessError;

/// Seed salt for the sensor emulator, so measurement noise and tree routing
/// never share a random stream.
const SENSOR_SALT: u64 = 0x53454e534f52; // "SENSOR"

/// Everything logged at one GP tick.
#[derive(Debug, Clone)]
pub struct TickRecord {
    pub t: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub qddot: Vec<f64>,
    pub q_ref: Vec<f64>,
    /// Applied control at sampling time (post-clamp).
    pub u: Vec<f64>,
    pub u_ctc: Vec<f64>,
    pub u_pd: Vec<f64>,
    pub u_gp: Vec<f64>,
    /// Residual training target `u − û(x)`.
    pub y: Vec<f64>,
    /// Prediction held for the next control period.
    pub mu: Vec<f64>,
    /// Task-space tracking error norm.
    pub task_err: f64,
    pub update_us: f64,
    pub predict_us: f64,
}

/// Per-trial closed-loop trace.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub records: Vec<TickRecord>,
    pub failed: bool,
    pub failure_time: Option<f64>,
    pub dropped_samples: u64,
    pub grad_skips: u64,
    pub dof: usize,
}

/// Deterministic per-run metrics (no wall-clock content).
#[derive(Debug, Clone, Serialize)]
pub struct SummaryMetrics {
    /// Σ over GP ticks of ‖q − q_ref‖₂ (m).
    pub sum_abs_error: f64,
    /// max over GP ticks of ‖u‖₂ (N).
    pub max_force_norm: f64,
    pub failed: bool,
    pub failure_time: Option<f64>,
    pub ticks: usize,
    pub dropped_samples: u64,
}

/// Wall-clock learner latencies for one run; reported separately from the
/// deterministic summary.
#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub update_p50_ms: f64,
    pub update_p99_ms: f64,
    pub update_max_ms: f64,
    pub predict_p50_ms: f64,
    pub predict_p99_ms: f64,
    pub predict_max_ms: f64,
    pub combined_p99_ms: f64,
    pub combined_max_ms: f64,
    /// GP ticks whose update+predict time exceeded the tick budget.
    pub over_budget_ticks: usize,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

pub(crate) fn latency_stats(update_us: &[f64], predict_us: &[f64], budget_ms: f64) -> LatencyStats {
    let ms = |v: f64| v / 1000.0;
    let mut upd: Vec<f64> = update_us.to_vec();
    let mut prd: Vec<f64> = predict_us.to_vec();
    let mut comb: Vec<f64> = upd.iter().zip(prd.iter()).map(|(a, b)| a + b).collect();
    upd.sort_by(f64::total_cmp);
    prd.sort_by(f64::total_cmp);
    comb.sort_by(f64::total_cmp);
    let over = comb.iter().filter(|v| ms(**v) > budget_ms).count();
    LatencyStats {
        update_p50_ms: ms(percentile(&upd, 0.50)),
        update_p99_ms: ms(percentile(&upd, 0.99)),
        update_max_ms: ms(upd.last().copied().unwrap_or(0.0)),
        predict_p50_ms: ms(percentile(&prd, 0.50)),
        predict_p99_ms: ms(percentile(&prd, 0.99)),
        predict_max_ms: ms(prd.last().copied().unwrap_or(0.0)),
        combined_p99_ms: ms(percentile(&comb, 0.99)),
        combined_max_ms: ms(comb.last().copied().unwrap_or(0.0)),
        over_budget_ticks: over,
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub log: RunLog,
    pub metrics: SummaryMetrics,
    pub latency: LatencyStats,
}

impl RunLog {
    pub fn summarize(&self, budget_ms: f64) -> (SummaryMetrics, LatencyStats) {
        let mut sum_err = 0.0;
        let mut max_force: f64 = 0.0;
        for r in &self.records {
            let e: f64 = r
                .q
                .iter()
                .zip(r.q_ref.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            sum_err += e;
            let f: f64 = r.u.iter().map(|v| v * v).sum::<f64>().sqrt();
            max_force = max_force.max(f);
        }
        let upd: Vec<f64> = self.records.iter().map(|r| r.update_us).collect();
        let prd: Vec<f64> = self.records.iter().map(|r| r.predict_us).collect();
        (
            SummaryMetrics {
                sum_abs_error: sum_err,
                max_force_norm: max_force,
                failed: self.failed,
                failure_time: self.failure_time,
                ticks: self.records.len(),
                dropped_samples: self.dropped_samples,
            },
            latency_stats(&upd, &prd, budget_ms),
        )
    }
}

/// Run one trial with a fresh predictor (for the GP variant).
pub fn run_trial(
    config: &ExperimentConfig,
    kind: ControllerKind,
    patient: &PatientParams,
    seed: u64,
) -> Result<TrialResult, HarnessError> {
    let mut predictor = build_predictor(config, kind, seed)?;
    run_trial_with(config, kind, patient, seed, predictor.as_mut())
}

/// Fresh predictor for a GP-variant trial; `None` for the PD variants.
pub fn build_predictor(
    config: &ExperimentConfig,
    kind: ControllerKind,
    seed: u64,
) -> Result<Option<VectorPredictor>, HarnessError> {
    if !kind.uses_predictor() {
        return Ok(None);
    }
    let dof = config.plant.dof();
    let tree_cfg = config.gp.tree_config(dof, config.trial_length())?;
    Ok(Some(VectorPredictor::new(dof, tree_cfg, seed)?))
}

/// Run one trial, optionally against a caller-owned (persistent) predictor.
pub fn run_trial_with(
    config: &ExperimentConfig,
    kind: ControllerKind,
    patient: &PatientParams,
    seed: u64,
    mut predictor: Option<&mut VectorPredictor>,
) -> Result<TrialResult, HarnessError> {
    config.validate()?;
    let plant = config.plant.build();
    let plant = plant.as_ref();
    let dof = plant.dof();
    let limit = plant.workspace_limit();
    let path = ReferencePath::new(&config.reference);
    let gains = config.gains.for_kind(kind);
    let field = PatientField::new(patient);
    let dt = config.device_dt();
    let tau = config.gp_tau();
    let substeps = config.substeps() as usize;
    let total_steps = (f64::from(config.periods_per_trial) * config.reference.period
        / dt)
        .round() as usize;
    let mut sensor = config
        .noise
        .enabled
        .then(|| SensorEmulator::new(config.noise.sigma_q, config.noise.sigma_qdot, seed ^ SENSOR_SALT));

    let start = path.at(0.0);
    let mut state = PlantState::new(start.q.clone(), start.qdot.clone(), 0.0);
    let mut held_mu = DVector::zeros(dof);
    let external = |q: &DVector<f64>, qdot: &DVector<f64>, t: f64| {
        field.torque(q, qdot, t, &path.at(t).q)
    };

    let mut records = Vec::with_capacity(total_steps / substeps + 1);
    let mut failed = false;
    let mut failure_time = None;
    let mut dropped = 0u64;

    // Applied control before the first tick: the law with a zero-held
    // feedforward (the predictor is consulted from the first tick on).
    let mut u_applied =
        assemble_control(plant, &state, &path.at(0.0), &gains, &held_mu, config.u_max);

    for step_idx in 0..total_steps {
        let t = step_idx as f64 * dt;
        if step_idx % substeps == 0 {
            let refpt = path.at(t);
            // (1) Sample x under the currently applied control.
            let f_now = field.torque(&state.q, &state.qdot, t, &refpt.q);
            let qddot = match forward_accel(plant, &state, &u_applied, &f_now) {
                Ok(a) => a,
                Err(PlantError::SingularInertia | PlantError::NonFiniteState) => {
                    failed = true;
                    failure_time = Some(t);
                    break;
                }
            };
            let (q_m, qdot_m, qddot_m) = match sensor.as_mut() {
                Some(s) => s.measure(&state, &qddot, tau),
                None => (state.q.clone(), state.qdot.clone(), qddot.clone()),
            };
            let x = pack_x(&q_m, &qdot_m, &qddot_m, t);
            // (2) Residual training target.
            let pair = residual_sample(&u_applied, &x, plant);
            // (3) Learner update, (4) prediction for the next control period.
            let mut update_us = 0.0;
            let mut predict_us = 0.0;
            if let Some(vp) = predictor.as_deref_mut() {
                let y: Vec<f64> = pair.y.iter().copied().collect();
                let t0 = Instant::now();
                match vp.update(&x, &y) {
                    Ok(()) => {}
                    Err(crate::tree::TreeError::NonFiniteInput) => dropped += 1,
                    Err(e) => return Err(e.into()),
                }
                update_us = t0.elapsed().as_secs_f64() * 1e6;
                let t1 = Instant::now();
                held_mu = DVector::from_vec(vp.predict(&x));
                predict_us = t1.elapsed().as_secs_f64() * 1e6;
            }
            // (5) Reassemble the applied control with the fresh feedforward.
            let e = &state.q - &refpt.q;
            let edot = &state.qdot - &refpt.qdot;
            let u_ctc = ctc_torque(plant, &state.q, &state.qdot, &refpt);
            let u_pd = pd_torque(&e, &edot, &gains);
            u_applied = assemble_control(plant, &state, &refpt, &gains, &held_mu, config.u_max);
            let task_err =
                (plant.task_position(&state.q) - plant.task_position(&refpt.q)).norm();
            records.push(TickRecord {
                t,
                q: state.q.iter().copied().collect(),
                qdot: state.qdot.iter().copied().collect(),
                qddot: qddot_m.iter().copied().collect(),
                q_ref: refpt.q.iter().copied().collect(),
                u: u_applied.iter().copied().collect(),
                u_ctc: u_ctc.iter().copied().collect(),
                u_pd: u_pd.iter().copied().collect(),
                u_gp: held_mu.iter().copied().collect(),
                y: pair.y.iter().copied().collect(),
                mu: held_mu.iter().copied().collect(),
                task_err,
                update_us,
                predict_us,
            });
        } else {
            let refpt = path.at(t);
            u_applied = assemble_control(plant, &state, &refpt, &gains, &held_mu, config.u_max);
        }
        state = match crate::plant::step(plant, &state, &u_applied, &external, dt) {
            Ok(s) => s,
            Err(PlantError::NonFiniteState | PlantError::SingularInertia) => {
                failed = true;
                failure_time = Some(t);
                break;
            }
        };
        if state.breaches(&limit) {
            failed = true;
            failure_time = Some(state.t);
            break;
        }
    }

    let grad_skips = predictor
        .as_deref()
        .map(|vp| vp.trees().iter().map(|t| t.grad_skips()).sum())
        .unwrap_or(0);
    let log = RunLog { records, failed, failure_time, dropped_samples: dropped, grad_skips, dof };
    let (metrics, latency) = log.summarize(config.gp_tau() * 1e3);
    Ok(TrialResult { log, metrics, latency })
}
