//! Synthetic patient torque fields standing in for study participants.
//!
//! A patient is an impedance-like tracker of a *distorted* perception of the
//! reference: only the angle from the origin is perceived correctly, so the
//! patient aims at a point with the right angle but a biased radius. The
//! field is scaled by an exponential fatigue envelope and carries seeded
//! band-limited tremor. The torque enters the plant on the balance side of
//! `H q̈ + C q̇ + g + f = u`, where positive stiffness pulls the handle
//! toward the perceived target and positive damping dissipates energy.
//!
//! Nothing here is a physiological model; the functional form exists to give
//! the learning controller a bounded, smooth, time-varying field with
//! controllable difficulty across a cohort.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Tremor mixture weights; they sum to one so the amplitude parameter bounds
/// the tremor magnitude per axis.
const TREMOR_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.2];
/// Physiological tremor band (Hz).
const TREMOR_BAND: (f64, f64) = (4.0, 12.0);

/// Parameters of one synthetic patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// Diagonal stiffness toward the perceived target (N/m), one per axis.
    pub stiffness: Vec<f64>,
    /// Diagonal damping (N·s/m), one per axis.
    pub damping: Vec<f64>,
    /// Tracking quality in [0, 1]; higher means less perceptual distortion.
    pub proficiency: f64,
    /// Strength of the angular-only-feedback distortion.
    pub perception_gain: f64,
    /// Fatigue time constant (s).
    pub fatigue_timescale: f64,
    /// Band-limited tremor amplitude (N).
    pub tremor_amplitude: f64,
    /// Identity seed; fixes the patient's perceptual bias.
    pub seed: u64,
    /// Seed for the tremor phases, varied per run; equals `seed` by default.
    #[serde(default)]
    pub tremor_seed: u64,
}

impl PatientParams {
    pub fn dof(&self) -> usize {
        self.stiffness.len()
    }

    /// Same patient with run-specific tremor phases.
    pub fn with_tremor_seed(mut self, tremor_seed: u64) -> Self {
        self.tremor_seed = tremor_seed;
        self
    }

    /// Radial perception bias in [−1, −½] ∪ [½, 1], fixed by the identity
    /// seed: the patient consistently over- or under-estimates the radius.
    pub fn perception_bias(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mag: f64 = rng.random_range(0.5..1.0);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    }
}

/// Precomputed per-trial evaluation state for one patient; construction is
/// deterministic in the parameters.
#[derive(Debug, Clone)]
pub struct PatientField {
    params: PatientParams,
    bias: f64,
    /// Per axis: three (frequency, phase) tremor components.
    tremor: Vec<[(f64, f64); 3]>,
}

impl PatientField {
    pub fn new(params: &PatientParams) -> Self {
        let bias = params.perception_bias();
        let mut rng = ChaCha8Rng::seed_from_u64(params.tremor_seed);
        rng.set_stream(1);
        let tremor = (0..params.dof())
            .map(|_| {
                let mut comps = [(0.0, 0.0); 3];
                for c in comps.iter_mut() {
                    let freq = rng.random_range(TREMOR_BAND.0..TREMOR_BAND.1);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    *c = (freq, phase);
                }
                comps
            })
            .collect();
        Self { params: params.clone(), bias, tremor }
    }

    pub fn params(&self) -> &PatientParams {
        &self.params
    }

    /// The point the patient steers toward: the reference with its radius
    /// scaled by the perceptual bias, attenuated by proficiency.
    pub fn perceived_target(&self, reference_at_t: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let scale = 1.0 + (1.0 - p.proficiency) * p.perception_gain * self.bias;
        reference_at_t * scale
    }

    /// Interaction torque at state `(q, q̇)` and trial time `t`.
    pub fn torque(
        &self,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        t: f64,
        reference_at_t: &DVector<f64>,
    ) -> DVector<f64> {
        let p = &self.params;
        let alpha = (-t / p.fatigue_timescale).exp();
        let target = self.perceived_target(reference_at_t);
        let d = p.dof();
        let mut f = DVector::zeros(d);
        for i in 0..d {
            f[i] = alpha * (p.stiffness[i] * (q[i] - target[i]) + p.damping[i] * qdot[i]);
            if p.tremor_amplitude > 0.0 {
                let mut tr = 0.0;
                for (w, (freq, phase)) in TREMOR_WEIGHTS.iter().zip(self.tremor[i].iter()) {
                    tr += w * (std::f64::consts::TAU * freq * t + phase).sin();
                }
                f[i] += p.tremor_amplitude * tr;
            }
        }
        f
    }
}

/// Interaction torque of a patient at input `x = (q, q̇, q̈, t)` given the
/// reference position at `t`. Deterministic in `(params, x, t)`.
pub fn patient_torque(
    params: &PatientParams,
    x: &[f64],
    reference_at_t: &DVector<f64>,
) -> DVector<f64> {
    let d = params.dof();
    let (q, qdot, _, t) = crate::plant::unpack_x(x, d);
    PatientField::new(params).torque(&q, &qdot, t, reference_at_t)
}

/// Uniform sampling intervals for a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortRanges {
    pub stiffness: (f64, f64),
    pub damping: (f64, f64),
    pub proficiency: (f64, f64),
    pub perception_gain: (f64, f64),
    pub fatigue_timescale: (f64, f64),
    pub tremor_amplitude: (f64, f64),
}

impl Default for CohortRanges {
    /// The documented baseline ranges.
    fn default() -> Self {
        Self {
            stiffness: (20.0, 200.0),
            damping: (1.0, 20.0),
            proficiency: (0.2, 0.95),
            perception_gain: (0.6, 1.0),
            fatigue_timescale: (60.0, 600.0),
            tremor_amplitude: (0.0, 0.5),
        }
    }
}

/// Draw `n` patients with `dof` axes from the documented baseline ranges,
/// deterministically under the master seed.
pub fn sample_cohort(n: usize, dof: usize, master_seed: u64) -> Vec<PatientParams> {
    sample_cohort_in(n, dof, master_seed, &CohortRanges::default())
}

/// Draw `n` patients from explicit ranges.
pub fn sample_cohort_in(
    n: usize,
    dof: usize,
    master_seed: u64,
    ranges: &CohortRanges,
) -> Vec<PatientParams> {
    assert!(n >= 1, "cohort must contain at least one patient");
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(7);
    let draw = |rng: &mut ChaCha8Rng, r: (f64, f64)| {
        if r.0 == r.1 {
            r.0
        } else {
            rng.random_range(r.0..r.1)
        }
    };
    (0..n)
        .map(|_| {
            let seed = rng.random::<u64>();
            PatientParams {
                stiffness: (0..dof).map(|_| draw(&mut rng, ranges.stiffness)).collect(),
                damping: (0..dof).map(|_| draw(&mut rng, ranges.damping)).collect(),
                proficiency: draw(&mut rng, ranges.proficiency),
                perception_gain: draw(&mut rng, ranges.perception_gain),
                fatigue_timescale: draw(&mut rng, ranges.fatigue_timescale),
                tremor_amplitude: draw(&mut rng, ranges.tremor_amplitude),
                seed,
                tremor_seed: seed,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_patient() -> PatientParams {
        PatientParams {
            stiffness: vec![80.0, 60.0],
            damping: vec![8.0, 6.0],
            proficiency: 0.5,
            perception_gain: 0.8,
            fatigue_timescale: 120.0,
            tremor_amplitude: 0.3,
            seed: 99,
            tremor_seed: 99,
        }
    }

    fn reference() -> DVector<f64> {
        DVector::from_column_slice(&[0.12, -0.06])
    }

    #[test]
    fn passive_patient_applies_no_torque() {
        let mut p = test_patient();
        p.stiffness = vec![0.0, 0.0];
        p.damping = vec![0.0, 0.0];
        p.tremor_amplitude = 0.0;
        let x = [0.1, 0.05, 0.2, -0.1, 0.0, 0.0, 3.0];
        let f = patient_torque(&p, &x, &reference());
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn zero_error_zero_velocity_gives_zero_torque() {
        let mut p = test_patient();
        p.tremor_amplitude = 0.0;
        let field = PatientField::new(&p);
        let target = field.perceived_target(&reference());
        let f = field.torque(&target, &DVector::zeros(2), 5.0, &reference());
        assert!(f.norm() < 1e-15);
    }

    #[test]
    fn fatigue_scales_torque_by_exponential_envelope() {
        let mut p = test_patient();
        p.tremor_amplitude = 0.0;
        let field = PatientField::new(&p);
        let q = DVector::from_column_slice(&[0.05, 0.02]);
        let qdot = DVector::from_column_slice(&[0.01, -0.02]);
        let early = field.torque(&q, &qdot, 0.0, &reference());
        let late = field.torque(&q, &qdot, 3.0 * p.fatigue_timescale, &reference());
        let ratio = late.norm() / early.norm();
        assert!((ratio - (-3.0_f64).exp()).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn fatigue_is_monotone_at_fixed_state() {
        let mut p = test_patient();
        p.tremor_amplitude = 0.0;
        let field = PatientField::new(&p);
        let q = DVector::from_column_slice(&[0.08, -0.01]);
        let qdot = DVector::from_column_slice(&[0.05, 0.03]);
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let f = field.torque(&q, &qdot, k as f64 * 10.0, &reference());
            assert!(f.norm() <= last + 1e-15);
            last = f.norm();
        }
    }

    #[test]
    fn torque_is_deterministic_bit_for_bit() {
        let p = test_patient();
        let x = [0.02, -0.03, 0.1, 0.0, 0.0, 0.0, 7.25];
        let a = patient_torque(&p, &x, &reference());
        let b = patient_torque(&p, &x, &reference());
        assert_eq!(a, b);
    }

    #[test]
    fn perception_bias_is_a_stable_identity_trait() {
        let p = test_patient();
        let b1 = p.perception_bias();
        let b2 = p.clone().with_tremor_seed(12345).perception_bias();
        assert_eq!(b1, b2, "tremor seed must not change the perceptual bias");
        assert!((0.5..1.0).contains(&b1.abs()));
    }

    #[test]
    fn tremor_respects_amplitude_bound() {
        let mut p = test_patient();
        p.stiffness = vec![0.0, 0.0];
        p.damping = vec![0.0, 0.0];
        let field = PatientField::new(&p);
        let q = DVector::zeros(2);
        let qdot = DVector::zeros(2);
        for k in 0..2000 {
            let f = field.torque(&q, &qdot, k as f64 * 0.01, &reference());
            assert!(f.amax() <= p.tremor_amplitude + 1e-12);
        }
    }

    #[test]
    fn torque_is_bounded_over_reachable_states() {
        let cohort = sample_cohort(9, 2, 7);
        let refp = reference();
        for p in &cohort {
            let field = PatientField::new(p);
            let k_max = p.stiffness.iter().cloned().fold(0.0, f64::max);
            let d_max = p.damping.iter().cloned().fold(0.0, f64::max);
            // Workspace diameter plus the largest perceived-target excursion.
            let reach = 2.0 * 0.2_f64 * 2.0_f64.sqrt() + 0.4;
            let v_max = 2.0 * 2.0_f64.sqrt();
            let bound = k_max * reach + d_max * v_max + p.tremor_amplitude;
            for i in 0..200 {
                let s = i as f64 / 200.0;
                let q = DVector::from_column_slice(&[0.2 * (s * 7.0).sin(), 0.2 * (s * 5.0).cos()]);
                let qdot = DVector::from_column_slice(&[2.0 * (s * 3.0).cos(), 2.0 * (s * 11.0).sin()]);
                let f = field.torque(&q, &qdot, s * 50.0, &refp);
                assert!(f.norm() <= bound, "torque {} above bound {}", f.norm(), bound);
            }
        }
    }

    #[test]
    fn cohort_is_deterministic_and_in_range() {
        let a = sample_cohort(9, 2, 42);
        let b = sample_cohort(9, 2, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 9);
        let r = CohortRanges::default();
        for p in &a {
            for k in &p.stiffness {
                assert!((r.stiffness.0..r.stiffness.1).contains(k));
            }
            for d in &p.damping {
                assert!((r.damping.0..r.damping.1).contains(d));
            }
            assert!((r.proficiency.0..r.proficiency.1).contains(&p.proficiency));
            assert!((r.perception_gain.0..r.perception_gain.1).contains(&p.perception_gain));
            assert!((r.fatigue_timescale.0..r.fatigue_timescale.1).contains(&p.fatigue_timescale));
            assert!((r.tremor_amplitude.0..r.tremor_amplitude.1).contains(&p.tremor_amplitude));
        }
        // Distinct parameter sets.
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i], a[j]);
            }
        }
    }
}
