//! Euler-Lagrange plant models and closed-loop plumbing: forward simulation,
//! inverse dynamics, and residual training-target generation.
//!
//! The dynamics have the standard manipulator form
//! `H(q) q̈ + C(q, q̇) q̇ + g(q) + f(x) = u`, where `f` is the external
//! (human) torque. Two concrete plants are provided: a planar Cartesian
//! stage (diagonal constant inertia, the shape of a two-axis manipulandum)
//! and a planar two-link revolute arm exercising configuration-dependent
//! `H`, `C`, and `g`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("inertia matrix is not invertible at the current configuration")]
    SingularInertia,
    #[error("state became non-finite during integration")]
    NonFiniteState,
}

/// A robot model in Euler-Lagrange form. `H` must be symmetric positive
/// definite over the workspace.
pub trait PlantModel: Send + Sync {
    fn dof(&self) -> usize;
    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64>;
    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64>;
    fn gravity(&self, q: &DVector<f64>) -> DVector<f64>;
    /// Per-dimension safety bound; a trial fails when any |q_i| exceeds it.
    fn workspace_limit(&self) -> DVector<f64>;
    /// Task-space position used for error reporting; identity for plants
    /// whose generalized coordinates already are Cartesian.
    fn task_position(&self, q: &DVector<f64>) -> DVector<f64> {
        q.clone()
    }
}

#[derive(Debug, Clone)]
pub struct PlantState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>, t: f64) -> Self {
        Self { q, qdot, t }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.q.iter().all(|v| v.is_finite())
            && self.qdot.iter().all(|v| v.is_finite())
    }

    pub fn breaches(&self, limit: &DVector<f64>) -> bool {
        self.q.iter().zip(limit.iter()).any(|(q, l)| q.abs() > *l)
    }
}

/// One GP training pair: the input `(q, q̇, q̈, t)` and the residual torque.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x: Vec<f64>,
    pub y: DVector<f64>,
}

/// Pack `(q, q̇, q̈, t)` into the flat input layout of dimension `3d + 1`.
pub fn pack_x(q: &DVector<f64>, qdot: &DVector<f64>, qddot: &DVector<f64>, t: f64) -> Vec<f64> {
    let d = q.len();
    let mut x = Vec::with_capacity(3 * d + 1);
    x.extend(q.iter());
    x.extend(qdot.iter());
    x.extend(qddot.iter());
    x.push(t);
    x
}

/// Inverse of [`pack_x`].
pub fn unpack_x(x: &[f64], d: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>, f64) {
    assert_eq!(x.len(), 3 * d + 1, "input vector length mismatch");
    (
        DVector::from_column_slice(&x[0..d]),
        DVector::from_column_slice(&x[d..2 * d]),
        DVector::from_column_slice(&x[2 * d..3 * d]),
        x[3 * d],
    )
}

/// Solve `H(q) q̈ = u − C(q, q̇) q̇ − g(q) − f` for the acceleration.
pub fn forward_accel(
    model: &dyn PlantModel,
    state: &PlantState,
    u: &DVector<f64>,
    f: &DVector<f64>,
) -> Result<DVector<f64>, PlantError> {
    let rhs = u - model.coriolis(&state.q, &state.qdot) * &state.qdot - model.gravity(&state.q) - f;
    model
        .inertia(&state.q)
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(PlantError::SingularInertia)
}

/// The torque that produces `(q, q̇, q̈)` absent external forces:
/// `û = H(q) q̈ + C(q, q̇) q̇ + g(q)`.
pub fn inverse_dynamics(
    model: &dyn PlantModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    qddot: &DVector<f64>,
) -> DVector<f64> {
    model.inertia(q) * qddot + model.coriolis(q, qdot) * qdot + model.gravity(q)
}

/// Rearranged system identity: whatever torque the applied input does not
/// explain must come from the external field, `y = u − û(x)`.
pub fn residual_sample(u: &DVector<f64>, x: &[f64], model: &dyn PlantModel) -> TrainingPair {
    let (q, qdot, qddot, _) = unpack_x(x, model.dof());
    let y = u - inverse_dynamics(model, &q, &qdot, &qddot);
    TrainingPair { x: x.to_vec(), y }
}

/// Classical fixed-step fourth-order integration of `(q, q̇)` over `dt`,
/// with the control input held constant and the external torque function
/// evaluated at every stage.
pub fn step(
    model: &dyn PlantModel,
    state: &PlantState,
    u: &DVector<f64>,
    external: &dyn Fn(&DVector<f64>, &DVector<f64>, f64) -> DVector<f64>,
    dt: f64,
) -> Result<PlantState, PlantError> {
    assert!(dt > 0.0, "dt must be positive");
    let deriv = |q: &DVector<f64>, qdot: &DVector<f64>, t: f64| -> Result<DVector<f64>, PlantError> {
        let f = external(q, qdot, t);
        forward_accel(model, &PlantState::new(q.clone(), qdot.clone(), t), u, &f)
    };
    let (q0, v0, t0) = (&state.q, &state.qdot, state.t);
    let a1 = deriv(q0, v0, t0)?;
    let h = 0.5 * dt;
    let q2 = q0 + v0 * h;
    let v2 = v0 + &a1 * h;
    let a2 = deriv(&q2, &v2, t0 + h)?;
    let q3 = q0 + &v2 * h;
    let v3 = v0 + &a2 * h;
    let a3 = deriv(&q3, &v3, t0 + h)?;
    let q4 = q0 + &v3 * dt;
    let v4 = v0 + &a3 * dt;
    let a4 = deriv(&q4, &v4, t0 + dt)?;
    let q = q0 + (v0 + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
    let v = v0 + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
    let next = PlantState::new(q, v, t0 + dt);
    if next.is_finite() {
        Ok(next)
    } else {
        Err(PlantError::NonFiniteState)
    }
}

/// Kinetic energy `½ q̇ᵀ H(q) q̇`.
pub fn kinetic_energy(model: &dyn PlantModel, state: &PlantState) -> f64 {
    0.5 * state.qdot.dot(&(model.inertia(&state.q) * &state.qdot))
}

/// Two-axis Cartesian stage: constant diagonal inertia, no Coriolis or
/// gravity terms (horizontal plane). Masses are configuration defaults, not
/// identified values.
#[derive(Debug, Clone)]
pub struct CartesianStage {
    pub masses: DVector<f64>,
    pub limit: DVector<f64>,
}

impl Default for CartesianStage {
    fn default() -> Self {
        Self {
            masses: DVector::from_column_slice(&[6.0, 4.0]),
            limit: DVector::from_column_slice(&[0.20, 0.20]),
        }
    }
}

impl PlantModel for CartesianStage {
    fn dof(&self) -> usize {
        self.masses.len()
    }

    fn inertia(&self, _q: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.masses)
    }

    fn coriolis(&self, _q: &DVector<f64>, _qdot: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.dof(), self.dof())
    }

    fn gravity(&self, _q: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dof())
    }

    fn workspace_limit(&self) -> DVector<f64> {
        self.limit.clone()
    }
}

/// Planar two-link revolute arm with uniform-rod links; standard closed-form
/// `H`, `C`, `g` with the Coriolis matrix in the Christoffel form, so
/// `Ḣ − 2C` is skew-symmetric.
#[derive(Debug, Clone)]
pub struct TwoLinkArm {
    pub masses: [f64; 2],
    pub lengths: [f64; 2],
    pub gravity: f64,
    pub limit: DVector<f64>,
}

impl Default for TwoLinkArm {
    fn default() -> Self {
        Self {
            masses: [2.0, 1.5],
            lengths: [0.4, 0.3],
            gravity: 9.81,
            limit: DVector::from_column_slice(&[std::f64::consts::PI, std::f64::consts::PI]),
        }
    }
}

impl TwoLinkArm {
    fn rod_inertias(&self) -> (f64, f64) {
        let [m1, m2] = self.masses;
        let [l1, l2] = self.lengths;
        (m1 * l1 * l1 / 12.0, m2 * l2 * l2 / 12.0)
    }
}

impl PlantModel for TwoLinkArm {
    fn dof(&self) -> usize {
        2
    }

    fn inertia(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let [m1, m2] = self.masses;
        let [l1, l2] = self.lengths;
        let (lc1, lc2) = (0.5 * l1, 0.5 * l2);
        let (i1, i2) = self.rod_inertias();
        let c2 = q[1].cos();
        let h22 = m2 * lc2 * lc2 + i2;
        let h12 = h22 + m2 * l1 * lc2 * c2;
        let h11 = m1 * lc1 * lc1 + i1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + i2;
        DMatrix::from_row_slice(2, 2, &[h11, h12, h12, h22])
    }

    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        let [_, m2] = self.masses;
        let [l1, l2] = self.lengths;
        let lc2 = 0.5 * l2;
        let h = -m2 * l1 * lc2 * q[1].sin();
        let (qd1, qd2) = (qdot[0], qdot[1]);
        DMatrix::from_row_slice(2, 2, &[h * qd2, h * (qd1 + qd2), -h * qd1, 0.0])
    }

    fn gravity(&self, q: &DVector<f64>) -> DVector<f64> {
        let [m1, m2] = self.masses;
        let [l1, l2] = self.lengths;
        let (lc1, lc2) = (0.5 * l1, 0.5 * l2);
        let g = self.gravity;
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        DVector::from_column_slice(&[
            (m1 * lc1 + m2 * l1) * g * c1 + m2 * lc2 * g * c12,
            m2 * lc2 * g * c12,
        ])
    }

    fn workspace_limit(&self) -> DVector<f64> {
        self.limit.clone()
    }

    fn task_position(&self, q: &DVector<f64>) -> DVector<f64> {
        let [l1, l2] = self.lengths;
        DVector::from_column_slice(&[
            l1 * q[0].cos() + l2 * (q[0] + q[1]).cos(),
            l1 * q[0].sin() + l2 * (q[0] + q[1]).sin(),
        ])
    }
}

/// Measurement emulation for study runs: additive Gaussian noise on `q` and
/// `q̇`, with the acceleration reconstructed by the central difference of
/// measured velocities across GP ticks (exact accelerations are used until
/// two past ticks exist). Disabled configurations sample exact state.
#[derive(Debug, Clone)]
pub struct SensorEmulator {
    sigma_q: f64,
    sigma_qdot: f64,
    rng: ChaCha8Rng,
    hist: [Option<DVector<f64>>; 2],
}

impl SensorEmulator {
    pub fn new(sigma_q: f64, sigma_qdot: f64, seed: u64) -> Self {
        Self { sigma_q, sigma_qdot, rng: ChaCha8Rng::seed_from_u64(seed), hist: [None, None] }
    }

    /// Measured `(q, q̇, q̈)` at one GP tick, `tau` apart from the previous.
    pub fn measure(
        &mut self,
        state: &PlantState,
        exact_qddot: &DVector<f64>,
        tau: f64,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let d = state.q.len();
        let mut q_m = state.q.clone();
        let mut qdot_m = state.qdot.clone();
        for i in 0..d {
            let eq: f64 = StandardNormal.sample(&mut self.rng);
            let ev: f64 = StandardNormal.sample(&mut self.rng);
            q_m[i] += self.sigma_q * eq;
            qdot_m[i] += self.sigma_qdot * ev;
        }
        let qddot_m = match &self.hist[1] {
            Some(two_back) => (&qdot_m - two_back) / (2.0 * tau),
            None => exact_qddot.clone(),
        };
        self.hist[1] = self.hist[0].take();
        self.hist[0] = Some(qdot_m.clone());
        (q_m, qdot_m, qddot_m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_state(r: &mut ChaCha8Rng, scale: f64) -> PlantState {
        PlantState::new(
            DVector::from_fn(2, |_, _| r.random_range(-scale..scale)),
            DVector::from_fn(2, |_, _| r.random_range(-scale..scale)),
            0.0,
        )
    }

    #[test]
    fn stage_acceleration_is_newtons_law() {
        let stage = CartesianStage::default();
        let state = PlantState::new(DVector::zeros(2), DVector::zeros(2), 0.0);
        let u = DVector::from_column_slice(&[6.0, 0.0]);
        let qddot = forward_accel(&stage, &state, &u, &DVector::zeros(2)).unwrap();
        assert!((qddot[0] - 1.0).abs() < 1e-14);
        assert!(qddot[1].abs() < 1e-14);
    }

    #[test]
    fn inverse_dynamics_round_trips_forward_accel() {
        let arm = TwoLinkArm::default();
        let mut r = rng(1);
        for _ in 0..50 {
            let state = random_state(&mut r, 1.0);
            let qddot = DVector::from_fn(2, |_, _| r.random_range(-2.0..2.0));
            let u = inverse_dynamics(&arm, &state.q, &state.qdot, &qddot);
            let back = forward_accel(&arm, &state, &u, &DVector::zeros(2)).unwrap();
            assert!((back - &qddot).norm() < 1e-10);
        }
    }

    #[test]
    fn stage_inverse_dynamics_is_mass_times_accel() {
        let stage = CartesianStage::default();
        let qddot = DVector::from_column_slice(&[0.3, -0.5]);
        let u = inverse_dynamics(&stage, &DVector::zeros(2), &DVector::zeros(2), &qddot);
        assert_eq!(u[0], 6.0 * 0.3);
        assert_eq!(u[1], 4.0 * -0.5);
    }

    #[test]
    fn gravity_compensation_holds_arm_at_rest() {
        let arm = TwoLinkArm::default();
        let q = DVector::from_column_slice(&[0.7, -0.4]);
        let state = PlantState::new(q.clone(), DVector::zeros(2), 0.0);
        let u = arm.gravity(&q);
        let qddot = forward_accel(&arm, &state, &u, &DVector::zeros(2)).unwrap();
        assert!(qddot.norm() < 1e-12);
    }

    #[test]
    fn rest_state_stays_at_rest() {
        let stage = CartesianStage::default();
        let zero = DVector::zeros(2);
        let ext = |_: &DVector<f64>, _: &DVector<f64>, _: f64| DVector::zeros(2);
        let mut s = PlantState::new(DVector::zeros(2), DVector::zeros(2), 0.0);
        for _ in 0..100 {
            s = step(&stage, &s, &zero, &ext, 2.5e-4).unwrap();
        }
        assert!(s.q.norm() < 1e-12);
        assert!(s.qdot.norm() < 1e-12);
    }

    #[test]
    fn ballistic_motion_matches_closed_form() {
        let stage = CartesianStage::default();
        let u = DVector::from_column_slice(&[3.0, -2.0]);
        let ext = |_: &DVector<f64>, _: &DVector<f64>, _: f64| DVector::zeros(2);
        let mut s = PlantState::new(DVector::zeros(2), DVector::zeros(2), 0.0);
        let dt = 1e-3;
        for _ in 0..1000 {
            s = step(&stage, &s, &u, &ext, dt).unwrap();
        }
        let a = DVector::from_column_slice(&[3.0 / 6.0, -2.0 / 4.0]);
        let expect = &a * 0.5; // ½ a t² at t = 1
        assert!((s.q - expect).norm() < 1e-12);
    }

    #[test]
    fn integrator_shows_fourth_order_convergence() {
        let arm = TwoLinkArm::default();
        let u = DVector::from_column_slice(&[0.5, -0.2]);
        let ext = |q: &DVector<f64>, qdot: &DVector<f64>, _: f64| {
            DVector::from_column_slice(&[0.3 * q[1].sin() - 0.1 * qdot[0], 0.2 * q[0].cos()])
        };
        let run = |dt: f64| {
            let mut s = PlantState::new(
                DVector::from_column_slice(&[0.3, 0.6]),
                DVector::zeros(2),
                0.0,
            );
            let steps = (1.0 / dt).round() as usize;
            for _ in 0..steps {
                s = step(&arm, &s, &u, &ext, dt).unwrap();
            }
            s.q
        };
        let reference = run(1.0 / 16384.0);
        let e1 = (run(1.0 / 256.0) - &reference).norm();
        let e2 = (run(1.0 / 512.0) - &reference).norm();
        let ratio = e1 / e2;
        assert!(
            (8.0..40.0).contains(&ratio),
            "halving dt should shrink the error ~16x, got {ratio}"
        );
    }

    #[test]
    fn kinetic_energy_conserved_without_forcing() {
        let arm = TwoLinkArm { gravity: 0.0, ..TwoLinkArm::default() };
        let zero = DVector::zeros(2);
        let ext = |_: &DVector<f64>, _: &DVector<f64>, _: f64| DVector::zeros(2);
        let mut s = PlantState::new(
            DVector::from_column_slice(&[0.4, -0.8]),
            DVector::from_column_slice(&[1.2, -0.6]),
            0.0,
        );
        let e0 = kinetic_energy(&arm, &s);
        for _ in 0..4000 {
            s = step(&arm, &s, &zero, &ext, 2.5e-4).unwrap();
        }
        let drift = (kinetic_energy(&arm, &s) - e0).abs() / e0;
        assert!(drift < 1e-6, "energy drift {drift} over one simulated second");
    }

    #[test]
    fn inertia_is_positive_definite_across_workspace() {
        let arm = TwoLinkArm::default();
        let mut r = rng(2);
        for _ in 0..1000 {
            let q = DVector::from_fn(2, |_, _| r.random_range(-3.2..3.2));
            let h = arm.inertia(&q);
            assert!((h[(0, 1)] - h[(1, 0)]).abs() < 1e-14);
            // 2x2 positive definiteness: positive leading minors.
            assert!(h[(0, 0)] > 0.0);
            assert!(h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)] > 0.0);
        }
    }

    #[test]
    fn coriolis_satisfies_skew_symmetry_property() {
        // Ḣ − 2C must be skew-symmetric; Ḣ via central differences of H
        // along the direction q̇.
        let arm = TwoLinkArm::default();
        let mut r = rng(3);
        let eps = 1e-6;
        for _ in 0..50 {
            let state = random_state(&mut r, 1.5);
            let hp = arm.inertia(&(&state.q + &state.qdot * eps));
            let hm = arm.inertia(&(&state.q - &state.qdot * eps));
            let hdot = (hp - hm) / (2.0 * eps);
            let s = hdot - 2.0 * arm.coriolis(&state.q, &state.qdot);
            let sym = &s + s.transpose();
            assert!(sym.norm() < 1e-6, "skew-symmetry violated: {}", sym.norm());
        }
    }

    #[test]
    fn residual_recovers_external_torque_exactly() {
        let arm = TwoLinkArm::default();
        let mut r = rng(4);
        for _ in 0..50 {
            let state = random_state(&mut r, 1.0);
            let u = DVector::from_fn(2, |_, _| r.random_range(-5.0..5.0));
            let f = DVector::from_fn(2, |_, _| r.random_range(-3.0..3.0));
            let qddot = forward_accel(&arm, &state, &u, &f).unwrap();
            let x = pack_x(&state.q, &state.qdot, &qddot, state.t);
            let pair = residual_sample(&u, &x, &arm);
            assert!((&pair.y - &f).norm() < 1e-9, "residual error {}", (&pair.y - &f).norm());
        }
    }

    #[test]
    fn residual_is_zero_for_inverse_dynamics_input() {
        let stage = CartesianStage::default();
        let q = DVector::from_column_slice(&[0.05, -0.02]);
        let qdot = DVector::from_column_slice(&[0.1, 0.0]);
        let qddot = DVector::from_column_slice(&[0.4, 0.2]);
        let u = inverse_dynamics(&stage, &q, &qdot, &qddot);
        let x = pack_x(&q, &qdot, &qddot, 1.0);
        let pair = residual_sample(&u, &x, &stage);
        assert!(pair.y.norm() < 1e-14);
    }

    #[test]
    fn noisy_measurements_are_unbiased_on_average() {
        // Constant acceleration makes the velocity central difference exact,
        // so the residual noise is zero-mean.
        let stage = CartesianStage::default();
        let accel = DVector::from_column_slice(&[0.2, -0.1]);
        let f_true = DVector::from_column_slice(&[1.5, -0.8]);
        let tau = 5e-3;
        let reps = 10_000;
        let mut sum = DVector::zeros(2);
        for rep in 0..reps {
            let mut sensor = SensorEmulator::new(1e-5, 1e-3, rep as u64);
            let mut pair_last = None;
            for k in 0..5u64 {
                let t = k as f64 * tau;
                let state = PlantState::new(&accel * (0.5 * t * t), &accel * t, t);
                let u = inverse_dynamics(&stage, &state.q, &state.qdot, &accel) + &f_true;
                let (qm, vm, am) = sensor.measure(&state, &accel, tau);
                let x = pack_x(&qm, &vm, &am, t);
                pair_last = Some(residual_sample(&u, &x, &stage));
            }
            sum += pair_last.unwrap().y;
        }
        let mean = sum / reps as f64;
        // Monte-Carlo tolerance: σ(y_i) ≈ m σ_q̇ / (2τ) ≈ 0.6 N per sample.
        let tol = 3.0 * 0.6 / (reps as f64).sqrt();
        assert!((mean[0] - f_true[0]).abs() < tol, "bias {}", mean[0] - f_true[0]);
        assert!((mean[1] - f_true[1]).abs() < tol);
    }

    #[test]
    fn breach_detection_uses_per_axis_bounds() {
        let stage = CartesianStage::default();
        let inside =
            PlantState::new(DVector::from_column_slice(&[0.19, -0.19]), DVector::zeros(2), 0.0);
        let outside =
            PlantState::new(DVector::from_column_slice(&[0.21, 0.0]), DVector::zeros(2), 0.0);
        assert!(!inside.breaches(&stage.workspace_limit()));
        assert!(outside.breaches(&stage.workspace_limit()));
    }
}
