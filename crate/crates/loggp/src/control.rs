//! Reference trajectory generation and the learning control law.
//!
//! The control input is the sum of a computed-torque term cancelling the
//! known robot dynamics along the reference, a PD feedback on the tracking
//! error, and (for the learning variant) the vector predictor's estimate of
//! the human torque as a feedforward:
//!
//! `u = H(q) q̈_ref + C(q, q̇) q̇_ref + g(q) − K_p e − K_d ė + μ̃(x)`
//!
//! The reference is a rounded rectangle traversed counterclockwise at
//! constant path speed, starting at the middle of its right edge. Straights
//! and corner arcs give analytic first and second derivatives; the
//! acceleration is piecewise continuous (it steps between zero and the
//! centripetal value where straights meet arcs).

use crate::plant::{PlantModel, PlantState};
use crate::tree::VectorPredictor;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Scalar PD gains; the gain matrices are `kp·I` and `kd·I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Gains {
    pub const fn new(kp: f64, kd: f64) -> Self {
        Self { kp, kd }
    }
}

/// The controller variants of the study protocol, with their stock gains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    LowGain,
    HighGain,
    Gp,
    TunedPd,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] =
        [Self::LowGain, Self::HighGain, Self::Gp, Self::TunedPd];

    /// Stock PD parametrization per variant.
    pub fn default_gains(self) -> Gains {
        match self {
            Self::LowGain | Self::Gp => Gains::new(1.0, 0.1),
            Self::HighGain => Gains::new(600.0, 60.0),
            Self::TunedPd => Gains::new(35.0, 3.5),
        }
    }

    /// Whether the variant carries a learned predictor.
    pub fn uses_predictor(self) -> bool {
        matches!(self, Self::Gp)
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::LowGain => "low",
            Self::HighGain => "high",
            Self::Gp => "gp",
            Self::TunedPd => "tuned",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(Self::LowGain),
            "high" => Ok(Self::HighGain),
            "gp" => Ok(Self::Gp),
            "tuned" => Ok(Self::TunedPd),
            other => Err(format!("unknown controller '{other}' (expected low|high|gp|tuned)")),
        }
    }
}

/// Reference state at one instant.
#[derive(Debug, Clone)]
pub struct ReferencePoint {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
}

/// Geometry and timing of the rounded-rectangle reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    /// Half extents of the bounding rectangle (m or rad).
    pub half_extents: [f64; 2],
    /// Corner radius; must not exceed either half extent.
    pub corner_radius: f64,
    /// Traversal period (s).
    pub period: f64,
    /// Center offset of the curve.
    pub center: [f64; 2],
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { half_extents: [0.15, 0.10], corner_radius: 0.05, period: 10.0, center: [0.0, 0.0] }
    }
}

#[derive(Debug, Clone)]
enum Segment {
    Line { start: [f64; 2], dir: [f64; 2], len: f64 },
    Arc { center: [f64; 2], radius: f64, start_angle: f64, len: f64 },
}

impl Segment {
    fn len(&self) -> f64 {
        match self {
            Segment::Line { len, .. } | Segment::Arc { len, .. } => *len,
        }
    }
}

/// Arc-length parametrized rounded rectangle with analytic derivatives.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    segments: Vec<Segment>,
    cumulative: Vec<f64>,
    speed: f64,
    period: f64,
    center: [f64; 2],
}

impl ReferencePath {
    pub fn new(config: &ReferenceConfig) -> Self {
        let [a, b] = config.half_extents;
        let r = config.corner_radius;
        assert!(a > 0.0 && b > 0.0 && config.period > 0.0, "degenerate reference geometry");
        assert!(r > 0.0 && r <= a && r <= b, "corner radius must fit the half extents");
        use std::f64::consts::FRAC_PI_2;
        let quarter = FRAC_PI_2 * r;
        let segments = vec![
            // Counterclockwise from the middle of the right edge.
            Segment::Line { start: [a, 0.0], dir: [0.0, 1.0], len: b - r },
            Segment::Arc { center: [a - r, b - r], radius: r, start_angle: 0.0, len: quarter },
            Segment::Line { start: [a - r, b], dir: [-1.0, 0.0], len: 2.0 * (a - r) },
            Segment::Arc { center: [-(a - r), b - r], radius: r, start_angle: FRAC_PI_2, len: quarter },
            Segment::Line { start: [-a, b - r], dir: [0.0, -1.0], len: 2.0 * (b - r) },
            Segment::Arc { center: [-(a - r), -(b - r)], radius: r, start_angle: 2.0 * FRAC_PI_2, len: quarter },
            Segment::Line { start: [-(a - r), -b], dir: [1.0, 0.0], len: 2.0 * (a - r) },
            Segment::Arc { center: [a - r, -(b - r)], radius: r, start_angle: 3.0 * FRAC_PI_2, len: quarter },
            Segment::Line { start: [a, -(b - r)], dir: [0.0, 1.0], len: b - r },
        ];
        let mut cumulative = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in &segments {
            acc += s.len();
            cumulative.push(acc);
        }
        let perimeter = acc;
        Self {
            segments,
            cumulative,
            speed: perimeter / config.period,
            period: config.period,
            center: config.center,
        }
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn perimeter(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Reference state at time `t ≥ 0`; periodic with the configured period.
    pub fn at(&self, t: f64) -> ReferencePoint {
        let s = self.speed * t.rem_euclid(self.period);
        let mut idx = 0;
        while idx + 1 < self.segments.len() && s > self.cumulative[idx] {
            idx += 1;
        }
        let seg_start = if idx == 0 { 0.0 } else { self.cumulative[idx - 1] };
        let local = (s - seg_start).max(0.0);
        let v = self.speed;
        let (q, qdot, qddot) = match &self.segments[idx] {
            Segment::Line { start, dir, .. } => (
                [start[0] + dir[0] * local, start[1] + dir[1] * local],
                [v * dir[0], v * dir[1]],
                [0.0, 0.0],
            ),
            Segment::Arc { center, radius, start_angle, .. } => {
                let theta = start_angle + local / radius;
                let (sin, cos) = theta.sin_cos();
                let cpt = v * v / radius;
                (
                    [center[0] + radius * cos, center[1] + radius * sin],
                    [-v * sin, v * cos],
                    [-cpt * cos, -cpt * sin],
                )
            }
        };
        ReferencePoint {
            q: DVector::from_column_slice(&[q[0] + self.center[0], q[1] + self.center[1]]),
            qdot: DVector::from_column_slice(&qdot),
            qddot: DVector::from_column_slice(&qddot),
        }
    }
}

/// Build the reference path and evaluate it at `t`.
pub fn reference(t: f64, config: &ReferenceConfig) -> ReferencePoint {
    ReferencePath::new(config).at(t)
}

/// Computed torque along the reference: `H(q) q̈_ref + C(q, q̇) q̇_ref + g(q)`,
/// with `H`, `C`, `g` evaluated at the measured state.
pub fn ctc_torque(
    model: &dyn PlantModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    refpt: &ReferencePoint,
) -> DVector<f64> {
    model.inertia(q) * &refpt.qddot + model.coriolis(q, qdot) * &refpt.qdot + model.gravity(q)
}

/// PD feedback `−K_p e − K_d ė` with diagonal gain matrices.
pub fn pd_torque(e: &DVector<f64>, edot: &DVector<f64>, gains: &Gains) -> DVector<f64> {
    -e * gains.kp - edot * gains.kd
}

/// Assemble the control law from an already-evaluated feedforward term and
/// clamp it component-wise to `±u_max`.
pub fn assemble_control(
    model: &dyn PlantModel,
    state: &PlantState,
    refpt: &ReferencePoint,
    gains: &Gains,
    feedforward: &DVector<f64>,
    u_max: f64,
) -> DVector<f64> {
    let e = &state.q - &refpt.q;
    let edot = &state.qdot - &refpt.qdot;
    let mut u = ctc_torque(model, &state.q, &state.qdot, refpt)
        + pd_torque(&e, &edot, gains)
        + feedforward;
    for v in u.iter_mut() {
        *v = v.clamp(-u_max, u_max);
    }
    u
}

/// The full control law of one variant: CTC plus PD plus the predictor's
/// feedforward when one is attached.
pub fn control_torque(
    model: &dyn PlantModel,
    state: &PlantState,
    refpt: &ReferencePoint,
    gains: &Gains,
    predictor: Option<&VectorPredictor>,
    x: &[f64],
    u_max: f64,
) -> DVector<f64> {
    let ff = match predictor {
        Some(vp) => DVector::from_vec(vp.predict(x)),
        None => DVector::zeros(state.q.len()),
    };
    assemble_control(model, state, refpt, gains, &ff, u_max)
}
