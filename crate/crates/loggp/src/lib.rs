//! Online learning control with locally growing random trees of Gaussian
//! processes.
//!
//! The crate learns the torques a human applies to a robotic device from
//! inverse-dynamics residuals, streaming them into a tree of bounded-size
//! local Gaussian process models that supports update and prediction at
//! control-loop rates. The learned model feeds forward into a computed-torque
//! plus PD control law, and an experiment harness reproduces a full
//! simulated study protocol around it: closed-loop trials, synthetic patient
//! cohorts, study metrics, and latency benchmarks.
//!
//! Start with the guide in `book/` for the concepts; the API surface is:
//!
//! * [`gp`] — exact GP regression with incremental factor updates
//! * [`tree`] — the growing local-model tree and the vector predictor
//! * [`plant`] — Euler-Lagrange plant models, integration, residual sampling
//! * [`human`] — synthetic patient torque fields and cohort sampling
//! * [`control`] — reference trajectory and the learning control law
//! * [`harness`] — trials, studies, benchmarks, and file export

pub mod control;
pub mod gp;
pub mod harness;
pub mod human;
pub mod plant;
pub mod tree;

pub mod guide;
