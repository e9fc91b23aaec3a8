//! Locally growing random trees of Gaussian processes.
//!
//! A tree starts as a single leaf holding an exact GP. Streamed pairs are
//! routed from the root by sampling Bernoulli variables whose probabilities
//! are saturating linear functions of one input coordinate; a full leaf
//! (`N̄` pairs) is split into two children before the pair descends further.
//! Every insertion also performs one sign-based gradient step on the
//! receiving leaf's hyperparameters. Predictions aggregate the active leaves'
//! posterior means weighted by the product of routing probabilities along
//! each root-to-leaf path, which keeps both update and prediction costs
//! logarithmic in the total number of stored pairs.
//!
//! One tree learns one output dimension; a [`VectorPredictor`] bundles `d`
//! independent trees over the shared input layout `(q, q̇, q̈, t)`.

mod snapshot;

pub use snapshot::SnapshotError;

use crate::gp::{Dataset, FactorizedModel, GpError, Hyperparameters};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Bound on the unconstrained (log-space) parameters; keeps `exp` finite no
/// matter how long a gradient direction persists.
const THETA_LOG_BOUND: f64 = 30.0;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("training pair contains non-finite components")]
    NonFiniteInput,
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("leaf data has zero spread in every dimension")]
    DegenerateSplit,
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// RPROP constants for the per-parameter step widths, in log space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpropConfig {
    pub initial_step: f64,
    pub accel: f64,
    pub brake: f64,
    pub min_step: f64,
    pub max_step: f64,
}

impl Default for RpropConfig {
    fn default() -> Self {
        Self { initial_step: 0.01, accel: 1.2, brake: 0.5, min_step: 1e-6, max_step: 0.5 }
    }
}

/// Tree construction and adaptation parameters.
#[derive(Debug, Clone)]
pub struct TreeConfig {
    /// Maximum number of pairs per leaf before it splits.
    pub n_bar: usize,
    /// Overlap width of a split, as a fraction of the data extension in the
    /// split dimension.
    pub overlap_ratio: f64,
    /// Hyperparameters assigned to the root leaf.
    pub init_hyper: Hyperparameters,
    /// Run one hyperparameter update per insertion.
    pub adapt: bool,
    /// Keep the noise deviation fixed during adaptation.
    pub freeze_noise: bool,
    pub rprop: RpropConfig,
}

impl TreeConfig {
    pub fn new(init_hyper: Hyperparameters) -> Self {
        Self {
            n_bar: 100,
            overlap_ratio: 0.1,
            init_hyper,
            adapt: true,
            freeze_noise: false,
            rprop: RpropConfig::default(),
        }
    }
}

/// One splitting plane: dimension, position, and overlap width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub dim: usize,
    pub value: f64,
    pub overlap: f64,
}

impl Split {
    /// Probability of routing `x` to the right child: 0 left of the overlap
    /// region, 1 right of it, linear in between. A zero overlap degenerates
    /// to a step function taking ½ exactly at the split value, the limit of
    /// the linear ramp.
    pub fn probability(&self, x: &[f64]) -> f64 {
        let v = x[self.dim];
        if self.overlap <= 0.0 {
            return if v < self.value {
                0.0
            } else if v > self.value {
                1.0
            } else {
                0.5
            };
        }
        let half = 0.5 * self.overlap;
        if v < self.value - half {
            0.0
        } else if v > self.value + half {
            1.0
        } else {
            (v - self.value) / self.overlap + 0.5
        }
    }
}

/// Pick the splitting plane for a full leaf: the dimension with the maximum
/// spread (ties break to the lowest index), positioned at the mean of that
/// dimension, with the overlap a fixed ratio of the spread.
pub fn choose_split(data: &Dataset, overlap_ratio: f64) -> Result<Split, TreeError> {
    let dim = data.dim();
    let n = data.len();
    assert!(n > 0, "choose_split on empty data");
    let mut best_dim = 0usize;
    let mut best_spread = 0.0f64;
    let mut best_mean = 0.0;
    for j in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for i in 0..n {
            let v = data.input(i)[j];
            lo = lo.min(v);
            hi = hi.max(v);
            sum += v;
        }
        let spread = hi - lo;
        if spread > best_spread {
            best_dim = j;
            best_spread = spread;
            best_mean = sum / n as f64;
        }
    }
    if best_spread <= 0.0 {
        return Err(TreeError::DegenerateSplit);
    }
    Ok(Split { dim: best_dim, value: best_mean, overlap: overlap_ratio * best_spread })
}

/// Per-leaf adaptation state: unconstrained parameters θ̃ (mapped to valid
/// hyperparameters by the element-wise exponential), RPROP step widths, and
/// the previous gradient signs.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub theta_log: Vec<f64>,
    pub step: Vec<f64>,
    pub prev_sign: Vec<i8>,
}

impl HyperState {
    pub fn from_hyper(hp: &Hyperparameters, rprop: &RpropConfig) -> Self {
        let theta_log: Vec<f64> = hp.to_vec().iter().map(|v| v.ln()).collect();
        let n = theta_log.len();
        Self { theta_log, step: vec![rprop.initial_step; n], prev_sign: vec![0; n] }
    }

    pub fn hyper(&self) -> Result<Hyperparameters, GpError> {
        let theta: Vec<f64> = self.theta_log.iter().map(|v| v.exp()).collect();
        Hyperparameters::from_vec(&theta)
    }
}

/// Apply one RPROP update to `state` given the log-space gradient. Returns
/// whether any parameter moved. `skip_last` freezes the final (noise)
/// component.
fn rprop_step(state: &mut HyperState, grad: &[f64], cfg: &RpropConfig, skip_last: bool) -> bool {
    let mut moved = false;
    let last = state.theta_log.len() - 1;
    for i in 0..state.theta_log.len() {
        if skip_last && i == last {
            continue;
        }
        let sign: i8 = if grad[i] > 0.0 {
            1
        } else if grad[i] < 0.0 {
            -1
        } else {
            0
        };
        let agreement = i32::from(sign) * i32::from(state.prev_sign[i]);
        if agreement > 0 {
            state.step[i] = (state.step[i] * cfg.accel).min(cfg.max_step);
        } else if agreement < 0 {
            state.step[i] = (state.step[i] * cfg.brake).max(cfg.min_step);
        }
        if sign != 0 {
            state.theta_log[i] = (state.theta_log[i] + f64::from(sign) * state.step[i])
                .clamp(-THETA_LOG_BOUND, THETA_LOG_BOUND);
            moved = true;
        }
        state.prev_sign[i] = sign;
    }
    moved
}

#[derive(Debug, Clone)]
pub struct LeafNode {
    pub model: FactorizedModel,
    pub hyper_state: HyperState,
}

#[derive(Debug, Clone)]
pub(crate) enum Node {
    Routing { split: Split, left: usize, right: usize },
    Leaf(Box<LeafNode>),
}

/// A locally growing random tree of GPs for one output dimension.
#[derive(Debug, Clone)]
pub struct LogGpTree {
    config: TreeConfig,
    dim: usize,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    total_count: u64,
    dropped: u64,
    grad_skips: u64,
}

impl LogGpTree {
    pub fn new(config: TreeConfig, seed: u64) -> Result<Self, TreeError> {
        Self::with_rng(config, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(config: TreeConfig, rng: ChaCha8Rng) -> Result<Self, TreeError> {
        let dim = config.init_hyper.dim();
        let model = FactorizedModel::empty(dim, config.init_hyper.clone())?;
        let hyper_state = HyperState::from_hyper(&config.init_hyper, &config.rprop);
        Ok(Self {
            config,
            dim,
            nodes: vec![Node::Leaf(Box::new(LeafNode { model, hyper_state }))],
            rng,
            total_count: 0,
            dropped: 0,
            grad_skips: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    /// Number of pairs currently stored across all leaves.
    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    /// Non-finite samples rejected so far.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Hyperparameter updates skipped because of a non-finite gradient or a
    /// failed refactorization.
    pub fn grad_skips(&self) -> u64 {
        self.grad_skips
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }

    pub fn depth(&self) -> usize {
        fn depth_of(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf(_) => 0,
                Node::Routing { left, right, .. } => {
                    1 + depth_of(nodes, *left).max(depth_of(nodes, *right))
                }
            }
        }
        depth_of(&self.nodes, 0)
    }

    pub(crate) fn leaf(&self, id: usize) -> &LeafNode {
        match &self.nodes[id] {
            Node::Leaf(l) => l,
            Node::Routing { .. } => panic!("node {id} is not a leaf"),
        }
    }

    fn leaf_mut(&mut self, id: usize) -> &mut LeafNode {
        match &mut self.nodes[id] {
            Node::Leaf(l) => l,
            Node::Routing { .. } => panic!("node {id} is not a leaf"),
        }
    }

    #[cfg(test)]
    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Stream one training pair into the tree.
    ///
    /// Routes by Bernoulli sampling at each internal node, splits a full
    /// leaf first (evicting the oldest pair instead when the leaf has zero
    /// spread in every dimension), adds the pair, and runs one
    /// hyperparameter step on the receiving leaf.
    pub fn insert(&mut self, x: &[f64], y: f64) -> Result<(), TreeError> {
        if x.len() != self.dim {
            return Err(TreeError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            self.dropped += 1;
            return Err(TreeError::NonFiniteInput);
        }
        enum Step {
            Route(Split, usize, usize),
            LeafFull,
            LeafReady,
        }
        let mut id = 0usize;
        loop {
            let step = match &self.nodes[id] {
                Node::Routing { split, left, right } => Step::Route(*split, *left, *right),
                Node::Leaf(l) => {
                    if l.model.len() >= self.config.n_bar {
                        Step::LeafFull
                    } else {
                        Step::LeafReady
                    }
                }
            };
            match step {
                Step::Route(split, left, right) => {
                    let p = split.probability(x);
                    id = if self.rng.random::<f64>() < p { right } else { left };
                }
                Step::LeafFull => match self.split_node(id) {
                    Ok(()) => {}
                    Err(TreeError::DegenerateSplit) => {
                        self.leaf_mut(id).model.remove_oldest()?;
                        self.total_count -= 1;
                    }
                    Err(e) => return Err(e),
                },
                Step::LeafReady => break,
            }
        }
        self.leaf_mut(id).model.insert_point(x, y)?;
        self.total_count += 1;
        if self.config.adapt {
            self.hyper_step(id);
        }
        Ok(())
    }

    /// Replace the full leaf `id` by a routing node with two children and
    /// distribute its pairs by sampling the routing probability per pair.
    /// Both children inherit the parent's adaptation state.
    pub(crate) fn split_node(&mut self, id: usize) -> Result<(), TreeError> {
        let split = choose_split(self.leaf(id).model.data(), self.config.overlap_ratio)?;
        let n = self.leaf(id).model.len();
        let draws: Vec<f64> = (0..n).map(|_| self.rng.random::<f64>()).collect();
        let (left_data, right_data, hp, hyper_state) = {
            let leaf = self.leaf(id);
            let data = leaf.model.data();
            let mut left = Dataset::new(self.dim);
            let mut right = Dataset::new(self.dim);
            for (i, (x, y)) in data.iter().enumerate() {
                if draws[i] < split.probability(x) {
                    right.push(x, y);
                } else {
                    left.push(x, y);
                }
            }
            (left, right, leaf.model.hyper().clone(), leaf.hyper_state.clone())
        };
        debug_assert_eq!(left_data.len() + right_data.len(), n, "split lost pairs");
        let left_model = FactorizedModel::fit(left_data, hp.clone())?;
        let right_model = FactorizedModel::fit(right_data, hp)?;
        let left_id = self.nodes.len();
        self.nodes.push(Node::Leaf(Box::new(LeafNode {
            model: left_model,
            hyper_state: hyper_state.clone(),
        })));
        let right_id = self.nodes.len();
        self.nodes.push(Node::Leaf(Box::new(LeafNode { model: right_model, hyper_state })));
        self.nodes[id] = Node::Routing { split, left: left_id, right: right_id };
        Ok(())
    }

    /// One RPROP ascent step on the leaf's log-likelihood, followed by a
    /// refactorization under the moved hyperparameters. Non-finite gradients
    /// and failed refactorizations leave the previous state untouched.
    pub(crate) fn hyper_step(&mut self, id: usize) {
        let skip_last = self.config.freeze_noise;
        let rprop = self.config.rprop.clone();
        let leaf = self.leaf_mut(id);
        if leaf.model.is_empty() {
            return;
        }
        let raw = leaf.model.likelihood_gradient();
        // Chain rule for the log-space parametrization: ∂/∂θ̃ = θ ∂/∂θ.
        let theta = leaf.model.hyper().to_vec();
        let grad: Vec<f64> = raw.iter().zip(theta.iter()).map(|(g, t)| g * t).collect();
        if grad.iter().any(|g| !g.is_finite()) {
            self.grad_skips += 1;
            return;
        }
        let saved = leaf.hyper_state.clone();
        if !rprop_step(&mut leaf.hyper_state, &grad, &rprop, skip_last) {
            return;
        }
        let refreshed = leaf.hyper_state.hyper().and_then(|hp| leaf.model.refresh(hp));
        if refreshed.is_err() {
            leaf.hyper_state = saved;
            self.grad_skips += 1;
        }
    }

    /// Active leaves and their weights at `x`: the product over the
    /// root-to-leaf path of `p` for right turns and `1 − p` for left turns.
    /// Zero-weight subtrees are pruned, so only the few active leaves are
    /// visited when overlaps are small relative to the data.
    pub fn leaf_weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, 1.0f64)];
        while let Some((id, w)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf(_) => out.push((id, w)),
                Node::Routing { split, left, right } => {
                    let p = split.probability(x);
                    let wl = w * (1.0 - p);
                    let wr = w * p;
                    if wl > 0.0 {
                        stack.push((*left, wl));
                    }
                    if wr > 0.0 {
                        stack.push((*right, wr));
                    }
                }
            }
        }
        out
    }

    /// Mixture-of-experts prediction: the weighted sum of active leaves'
    /// posterior means. Empty leaves contribute the prior mean 0; an empty
    /// tree predicts 0.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut stack = vec![(0usize, 1.0f64)];
        while let Some((id, w)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf(l) => acc += w * l.model.posterior_mean(x),
                Node::Routing { split, left, right } => {
                    let p = split.probability(x);
                    let wl = w * (1.0 - p);
                    let wr = w * p;
                    if wl > 0.0 {
                        stack.push((*left, wl));
                    }
                    if wr > 0.0 {
                        stack.push((*right, wr));
                    }
                }
            }
        }
        acc
    }

    /// Sum of pairs stored in leaves; equals [`Self::total_count`].
    pub fn stored_pairs(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Leaf(l) => l.model.len() as u64,
                Node::Routing { .. } => 0,
            })
            .sum()
    }
}

/// `d` independent trees over the input layout `(q, q̇, q̈, t)` of dimension
/// `3d + 1`, one per output dimension.
#[derive(Debug, Clone)]
pub struct VectorPredictor {
    trees: Vec<LogGpTree>,
}

impl VectorPredictor {
    /// Build `output_dim` trees sharing one configuration; tree `i` runs on
    /// its own deterministic RNG stream derived from `seed`.
    pub fn new(output_dim: usize, config: TreeConfig, seed: u64) -> Result<Self, TreeError> {
        assert_eq!(config.init_hyper.dim(), 3 * output_dim + 1, "input dimension must be 3d+1");
        let trees = (0..output_dim)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                LogGpTree::with_rng(config.clone(), rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { trees })
    }

    pub fn from_trees(trees: Vec<LogGpTree>) -> Self {
        Self { trees }
    }

    pub fn output_dim(&self) -> usize {
        self.trees.len()
    }

    pub fn input_dim(&self) -> usize {
        self.trees.first().map_or(0, |t| t.dim())
    }

    pub fn trees(&self) -> &[LogGpTree] {
        &self.trees
    }

    /// Insert `(x, y_i)` into tree `i` for every output dimension.
    ///
    /// The trees are fully independent (separate RNG streams, no shared
    /// state), so this is safe to parallelize; the sequential loop is kept
    /// because per-insert work is far below a control tick and task dispatch
    /// only adds latency tail. [`Self::update_parallel`] is the threaded
    /// variant for offline bulk feeding.
    pub fn update(&mut self, x: &[f64], y: &[f64]) -> Result<(), TreeError> {
        assert_eq!(y.len(), self.trees.len(), "target dimension mismatch");
        for (tree, yi) in self.trees.iter_mut().zip(y.iter()) {
            tree.insert(x, *yi)?;
        }
        Ok(())
    }

    /// Threaded update across trees; identical result to [`Self::update`].
    pub fn update_parallel(&mut self, x: &[f64], y: &[f64]) -> Result<(), TreeError> {
        assert_eq!(y.len(), self.trees.len(), "target dimension mismatch");
        self.trees
            .par_iter_mut()
            .zip(y.par_iter())
            .map(|(tree, yi)| tree.insert(x, *yi))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(())
    }

    /// Per-dimension predictions concatenated into a vector.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }

    /// Pairs stored per tree (equal across trees after error-free updates).
    pub fn total_count(&self) -> u64 {
        self.trees.first().map_or(0, |t| t.total_count())
    }
}

#[cfg(test)]
mod tests;
