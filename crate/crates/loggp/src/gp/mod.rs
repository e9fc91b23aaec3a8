//! Exact Gaussian process regression with incremental factor updates.
//!
//! A [`FactorizedModel`] keeps the lower-triangular factor of the
//! noise-regularized kernel matrix `K + σ_on² I` and the solved target
//! vector `(K + σ_on² I)⁻¹ y` current as points stream in, so posterior
//! evaluation stays O(N) for the mean and O(N²) for the variance, and an
//! insertion costs O(N²) instead of a refactorization. The same type doubles
//! as the inference engine inside every local model of the tree layer.

mod chol;

pub(crate) use chol::CholFactor;

use thiserror::Error;

/// Base diagonal jitter, as a fraction of σ_f²; retried once with
/// [`JITTER_RETRY`] when the factorization still fails. Streams of
/// near-duplicate inputs make the kernel matrix ill-conditioned, so a small
/// regularizer is always applied.
pub const JITTER_BASE: f64 = 1e-8;
/// Escalated jitter fraction used on factorization failure.
pub const JITTER_RETRY: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix not positive definite at leading minor {minor}")]
    NotPositiveDefinite { minor: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("operation requires a nonempty dataset")]
    EmptyDataset,
}

/// Squared-exponential kernel parameters plus the target noise deviation.
///
/// Ordered as the parameter vector (σ_f, l_1 … l_ρ, σ_on); every entry is
/// strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub sigma_f: f64,
    pub lengthscales: Vec<f64>,
    pub sigma_on: f64,
}

impl Hyperparameters {
    pub fn new(sigma_f: f64, lengthscales: Vec<f64>, sigma_on: f64) -> Result<Self, GpError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(sigma_f) || !ok(sigma_on) || lengthscales.is_empty() || !lengthscales.iter().all(|&l| ok(l)) {
            return Err(GpError::InvalidHyperparameters(format!(
                "all entries must be finite and positive (sigma_f={sigma_f}, sigma_on={sigma_on}, lengthscales={lengthscales:?})"
            )));
        }
        Ok(Self { sigma_f, lengthscales, sigma_on })
    }

    /// Input dimension ρ.
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Number of free parameters, ρ + 2.
    pub fn n_params(&self) -> usize {
        self.lengthscales.len() + 2
    }

    /// Flatten in the fixed (σ_f, l_1…l_ρ, σ_on) order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.sigma_f);
        v.extend_from_slice(&self.lengthscales);
        v.push(self.sigma_on);
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<Self, GpError> {
        if v.len() < 3 {
            return Err(GpError::InvalidHyperparameters("need at least 3 entries".into()));
        }
        Self::new(v[0], v[1..v.len() - 1].to_vec(), v[v.len() - 1])
    }
}

/// Ordered training pairs; inputs stored row-major with a fixed dimension.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self { dim, inputs: Vec::new(), targets: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[(&[f64], f64)]) -> Self {
        let mut d = Self::new(dim);
        for (x, y) in rows {
            d.push(x, *y);
        }
        d
    }

    /// Append a pair. Panics on dimension mismatch; callers validate inputs.
    pub fn push(&mut self, x: &[f64], y: f64) {
        assert_eq!(x.len(), self.dim, "input dimension mismatch");
        self.inputs.extend_from_slice(x);
        self.targets.push(y);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Drop the oldest pair.
    pub fn remove_front(&mut self) {
        if !self.is_empty() {
            self.inputs.drain(..self.dim);
            self.targets.remove(0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (0..self.len()).map(|i| (self.input(i), self.target(i)))
    }
}

/// Precomputed kernel constants: σ_f² and 1/(2 l_i²) per dimension.
#[derive(Debug, Clone)]
struct KernelParams {
    sigma_f2: f64,
    inv_two_l2: Vec<f64>,
}

impl KernelParams {
    fn from(hp: &Hyperparameters) -> Self {
        Self {
            sigma_f2: hp.sigma_f * hp.sigma_f,
            inv_two_l2: hp.lengthscales.iter().map(|l| 0.5 / (l * l)).collect(),
        }
    }

    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.inv_two_l2.len() {
            let d = a[i] - b[i];
            s += d * d * self.inv_two_l2[i];
        }
        self.sigma_f2 * (-s).exp()
    }
}

/// Squared-exponential kernel, `σ_f² exp(−Σ (a_i−b_i)²/(2 l_i²))`.
///
/// Panics if the inputs and lengthscales do not share a dimension.
pub fn kernel_eval(a: &[f64], b: &[f64], hp: &Hyperparameters) -> f64 {
    assert_eq!(a.len(), hp.dim(), "input dimension mismatch");
    assert_eq!(b.len(), hp.dim(), "input dimension mismatch");
    KernelParams::from(hp).eval(a, b)
}

/// Dense kernel matrix K with `K_ij = k(x⁽ⁱ⁾, x⁽ʲ⁾)`.
pub fn kernel_matrix(data: &Dataset, hp: &Hyperparameters) -> nalgebra::DMatrix<f64> {
    let n = data.len();
    let kp = KernelParams::from(hp);
    nalgebra::DMatrix::from_fn(n, n, |i, j| kp.eval(data.input(i), data.input(j)))
}

/// Log marginal likelihood of the targets under the given hyperparameters,
/// computed through the factorization (no explicit inverse or determinant).
pub fn log_marginal_likelihood(data: &Dataset, hp: &Hyperparameters) -> Result<f64, GpError> {
    if data.is_empty() {
        return Err(GpError::EmptyDataset);
    }
    let model = FactorizedModel::fit(data.clone(), hp.clone())?;
    Ok(model.log_marginal_likelihood())
}

/// Gradient of the log marginal likelihood with respect to
/// (σ_f, l_1…l_ρ, σ_on), in that order.
///
/// Component i is `½(yᵀK̃ ∂K/∂θᵢ K̃ y − tr(K̃ ∂K/∂θᵢ))` with
/// `K̃ = (K + σ_on² I)⁻¹`; the diagonal jitter is treated as a constant.
pub fn nll_gradient(data: &Dataset, hp: &Hyperparameters) -> Result<Vec<f64>, GpError> {
    if data.is_empty() {
        return Err(GpError::EmptyDataset);
    }
    let model = FactorizedModel::fit(data.clone(), hp.clone())?;
    Ok(model.likelihood_gradient())
}

/// Gaussian process with the factorization of `K + σ_on² I` kept current.
#[derive(Debug, Clone)]
pub struct FactorizedModel {
    data: Dataset,
    hp: Hyperparameters,
    kernel: KernelParams,
    factor: CholFactor,
    /// `L⁻¹ y`, maintained incrementally.
    white_targets: Vec<f64>,
    /// `(K + σ_on² I)⁻¹ y`, refreshed after every structural change.
    solved_targets: Vec<f64>,
    /// Jitter actually applied to the diagonal (absolute value).
    jitter: f64,
}

impl FactorizedModel {
    pub fn empty(dim: usize, hp: Hyperparameters) -> Result<Self, GpError> {
        if hp.dim() != dim {
            return Err(GpError::DimensionMismatch { expected: dim, got: hp.dim() });
        }
        let kernel = KernelParams::from(&hp);
        let jitter = JITTER_BASE * kernel.sigma_f2;
        Ok(Self {
            data: Dataset::new(dim),
            kernel,
            hp,
            factor: CholFactor::new(),
            white_targets: Vec::new(),
            solved_targets: Vec::new(),
            jitter,
        })
    }

    /// Batch factorization of a dataset; retries once with escalated jitter.
    pub fn fit(data: Dataset, hp: Hyperparameters) -> Result<Self, GpError> {
        let mut model = Self::empty(data.dim(), hp)?;
        model.refit(data)?;
        Ok(model)
    }

    /// Batch factorization with an exact absolute jitter value; used to
    /// rebuild snapshots bit-for-bit.
    pub(crate) fn fit_with_jitter(
        data: Dataset,
        hp: Hyperparameters,
        jitter: f64,
    ) -> Result<Self, GpError> {
        let mut model = Self::empty(data.dim(), hp)?;
        match model.factorize(&data, jitter) {
            Ok((factor, white)) => {
                model.data = data;
                model.factor = factor;
                model.white_targets = white;
                model.jitter = jitter;
                model.resolve_targets();
                Ok(model)
            }
            Err(minor) => Err(GpError::NotPositiveDefinite { minor }),
        }
    }

    /// Factorize `data` under the current kernel, trying the base jitter
    /// first. Commits on success; on failure the model keeps its previous
    /// state except that `data` is stored back untouched by the caller.
    fn refit(&mut self, data: Dataset) -> Result<(), GpError> {
        for level in [JITTER_BASE, JITTER_RETRY] {
            let jitter = level * self.kernel.sigma_f2;
            match self.factorize(&data, jitter) {
                Ok((factor, white)) => {
                    self.data = data;
                    self.factor = factor;
                    self.white_targets = white;
                    self.jitter = jitter;
                    self.resolve_targets();
                    return Ok(());
                }
                Err(minor) if level >= JITTER_RETRY => {
                    self.data = data;
                    return Err(GpError::NotPositiveDefinite { minor });
                }
                Err(_) => {}
            }
        }
        unreachable!("jitter ladder always terminates");
    }

    /// Pure batch factorization: the factor and `L⁻¹y` for `data`, or the
    /// failing leading-minor index.
    fn factorize(&self, data: &Dataset, jitter: f64) -> Result<(CholFactor, Vec<f64>), usize> {
        let diag = self.kernel.sigma_f2 + self.hp.sigma_on * self.hp.sigma_on + jitter;
        let mut factor = CholFactor::new();
        let mut white = Vec::with_capacity(data.len());
        let mut cross = Vec::with_capacity(data.len());
        for i in 0..data.len() {
            cross.clear();
            let xi = data.input(i);
            for j in 0..i {
                cross.push(self.kernel.eval(data.input(j), xi));
            }
            factor.extend(&cross, diag)?;
            let row = factor.row(i);
            let mut s = data.target(i);
            for (w, r) in white.iter().zip(row.iter()) {
                s -= w * r;
            }
            white.push(s / row[i]);
        }
        Ok((factor, white))
    }

    fn resolve_targets(&mut self) {
        self.solved_targets = self.white_targets.clone();
        self.factor.solve_upper(&mut self.solved_targets);
    }

    /// Add one pair via a rank-one extension of the factor. On a failed pivot
    /// the whole model is refactorized once with escalated jitter.
    pub fn insert_point(&mut self, x: &[f64], y: f64) -> Result<(), GpError> {
        if x.len() != self.data.dim() {
            return Err(GpError::DimensionMismatch { expected: self.data.dim(), got: x.len() });
        }
        let n = self.data.len();
        let mut cross = Vec::with_capacity(n);
        for i in 0..n {
            cross.push(self.kernel.eval(self.data.input(i), x));
        }
        let diag = self.kernel.sigma_f2 + self.hp.sigma_on * self.hp.sigma_on + self.jitter;
        match self.factor.extend(&cross, diag) {
            Ok(()) => {
                self.data.push(x, y);
                let row = self.factor.row(n);
                let mut s = y;
                for (w, r) in self.white_targets.iter().zip(row.iter()) {
                    s -= w * r;
                }
                self.white_targets.push(s / row[n]);
                self.resolve_targets();
                Ok(())
            }
            Err(minor) => {
                if self.jitter >= JITTER_RETRY * self.kernel.sigma_f2 {
                    return Err(GpError::NotPositiveDefinite { minor });
                }
                // Escalate once: refactorize everything including the new point.
                let mut data = self.data.clone();
                data.push(x, y);
                let jitter = JITTER_RETRY * self.kernel.sigma_f2;
                match self.factorize(&data, jitter) {
                    Ok((factor, white)) => {
                        self.data = data;
                        self.factor = factor;
                        self.white_targets = white;
                        self.jitter = jitter;
                        self.resolve_targets();
                        Ok(())
                    }
                    Err(minor) => Err(GpError::NotPositiveDefinite { minor }),
                }
            }
        }
    }

    /// Full refactorization under new hyperparameters; the data is unchanged.
    /// On failure the previous parametrization and factor are kept.
    pub fn refresh(&mut self, hp: Hyperparameters) -> Result<(), GpError> {
        if hp.dim() != self.data.dim() {
            return Err(GpError::DimensionMismatch { expected: self.data.dim(), got: hp.dim() });
        }
        let old_hp = std::mem::replace(&mut self.hp, hp);
        let old_kernel = std::mem::replace(&mut self.kernel, KernelParams::from(&self.hp));
        let data = std::mem::take(&mut self.data);
        match self.refit(data) {
            Ok(()) => Ok(()),
            Err(e) => {
                self.hp = old_hp;
                self.kernel = old_kernel;
                Err(e)
            }
        }
    }

    /// Drop the oldest pair and refactorize.
    pub fn remove_oldest(&mut self) -> Result<(), GpError> {
        let mut data = std::mem::take(&mut self.data);
        data.remove_front();
        self.refit(data)
    }

    /// Posterior mean and variance at `x`; the variance is clamped to
    /// `[0, σ_f²]`. An empty model returns the prior `(0, σ_f²)`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.data.len();
        if n == 0 {
            return (0.0, self.kernel.sigma_f2);
        }
        let mut k = Vec::with_capacity(n);
        for i in 0..n {
            k.push(self.kernel.eval(self.data.input(i), x));
        }
        let mean: f64 = k.iter().zip(self.solved_targets.iter()).map(|(a, b)| a * b).sum();
        self.factor.solve_lower(&mut k);
        let explained: f64 = k.iter().map(|v| v * v).sum();
        let var = (self.kernel.sigma_f2 - explained).clamp(0.0, self.kernel.sigma_f2);
        (mean, var)
    }

    /// Posterior mean only; O(N) after the kernel vector.
    pub fn posterior_mean(&self, x: &[f64]) -> f64 {
        let n = self.data.len();
        let mut mean = 0.0;
        for i in 0..n {
            mean += self.kernel.eval(self.data.input(i), x) * self.solved_targets[i];
        }
        mean
    }

    /// Log marginal likelihood through the stored factor.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.data.len() as f64;
        let quad: f64 = self.white_targets.iter().map(|v| v * v).sum();
        -0.5 * quad - 0.5 * self.factor.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    /// Likelihood gradient in (σ_f, l_1…l_ρ, σ_on) order; see [`nll_gradient`].
    ///
    /// Runs in one pass over the lower triangle of `(K + σ_on² I)⁻¹`, which is
    /// assembled from the packed inverse of the stored factor; this is the hot
    /// path of the online hyperparameter update.
    pub fn likelihood_gradient(&self) -> Vec<f64> {
        let n = self.data.len();
        let rho = self.hp.dim();
        let mut grad = vec![0.0; rho + 2];
        if n == 0 {
            return grad;
        }
        let ktilde = self.factor.inverse_spd_lower();
        let row = |a: usize| a * (a + 1) / 2;
        let alpha = &self.solved_targets;
        let mut d2 = vec![0.0; rho];
        let mut quad_k = 0.0; // Σ w∘K₀ over all ordered pairs
        let mut len_acc = vec![0.0; rho]; // Σ w∘K₀∘d²_i
        for a in 0..n {
            let xa = self.data.input(a);
            let krow = &ktilde[row(a)..row(a) + a + 1];
            for b in 0..=a {
                let xb = self.data.input(b);
                let mut s = 0.0;
                for i in 0..rho {
                    let d = xa[i] - xb[i];
                    let dd = d * d;
                    d2[i] = dd;
                    s += dd * self.kernel.inv_two_l2[i];
                }
                let k0 = self.kernel.sigma_f2 * (-s).exp();
                let w = alpha[a] * alpha[b] - krow[b];
                let scale = if a == b { 1.0 } else { 2.0 };
                let wk = scale * w * k0;
                quad_k += wk;
                for i in 0..rho {
                    len_acc[i] += wk * d2[i];
                }
            }
        }
        grad[0] = quad_k / self.hp.sigma_f;
        for i in 0..rho {
            let l = self.hp.lengthscales[i];
            grad[1 + i] = 0.5 * len_acc[i] / (l * l * l);
        }
        let trace: f64 = (0..n).map(|i| ktilde[row(i) + i]).sum();
        let alpha_sq: f64 = alpha.iter().map(|v| v * v).sum();
        grad[rho + 1] = self.hp.sigma_on * (alpha_sq - trace);
        grad
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hp
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Row `i` of the maintained lower-triangular factor (length `i + 1`);
    /// exposed for verification against reference factorizations.
    pub fn factor_row(&self, i: usize) -> &[f64] {
        self.factor.row(i)
    }
}
