//! The h_ω model family: variational BNN with a heteroscedastic Gaussian
//! head, deterministic MLP baseline, and per-output Gaussian processes,
//! unified behind one "draw M predictive samples" interface.
//!
//! Every differentiable path exists twice: a tape version used by
//! training (gradients w.r.t. parameters) and a plain value version used
//! by evaluation, where thousands of forward passes per decision make
//! tape bookkeeping pure overhead. The two share layer code only through
//! the same formulas; tests pin them against each other.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("gp fit: {0}")]
    Fit(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpArchitecture {
    pub fn new(
        input_dim: usize,
        hidden: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self, PredictorError> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(PredictorError::Invalid(
                "architecture dims must be positive".into(),
            ));
        }
        Ok(MlpArchitecture {
            input_dim,
            hidden,
            output_dim,
            activation,
        })
    }

    /// NV default: hidden (128, 64, 64).
    pub fn nv_default(d_x: usize, d_y: usize) -> Self {
        MlpArchitecture::new(d_x, vec![128, 64, 64], d_y, Activation::Tanh).expect("positive dims")
    }

    /// NVQP/POP default: hidden (512, 128, 128).
    pub fn wide_default(d_x: usize, d_y: usize) -> Self {
        MlpArchitecture::new(d_x, vec![512, 128, 128], d_y, Activation::Tanh)
            .expect("positive dims")
    }

    /// Layer dimensions [d_x, hidden…, d_y].
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.output_dim);
        d
    }

    /// Same net with the output widened to 2·d_y for the (μ ‖ log-var)
    /// BNN head.
    pub fn with_two_heads(&self) -> Self {
        let mut a = self.clone();
        a.output_dim *= 2;
        a
    }

    pub fn num_params(&self) -> usize {
        self.dims()
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }
}

/// One dense layer: weight matrix (out×in) and bias (out).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
}

impl MlpWeights {
    /// Xavier-uniform initialization.
    pub fn init(arch: &MlpArchitecture, rng: &mut ChaCha8Rng) -> Self {
        let layers = arch
            .dims()
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Tensor::matrix(
                    fan_out,
                    fan_in,
                    (0..fan_out * fan_in)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                )
                .expect("consistent dims");
                Layer {
                    w,
                    b: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        MlpWeights { layers }
    }

    pub fn zeros(arch: &MlpArchitecture) -> Self {
        let layers = arch
            .dims()
            .windows(2)
            .map(|d| Layer {
                w: Tensor::zeros(vec![d[1], d[0]]),
                b: Tensor::zeros(vec![d[1]]),
            })
            .collect();
        MlpWeights { layers }
    }

    /// Constant fill, used to build degenerate-limit test fixtures.
    pub fn full(arch: &MlpArchitecture, v: f64) -> Self {
        let layers = arch
            .dims()
            .windows(2)
            .map(|d| Layer {
                w: Tensor::full(vec![d[1], d[0]], v),
                b: Tensor::full(vec![d[1]], v),
            })
            .collect();
        MlpWeights { layers }
    }

    /// Flat views over all parameter tensors, ordered (w, b) per layer.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }
}

fn apply_activation_value(h: &mut [f64], act: Activation) {
    for v in h {
        *v = match act {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        };
    }
}

fn layer_value(w: &Tensor, b: &Tensor, h: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(cols, h.len());
    let wv = w.values();
    let bv = b.values();
    (0..rows)
        .map(|r| {
            let mut acc = bv[r];
            for c in 0..cols {
                acc += wv[r * cols + c] * h[c];
            }
            acc
        })
        .collect()
}

/// Point prediction without a tape: the fast path for evaluation.
pub fn ann_value_forward(weights: &MlpWeights, arch: &MlpArchitecture, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = weights.layers.len();
    for (i, layer) in weights.layers.iter().enumerate() {
        h = layer_value(&layer.w, &layer.b, &h);
        if i + 1 < n {
            apply_activation_value(&mut h, arch.activation);
        }
    }
    h
}

/// Tape handles for a deterministic net's parameters.
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

pub fn mlp_params_on_tape(tape: &Tape, weights: &MlpWeights) -> MlpVars {
    MlpVars {
        layers: weights
            .layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect(),
    }
}

fn apply_activation_var(h: &Var, act: Activation) -> Result<Var, AdError> {
    match act {
        Activation::Tanh => h.tanh(),
        Activation::Relu => h.relu(),
    }
}

/// Differentiable point prediction h_ω(x) on the tape.
pub fn ann_forward(
    tape: &Tape,
    x: &[f64],
    vars: &MlpVars,
    arch: &MlpArchitecture,
) -> Result<Var, AdError> {
    if x.len() != arch.input_dim {
        return Err(AdError::Contract(format!(
            "input has {} features, arch expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    let mut h = tape.leaf(Tensor::vector(x.to_vec()));
    let n = vars.layers.len();
    for (i, (w, b)) in vars.layers.iter().enumerate() {
        h = w.matmul(&h)?.add(b)?;
        if i + 1 < n {
            h = apply_activation_var(&h, arch.activation)?;
        }
    }
    Ok(h)
}

// ── variational BNN ──────────────────────────────────────────────────

/// Zero-mean Gaussian weight prior P(ω) with standard deviation σ_p.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Prior {
    pub sigma_p: f64,
}

impl Prior {
    pub fn new(sigma_p: f64) -> Result<Self, PredictorError> {
        if sigma_p <= 0.0 {
            return Err(PredictorError::Invalid(format!(
                "prior sigma must be > 0, got {sigma_p}"
            )));
        }
        Ok(Prior { sigma_p })
    }
}

impl Default for Prior {
    fn default() -> Self {
        Prior { sigma_p: 1.0 }
    }
}

/// Mean-field Gaussian posterior over the weights: per parameter a mean
/// μ_w and a pre-spread ρ_w with σ_w = softplus(ρ_w).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct VariationalWeights {
    pub mu: MlpWeights,
    pub rho: MlpWeights,
}

impl VariationalWeights {
    /// Xavier means; constant ρ chosen so σ_w = `sigma0`.
    pub fn init(arch: &MlpArchitecture, sigma0: f64, rng: &mut ChaCha8Rng) -> Self {
        let rho0 = (sigma0.exp() - 1.0).ln();
        let mut rho = MlpWeights::zeros(arch);
        for t in rho.tensors_mut() {
            for v in t.values_mut() {
                *v = rho0;
            }
        }
        VariationalWeights {
            mu: MlpWeights::init(arch, rng),
            rho,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.mu.tensors();
        t.extend(self.rho.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let (mu, rho) = (&mut self.mu, &mut self.rho);
        let mut t = mu.tensors_mut();
        t.extend(rho.tensors_mut());
        t
    }
}

/// Tape handles for θ: per layer (μ_w, ρ_w, μ_b, ρ_b).
pub struct BnnVars {
    pub mu: Vec<(Var, Var)>,
    pub rho: Vec<(Var, Var)>,
}

pub fn bnn_params_on_tape(tape: &Tape, theta: &VariationalWeights) -> BnnVars {
    BnnVars {
        mu: theta
            .mu
            .layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect(),
        rho: theta
            .rho
            .layers
            .iter()
            .map(|l| (tape.param(l.w.clone()), tape.param(l.b.clone())))
            .collect(),
    }
}

/// Standard-normal noise for one reparameterized weight draw, shaped like
/// the architecture's layers.
pub fn sample_weight_eps(arch: &MlpArchitecture, rng: &mut ChaCha8Rng) -> Vec<(Tensor, Tensor)> {
    arch.dims()
        .windows(2)
        .map(|d| {
            let w = Tensor::matrix(
                d[1],
                d[0],
                (0..d[1] * d[0])
                    .map(|_| StandardNormal.sample(rng))
                    .collect(),
            )
            .expect("consistent dims");
            let b = Tensor::vector((0..d[1]).map(|_| StandardNormal.sample(rng)).collect());
            (w, b)
        })
        .collect()
}

/// One reparameterized draw through the two-headed net, fully on the tape.
pub struct BnnDraw {
    /// h^μ + ε ∘ sqrt(exp(h^σ)); absent when no output noise was given.
    pub sample: Option<Var>,
    pub h_mu: Var,
    /// Log-variance head, clamped to [−10, 10].
    pub h_sigma: Var,
    /// C_ω = log Q_θ(ω) − log P(ω) at the drawn ω.
    pub c_omega: Var,
}

// Asymmetric clamp on the log-variance head: +10 prevents exp overflow
// during early training, while the floor sits low enough that a head
// driven to −30 really does silence the output noise (std 3e-7).
pub const H_SIGMA_LO: f64 = -40.0;
pub const H_SIGMA_HI: f64 = 10.0;

/// A reparameterized weight draw living on the tape: one concrete
/// ω = μ + softplus(ρ)∘ε per layer plus its C_ω.
pub struct ReparamNet {
    pub weights: Vec<(Var, Var)>,
    pub c_omega: Var,
}

/// Reparameterize every layer from the supplied noise and accumulate
/// C_ω = log Q_θ(ω) − log P(ω); everything stays differentiable in θ.
pub fn bnn_reparam(
    tape: &Tape,
    vars: &BnnVars,
    prior: &Prior,
    eps_w: &[(Tensor, Tensor)],
) -> Result<ReparamNet, AdError> {
    if eps_w.len() != vars.mu.len() {
        return Err(AdError::Contract(format!(
            "{} eps layers for {} net layers",
            eps_w.len(),
            vars.mu.len()
        )));
    }
    let mut weights = Vec::with_capacity(vars.mu.len());
    let mut c_omega: Option<Var> = None;
    for (layer, ((mu_w, mu_b), (rho_w, rho_b))) in
        vars.mu.iter().zip(vars.rho.iter()).enumerate()
    {
        let mut per_tensor = |mu: &Var, rho: &Var, eps: &Tensor| -> Result<Var, AdError> {
            let sigma = rho.softplus()?;
            let noise = sigma.mul(&tape.leaf(eps.clone()))?;
            let w = mu.add(&noise)?;
            // log Q(ω) − log P(ω); the (2π) constants cancel
            let d = w.sub(mu)?;
            let log_q = sigma
                .log()?
                .sum()?
                .neg()?
                .sub(&d.div(&sigma)?.square()?.sum()?.scale(0.5)?)?;
            let n = eps.len() as f64;
            let log_p = tape
                .scalar(-n * prior.sigma_p.ln())
                .sub(&w.square()?.sum()?.scale(0.5 / (prior.sigma_p * prior.sigma_p))?)?;
            let c = log_q.sub(&log_p)?;
            c_omega = Some(match &c_omega {
                Some(acc) => acc.add(&c)?,
                None => c,
            });
            Ok(w)
        };
        let w = per_tensor(mu_w, rho_w, &eps_w[layer].0)?;
        let b = per_tensor(mu_b, rho_b, &eps_w[layer].1)?;
        weights.push((w, b));
    }
    Ok(ReparamNet {
        weights,
        c_omega: c_omega.expect("at least one layer"),
    })
}

/// Forward one input through a reparameterized net, splitting the 2·d_y
/// output into the μ head and the clamped log-variance head.
pub fn bnn_heads(
    tape: &Tape,
    x: &[f64],
    net: &ReparamNet,
    arch: &MlpArchitecture,
) -> Result<(Var, Var), AdError> {
    let d_y = arch.output_dim;
    let mut h = tape.leaf(Tensor::vector(x.to_vec()));
    let n = net.weights.len();
    for (i, (w, b)) in net.weights.iter().enumerate() {
        h = w.matmul(&h)?.add(b)?;
        if i + 1 < n {
            h = apply_activation_var(&h, arch.activation)?;
        }
    }
    let h_mu = h.slice(0, d_y)?;
    let h_sigma = h.slice(d_y, d_y)?.clamp(H_SIGMA_LO, H_SIGMA_HI)?;
    Ok((h_mu, h_sigma))
}

/// Run one weight draw ω = μ + softplus(ρ)∘ε through the net. `eps_w`
/// supplies the weight noise (one pair per layer) and `eps_y` the output
/// noise; both are leaves, so the draw stays a deterministic,
/// differentiable function of θ once the noise is fixed.
pub fn bnn_draw(
    tape: &Tape,
    x: &[f64],
    vars: &BnnVars,
    arch: &MlpArchitecture,
    prior: &Prior,
    eps_w: &[(Tensor, Tensor)],
    eps_y: Option<&Tensor>,
) -> Result<BnnDraw, AdError> {
    let net = bnn_reparam(tape, vars, prior, eps_w)?;
    let (h_mu, h_sigma) = bnn_heads(tape, x, &net, arch)?;
    let sample = match eps_y {
        Some(eps) => {
            let std = h_sigma.exp()?.sqrt()?;
            Some(h_mu.add(&std.mul(&tape.leaf(eps.clone()))?)?)
        }
        None => None,
    };
    Ok(BnnDraw {
        sample,
        h_mu,
        h_sigma,
        c_omega: net.c_omega,
    })
}

/// Value-only version of [`bnn_draw`]'s forward pass: sample ω, run the
/// net, return (h^μ, h^σ) as plain vectors.
fn bnn_value_heads(
    theta: &VariationalWeights,
    arch: &MlpArchitecture,
    x: &[f64],
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let net_arch = arch.with_two_heads();
    let d_y = arch.output_dim;
    let mut h = x.to_vec();
    let n = theta.mu.layers.len();
    for i in 0..n {
        let mu_l = &theta.mu.layers[i];
        let rho_l = &theta.rho.layers[i];
        let sp = |r: f64| if r > 30.0 { r } else { r.exp().ln_1p() };
        let (rows, cols) = (mu_l.w.shape()[0], mu_l.w.shape()[1]);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let e: f64 = StandardNormal.sample(rng);
            out[r] = mu_l.b.values()[r] + sp(rho_l.b.values()[r]) * e;
        }
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                let idx = r * cols + c;
                let e: f64 = StandardNormal.sample(rng);
                let w = mu_l.w.values()[idx] + sp(rho_l.w.values()[idx]) * e;
                acc += w * h[c];
            }
            out[r] = acc + out[r];
        }
        if i + 1 < n {
            apply_activation_value(&mut out, net_arch.activation);
        }
        h = out;
    }
    let h_mu = h[..d_y].to_vec();
    let h_sigma = h[d_y..]
        .iter()
        .map(|v| v.clamp(H_SIGMA_LO, H_SIGMA_HI))
        .collect();
    (h_mu, h_sigma)
}

/// M predictive samples ŷ⁽ʲ⁾ = h^μ_ω(x) + ε ∘ sqrt(exp(h^σ_ω(x))) with a
/// fresh ω per row (value path; see [`bnn_draw`] for the tape path).
pub fn bnn_sample_forward(
    theta: &VariationalWeights,
    arch: &MlpArchitecture,
    x: &[f64],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>, PredictorError> {
    if m < 1 {
        return Err(PredictorError::Invalid("M must be ≥ 1".into()));
    }
    let d_y = arch.output_dim;
    let mut out = DMatrix::zeros(m, d_y);
    for j in 0..m {
        let (h_mu, h_sigma) = bnn_value_heads(theta, arch, x, rng);
        for i in 0..d_y {
            if !h_mu[i].is_finite() || !h_sigma[i].is_finite() {
                return Err(PredictorError::Invalid(format!(
                    "non-finite head value at draw {j}, output {i}"
                )));
            }
            let e: f64 = StandardNormal.sample(rng);
            out[(j, i)] = h_mu[i] + e * (h_sigma[i].exp()).sqrt();
        }
    }
    Ok(out)
}

/// ELBO minibatch loss with explicit weight noise, for gradchecks and
/// reproducible steps: mean over the supplied draws of
/// C_ω/N_total + (1/B)·Σᵢ Σⱼ [exp(−h^σⱼ)(yᵢⱼ−h^μⱼ)² + h^σⱼ].
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss_with_eps(
    tape: &Tape,
    vars: &BnnVars,
    arch: &MlpArchitecture,
    prior: &Prior,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    n_total: usize,
    eps_draws: &[Vec<(Tensor, Tensor)>],
) -> Result<Var, PredictorError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(PredictorError::Invalid(format!(
            "batch of {} inputs vs {} targets",
            xs.len(),
            ys.len()
        )));
    }
    if eps_draws.is_empty() {
        return Err(PredictorError::Invalid("need at least one weight draw".into()));
    }
    let mut total: Option<Var> = None;
    for eps_w in eps_draws {
        let net = bnn_reparam(tape, vars, prior, eps_w)?;
        let mut nll: Option<Var> = None;
        for (x, y) in xs.iter().zip(ys) {
            let (h_mu, h_sigma) = bnn_heads(tape, x, &net, arch)?;
            let yv = tape.leaf(Tensor::vector(y.clone()));
            let diff = yv.sub(&h_mu)?;
            let term = diff
                .square()?
                .mul(&h_sigma.neg()?.exp()?)?
                .add(&h_sigma)?
                .sum()?;
            nll = Some(match &nll {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let nll = nll.expect("nonempty batch").scale(1.0 / xs.len() as f64)?;
        let loss = net.c_omega.scale(1.0 / n_total as f64)?.add(&nll)?;
        total = Some(match &total {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    Ok(total
        .expect("at least one draw")
        .scale(1.0 / eps_draws.len() as f64)?)
}

/// ELBO with `m_w` fresh weight draws from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss(
    tape: &Tape,
    vars: &BnnVars,
    arch: &MlpArchitecture,
    prior: &Prior,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    n_total: usize,
    m_w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var, PredictorError> {
    if m_w < 1 {
        return Err(PredictorError::Invalid("M_w must be ≥ 1".into()));
    }
    let net_arch = arch.with_two_heads();
    let draws: Vec<_> = (0..m_w)
        .map(|_| sample_weight_eps(&net_arch, rng))
        .collect();
    elbo_loss_with_eps(tape, vars, arch, prior, xs, ys, n_total, &draws)
}

/// Closed-form KL(Q_θ ‖ P) for the mean-field Gaussian posterior,
/// available as a variance-reduced alternative to the per-draw C_ω.
pub fn closed_form_kl(theta: &VariationalWeights, prior: &Prior) -> f64 {
    let sp = |r: f64| if r > 30.0 { r } else { r.exp().ln_1p() };
    let p2 = prior.sigma_p * prior.sigma_p;
    let mut kl = 0.0;
    for (mu_t, rho_t) in theta.mu.tensors().iter().zip(theta.rho.tensors()) {
        for (&mu, &rho) in mu_t.values().iter().zip(rho_t.values()) {
            let s = sp(rho);
            kl += (prior.sigma_p / s).ln() + (s * s + mu * mu) / (2.0 * p2) - 0.5;
        }
    }
    kl
}

// ── Gaussian process baseline ────────────────────────────────────────

/// Cap on training points entering the kernel matrix; larger sets are
/// strided down (cubic Cholesky cost).
const GP_MAX_TRAIN: usize = 512;
/// Cap during hyperparameter search (one Cholesky per grid candidate).
const GP_MAX_SEARCH: usize = 256;

/// One per-output GP with an RBF + white-noise kernel.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpModel {
    pub ell: f64,
    pub s2: f64,
    pub noise2: f64,
    pub log_marginal: f64,
    x_train: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
    y_mean: f64,
    x_mean: DVector<f64>,
    x_std: DVector<f64>,
}

fn sq_dists(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..x.ncols() {
                let diff = x[(i, c)] - x[(j, c)];
                acc += diff * diff;
            }
            d[(i, j)] = acc;
            d[(j, i)] = acc;
        }
    }
    d
}

/// Cholesky of s²·exp(−D/2ℓ²) + (σ_n² + jitter)·I with jitter escalation.
fn kernel_chol(
    d2: &DMatrix<f64>,
    ell: f64,
    s2: f64,
    noise2: f64,
) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = d2.nrows();
    let inv = 1.0 / (2.0 * ell * ell);
    let mut jitter = 1e-10;
    loop {
        let mut k = DMatrix::from_fn(n, n, |i, j| s2 * (-d2[(i, j)] * inv).exp());
        for i in 0..n {
            k[(i, i)] += noise2 + jitter;
        }
        if let Some(ch) = k.cholesky() {
            return Some(ch);
        }
        jitter *= 100.0;
        if jitter > 1e-6 {
            return None;
        }
    }
}

fn log_marginal(d2: &DMatrix<f64>, y: &DVector<f64>, ell: f64, s2: f64, noise2: f64) -> f64 {
    let Some(ch) = kernel_chol(d2, ell, s2, noise2) else {
        return f64::NEG_INFINITY;
    };
    let n = y.len() as f64;
    let alpha = ch.solve(y);
    let logdet: f64 = (0..y.len()).map(|i| ch.l_dirty()[(i, i)].ln()).sum();
    -0.5 * y.dot(&alpha) - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

fn strided_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        (0..cap).map(|i| i * n / cap).collect()
    }
}

/// Fit one GP per output column. Hyperparameters maximize the log
/// marginal likelihood over a log-spaced grid followed by two rounds of
/// local refinement; inputs are standardized per feature and targets
/// centered per output.
pub fn gp_fit(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Vec<GpModel>, PredictorError> {
    let n = x.nrows();
    if n < 2 {
        return Err(PredictorError::Fit(format!("need ≥ 2 points, got {n}")));
    }
    if y.nrows() != n {
        return Err(PredictorError::Shape(format!(
            "X has {n} rows, Y has {}",
            y.nrows()
        )));
    }
    let d_x = x.ncols();
    let x_mean = DVector::from_fn(d_x, |c, _| x.column(c).mean());
    let x_std = DVector::from_fn(d_x, |c, _| {
        let m = x_mean[c];
        let v = x.column(c).iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        v.sqrt().max(1e-12)
    });
    let xs = DMatrix::from_fn(n, d_x, |r, c| (x[(r, c)] - x_mean[c]) / x_std[c]);

    let fit_idx = strided_indices(n, GP_MAX_TRAIN);
    let search_idx = strided_indices(n, GP_MAX_SEARCH);
    let x_fit = DMatrix::from_fn(fit_idx.len(), d_x, |r, c| xs[(fit_idx[r], c)]);
    let x_search = DMatrix::from_fn(search_idx.len(), d_x, |r, c| xs[(search_idx[r], c)]);
    let d2_fit = sq_dists(&x_fit);
    let d2_search = sq_dists(&x_search);

    let ells = logspace(-1.0, 1.5, 8);
    let s2s = logspace(-1.0, 2.0, 6);
    let n2s = logspace(-4.0, 0.0, 8);

    let mut models = Vec::with_capacity(y.ncols());
    for col in 0..y.ncols() {
        let y_mean = y.column(col).mean();
        let yc_search =
            DVector::from_fn(search_idx.len(), |r, _| y[(search_idx[r], col)] - y_mean);

        let mut best = (f64::NEG_INFINITY, ells[0], s2s[0], n2s[0]);
        for &ell in &ells {
            for &s2 in &s2s {
                for &n2 in &n2s {
                    let lml = log_marginal(&d2_search, &yc_search, ell, s2, n2);
                    if lml > best.0 {
                        best = (lml, ell, s2, n2);
                    }
                }
            }
        }
        // local refinement: multiplicative neighborhoods shrinking with
        // each round, starting at half the grid spacing
        for round in 0..2 {
            let f = 10f64.powf(0.25 / 2f64.powi(round));
            let cands = |c: f64| [c / f, c, c * f];
            for ell in cands(best.1) {
                for s2 in cands(best.2) {
                    for n2 in cands(best.3) {
                        let lml = log_marginal(&d2_search, &yc_search, ell, s2, n2);
                        if lml > best.0 {
                            best = (lml, ell, s2, n2);
                        }
                    }
                }
            }
        }

        let (_, ell, s2, noise2) = best;
        let yc_fit = DVector::from_fn(fit_idx.len(), |r, _| y[(fit_idx[r], col)] - y_mean);
        let ch = kernel_chol(&d2_fit, ell, s2, noise2)
            .ok_or_else(|| PredictorError::Fit("kernel Cholesky failed".into()))?;
        let alpha = ch.solve(&yc_fit);
        let log_marginal = log_marginal(&d2_fit, &yc_fit, ell, s2, noise2);
        models.push(GpModel {
            ell,
            s2,
            noise2,
            log_marginal,
            x_train: x_fit.clone(),
            chol_l: ch.l(),
            alpha,
            y_mean,
            x_mean: x_mean.clone(),
            x_std: x_std.clone(),
        });
    }
    Ok(models)
}

impl GpModel {
    /// Posterior predictive mean and variance (including white noise).
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let d_x = self.x_train.ncols();
        let xs = DVector::from_fn(d_x, |c, _| (x[c] - self.x_mean[c]) / self.x_std[c]);
        let n = self.x_train.nrows();
        let inv = 1.0 / (2.0 * self.ell * self.ell);
        let k = DVector::from_fn(n, |r, _| {
            let mut acc = 0.0;
            for c in 0..d_x {
                let diff = self.x_train[(r, c)] - xs[c];
                acc += diff * diff;
            }
            self.s2 * (-acc * inv).exp()
        });
        let mean = k.dot(&self.alpha) + self.y_mean;
        // v = L⁻¹ k by forward substitution
        let mut v = k;
        for i in 0..n {
            let mut acc = v[i];
            for j in 0..i {
                acc -= self.chol_l[(i, j)] * v[j];
            }
            v[i] = acc / self.chol_l[(i, i)];
        }
        let var = (self.s2 + self.noise2 - v.norm_squared()).max(0.0);
        (mean, var)
    }

    /// Log marginal likelihood of arbitrary hyperparameters on this
    /// model's training subset; test hook for the monotonicity invariant.
    pub fn log_marginal_at(&self, ell: f64, s2: f64, noise2: f64) -> f64 {
        let d2 = sq_dists(&self.x_train);
        let n = self.x_train.nrows();
        // recover centered targets from α: y_c = (K + σ_n²I)·α
        let inv = 1.0 / (2.0 * self.ell * self.ell);
        let mut k = DMatrix::from_fn(n, n, |i, j| self.s2 * (-d2[(i, j)] * inv).exp());
        for i in 0..n {
            k[(i, i)] += self.noise2;
        }
        let yc = &k * &self.alpha;
        log_marginal(&d2, &yc, ell, s2, noise2)
    }
}

/// M independent posterior-predictive draws per output dimension.
pub fn gp_sample(
    models: &[GpModel],
    x: &[f64],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>, PredictorError> {
    if models.is_empty() {
        return Err(PredictorError::Invalid("no fitted GP models".into()));
    }
    if m < 1 {
        return Err(PredictorError::Invalid("M must be ≥ 1".into()));
    }
    let stats: Vec<(f64, f64)> = models.iter().map(|g| g.predict(x)).collect();
    let mut out = DMatrix::zeros(m, models.len());
    for j in 0..m {
        for (d, &(mean, var)) in stats.iter().enumerate() {
            let e: f64 = StandardNormal.sample(rng);
            out[(j, d)] = mean + var.sqrt() * e;
        }
    }
    Ok(out)
}

// ── unified predictor ────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum Predictor {
    Ann {
        arch: MlpArchitecture,
        weights: MlpWeights,
    },
    Bnn {
        /// Base architecture (output_dim = d_y; the net itself carries
        /// 2·d_y heads).
        arch: MlpArchitecture,
        theta: VariationalWeights,
        prior: Prior,
    },
    Gp {
        models: Vec<GpModel>,
    },
}

impl Predictor {
    pub fn d_y(&self) -> usize {
        match self {
            Predictor::Ann { arch, .. } => arch.output_dim,
            Predictor::Bnn { arch, .. } => arch.output_dim,
            Predictor::Gp { models } => models.len(),
        }
    }

    /// M predictive samples at x; the ANN replicates its point prediction.
    pub fn predict_samples(
        &self,
        x: &[f64],
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<DMatrix<f64>, PredictorError> {
        if m < 1 {
            return Err(PredictorError::Invalid("M must be ≥ 1".into()));
        }
        match self {
            Predictor::Ann { arch, weights } => {
                let point = ann_value_forward(weights, arch, x);
                Ok(DMatrix::from_fn(m, point.len(), |_, c| point[c]))
            }
            Predictor::Bnn { arch, theta, .. } => bnn_sample_forward(theta, arch, x, m, rng),
            Predictor::Gp { models } => gp_sample(models, x, m, rng),
        }
    }
}

/// Versioned checkpoint wrapper around a serialized predictor.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub predictor: Predictor,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(predictor: &Predictor, path: &std::path::Path) -> Result<(), PredictorError> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        predictor: predictor.clone(),
    };
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| PredictorError::Invalid(format!("serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| PredictorError::Invalid(format!("write: {e}")))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Predictor, PredictorError> {
    let json =
        std::fs::read_to_string(path).map_err(|e| PredictorError::Invalid(format!("read: {e}")))?;
    let ckpt: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| PredictorError::Invalid(format!("parse: {e}")))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(PredictorError::Invalid(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok(ckpt.predictor)
}
