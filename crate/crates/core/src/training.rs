//! Optimization loops: decoupled training of the variational BNN on the
//! ELBO, combined end-to-end training through the differentiable SAA
//! decision layer, deterministic baselines, Adam with exponential LR
//! decay, and validation-based model selection.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AdError, CustomOp, Tape, Var};
use crate::datagen::Dataset;
use crate::predictors::{
    ann_forward, ann_value_forward, bnn_heads, bnn_params_on_tape, bnn_reparam,
    closed_form_kl, elbo_loss, mlp_params_on_tape, sample_weight_eps,
    MlpArchitecture, MlpWeights, Predictor, PredictorError, Prior, ReparamNet,
    VariationalWeights, H_SIGMA_HI, H_SIGMA_LO,
};
use crate::problems::{
    nv_saa_decision, nv_saa_subgradient, nv_task_cost, saa_decision, NvSpec, Problem,
    ProblemError, SaaProgram,
};
use crate::qp::{backward_kkt, solve_qp, QpSolution, QpStatus, SolveOptions};
use crate::rng::{stream, substream, StreamKind};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("epoch {epoch} skipped {skipped} of {total} instances (limit 10%)")]
    TooManySkipped {
        epoch: usize,
        skipped: usize,
        total: usize,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Initial posterior spread σ_w for variational weights.
pub const INIT_SIGMA: f64 = 0.05;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters shared by every training loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Task-loss weight K for the combined loss; `None` auto-calibrates
    /// on the first batch so the task term is ~10× the regularizer.
    pub k: Option<f64>,
    /// Training sample count M^t per SAA instance.
    pub m_t: usize,
    pub scheduler_gamma: f64,
    pub seed: u64,
    /// Cap on validation instances scored per epoch (task-cost metrics
    /// solve one QP per instance).
    pub val_cap: Option<usize>,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            epochs,
            batch_size: 32,
            k: None,
            m_t: 16,
            scheduler_gamma: 0.99,
            seed,
            val_cap: None,
        }
    }

    /// Decoupled BNN default (all problems).
    pub fn decoupled_bnn(epochs: usize, seed: u64) -> Self {
        TrainConfig::new(0.0007, epochs, seed)
    }

    /// Combined BNN defaults; M^t per the (M^t, M) pairs of the source
    /// experiments: 16 for NV/NVQP, 32 for POP.
    pub fn combined_bnn(problem: &Problem, epochs: usize, seed: u64) -> Self {
        let mut cfg = TrainConfig::new(0.0005, epochs, seed);
        cfg.m_t = match problem {
            Problem::Pop(_) => 32,
            _ => 16,
        };
        cfg
    }

    /// Deterministic-net defaults per problem family.
    pub fn deterministic(problem: &Problem, epochs: usize, seed: u64) -> Self {
        let lr = match problem {
            Problem::Nv(_) => 0.0015,
            Problem::Nvqp(_) => 0.002,
            Problem::Pop(_) => 0.001,
        };
        let mut cfg = TrainConfig::new(lr, epochs, seed);
        cfg.m_t = 1;
        cfg
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Invalid(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.m_t == 0 {
            return Err(TrainError::Invalid(
                "batch_size and M_t must be ≥ 1".into(),
            ));
        }
        if !(0.0 < self.scheduler_gamma && self.scheduler_gamma <= 1.0) {
            return Err(TrainError::Invalid(format!(
                "scheduler_gamma must lie in (0, 1], got {}",
                self.scheduler_gamma
            )));
        }
        Ok(())
    }

    /// lr at epoch e: lr₀·γᵉ, exactly.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.scheduler_gamma.powi(epoch as i32)
    }
}

/// One row of the training history.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
    pub skipped: usize,
}

/// Training outcome: the predictor at the best validation epoch plus the
/// full per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub predictor: Predictor,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Task-loss weight actually used (combined modes only).
    pub k_used: Option<f64>,
}

/// Write the history as CSV: epoch, train loss, val metric, lr, skipped.
pub fn write_history_csv(
    history: &[EpochRecord],
    path: &std::path::Path,
) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_loss,val_metric,lr,skipped\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{}\n",
            r.epoch, r.train_loss, r.val_metric, r.lr, r.skipped
        ));
    }
    std::fs::write(path, out).map_err(|e| TrainError::Invalid(format!("write history: {e}")))
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Standard Adam update with bias correction, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Invalid(format!(
            "{} params vs {} grads vs {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(TrainError::Invalid(format!(
                "param shape {:?} vs grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let pv = p.values_mut();
        let gv = g.values();
        let mv = m.values_mut();
        let vv = v.values_mut();
        for i in 0..pv.len() {
            mv[i] = ADAM_BETA1 * mv[i] + (1.0 - ADAM_BETA1) * gv[i];
            vv[i] = ADAM_BETA2 * vv[i] + (1.0 - ADAM_BETA2) * gv[i] * gv[i];
            let m_hat = mv[i] / bc1;
            let v_hat = vv[i] / bc2;
            pv[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ── differentiable decision-cost layer ───────────────────────────────

enum DecisionCache {
    Nv { samples: Vec<f64>, z: f64 },
    Qp { prog: SaaProgram, sol: QpSolution },
}

/// CustomOp mapping a flattened M^t×d_y sample tensor to the scalar task
/// cost f(z*(samples), y_true). Forward builds and solves the SAA
/// program; backward routes ∂f/∂z through the KKT system (or the NV
/// order-statistic subgradient) back onto the samples.
pub struct DecisionCostOp {
    problem: Problem,
    y_true: DVector<f64>,
    m_t: usize,
    opts: SolveOptions,
    cache: RefCell<Option<DecisionCache>>,
}

impl DecisionCostOp {
    pub fn new(problem: Problem, y_true: DVector<f64>, m_t: usize, opts: SolveOptions) -> Self {
        DecisionCostOp {
            problem,
            y_true,
            m_t,
            opts,
            cache: RefCell::new(None),
        }
    }
}

fn op_err(e: impl std::fmt::Display) -> AdError {
    AdError::Contract(format!("decision_cost: {e}"))
}

/// ∂f/∂z of the realized task cost at (z, y). Subgradient conventions:
/// ties (kinks of the positive parts) take the zero branch.
pub fn task_cost_grad_z(problem: &Problem, z: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    match problem {
        Problem::Nv(spec) => {
            DVector::from_column_slice(&[nv_cost_grad_z(z[0], y[0], spec)])
        }
        Problem::Nvqp(s) => {
            let d = z.len();
            let short = DVector::from_fn(d, |i, _| (y[i] - z[i]).max(0.0));
            let exc = DVector::from_fn(d, |i, _| (z[i] - y[i]).max(0.0));
            let mut g = (&s.q + s.q.transpose()) * z + &s.c;
            let gs = (&s.q_s + s.q_s.transpose()) * &short + &s.c_s;
            let ge = (&s.q_e + s.q_e.transpose()) * &exc + &s.c_e;
            for i in 0..d {
                if y[i] > z[i] {
                    g[i] -= gs[i];
                } else if z[i] > y[i] {
                    g[i] += ge[i];
                }
            }
            g
        }
        Problem::Pop(_) => {
            if -y.dot(z) > 0.0 {
                -y.clone()
            } else {
                DVector::zeros(z.len())
            }
        }
    }
}

fn nv_cost_grad_z(z: f64, y: f64, spec: &NvSpec) -> f64 {
    if z < y {
        -spec.c_s
    } else if z > y {
        spec.c_e
    } else {
        0.0
    }
}

impl CustomOp for DecisionCostOp {
    fn name(&self) -> &'static str {
        "decision_cost"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        let d_y = self.problem.d_y();
        let flat = inputs[0].values();
        if inputs.len() != 1 || flat.len() != self.m_t * d_y {
            return Err(op_err(format!(
                "expected one tensor of {} values, got {} of {}",
                self.m_t * d_y,
                inputs.len(),
                flat.len()
            )));
        }
        match &self.problem {
            Problem::Nv(spec) => {
                let samples = flat.to_vec();
                let dec = nv_saa_decision(&samples, spec).map_err(op_err)?;
                let z = dec.z[0];
                let cost = nv_task_cost(z, self.y_true[0], spec);
                *self.cache.borrow_mut() = Some(DecisionCache::Nv { samples, z });
                Ok(Tensor::scalar(cost))
            }
            _ => {
                let mat = DMatrix::from_fn(self.m_t, d_y, |j, c| flat[j * d_y + c]);
                let prog = self.problem.build_saa(&mat).map_err(op_err)?;
                let sol = solve_qp(&prog.qp, self.opts).map_err(op_err)?;
                if sol.status != QpStatus::Optimal {
                    return Err(op_err(format!("solver status {:?}", sol.status)));
                }
                let z = DVector::from_fn(prog.d_z, |i, _| sol.v[i]);
                let cost = self.problem.task_cost(&z, &self.y_true).map_err(op_err)?;
                *self.cache.borrow_mut() = Some(DecisionCache::Qp { prog, sol });
                Ok(Tensor::scalar(cost))
            }
        }
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &Tensor,
    ) -> Result<Vec<Tensor>, AdError> {
        let g = upstream.item();
        let cache = self.cache.borrow();
        let cache = cache
            .as_ref()
            .ok_or_else(|| op_err("backward before forward"))?;
        let grad = match cache {
            DecisionCache::Nv { samples, z } => {
                let spec = match &self.problem {
                    Problem::Nv(s) => s,
                    _ => unreachable!("NV cache only built for NV problems"),
                };
                let dfdz = nv_cost_grad_z(*z, self.y_true[0], spec);
                let sub = nv_saa_subgradient(samples, spec, *z).map_err(op_err)?;
                Tensor::vector(sub.iter().map(|s| g * dfdz * s).collect())
            }
            DecisionCache::Qp { prog, sol } => {
                let d_y = self.problem.d_y();
                let z = DVector::from_fn(prog.d_z, |i, _| sol.v[i]);
                let dfdz = task_cost_grad_z(&self.problem, &z, &self.y_true);
                let mut dl_dv = DVector::zeros(sol.v.len());
                for i in 0..prog.d_z {
                    dl_dv[i] = dfdz[i];
                }
                let grads = backward_kkt(&prog.qp, sol, &dl_dv).map_err(op_err)?;
                let ds = prog.fold_sample_gradients(&grads.da, &grads.db, self.m_t);
                let mut flat = Vec::with_capacity(self.m_t * d_y);
                for j in 0..self.m_t {
                    for c in 0..d_y {
                        flat.push(g * ds[(j, c)]);
                    }
                }
                Tensor::vector(flat)
            }
        };
        Ok(vec![grad])
    }
}

/// Attach a decision-cost node for one instance: `samples` is the
/// flattened (row-major) M^t×d_y prediction tensor on the tape.
pub fn decision_cost_node(
    tape: &Tape,
    problem: &Problem,
    y_true: &DVector<f64>,
    m_t: usize,
    opts: SolveOptions,
    samples: &Var,
) -> Result<Var, AdError> {
    let op = Rc::new(DecisionCostOp::new(problem.clone(), y_true.clone(), m_t, opts));
    tape.custom(op, &[samples])
}

// ── shared loop plumbing ─────────────────────────────────────────────

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, StreamKind::Shuffle, epoch as u64);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

fn check_dims(arch: &MlpArchitecture, train: &Dataset, val: &Dataset) -> Result<(), TrainError> {
    if arch.input_dim != train.d_x() || arch.output_dim != train.d_y() {
        return Err(TrainError::Invalid(format!(
            "arch {}→{} vs data {}→{}",
            arch.input_dim,
            arch.output_dim,
            train.d_x(),
            train.d_y()
        )));
    }
    if train.d_x() != val.d_x() || train.d_y() != val.d_y() {
        return Err(TrainError::Invalid("train/val dimension mismatch".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Invalid("empty train or val split".into()));
    }
    Ok(())
}

fn collect_grads(
    tape: &Tape,
    loss: &Var,
    vars: &[&Var],
    epoch: usize,
    batch: usize,
) -> Result<Vec<Tensor>, TrainError> {
    let grads = tape.backward(loss).map_err(|e| TrainError::NonFinite {
        epoch,
        batch,
        detail: e.to_string(),
    })?;
    Ok(vars.iter().map(|v| grads.of_or_zero(v)).collect())
}

/// Flatten BnnVars in the same order as `VariationalWeights::tensors_mut`:
/// all μ tensors (w, b per layer), then all ρ tensors.
fn bnn_var_list(vars: &crate::predictors::BnnVars) -> Vec<&Var> {
    let mut out: Vec<&Var> = Vec::new();
    for (w, b) in &vars.mu {
        out.push(w);
        out.push(b);
    }
    for (w, b) in &vars.rho {
        out.push(w);
        out.push(b);
    }
    out
}

fn mlp_var_list(vars: &crate::predictors::MlpVars) -> Vec<&Var> {
    vars.layers.iter().flat_map(|(w, b)| [w, b]).collect()
}

// ── decoupled BNN training (ELBO) ────────────────────────────────────

/// Heteroscedastic NLL of the posterior-mean network on a dataset; the
/// deterministic validation metric for decoupled training.
pub fn mean_weights_nll(theta: &VariationalWeights, arch: &MlpArchitecture, data: &Dataset) -> f64 {
    let net_arch = arch.with_two_heads();
    let d_y = arch.output_dim;
    let mut total = 0.0;
    for i in 0..data.len() {
        let h = ann_value_forward(&theta.mu, &net_arch, &row(&data.x, i));
        for j in 0..d_y {
            let hs = h[d_y + j].clamp(H_SIGMA_LO, H_SIGMA_HI);
            let diff = data.y[(i, j)] - h[j];
            total += (-hs).exp() * diff * diff + hs;
        }
    }
    total / data.len() as f64
}

/// Posterior means seeded from a deterministic mean fit: hidden layers
/// and the mean head take the fitted weights; the log-variance head is
/// flattened to the constant per-output residual log-variance. Under
/// large aleatoric noise the heteroscedastic NLL scales mean gradients
/// by 1/σ², so structure the mean net never discovers by ELBO alone is
/// handed to it up front — and an uncalibrated σ head at init would
/// emit gradients large enough to wreck that fit within one epoch.
pub fn mean_warm_start(
    arch: &MlpArchitecture,
    mean_fit: &MlpWeights,
    train: &Dataset,
    seed: u64,
) -> VariationalWeights {
    let net_arch = arch.with_two_heads();
    let mut theta = VariationalWeights::init(
        &net_arch,
        INIT_SIGMA,
        &mut stream(seed, StreamKind::WeightInit),
    );
    let d_y = arch.output_dim;
    let last = theta.mu.layers.len() - 1;
    for (i, layer) in mean_fit.layers.iter().enumerate() {
        if i < last {
            theta.mu.layers[i] = layer.clone();
        } else {
            // two-head output layer: rows 0..d_y are the mean head
            let dst = &mut theta.mu.layers[last];
            let in_dim = layer.w.len() / d_y;
            for r in 0..d_y {
                for c in 0..in_dim {
                    dst.w.values_mut()[r * in_dim + c] = layer.w.values()[r * in_dim + c];
                }
                dst.b.values_mut()[r] = layer.b.values()[r];
            }
        }
    }
    // σ head: zero weights, bias = per-output residual log-variance
    let mut mse = vec![0.0; d_y];
    for i in 0..train.len() {
        let h = ann_value_forward(mean_fit, arch, &row(&train.x, i));
        for j in 0..d_y {
            let diff = train.y[(i, j)] - h[j];
            mse[j] += diff * diff;
        }
    }
    let dst = &mut theta.mu.layers[last];
    let in_dim = dst.w.len() / (2 * d_y);
    for j in 0..d_y {
        for c in 0..in_dim {
            dst.w.values_mut()[(d_y + j) * in_dim + c] = 0.0;
        }
        dst.b.values_mut()[d_y + j] = (mse[j] / train.len() as f64)
            .max(1e-8)
            .ln()
            .clamp(H_SIGMA_LO, H_SIGMA_HI);
    }
    theta
}

/// Minimize the ELBO (single weight draw per step) with Adam and the
/// 0.99-per-epoch LR schedule; select the epoch with the lowest
/// validation heteroscedastic NLL.
pub fn train_decoupled(
    arch: &MlpArchitecture,
    prior: &Prior,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: Option<VariationalWeights>,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    check_dims(arch, train, val)?;
    let net_arch = arch.with_two_heads();
    let mut theta = init.unwrap_or_else(|| {
        VariationalWeights::init(
            &net_arch,
            INIT_SIGMA,
            &mut stream(cfg.seed, StreamKind::WeightInit),
        )
    });
    let mut adam = AdamState::new(&theta.tensors());
    let n_total = train.len();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::INFINITY, theta.clone());
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled_indices(n_total, cfg.seed, epoch);
        let mut samp_rng = substream(cfg.seed, StreamKind::Sampling, epoch as u64);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| row(&train.x, i)).collect();
            let ys: Vec<Vec<f64>> = chunk.iter().map(|&i| row(&train.y, i)).collect();
            let tape = Tape::new();
            let vars = bnn_params_on_tape(&tape, &theta);
            let loss = elbo_loss(
                &tape, &vars, arch, prior, &xs, &ys, n_total, 1, &mut samp_rng,
            )
            .map_err(|e| TrainError::NonFinite {
                epoch,
                batch: batch_no,
                detail: e.to_string(),
            })?;
            loss_sum += loss.item() * chunk.len() as f64;
            let flat = bnn_var_list(&vars);
            let grads = collect_grads(&tape, &loss, &flat, epoch, batch_no)?;
            adam_step(&mut theta.tensors_mut(), &grads, &mut adam, lr)?;
        }
        let val_metric = mean_weights_nll(&theta, arch, val);
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_total as f64,
            val_metric,
            lr,
            skipped: 0,
        });
        if val_metric < best.1 {
            best = (epoch, val_metric, theta.clone());
        }
    }
    Ok(TrainedModel {
        predictor: Predictor::Bnn {
            arch: arch.clone(),
            theta: best.2,
            prior: *prior,
        },
        history,
        best_epoch: best.0,
        k_used: None,
    })
}

// ── combined BNN training (end-to-end task loss) ─────────────────────

/// Mean realized task cost of a predictor on a dataset, using M samples
/// per instance drawn from a fixed stream (so the metric is a
/// deterministic function of the parameters). QP failures are skipped.
pub fn mean_task_cost(
    predictor: &Predictor,
    problem: &Problem,
    data: &Dataset,
    m: usize,
    opts: SolveOptions,
    rng: &mut ChaCha8Rng,
    cap: Option<usize>,
) -> Result<f64, TrainError> {
    let n = cap.map_or(data.len(), |c| c.min(data.len()));
    let mut total = 0.0;
    let mut kept = 0usize;
    for i in 0..n {
        let samples = predictor.predict_samples(&row(&data.x, i), m, rng)?;
        let dec = match saa_decision(problem, &samples, opts) {
            Ok(d) => d,
            Err(_) => continue,
        };
        let y = data.y.row(i).transpose();
        total += problem.task_cost(&dec.z, &y)?;
        kept += 1;
    }
    if kept == 0 {
        return Err(TrainError::Invalid(
            "every validation instance failed to solve".into(),
        ));
    }
    Ok(total / kept as f64)
}

/// End-to-end training of the BNN on the combined loss: per instance,
/// M^t reparameterized predictive samples feed the SAA decision layer;
/// the batch loss is E_ω[C_ω] + K·mean f(z*, y). Model selection by
/// validation mean task cost.
#[allow(clippy::too_many_arguments)]
pub fn train_combined(
    arch: &MlpArchitecture,
    prior: &Prior,
    problem: &Problem,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: Option<VariationalWeights>,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    check_dims(arch, train, val)?;
    if problem.d_y() != arch.output_dim {
        return Err(TrainError::Invalid(format!(
            "problem d_y {} vs arch output {}",
            problem.d_y(),
            arch.output_dim
        )));
    }
    let net_arch = arch.with_two_heads();
    let mut theta = init.unwrap_or_else(|| {
        VariationalWeights::init(
            &net_arch,
            INIT_SIGMA,
            &mut stream(cfg.seed, StreamKind::WeightInit),
        )
    });
    let mut adam = AdamState::new(&theta.tensors());
    let opts = SolveOptions::default();
    let n_total = train.len();
    let mut k_used = cfg.k;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: (usize, f64, VariationalWeights) = (0, f64::INFINITY, theta.clone());
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled_indices(n_total, cfg.seed, epoch);
        let mut samp_rng = substream(cfg.seed, StreamKind::Sampling, epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut skipped = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let vars = bnn_params_on_tape(&tape, &theta);
            // the same M^t weight draws serve every instance in the batch
            let nets: Vec<ReparamNet> = (0..cfg.m_t)
                .map(|_| {
                    let eps = sample_weight_eps(&net_arch, &mut samp_rng);
                    bnn_reparam(&tape, &vars, prior, &eps)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    detail: e.to_string(),
                })?;

            let mut cost_sum: Option<Var> = None;
            let mut kept = 0usize;
            for &i in chunk {
                let x = row(&train.x, i);
                let node = (|| -> Result<Var, AdError> {
                    let mut sample_vars = Vec::with_capacity(cfg.m_t);
                    for net in &nets {
                        let (h_mu, h_sigma) = bnn_heads(&tape, &x, net, arch)?;
                        let eps: Vec<f64> = (0..arch.output_dim)
                            .map(|_| StandardNormal.sample(&mut samp_rng))
                            .collect();
                        let std = h_sigma.exp()?.sqrt()?;
                        let s = h_mu.add(&std.mul(&tape.leaf(Tensor::vector(eps)))?)?;
                        sample_vars.push(s);
                    }
                    let mut flat = sample_vars[0].clone();
                    for s in &sample_vars[1..] {
                        flat = flat.concat(s)?;
                    }
                    let y = train.y.row(i).transpose();
                    decision_cost_node(&tape, problem, &y, cfg.m_t, opts, &flat)
                })();
                match node {
                    Ok(c) => {
                        cost_sum = Some(match &cost_sum {
                            Some(acc) => acc.add(&c).map_err(|e| TrainError::NonFinite {
                                epoch,
                                batch: batch_no,
                                detail: e.to_string(),
                            })?,
                            None => c,
                        });
                        kept += 1;
                    }
                    Err(_) => skipped += 1,
                }
            }
            let Some(cost_sum) = cost_sum else {
                continue; // whole batch failed; counted above
            };
            let step = (|| -> Result<(Var, f64), AdError> {
                let mean_cost = cost_sum.scale(1.0 / kept as f64)?;
                let mut c_omega = nets[0].c_omega.clone();
                for net in &nets[1..] {
                    c_omega = c_omega.add(&net.c_omega)?;
                }
                let c_omega = c_omega.scale(1.0 / cfg.m_t as f64)?;
                let k = *k_used.get_or_insert_with(|| {
                    // ~10× regularizer at initialization, then frozen
                    let kl = closed_form_kl(&theta, prior);
                    10.0 * kl.max(1e-6) / mean_cost.item().abs().max(1e-8)
                });
                let loss = c_omega.add(&mean_cost.scale(k)?)?;
                let loss_val = loss.item();
                Ok((loss, loss_val))
            })()
            .map_err(|e| TrainError::NonFinite {
                epoch,
                batch: batch_no,
                detail: e.to_string(),
            })?;
            let (loss, loss_val) = step;
            loss_sum += loss_val * kept as f64;
            loss_count += kept;
            let flat = bnn_var_list(&vars);
            let grads = collect_grads(&tape, &loss, &flat, epoch, batch_no)?;
            adam_step(&mut theta.tensors_mut(), &grads, &mut adam, lr)?;
        }
        if skipped * 10 > n_total {
            return Err(TrainError::TooManySkipped {
                epoch,
                skipped,
                total: n_total,
            });
        }
        let predictor = Predictor::Bnn {
            arch: arch.clone(),
            theta: theta.clone(),
            prior: *prior,
        };
        let mut val_rng = substream(cfg.seed, StreamKind::Oracle, 0);
        let val_metric = mean_task_cost(
            &predictor,
            problem,
            val,
            cfg.m_t,
            opts,
            &mut val_rng,
            cfg.val_cap,
        )?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_metric,
            lr,
            skipped,
        });
        if val_metric < best.1 {
            best = (epoch, val_metric, theta.clone());
        }
    }
    Ok(TrainedModel {
        predictor: Predictor::Bnn {
            arch: arch.clone(),
            theta: best.2,
            prior: *prior,
        },
        history,
        best_epoch: best.0,
        k_used,
    })
}

// ── deterministic baselines ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetMode {
    /// Plain regression on mean squared error.
    DecoupledMse,
    /// Task loss of the point prediction through the decision layer (M=1).
    CombinedTask,
}

/// Mean squared error of a deterministic net over a dataset.
pub fn mean_squared_error(weights: &MlpWeights, arch: &MlpArchitecture, data: &Dataset) -> f64 {
    let mut total = 0.0;
    for i in 0..data.len() {
        let pred = ann_value_forward(weights, arch, &row(&data.x, i));
        for j in 0..data.d_y() {
            let d = data.y[(i, j)] - pred[j];
            total += d * d;
        }
    }
    total / (data.len() * data.d_y()) as f64
}

/// Train the deterministic net, either on MSE or end-to-end on the task
/// cost of its point prediction (M=1 through the same decision layer).
/// `init` warm-starts the weights; end-to-end task training from a
/// cold start can sit in a zero-subgradient region (e.g. NV decisions
/// floored at zero), so combined-task runs are usually seeded from a
/// short MSE fit.
pub fn train_deterministic(
    arch: &MlpArchitecture,
    problem: Option<&Problem>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mode: DetMode,
    init: Option<MlpWeights>,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    check_dims(arch, train, val)?;
    let problem = match mode {
        DetMode::DecoupledMse => None,
        DetMode::CombinedTask => Some(problem.ok_or_else(|| {
            TrainError::Invalid("combined-task mode needs a problem".into())
        })?),
    };
    let mut weights = init
        .unwrap_or_else(|| MlpWeights::init(arch, &mut stream(cfg.seed, StreamKind::WeightInit)));
    let mut adam = AdamState::new(&weights.tensors());
    let opts = SolveOptions::default();
    let n_total = train.len();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: (usize, f64, MlpWeights) = (0, f64::INFINITY, weights.clone());
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = shuffled_indices(n_total, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut skipped = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let tape = Tape::new();
            let vars = mlp_params_on_tape(&tape, &weights);
            let mut acc: Option<Var> = None;
            let mut kept = 0usize;
            for &i in chunk {
                let x = row(&train.x, i);
                let term = (|| -> Result<Var, AdError> {
                    let pred = ann_forward(&tape, &x, &vars, arch)?;
                    match problem {
                        None => {
                            let y = tape.leaf(Tensor::vector(row(&train.y, i)));
                            y.sub(&pred)?.square()?.sum()?.scale(1.0 / arch.output_dim as f64)
                        }
                        Some(p) => {
                            let y = train.y.row(i).transpose();
                            decision_cost_node(&tape, p, &y, 1, opts, &pred)
                        }
                    }
                })();
                match term {
                    Ok(t) => {
                        acc = Some(match &acc {
                            Some(a) => a.add(&t).map_err(|e| TrainError::NonFinite {
                                epoch,
                                batch: batch_no,
                                detail: e.to_string(),
                            })?,
                            None => t,
                        });
                        kept += 1;
                    }
                    Err(_) if problem.is_some() => skipped += 1,
                    Err(e) => {
                        return Err(TrainError::NonFinite {
                            epoch,
                            batch: batch_no,
                            detail: e.to_string(),
                        })
                    }
                }
            }
            let Some(acc) = acc else { continue };
            let loss = acc
                .scale(1.0 / kept as f64)
                .map_err(|e| TrainError::NonFinite {
                    epoch,
                    batch: batch_no,
                    detail: e.to_string(),
                })?;
            loss_sum += loss.item() * kept as f64;
            loss_count += kept;
            let flat = mlp_var_list(&vars);
            let grads = collect_grads(&tape, &loss, &flat, epoch, batch_no)?;
            adam_step(&mut weights.tensors_mut(), &grads, &mut adam, lr)?;
        }
        if skipped * 10 > n_total {
            return Err(TrainError::TooManySkipped {
                epoch,
                skipped,
                total: n_total,
            });
        }
        let val_metric = match problem {
            None => mean_squared_error(&weights, arch, val),
            Some(p) => {
                let predictor = Predictor::Ann {
                    arch: arch.clone(),
                    weights: weights.clone(),
                };
                let mut val_rng = substream(cfg.seed, StreamKind::Oracle, 0);
                mean_task_cost(&predictor, p, val, 1, opts, &mut val_rng, cfg.val_cap)?
            }
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_metric,
            lr,
            skipped,
        });
        if val_metric < best.1 {
            best = (epoch, val_metric, weights.clone());
        }
    }
    Ok(TrainedModel {
        predictor: Predictor::Ann {
            arch: arch.clone(),
            weights: best.2,
        },
        history,
        best_epoch: best.0,
        k_used: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_nv1, nv_mean, nv_sigma, NoiseModel, SplitSpec};
    use crate::fdiff::{central_grad, max_rel_err};
    use crate::predictors::Activation;
    use crate::problems::NvqpSpec;
    use approx::assert_relative_eq;

    fn tiny_arch(d_in: usize, hidden: usize, d_out: usize) -> MlpArchitecture {
        MlpArchitecture::new(d_in, vec![hidden], d_out, Activation::Tanh).unwrap()
    }

    // ── Adam oracles ─────────────────────────────────────────────────

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[&p]);
        let before = p.clone();
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[g.clone()], &mut state, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(3.7);
        let mut state = AdamState::new(&[&p]);
        let lr = 0.01;
        let mut prev = p.item();
        let mut step = 0.0;
        for _ in 0..200 {
            adam_step(&mut [&mut p], &[g.clone()], &mut state, lr).unwrap();
            step = prev - p.item();
            prev = p.item();
        }
        // Adam fixed point under constant gradient: |step| → lr
        assert_relative_eq!(step, lr, max_relative = 1e-3);
    }

    #[test]
    fn adam_quadratic_bowl_converges() {
        // f(p) = ½Σ aᵢ(pᵢ − cᵢ)², minimum at c
        let a = [1.0, 4.0, 0.5];
        let c = [0.3, -1.2, 2.0];
        let mut p = Tensor::vector(vec![0.1, -0.9, 1.7]);
        let mut state = AdamState::new(&[&p]);
        for _ in 0..500 {
            let g = Tensor::vector(
                (0..3).map(|i| a[i] * (p.values()[i] - c[i])).collect(),
            );
            adam_step(&mut [&mut p], &[g], &mut state, 0.01).unwrap();
        }
        for i in 0..3 {
            assert!(
                (p.values()[i] - c[i]).abs() < 1e-4,
                "coordinate {i}: {} vs {}",
                p.values()[i],
                c[i]
            );
        }
    }

    #[test]
    fn lr_schedule_is_exact() {
        let cfg = TrainConfig::new(0.0015, 10, 0);
        for e in 0..100usize {
            assert_eq!(cfg.lr_at(e), 0.0015 * 0.99f64.powi(e as i32));
        }
    }

    // ── combined gradient integrity (FD oracles) ─────────────────────

    /// NV path: three parameters map to M=5 samples; the end-to-end
    /// gradient through order-statistic decision + task cost must match
    /// finite differences.
    #[test]
    fn combined_gradient_matches_fd_nv_path() {
        let spec = NvSpec::standard();
        let problem = Problem::Nv(spec);
        let eps = [0.31, -1.12, 0.64, 1.75, -0.42];
        let y_true = DVector::from_column_slice(&[10.3]);
        let loss = |p: &[f64]| -> f64 {
            let tape = Tape::new();
            let pv = tape.param(Tensor::vector(p.to_vec()));
            let mut samples: Option<Var> = None;
            for &e in &eps {
                // s = p0 + p1·e + p2·e²  (scalar slice arithmetic)
                let p0 = pv.slice(0, 1).unwrap();
                let p1 = pv.slice(1, 1).unwrap();
                let p2 = pv.slice(2, 1).unwrap();
                let s = p0
                    .add(&p1.scale(e).unwrap())
                    .unwrap()
                    .add(&p2.scale(e * e).unwrap())
                    .unwrap();
                samples = Some(match &samples {
                    Some(acc) => acc.concat(&s).unwrap(),
                    None => s,
                });
            }
            let node = decision_cost_node(
                &tape,
                &problem,
                &y_true,
                eps.len(),
                SolveOptions::default(),
                &samples.unwrap(),
            )
            .unwrap();
            node.item()
        };
        let analytic = |p: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let pv = tape.param(Tensor::vector(p.to_vec()));
            let mut samples: Option<Var> = None;
            for &e in &eps {
                let s = pv
                    .slice(0, 1)
                    .unwrap()
                    .add(&pv.slice(1, 1).unwrap().scale(e).unwrap())
                    .unwrap()
                    .add(&pv.slice(2, 1).unwrap().scale(e * e).unwrap())
                    .unwrap();
                samples = Some(match &samples {
                    Some(acc) => acc.concat(&s).unwrap(),
                    None => s,
                });
            }
            let node = decision_cost_node(
                &tape,
                &problem,
                &y_true,
                eps.len(),
                SolveOptions::default(),
                &samples.unwrap(),
            )
            .unwrap();
            let g = tape.backward(&node).unwrap();
            g.of_or_zero(&pv).values().to_vec()
        };
        let p0 = [9.0, 1.2, 0.5];
        let ad = analytic(&p0);
        let fd = central_grad(loss, &p0, 1e-6);
        assert!(
            max_rel_err(&ad, &fd) <= 1e-3,
            "ad {ad:?} vs fd {fd:?}"
        );
    }

    /// NVQP path: three parameters map to a 3×2 sample matrix; gradient
    /// flows through build_saa → solve_qp → backward_kkt → fold.
    #[test]
    fn combined_gradient_matches_fd_nvqp_path() {
        let spec = NvqpSpec::generated(2, 5, 9.0);
        let problem = Problem::Nvqp(spec);
        let base = [[1.1, 0.7], [0.4, 1.6], [0.9, 1.2]];
        let y_true = DVector::from_column_slice(&[1.0, 1.3]);
        let build = |tape: &Tape, pv: &Var| -> Var {
            // s_{j,c} = p_c + p2·base_{j,c}
            let mut flat: Option<Var> = None;
            for b in &base {
                for (c, &bjc) in b.iter().enumerate() {
                    let s = pv
                        .slice(c, 1)
                        .unwrap()
                        .add(&pv.slice(2, 1).unwrap().scale(bjc).unwrap())
                        .unwrap();
                    flat = Some(match &flat {
                        Some(acc) => acc.concat(&s).unwrap(),
                        None => s,
                    });
                }
            }
            decision_cost_node(
                tape,
                &problem,
                &y_true,
                3,
                SolveOptions::default(),
                &flat.unwrap(),
            )
            .unwrap()
        };
        let loss = |p: &[f64]| -> f64 {
            let tape = Tape::new();
            let pv = tape.param(Tensor::vector(p.to_vec()));
            build(&tape, &pv).item()
        };
        let p0 = [0.8, 0.5, 0.6];
        let tape = Tape::new();
        let pv = tape.param(Tensor::vector(p0.to_vec()));
        let node = build(&tape, &pv);
        let g = tape.backward(&node).unwrap();
        let ad = g.of_or_zero(&pv).values().to_vec();
        let fd = central_grad(loss, &p0, 1e-5);
        assert!(
            max_rel_err(&ad, &fd) <= 1e-3,
            "ad {ad:?} vs fd {fd:?}"
        );
    }

    // ── decoupled training ───────────────────────────────────────────

    fn noiseless_linear_data(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = stream(seed, StreamKind::DataGen);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0f64));
        let y = DMatrix::from_fn(n, 1, |r, _| 0.8 * x[(r, 0)] + 0.2);
        Dataset::new(x, y, None).unwrap()
    }

    #[test]
    fn decoupled_zero_epochs_returns_initialization() {
        let arch = tiny_arch(1, 6, 1);
        let train = noiseless_linear_data(64, 1);
        let val = noiseless_linear_data(32, 2);
        let cfg = TrainConfig::decoupled_bnn(0, 7);
        let model = train_decoupled(&arch, &Prior::default(), &train, &val, &cfg, None).unwrap();
        assert!(model.history.is_empty());
        assert_eq!(model.best_epoch, 0);
        let init = VariationalWeights::init(
            &arch.with_two_heads(),
            INIT_SIGMA,
            &mut stream(cfg.seed, StreamKind::WeightInit),
        );
        match &model.predictor {
            Predictor::Bnn { theta, .. } => {
                for (a, b) in theta.tensors().iter().zip(init.tensors()) {
                    assert_eq!(*a, b);
                }
            }
            other => panic!("expected BNN, got {other:?}"),
        }
    }

    #[test]
    fn decoupled_training_reduces_validation_nll() {
        let arch = tiny_arch(1, 8, 1);
        let train = noiseless_linear_data(128, 3);
        let val = noiseless_linear_data(64, 4);
        let cfg = TrainConfig::decoupled_bnn(200, 11);
        let model = train_decoupled(&arch, &Prior::default(), &train, &val, &cfg, None).unwrap();
        assert_eq!(model.history.len(), 200);
        let first = model.history.first().unwrap().val_metric;
        let last = model.history.last().unwrap().val_metric;
        assert!(last < first, "val NLL did not improve: {first} → {last}");
        // selection contract: best epoch attains the recorded minimum
        let min = model
            .history
            .iter()
            .map(|r| r.val_metric)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(model.history[model.best_epoch].val_metric, min);
    }

    #[test]
    fn decoupled_training_is_bit_deterministic() {
        let arch = tiny_arch(1, 6, 1);
        let train = noiseless_linear_data(64, 5);
        let val = noiseless_linear_data(32, 6);
        let cfg = TrainConfig::decoupled_bnn(5, 13);
        let a = train_decoupled(&arch, &Prior::default(), &train, &val, &cfg, None).unwrap();
        let b = train_decoupled(&arch, &Prior::default(), &train, &val, &cfg, None).unwrap();
        let ja = serde_json::to_string(&a.predictor).unwrap();
        let jb = serde_json::to_string(&b.predictor).unwrap();
        assert_eq!(ja, jb);
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.train_loss, rb.train_loss);
            assert_eq!(ra.val_metric, rb.val_metric);
        }
    }

    // ── deterministic baselines ──────────────────────────────────────

    #[test]
    fn deterministic_mse_fits_noiseless_data() {
        let arch = tiny_arch(1, 8, 1);
        let train = noiseless_linear_data(128, 8);
        let val = noiseless_linear_data(64, 9);
        let test = noiseless_linear_data(64, 10);
        let mut cfg = TrainConfig::new(0.01, 120, 17);
        cfg.m_t = 1;
        let model =
            train_deterministic(&arch, None, &train, &val, &cfg, DetMode::DecoupledMse, None)
                .unwrap();
        let weights = match &model.predictor {
            Predictor::Ann { weights, .. } => weights,
            other => panic!("expected ANN, got {other:?}"),
        };
        let mse = mean_squared_error(weights, &arch, &test);
        assert!(mse < 1e-2, "test MSE {mse}");
    }

    fn nv1_small(n_train: usize, n_val: usize, seed: u64) -> (Dataset, Dataset, NoiseModel) {
        let split = SplitSpec::new(n_train, n_val, 16, seed);
        let (train, val, _, model) = gen_nv1(&split);
        (train, val, model)
    }

    /// Average |prediction(x) − target(x)| of a point-predictor over the
    /// dense region x ∈ [0.05, 0.95].
    fn dense_gap(
        weights: &MlpWeights,
        arch: &MlpArchitecture,
        target: impl Fn(f64) -> f64,
    ) -> f64 {
        let xs: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
        let mut total = 0.0;
        for &x in &xs {
            let pred = ann_value_forward(weights, arch, &[x])[0];
            total += (pred - target(x)).abs();
        }
        total / xs.len() as f64
    }

    /// MSE regression tracks the conditional
    /// mean, not the 0.1-quantile.
    #[test]
    fn deterministic_mse_tracks_mean_not_quantile() {
        let arch = tiny_arch(1, 16, 1);
        let (train, val, model) = nv1_small(512, 128, 21);
        let mut cfg = TrainConfig::new(0.01, 60, 23);
        cfg.m_t = 1;
        let trained =
            train_deterministic(&arch, None, &train, &val, &cfg, DetMode::DecoupledMse, None)
                .unwrap();
        let weights = match &trained.predictor {
            Predictor::Ann { weights, .. } => weights,
            _ => unreachable!(),
        };
        let quantile = |x: f64| {
            model
                .analytic_quantile(&DVector::from_element(1, x), 0.1)
                .unwrap()[0]
        };
        let gap_mean = dense_gap(weights, &arch, nv_mean);
        let gap_q = dense_gap(weights, &arch, quantile);
        assert!(
            gap_mean < gap_q,
            "MSE net should track the mean: gap_mean {gap_mean} vs gap_quantile {gap_q}"
        );
    }

    /// End-to-end task training of the point
    /// predictor tracks the c_s/(c_s+c_e) = 0.1 quantile instead.
    #[test]
    fn deterministic_combined_tracks_quantile_not_mean() {
        let arch = tiny_arch(1, 16, 1);
        let (train, val, model) = nv1_small(512, 128, 31);
        let problem = Problem::Nv(NvSpec::standard());
        // warm start from a short MSE fit to escape the z=0 dead zone
        let mut pre_cfg = TrainConfig::new(0.01, 40, 29);
        pre_cfg.m_t = 1;
        let pre = train_deterministic(&arch, None, &train, &val, &pre_cfg, DetMode::DecoupledMse, None)
            .unwrap();
        let pre_weights = match pre.predictor {
            Predictor::Ann { weights, .. } => weights,
            _ => unreachable!(),
        };
        let mut cfg = TrainConfig::new(0.03, 300, 29);
        cfg.m_t = 1;
        cfg.val_cap = Some(64);
        let trained = train_deterministic(
            &arch,
            Some(&problem),
            &train,
            &val,
            &cfg,
            DetMode::CombinedTask,
            Some(pre_weights),
        )
        .unwrap();
        let weights = match &trained.predictor {
            Predictor::Ann { weights, .. } => weights,
            _ => unreachable!(),
        };
        let quantile = |x: f64| {
            model
                .analytic_quantile(&DVector::from_element(1, x), 0.1)
                .unwrap()[0]
        };
        let gap_mean = dense_gap(weights, &arch, nv_mean);
        let gap_q = dense_gap(weights, &arch, quantile);
        assert!(
            gap_q < gap_mean,
            "task-trained net should track the quantile: gap_quantile {gap_q} vs gap_mean {gap_mean}"
        );
        assert!(gap_q < 0.5, "quantile gap {gap_q} too large");
    }

    // ── combined BNN training ────────────────────────────────────────

    #[test]
    fn combined_bnn_runs_and_is_deterministic() {
        let arch = tiny_arch(1, 6, 1);
        let (train, val, _) = nv1_small(64, 32, 41);
        let problem = Problem::Nv(NvSpec::standard());
        let mut cfg = TrainConfig::combined_bnn(&problem, 2, 37);
        cfg.m_t = 4;
        cfg.val_cap = Some(16);
        let a =
            train_combined(&arch, &Prior::default(), &problem, &train, &val, &cfg, None).unwrap();
        let b =
            train_combined(&arch, &Prior::default(), &problem, &train, &val, &cfg, None).unwrap();
        assert_eq!(a.history.len(), 2);
        assert!(a.k_used.is_some());
        assert_eq!(a.k_used, b.k_used);
        assert_eq!(
            serde_json::to_string(&a.predictor).unwrap(),
            serde_json::to_string(&b.predictor).unwrap()
        );
    }

    /// K = 0 decouples the task term: the parameter trajectory is
    /// independent of the labels entirely.
    #[test]
    fn combined_k_zero_ignores_labels() {
        let arch = tiny_arch(1, 6, 1);
        let (train, val, _) = nv1_small(64, 16, 51);
        let mut scaled = train.clone();
        scaled.y *= 2.0;
        let problem = Problem::Nv(NvSpec::standard());
        let mut cfg = TrainConfig::combined_bnn(&problem, 2, 43);
        cfg.m_t = 4;
        cfg.k = Some(0.0);
        cfg.val_cap = Some(8);
        let a =
            train_combined(&arch, &Prior::default(), &problem, &train, &val, &cfg, None).unwrap();
        let b =
            train_combined(&arch, &Prior::default(), &problem, &scaled, &val, &cfg, None).unwrap();
        assert_eq!(
            serde_json::to_string(&a.predictor).unwrap(),
            serde_json::to_string(&b.predictor).unwrap()
        );
    }

    /// With the regularizer drowned out
    /// (large K), the combined BNN's decision z*(x) approaches the
    /// analytic 0.1-quantile on the dense region.
    #[test]
    fn combined_bnn_decision_approaches_quantile() {
        let arch = tiny_arch(1, 16, 1);
        let (train, val, model) = nv1_small(256, 64, 61);
        let problem = Problem::Nv(NvSpec::standard());
        // warm start from a short decoupled fit, then push hard on the
        // task term
        let mut pre_cfg = TrainConfig::decoupled_bnn(60, 47);
        pre_cfg.learning_rate = 0.01;
        let pre = train_decoupled(&arch, &Prior::default(), &train, &val, &pre_cfg, None).unwrap();
        let pre_theta = match pre.predictor {
            Predictor::Bnn { theta, .. } => theta,
            _ => unreachable!(),
        };
        let mut cfg = TrainConfig::combined_bnn(&problem, 160, 47);
        cfg.learning_rate = 0.03;
        cfg.m_t = 16;
        cfg.k = Some(1e6);
        cfg.val_cap = Some(32);
        let trained = train_combined(
            &arch,
            &Prior::default(),
            &problem,
            &train,
            &val,
            &cfg,
            Some(pre_theta),
        )
        .unwrap();
        let xs: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
        let mut rng = stream(97, StreamKind::Oracle);
        let mut total = 0.0;
        for &x in &xs {
            let samples = trained
                .predictor
                .predict_samples(&[x], 512, &mut rng)
                .unwrap();
            let flat: Vec<f64> = samples.column(0).iter().copied().collect();
            let dec = nv_saa_decision(&flat, &NvSpec::standard()).unwrap();
            let q = model
                .analytic_quantile(&DVector::from_element(1, x), 0.1)
                .unwrap()[0];
            total += (dec.z[0] - q).abs();
        }
        let gap = total / xs.len() as f64;
        assert!(gap < 0.5, "decision-to-quantile gap {gap}");
    }

    /// Decoupled ELBO training on NV1 learns
    /// the heteroscedastic law well enough that the predictive
    /// 0.1-quantile matches the analytic one on the dense region.
    #[test]
    fn decoupled_bnn_quantile_curve_matches_analytic() {
        let arch = tiny_arch(1, 32, 1);
        let split = SplitSpec::new(1800, 128, 16, 71);
        let (train, val, _, model) = gen_nv1(&split);
        let mut cfg = TrainConfig::decoupled_bnn(150, 53);
        cfg.learning_rate = 0.01;
        let trained = train_decoupled(&arch, &Prior::default(), &train, &val, &cfg, None).unwrap();
        let xs: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
        let mut rng = stream(103, StreamKind::Oracle);
        let mut total = 0.0;
        for &x in &xs {
            let samples = trained
                .predictor
                .predict_samples(&[x], 512, &mut rng)
                .unwrap();
            let mut flat: Vec<f64> = samples.column(0).iter().copied().collect();
            flat.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pred_q = flat[(0.1 * flat.len() as f64).ceil() as usize - 1];
            let q = model
                .analytic_quantile(&DVector::from_element(1, x), 0.1)
                .unwrap()[0];
            total += (pred_q - q).abs();
        }
        let gap = total / xs.len() as f64;
        assert!(gap < 0.5, "predicted-quantile gap {gap}");
    }

    #[test]
    fn history_csv_round_trip_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = vec![
            EpochRecord {
                epoch: 0,
                train_loss: 1.5,
                val_metric: 2.5,
                lr: 0.001,
                skipped: 0,
            },
            EpochRecord {
                epoch: 1,
                train_loss: 1.2,
                val_metric: 2.1,
                lr: 0.00099,
                skipped: 3,
            },
        ];
        write_history_csv(&history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_metric,lr,skipped");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,") && lines[2].ends_with(",3"));
    }
}
