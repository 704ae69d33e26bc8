//! Inequality-constrained convex QP solver with implicit KKT
//! differentiation.
//!
//! Problems are given in standard form `min ½ vᵀHv + kᵀv s.t. Av ⪯ b`.
//! The forward pass is an infeasible-start primal-dual interior-point
//! method with Mehrotra predictor-corrector steps; the backward pass
//! solves the linearized KKT system at the optimum and assembles
//! gradients with respect to all four problem data blocks, exposed as a
//! tape [`CustomOp`] so H, k, A, b may themselves carry gradients.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::autodiff::{AdError, CustomOp, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("H is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("lp_to_qp requires eps > 0, got {0}")]
    BadEps(f64),
    #[error("KKT system singular after regularization")]
    SingularKkt,
    #[error("solve did not reach optimality (status {0:?})")]
    NotOptimal(QpStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// `min ½ vᵀHv + kᵀv  s.t.  Av ⪯ b` with H symmetric PSD.
#[derive(Debug, Clone)]
pub struct QpStandardForm {
    pub h: DMatrix<f64>,
    pub k: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpStandardForm {
    pub fn new(
        h: DMatrix<f64>,
        k: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = h.nrows();
        if h.ncols() != n || k.len() != n || a.ncols() != n || a.nrows() != b.len() {
            return Err(QpError::Dimension(format!(
                "H {}x{}, k {}, A {}x{}, b {}",
                h.nrows(),
                h.ncols(),
                k.len(),
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
        let mut asym: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((h[(i, j)] - h[(j, i)]).abs());
            }
        }
        if asym > 1e-12 {
            return Err(QpError::NotSymmetric(asym));
        }
        // exact symmetrization
        let h = (&h + h.transpose()) * 0.5;
        Ok(QpStandardForm { h, k, a, b })
    }

    pub fn num_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * (v.transpose() * &self.h * v)[(0, 0)] + self.k.dot(v)
    }

    /// Text dump for triaging failed solves.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let (n, m) = (self.num_vars(), self.num_constraints());
        writeln!(s, "qp n={n} m={m}").unwrap();
        let row = |out: &mut String, name: &str, vals: &mut dyn Iterator<Item = f64>| {
            write!(out, "{name}").unwrap();
            for v in vals {
                write!(out, " {v:.17e}").unwrap();
            }
            writeln!(out).unwrap();
        };
        row(&mut s, "H", &mut self.h.transpose().iter().copied());
        row(&mut s, "k", &mut self.k.iter().copied());
        row(&mut s, "A", &mut self.a.transpose().iter().copied());
        row(&mut s, "b", &mut self.b.iter().copied());
        s
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub v: DVector<f64>,
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub duality_gap: f64,
    /// sᵀλ after each iteration, oldest first.
    pub gap_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpGradients {
    pub dh: DMatrix<f64>,
    pub dk: DVector<f64>,
    pub da: DMatrix<f64>,
    pub db: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

// Static regularization of the reduced KKT block; POP's LP-derived H is
// near-singular by construction.
const KKT_REG: f64 = 1e-9;
const LAMBDA_FLOOR: f64 = 1e-10;

fn factor_reduced(
    qp: &QpStandardForm,
    d: &DVector<f64>,
) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = qp.num_vars();
    let mut m = qp.h.clone();
    // M = H + Aᵀ diag(d) A + reg·I
    for r in 0..qp.num_constraints() {
        let dr = d[r];
        if dr == 0.0 {
            continue;
        }
        let row = qp.a.row(r);
        for i in 0..n {
            let ai = row[i];
            if ai == 0.0 {
                continue;
            }
            for j in 0..n {
                m[(i, j)] += dr * ai * row[j];
            }
        }
    }
    for i in 0..n {
        m[(i, i)] += KKT_REG;
    }
    let mut reg = KKT_REG;
    loop {
        if let Some(ch) = m.clone().cholesky() {
            return Some(ch);
        }
        reg *= 100.0;
        if reg > 1e-2 {
            return None;
        }
        for i in 0..n {
            m[(i, i)] += reg;
        }
    }
}

/// Infeasible-start primal-dual interior point with Mehrotra
/// predictor-corrector.
pub fn solve_qp(qp: &QpStandardForm, opts: SolveOptions) -> Result<QpSolution, QpError> {
    let n = qp.num_vars();
    let m = qp.num_constraints();

    let mut v = DVector::zeros(n);
    let mut s = DVector::from_fn(m, |i, _| (qp.b[i]).max(1.0));
    let mut lam = DVector::from_element(m, 1.0);

    let scale_d = 1.0 + qp.k.amax().max(qp.h.amax());
    let scale_p = 1.0 + qp.b.amax().max(qp.a.amax());

    let mut gap_history = Vec::new();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let mut prev_primal_norm = f64::INFINITY;
    let mut stalled = 0usize;

    for iter in 0..opts.max_iter {
        let r_d = &qp.h * &v + &qp.k + qp.a.transpose() * &lam;
        let r_p = &qp.a * &v + &s - &qp.b;
        let mu = s.dot(&lam) / m as f64;
        let gap = s.dot(&lam);

        let res = r_d.amax() / scale_d + r_p.amax() / scale_p + mu;
        match &mut best {
            Some((b, bv, bl)) if res < *b => {
                *b = res;
                bv.copy_from(&v);
                bl.copy_from(&lam);
            }
            None => best = Some((res, v.clone(), lam.clone())),
            _ => {}
        }

        if r_d.amax() <= opts.tol * scale_d && r_p.amax() <= opts.tol * scale_p && mu <= opts.tol {
            let (v, lam) = polish(qp, v, lam);
            let gap = {
                let s = &qp.b - &qp.a * &v;
                s.dot(&lam)
            };
            return Ok(QpSolution {
                v,
                lambda: lam,
                status: QpStatus::Optimal,
                iterations: iter,
                duality_gap: gap,
                gap_history,
            });
        }

        // infeasibility heuristic: primal residual stalls while duals diverge
        let pn = r_p.amax();
        if pn > prev_primal_norm * 0.999 && pn > opts.tol * scale_p {
            stalled += 1;
        } else {
            stalled = 0;
        }
        prev_primal_norm = pn;
        if stalled > 8 && lam.amax() > 1e8 {
            return Ok(QpSolution {
                v,
                lambda: lam,
                status: QpStatus::Infeasible,
                iterations: iter,
                duality_gap: gap,
                gap_history,
            });
        }

        let d = DVector::from_fn(m, |i, _| lam[i] / s[i]);
        let Some(chol) = factor_reduced(qp, &d) else {
            break;
        };

        // affine (predictor) direction: rc = SΛe
        let solve_dir = |rc: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            // rhs = -r_d + Aᵀ S⁻¹ (rc - Λ r_p)
            let t = DVector::from_fn(m, |i, _| (rc[i] - lam[i] * r_p[i]) / s[i]);
            let rhs = -&r_d + qp.a.transpose() * t;
            let dv = chol.solve(&rhs);
            let ds = -&r_p - &qp.a * &dv;
            let dl = DVector::from_fn(m, |i, _| (-rc[i] - lam[i] * ds[i]) / s[i]);
            (dv, ds, dl)
        };

        let rc_aff = DVector::from_fn(m, |i, _| s[i] * lam[i]);
        let (_dv_a, ds_a, dl_a) = solve_dir(&rc_aff);

        let step_len = |x: &DVector<f64>, dx: &DVector<f64>| -> f64 {
            let mut alpha: f64 = 1.0;
            for i in 0..x.len() {
                if dx[i] < 0.0 {
                    alpha = alpha.min(-x[i] / dx[i]);
                }
            }
            alpha
        };

        let alpha_aff = step_len(&s, &ds_a).min(step_len(&lam, &dl_a)).min(1.0);
        let mu_aff = {
            let mut acc = 0.0;
            for i in 0..m {
                acc += (s[i] + alpha_aff * ds_a[i]) * (lam[i] + alpha_aff * dl_a[i]);
            }
            acc / m as f64
        };
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).clamp(0.0, 0.9)
        } else {
            0.0
        };

        // The linearized gap derivative along the corrector direction is
        // d(sᵀλ)/dα|₀ = -(1-σ)·sᵀλ - Δs_affᵀΔλ_aff. With an infeasible
        // start the cross term can be negative enough to make it positive,
        // which stalls the monotone line search below; scale the corrector
        // so the derivative stays ≤ -0.1·sᵀλ.
        let gap0 = s.dot(&lam);
        let corr: f64 = (0..m).map(|i| ds_a[i] * dl_a[i]).sum();
        let beta = if corr < 0.0 {
            (((0.9 - sigma) * gap0) / (-corr)).min(1.0)
        } else {
            1.0
        };

        // corrector: rc = SΛe - σμe + β·dS_aff dΛ_aff e
        let rc = DVector::from_fn(m, |i, _| {
            s[i] * lam[i] - sigma * mu + beta * ds_a[i] * dl_a[i]
        });
        let (dv, ds, dl) = solve_dir(&rc);

        let alpha = 0.99 * step_len(&s, &ds).min(step_len(&lam, &dl));
        let mut alpha = alpha.min(1.0);
        if !alpha.is_finite() || alpha <= 1e-14 {
            break;
        }
        // keep sᵀλ monotone: the corrector safeguard above guarantees
        // d(sᵀλ)/dα < 0 at α = 0, so backtracking finds a decreasing step
        for _ in 0..30 {
            let mut g = 0.0;
            for i in 0..m {
                g += (s[i] + alpha * ds[i]) * (lam[i] + alpha * dl[i]);
            }
            if g <= gap0 {
                break;
            }
            alpha *= 0.8;
        }
        v += alpha * &dv;
        s += alpha * &ds;
        lam += alpha * &dl;
        gap_history.push(s.dot(&lam));
    }

    let (_, bv, bl) = best.expect("at least one iterate");
    let gap = {
        let s = &qp.b - &qp.a * &bv;
        s.dot(&bl)
    };
    Ok(QpSolution {
        v: bv,
        lambda: bl,
        status: QpStatus::MaxIter,
        iterations: opts.max_iter,
        duality_gap: gap,
        gap_history,
    })
}

/// Active-set refinement of a converged interior-point iterate: solve the
/// equality KKT system on the identified active set, keeping the result
/// only if it sharpens the KKT residuals without breaking feasibility.
fn polish(
    qp: &QpStandardForm,
    v: DVector<f64>,
    lam: DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let n = qp.num_vars();
    let slack = &qp.b - &qp.a * &v;
    let active: Vec<usize> = (0..qp.num_constraints())
        .filter(|&i| lam[i] > slack[i])
        .collect();
    let na = active.len();
    let dim = n + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    for (r, &ci) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + r, c)] = qp.a[(ci, c)];
            kkt[(c, n + r)] = qp.a[(ci, c)];
        }
        rhs[n + r] = qp.b[ci];
    }
    for i in 0..n {
        rhs[i] = -qp.k[i];
    }
    let Some(sol) = kkt.lu().solve(&rhs) else {
        return (v, lam);
    };
    let pv = sol.rows(0, n).into_owned();
    let mut plam = DVector::zeros(qp.num_constraints());
    for (r, &ci) in active.iter().enumerate() {
        plam[ci] = sol[n + r];
    }
    // reject a polish that leaves the feasible/dual-feasible region
    let ps = &qp.b - &qp.a * &pv;
    if ps.iter().any(|&s| s < -1e-9) || plam.iter().any(|&l| l < -1e-9) {
        return (v, lam);
    }
    let resid = |v: &DVector<f64>, l: &DVector<f64>| -> f64 {
        let stat = (&qp.h * v + &qp.k + qp.a.transpose() * l).amax();
        let s = &qp.b - &qp.a * v;
        let comp = (0..qp.num_constraints())
            .map(|i| (l[i] * s[i]).abs())
            .fold(0.0, f64::max);
        stat.max(comp)
    };
    if resid(&pv, &plam) < resid(&v, &lam) {
        (pv, plam.map(|l| l.max(0.0)))
    } else {
        (v, lam)
    }
}

/// Gradients of a downstream scalar loss with respect to the QP data, via
/// the linearized KKT system at `(v*, λ*)`.
pub fn backward_kkt(
    qp: &QpStandardForm,
    sol: &QpSolution,
    dl_dv: &DVector<f64>,
) -> Result<QpGradients, QpError> {
    if sol.status != QpStatus::Optimal {
        return Err(QpError::NotOptimal(sol.status));
    }
    let n = qp.num_vars();
    let m = qp.num_constraints();
    if dl_dv.len() != n {
        return Err(QpError::Dimension(format!(
            "dl_dv length {} vs n {}",
            dl_dv.len(),
            n
        )));
    }

    // Degenerate complementarity: clamp tiny duals and slacks before
    // forming the system.
    let lam = DVector::from_fn(m, |i, _| sol.lambda[i].max(LAMBDA_FLOOR));
    let slack = {
        let s = &qp.b - &qp.a * &sol.v;
        DVector::from_fn(m, |i, _| s[i].max(LAMBDA_FLOOR))
    };

    let d = DVector::from_fn(m, |i, _| lam[i] / slack[i]);
    let chol = factor_reduced(qp, &d).ok_or(QpError::SingularKkt)?;

    // (H + Aᵀ Λ S⁻¹ A) d_v = -dL/dv ;  d_λ = S⁻¹ A d_v
    let dv = chol.solve(&(-dl_dv));
    let dlam = {
        let adv = &qp.a * &dv;
        DVector::from_fn(m, |i, _| adv[i] / slack[i])
    };

    let dk = dv.clone();
    let mut dh = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            dh[(i, j)] = 0.5 * (dv[i] * sol.v[j] + sol.v[i] * dv[j]);
        }
    }
    let mut da = DMatrix::zeros(m, n);
    for r in 0..m {
        for c in 0..n {
            da[(r, c)] = lam[r] * dlam[r] * sol.v[c] + sol.lambda[r] * dv[c];
        }
    }
    let db = DVector::from_fn(m, |i, _| -lam[i] * dlam[i]);

    Ok(QpGradients { dh, dk, da, db })
}

/// LP → QP regularization: `min cᵀv s.t. Av ⪯ b` becomes
/// `min eps·vᵀv + cᵀv` (H = 2·eps·I).
pub fn lp_to_qp(
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    eps: f64,
) -> Result<QpStandardForm, QpError> {
    if eps <= 0.0 {
        return Err(QpError::BadEps(eps));
    }
    let n = c.len();
    let h = DMatrix::from_diagonal_element(n, n, 2.0 * eps);
    QpStandardForm::new(h, c, a, b)
}

// ── tape integration ─────────────────────────────────────────────────

/// Differentiable QP node: inputs `[H (n×n), k (n), A (m×n), b (m)]`,
/// output `v* (n)`. Forward solves; backward applies [`backward_kkt`].
pub struct QpLayer {
    opts: SolveOptions,
    last: RefCell<Option<(QpStandardForm, QpSolution)>>,
}

impl QpLayer {
    pub fn new(opts: SolveOptions) -> Rc<Self> {
        Rc::new(QpLayer {
            opts,
            last: RefCell::new(None),
        })
    }

    pub fn last_solution(&self) -> Option<QpSolution> {
        self.last.borrow().as_ref().map(|(_, s)| s.clone())
    }
}

fn tensor_to_mat(t: &Tensor) -> Result<DMatrix<f64>, AdError> {
    if t.rank() != 2 {
        return Err(AdError::Contract(format!(
            "expected rank-2 tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(DMatrix::from_row_slice(
        t.shape()[0],
        t.shape()[1],
        t.values(),
    ))
}

fn tensor_to_vec(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.values())
}

fn mat_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut vals = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            vals.push(m[(r, c)]);
        }
    }
    Tensor::matrix(m.nrows(), m.ncols(), vals).expect("consistent dims")
}

impl CustomOp for QpLayer {
    fn name(&self) -> &'static str {
        "qp_argmin"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, AdError> {
        if inputs.len() != 4 {
            return Err(AdError::Contract(format!(
                "qp layer takes [H, k, A, b], got {} inputs",
                inputs.len()
            )));
        }
        let qp = QpStandardForm::new(
            tensor_to_mat(inputs[0])?,
            tensor_to_vec(inputs[1]),
            tensor_to_mat(inputs[2])?,
            tensor_to_vec(inputs[3]),
        )
        .map_err(|e| AdError::Contract(e.to_string()))?;
        let sol = solve_qp(&qp, self.opts).map_err(|e| AdError::Contract(e.to_string()))?;
        if sol.status != QpStatus::Optimal {
            return Err(AdError::Contract(format!(
                "qp layer forward: solver status {:?}",
                sol.status
            )));
        }
        let out = Tensor::vector(sol.v.iter().copied().collect());
        *self.last.borrow_mut() = Some((qp, sol));
        Ok(out)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &Tensor,
    ) -> Result<Vec<Tensor>, AdError> {
        let borrow = self.last.borrow();
        let (qp, sol) = borrow
            .as_ref()
            .ok_or_else(|| AdError::Contract("qp layer backward before forward".into()))?;
        let grads = backward_kkt(qp, sol, &tensor_to_vec(upstream))
            .map_err(|e| AdError::Contract(e.to_string()))?;
        Ok(vec![
            mat_to_tensor(&grads.dh),
            Tensor::vector(grads.dk.iter().copied().collect()),
            mat_to_tensor(&grads.da),
            Tensor::vector(grads.db.iter().copied().collect()),
        ])
    }
}

/// Record a differentiable QP solve on `tape`.
pub fn qp_argmin_node(
    tape: &Tape,
    layer: Rc<QpLayer>,
    h: &Var,
    k: &Var,
    a: &Var,
    b: &Var,
) -> Result<Var, AdError> {
    tape.custom(layer, &[h, k, a, b])
}

/// KKT residual check used by tests on every optimal solve.
pub fn kkt_residuals(qp: &QpStandardForm, sol: &QpSolution) -> (f64, f64, f64, f64) {
    let slack = &qp.b - &qp.a * &sol.v;
    let primal = slack.iter().fold(0.0f64, |acc, &si| acc.max(-si));
    let dual = sol.lambda.iter().fold(0.0f64, |acc, &l| acc.max(-l));
    let comp = (0..qp.num_constraints())
        .map(|i| (sol.lambda[i] * slack[i]).abs())
        .fold(0.0, f64::max);
    let stat = (&qp.h * &sol.v + &qp.k + qp.a.transpose() * &sol.lambda).amax();
    (primal, dual, comp, stat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn solve(qp: &QpStandardForm) -> QpSolution {
        solve_qp(qp, SolveOptions::default()).unwrap()
    }

    #[test]
    fn interior_optimum_has_zero_duals() {
        // min ½v² s.t. -v ≤ 0, v ≤ 2
        let qp = QpStandardForm::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[0.0]),
            DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]),
            DVector::from_column_slice(&[0.0, 2.0]),
        )
        .unwrap();
        let sol = solve(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        // v* sits exactly on the -v ≤ 0 boundary with λ* = 0; the central
        // path approaches such degenerate points at rate √μ
        assert_relative_eq!(sol.v[0], 0.0, epsilon = 1e-4);
        assert!(sol.lambda.amax() < 1e-4);
    }

    #[test]
    fn active_constraint_analytic_kkt() {
        // min ½(v-3)² s.t. v ≤ 2  →  v*=2, λ*=1
        let qp = QpStandardForm::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[-3.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[2.0]),
        )
        .unwrap();
        let sol = solve(&qp);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.v[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(sol.lambda[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn backward_active_bound_sensitivity() {
        // v* = b when the bound is active, so db = 1 for dL/dv = 1
        let qp = QpStandardForm::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[-3.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[2.0]),
        )
        .unwrap();
        let sol = solve(&qp);
        let g = backward_kkt(&qp, &sol, &DVector::from_column_slice(&[1.0])).unwrap();
        assert_relative_eq!(g.db[0], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn backward_inactive_bound_insensitive() {
        let qp = QpStandardForm::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[-3.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[5.0]),
        )
        .unwrap();
        let sol = solve(&qp);
        assert_relative_eq!(sol.v[0], 3.0, epsilon = 1e-6);
        let g = backward_kkt(&qp, &sol, &DVector::from_column_slice(&[1.0])).unwrap();
        assert!(g.db[0].abs() < 1e-6, "db = {}", g.db[0]);
    }

    #[test]
    fn lp_to_qp_definition() {
        let qp = lp_to_qp(
            DVector::from_column_slice(&[1.0, 0.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_column_slice(&[1.0]),
            1e-4,
        )
        .unwrap();
        assert_relative_eq!(qp.h[(0, 0)], 2e-4);
        assert_relative_eq!(qp.h[(1, 1)], 2e-4);
        assert_eq!(qp.h[(0, 1)], 0.0);
    }

    #[test]
    fn lp_to_qp_rejects_bad_eps() {
        let r = lp_to_qp(
            DVector::from_column_slice(&[1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[1.0]),
            0.0,
        );
        assert!(r.is_err());
    }

    #[test]
    fn small_eps_lp_recovers_vertex() {
        // min x s.t. 0 ≤ x ≤ 1 → x* → 0 as eps → 0
        let a = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let b = DVector::from_column_slice(&[0.0, 1.0]);
        let qp = lp_to_qp(DVector::from_column_slice(&[1.0]), a, b, 1e-6).unwrap();
        let sol = solve(&qp);
        assert!(sol.v[0].abs() < 1e-3, "v = {}", sol.v[0]);
    }

    #[test]
    fn scale_covariance() {
        // scaling (H, k) by c > 0 leaves the argmin unchanged
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let k = DVector::from_column_slice(&[-1.0, 0.7]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let b = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let qp1 = QpStandardForm::new(h.clone(), k.clone(), a.clone(), b.clone()).unwrap();
        let qp2 = QpStandardForm::new(h * 7.5, k * 7.5, a, b).unwrap();
        let s1 = solve(&qp1);
        let s2 = solve(&qp2);
        assert!((&s1.v - &s2.v).amax() < 1e-7);
    }

    #[test]
    fn infeasible_problem_detected() {
        // v ≤ 0 and v ≥ 1 simultaneously
        let qp = QpStandardForm::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_column_slice(&[0.0, -1.0]),
        )
        .unwrap();
        let sol = solve_qp(&qp, SolveOptions::default()).unwrap();
        assert_ne!(sol.status, QpStatus::Optimal);
    }

    #[test]
    fn dump_roundtrips_dimensions() {
        let qp = QpStandardForm::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[0.5]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_column_slice(&[2.0]),
        )
        .unwrap();
        let dump = qp.dump();
        assert!(dump.starts_with("qp n=1 m=1"));
        assert!(dump.contains("H "));
    }
}
