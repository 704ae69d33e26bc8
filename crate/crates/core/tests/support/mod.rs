//! Shared oracles for integration tests: random QP generation,
//! exhaustive active-set enumeration, and degeneracy filtering.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stochop_core::qp::{QpSolution, QpStandardForm};

pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpStandardForm {
    // H = BᵀB + 0.1·I keeps the Hessian safely positive definite
    let bmat = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut h = bmat.transpose() * &bmat;
    for i in 0..n {
        h[(i, i)] += 0.1;
    }
    let k = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    // b = A v0 + positive margin guarantees a nonempty interior
    let v0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let margin = DVector::from_fn(m, |_, _| rng.random_range(0.05..1.0));
    let b = &a * v0 + margin;
    QpStandardForm::new(h, k, a, b).unwrap()
}

/// Exhaustive active-set enumeration: for every candidate active subset of
/// size ≤ n, solve the equality-constrained KKT system and keep the best
/// point that is primal and dual feasible.
pub fn active_set_optimum(qp: &QpStandardForm) -> f64 {
    let n = qp.num_vars();
    let m = qp.num_constraints();
    let mut best = f64::INFINITY;

    let mut subset = Vec::new();
    enumerate(qp, 0, n, m, &mut subset, &mut best);
    best
}

fn enumerate(
    qp: &QpStandardForm,
    start: usize,
    n: usize,
    m: usize,
    subset: &mut Vec<usize>,
    best: &mut f64,
) {
    try_subset(qp, subset, best);
    if subset.len() == n {
        return;
    }
    for i in start..m {
        subset.push(i);
        enumerate(qp, i + 1, n, m, subset, best);
        subset.pop();
    }
}

fn try_subset(qp: &QpStandardForm, subset: &[usize], best: &mut f64) {
    let n = qp.num_vars();
    let na = subset.len();
    let dim = n + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    for (r, &ci) in subset.iter().enumerate() {
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
        return;
    };
    let v = sol.rows(0, n).into_owned();
    // dual feasibility of the active multipliers
    for r in 0..na {
        if sol[n + r] < -1e-9 {
            return;
        }
    }
    // primal feasibility of the inactive constraints
    let av = &qp.a * &v;
    for i in 0..qp.num_constraints() {
        if av[i] > qp.b[i] + 1e-8 {
            return;
        }
    }
    let obj = qp.objective(&v);
    if obj < *best {
        *best = obj;
    }
}

/// Strict-complementarity filter from the gradient-correctness contract:
/// every constraint must have its nonzero member of {λᵢ, sᵢ} above 1e-3.
pub fn non_degenerate(qp: &QpStandardForm, sol: &QpSolution) -> bool {
    let s = &qp.b - &qp.a * &sol.v;
    (0..qp.num_constraints()).all(|i| sol.lambda[i].max(s[i]) > 1e-3)
}
