//! Portfolio loss minimization: cost max(−yᵀz, 0) under nonnegativity and
//! a minimum-expected-return constraint, linearized with per-scenario
//! auxiliary variables and regularized into QP standard form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{ProblemError, SaaProgram, SampleRouting};
use crate::qp::lp_to_qp;
use crate::rng::{stream, StreamKind};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PopSpec {
    /// Historical average returns entering p̄ᵀz ≥ R_min.
    pub p_bar: DVector<f64>,
    pub r_min: f64,
    /// LP → QP regularization weight.
    pub eps: f64,
}

impl PopSpec {
    pub fn new(p_bar: DVector<f64>, r_min: f64, eps: f64) -> Result<Self, ProblemError> {
        if eps <= 0.0 {
            return Err(ProblemError::InvalidSpec(format!("eps must be > 0, got {eps}")));
        }
        // {z ⪰ 0, p̄ᵀz ≥ R_min} is nonempty iff some positive return exists
        // or the floor is nonpositive (z can scale arbitrarily).
        let feasible = r_min <= 0.0 || p_bar.iter().any(|&v| v > 0.0);
        if !feasible {
            return Err(ProblemError::InvalidSpec(format!(
                "no z ⪰ 0 attains p̄ᵀz ≥ {r_min}"
            )));
        }
        Ok(PopSpec { p_bar, r_min, eps })
    }

    pub fn d_y(&self) -> usize {
        self.p_bar.len()
    }

    /// R_min at the 30th percentile of p̄ᵀz over 1000 random allocations in
    /// [0, 1]^d, eps = 1e-4.
    pub fn generated(p_bar: DVector<f64>, seed: u64) -> Self {
        let mut rng = stream(seed, StreamKind::DataGen);
        let d = p_bar.len();
        let mut returns: Vec<f64> = (0..1000)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| rng.random_range(0.0..1.0));
                p_bar.dot(&z)
            })
            .collect();
        returns.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let r_min = returns[300];
        PopSpec::new(p_bar, r_min, 1e-4).expect("generated spec is feasible")
    }
}

/// max(−yᵀz, 0)
pub fn pop_task_cost(z: &DVector<f64>, y: &DVector<f64>) -> Result<f64, ProblemError> {
    if z.len() != y.len() {
        return Err(ProblemError::Dimension(format!(
            "z has {} entries, y has {}",
            z.len(),
            y.len()
        )));
    }
    Ok((-y.dot(z)).max(0.0))
}

/// SAA expansion: v = [z, u⁽¹⁾…u⁽ᴹ⁾] with n = d_y + M variables and
/// m = d_y + 2M + 1 constraints; samples enter only through rows of A.
pub fn pop_build_saa(samples: &DMatrix<f64>, spec: &PopSpec) -> Result<SaaProgram, ProblemError> {
    let m_samples = samples.nrows();
    if m_samples == 0 {
        return Err(ProblemError::EmptySamples);
    }
    let d = spec.d_y();
    if samples.ncols() != d {
        return Err(ProblemError::Dimension(format!(
            "samples have {} columns, spec d_y={d}",
            samples.ncols()
        )));
    }

    let n = d + m_samples;
    let n_rows = d + 2 * m_samples + 1;

    // objective: 0ᵀz + (1/M) Σ u⁽ʲ⁾
    let mut c = DVector::zeros(n);
    for j in 0..m_samples {
        c[d + j] = 1.0 / m_samples as f64;
    }

    let mut a = DMatrix::zeros(n_rows, n);
    let mut b = DVector::zeros(n_rows);
    // -z ⪯ 0
    for i in 0..d {
        a[(i, i)] = -1.0;
    }
    // -u⁽ʲ⁾ ≤ 0
    for j in 0..m_samples {
        a[(d + j, d + j)] = -1.0;
    }
    // -y⁽ʲ⁾ᵀz - u⁽ʲ⁾ ≤ 0
    let row_base = d + m_samples;
    for j in 0..m_samples {
        for i in 0..d {
            a[(row_base + j, i)] = -samples[(j, i)];
        }
        a[(row_base + j, d + j)] = -1.0;
    }
    // -p̄ᵀz ≤ -R_min
    for i in 0..d {
        a[(n_rows - 1, i)] = -spec.p_bar[i];
    }
    b[n_rows - 1] = -spec.r_min;

    Ok(SaaProgram {
        qp: lp_to_qp(c, a, b, spec.eps)?,
        d_z: d,
        routing: SampleRouting::ARows { row_base, d },
    })
}
