//! Constrained quadratic newsvendor: per-item quadratic and linear
//! shortage/excess costs under nonnegativity and a budget constraint,
//! plus its Monte-Carlo SAA expansion into solver standard form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{ProblemError, SaaProgram, SampleRouting};
use crate::qp::{solve_qp, QpStandardForm, QpStatus, SolveOptions};
use crate::rng::{stream, StreamKind};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NvqpSpec {
    pub q: DMatrix<f64>,
    pub q_s: DMatrix<f64>,
    pub q_e: DMatrix<f64>,
    pub c: DVector<f64>,
    pub c_s: DVector<f64>,
    pub c_e: DVector<f64>,
    /// Unit prices entering the budget constraint pᵀz ≤ B.
    pub p: DVector<f64>,
    pub budget: f64,
}

impl NvqpSpec {
    pub fn new(
        q: DMatrix<f64>,
        q_s: DMatrix<f64>,
        q_e: DMatrix<f64>,
        c: DVector<f64>,
        c_s: DVector<f64>,
        c_e: DVector<f64>,
        p: DVector<f64>,
        budget: f64,
    ) -> Result<Self, ProblemError> {
        let d = q.nrows();
        let square = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d;
        if !(square(&q) && square(&q_s) && square(&q_e)) {
            return Err(ProblemError::Dimension(
                "quadratic matrices must be d_z × d_z".into(),
            ));
        }
        if c.len() != d || c_s.len() != d || c_e.len() != d || p.len() != d {
            return Err(ProblemError::Dimension("vector parameters must be d_z".into()));
        }
        if p.iter().any(|&v| v < 0.0) {
            return Err(ProblemError::InvalidSpec("prices must be nonnegative".into()));
        }
        if budget <= 0.0 {
            return Err(ProblemError::InvalidSpec("budget must be positive".into()));
        }
        Ok(NvqpSpec {
            q,
            q_s,
            q_e,
            c,
            c_s,
            c_e,
            p,
            budget,
        })
    }

    pub fn d_z(&self) -> usize {
        self.q.nrows()
    }

    /// Fixed-seed deterministic parameters: diagonal quadratic terms in
    /// [0.05, 0.5], zero fixed costs, shortage costs around 100 and excess
    /// costs around 900 (preserving the scalar-NV imbalance), unit prices
    /// in [1, 3].
    pub fn generated(d_z: usize, seed: u64, budget: f64) -> Self {
        let mut rng = stream(seed, StreamKind::DataGen);
        let diag = |rng: &mut rand_chacha::ChaCha8Rng| {
            DMatrix::from_diagonal(&DVector::from_fn(d_z, |_, _| rng.random_range(0.05..0.5)))
        };
        let q = diag(&mut rng);
        let q_s = diag(&mut rng);
        let q_e = diag(&mut rng);
        let c = DVector::zeros(d_z);
        let c_s = DVector::from_fn(d_z, |_, _| rng.random_range(80.0..120.0));
        let c_e = DVector::from_fn(d_z, |_, _| rng.random_range(700.0..1100.0));
        let p = DVector::from_fn(d_z, |_, _| rng.random_range(1.0..3.0));
        NvqpSpec::new(q, q_s, q_e, c, c_s, c_e, p, budget).expect("generated spec is valid")
    }

    /// Budget such that the constraint is active on roughly half of the
    /// given outcomes: the median budget-free oracle spend.
    pub fn calibrate_budget(&mut self, outcomes: &[DVector<f64>]) -> Result<(), ProblemError> {
        let mut spends = Vec::with_capacity(outcomes.len());
        let mut relaxed = self.clone();
        relaxed.budget = 1e9;
        for y in outcomes {
            let samples = DMatrix::from_fn(1, y.len(), |_, c| y[c]);
            let prog = nvqp_build_saa(&samples, &relaxed)?;
            let sol = solve_qp(&prog.qp, SolveOptions::default())?;
            if sol.status != QpStatus::Optimal {
                return Err(ProblemError::SolverFailed(sol.status));
            }
            let z = DVector::from_fn(self.d_z(), |i, _| sol.v[i]);
            spends.push(self.p.dot(&z));
        }
        spends.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = spends[spends.len() / 2];
        if median <= 0.0 {
            return Err(ProblemError::InvalidSpec(
                "calibration outcomes imply a nonpositive budget".into(),
            ));
        }
        self.budget = median;
        Ok(())
    }
}

/// zᵀQz + cᵀz + (y−z)₊ᵀQ_s(y−z)₊ + c_sᵀ(y−z)₊ + (z−y)₊ᵀQ_e(z−y)₊ + c_eᵀ(z−y)₊
/// with element-wise positive parts applied before the quadratic forms.
pub fn nvqp_task_cost(
    z: &DVector<f64>,
    y: &DVector<f64>,
    spec: &NvqpSpec,
) -> Result<f64, ProblemError> {
    let d = spec.d_z();
    if z.len() != d || y.len() != d {
        return Err(ProblemError::Dimension(format!(
            "expected d_z={d}, got z={}, y={}",
            z.len(),
            y.len()
        )));
    }
    let short = DVector::from_fn(d, |i, _| (y[i] - z[i]).max(0.0));
    let exc = DVector::from_fn(d, |i, _| (z[i] - y[i]).max(0.0));
    let quad = |v: &DVector<f64>, m: &DMatrix<f64>| (v.transpose() * m * v)[(0, 0)];
    Ok(quad(z, &spec.q)
        + spec.c.dot(z)
        + quad(&short, &spec.q_s)
        + spec.c_s.dot(&short)
        + quad(&exc, &spec.q_e)
        + spec.c_e.dot(&exc))
}

/// SAA expansion: v = [z, z_s⁽¹⁾…z_s⁽ᴹ⁾, z_e⁽¹⁾…z_e⁽ᴹ⁾] with
/// n = d_z + 2·M·d_z variables and m = d_z + 4·M·d_z + 1 constraints.
/// Samples enter only through b.
pub fn nvqp_build_saa(
    samples: &DMatrix<f64>,
    spec: &NvqpSpec,
) -> Result<SaaProgram, ProblemError> {
    let m_samples = samples.nrows();
    if m_samples == 0 {
        return Err(ProblemError::EmptySamples);
    }
    let d = spec.d_z();
    if samples.ncols() != d {
        return Err(ProblemError::Dimension(format!(
            "samples have {} columns, spec d_z={d}",
            samples.ncols()
        )));
    }

    let n = d + 2 * m_samples * d;
    let n_rows = n + 2 * m_samples * d + 1;
    let mf = m_samples as f64;

    let mut h = DMatrix::zeros(n, n);
    for i in 0..d {
        for j in 0..d {
            h[(i, j)] = 2.0 * spec.q[(i, j)];
            for blk in 0..m_samples {
                let off_s = d + blk * d;
                let off_e = d + m_samples * d + blk * d;
                h[(off_s + i, off_s + j)] = 2.0 * spec.q_s[(i, j)] / mf;
                h[(off_e + i, off_e + j)] = 2.0 * spec.q_e[(i, j)] / mf;
            }
        }
    }

    let mut k = DVector::zeros(n);
    for i in 0..d {
        k[i] = spec.c[i];
        for blk in 0..m_samples {
            k[d + blk * d + i] = spec.c_s[i] / mf;
            k[d + m_samples * d + blk * d + i] = spec.c_e[i] / mf;
        }
    }

    let mut a = DMatrix::zeros(n_rows, n);
    let mut b = DVector::zeros(n_rows);
    // rows 0..n: -I (full nonnegativity)
    for i in 0..n {
        a[(i, i)] = -1.0;
    }
    // rows n..n+Md: -z - z_s⁽ʲ⁾ ≤ -y⁽ʲ⁾  (z_s ≥ y - z)
    let neg_base = n;
    for j in 0..m_samples {
        for i in 0..d {
            let r = neg_base + j * d + i;
            a[(r, i)] = -1.0;
            a[(r, d + j * d + i)] = -1.0;
            b[r] = -samples[(j, i)];
        }
    }
    // rows n+Md..n+2Md: z - z_e⁽ʲ⁾ ≤ y⁽ʲ⁾  (z_e ≥ z - y)
    let pos_base = n + m_samples * d;
    for j in 0..m_samples {
        for i in 0..d {
            let r = pos_base + j * d + i;
            a[(r, i)] = 1.0;
            a[(r, d + m_samples * d + j * d + i)] = -1.0;
            b[r] = samples[(j, i)];
        }
    }
    // budget row
    for i in 0..d {
        a[(n_rows - 1, i)] = spec.p[i];
    }
    b[n_rows - 1] = spec.budget;

    Ok(SaaProgram {
        qp: QpStandardForm::new(h, k, a, b)?,
        d_z: d,
        routing: SampleRouting::BRows {
            neg_base,
            pos_base,
            d,
        },
    })
}
