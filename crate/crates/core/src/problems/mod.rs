//! Benchmark optimization problems: the scalar newsvendor (closed-form
//! quantile decision), the constrained quadratic newsvendor and the
//! portfolio loss-minimization problem, together with their
//! sample-average-approximation builders in solver standard form.

mod nv;
mod nvqp;
mod pop;

pub use nv::{nv_saa_decision, nv_saa_subgradient, nv_task_cost, NvSpec};
pub use nvqp::{nvqp_build_saa, nvqp_task_cost, NvqpSpec};
pub use pop::{pop_build_saa, pop_task_cost, PopSpec};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::qp::{solve_qp, QpError, QpStandardForm, QpStatus, SolveOptions};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("solver returned status {0:?}")]
    SolverFailed(QpStatus),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("{0}")]
    Contract(String),
}

/// A decision together with the SAA objective achieved and the auxiliary
/// variable block of the underlying stochastic program.
#[derive(Debug, Clone)]
pub struct DecisionResult {
    pub z: DVector<f64>,
    pub objective_value: f64,
    pub aux: DVector<f64>,
}

/// A built SAA program plus the index routing needed to fold QP-data
/// gradients back onto the prediction samples.
pub struct SaaProgram {
    pub qp: QpStandardForm,
    /// Decision-variable count of the original problem (first block of v).
    pub d_z: usize,
    pub routing: SampleRouting,
}

/// Where the samples landed in (A, b). Routing is positional so gradient
/// fold-back never inspects values.
#[derive(Debug, Clone, Copy)]
pub enum SampleRouting {
    /// Sample (j, dim) sits in b at rows `neg_base + j*d + dim` (coefficient
    /// -1) and `pos_base + j*d + dim` (+1).
    BRows {
        neg_base: usize,
        pos_base: usize,
        d: usize,
    },
    /// Sample (j, dim) sits in A at `(row_base + j, dim)` with coefficient -1.
    ARows { row_base: usize, d: usize },
}

impl SaaProgram {
    /// dL/dsamples (M×d) from QP-data gradients.
    pub fn fold_sample_gradients(
        &self,
        da: &DMatrix<f64>,
        db: &DVector<f64>,
        num_samples: usize,
    ) -> DMatrix<f64> {
        match self.routing {
            SampleRouting::BRows {
                neg_base,
                pos_base,
                d,
            } => DMatrix::from_fn(num_samples, d, |j, dim| {
                -db[neg_base + j * d + dim] + db[pos_base + j * d + dim]
            }),
            SampleRouting::ARows { row_base, d } => {
                DMatrix::from_fn(num_samples, d, |j, dim| -da[(row_base + j, dim)])
            }
        }
    }
}

/// The benchmark family, dispatching cost evaluation and SAA decisions.
#[derive(Debug, Clone)]
pub enum Problem {
    Nv(NvSpec),
    Nvqp(NvqpSpec),
    Pop(PopSpec),
}

impl Problem {
    pub fn d_y(&self) -> usize {
        match self {
            Problem::Nv(_) => 1,
            Problem::Nvqp(s) => s.d_z(),
            Problem::Pop(s) => s.d_y(),
        }
    }

    pub fn task_cost(&self, z: &DVector<f64>, y: &DVector<f64>) -> Result<f64, ProblemError> {
        match self {
            Problem::Nv(s) => {
                if z.len() != 1 || y.len() != 1 {
                    return Err(ProblemError::Dimension("NV is scalar".into()));
                }
                Ok(nv_task_cost(z[0], y[0], s))
            }
            Problem::Nvqp(s) => nvqp_task_cost(z, y, s),
            Problem::Pop(_) => pop_task_cost(z, y),
        }
    }

    /// Does `z` lie in the feasible set to tolerance 1e-6?
    pub fn is_feasible(&self, z: &DVector<f64>) -> bool {
        const TOL: f64 = 1e-6;
        match self {
            Problem::Nv(_) => z.len() == 1 && z[0] >= -TOL,
            Problem::Nvqp(s) => {
                z.iter().all(|&v| v >= -TOL) && s.p.dot(z) <= s.budget + TOL * s.budget.max(1.0)
            }
            Problem::Pop(s) => z.iter().all(|&v| v >= -TOL) && s.p_bar.dot(z) >= s.r_min - TOL,
        }
    }

    /// Build the SAA program for a sample matrix (rows are samples).
    pub fn build_saa(&self, samples: &DMatrix<f64>) -> Result<SaaProgram, ProblemError> {
        match self {
            Problem::Nv(_) => Err(ProblemError::Contract(
                "NV uses the closed-form path, not a QP".into(),
            )),
            Problem::Nvqp(s) => nvqp_build_saa(samples, s),
            Problem::Pop(s) => pop_build_saa(samples, s),
        }
    }
}

/// SAA decision for M sampled predictions. NV dispatches to the closed-form
/// quantile rule; NVQP/POP build and solve the standard-form QP.
pub fn saa_decision(
    problem: &Problem,
    samples: &DMatrix<f64>,
    opts: SolveOptions,
) -> Result<DecisionResult, ProblemError> {
    if samples.nrows() == 0 {
        return Err(ProblemError::EmptySamples);
    }
    match problem {
        Problem::Nv(spec) => {
            let flat: Vec<f64> = samples.column(0).iter().copied().collect();
            nv_saa_decision(&flat, spec)
        }
        _ => {
            let prog = problem.build_saa(samples)?;
            let sol = solve_qp(&prog.qp, opts)?;
            if sol.status != QpStatus::Optimal {
                return Err(ProblemError::SolverFailed(sol.status));
            }
            let z = DVector::from_fn(prog.d_z, |i, _| sol.v[i]);
            let aux = DVector::from_fn(sol.v.len() - prog.d_z, |i, _| sol.v[prog.d_z + i]);
            let m = samples.nrows();
            let mut obj = 0.0;
            for j in 0..m {
                let y = samples.row(j).transpose();
                obj += problem.task_cost(&z, &y)?;
            }
            Ok(DecisionResult {
                z,
                objective_value: obj / m as f64,
                aux,
            })
        }
    }
}

/// Hindsight-optimal decision for the realized outcome: the SAA decision
/// with the single true scenario.
pub fn oracle_decision(
    y_true: &DVector<f64>,
    problem: &Problem,
    opts: SolveOptions,
) -> Result<DecisionResult, ProblemError> {
    let m = DMatrix::from_fn(1, y_true.len(), |_, c| y_true[c]);
    saa_decision(problem, &m, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_nv_zero_cost() {
        let p = Problem::Nv(NvSpec::new(100.0, 900.0).unwrap());
        let y = DVector::from_column_slice(&[5.0]);
        let d = oracle_decision(&y, &p, SolveOptions::default()).unwrap();
        assert_relative_eq!(d.z[0], 5.0);
        assert_eq!(p.task_cost(&d.z, &y).unwrap(), 0.0);
    }

    #[test]
    fn oracle_regret_against_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nvqp = Problem::Nvqp(NvqpSpec::generated(2, 9, 10.0));
        let pop = {
            let p_bar = DVector::from_column_slice(&[0.02, 0.03, 0.01]);
            Problem::Pop(PopSpec::generated(p_bar, 21))
        };
        for p in [nvqp, pop] {
            let d_y = p.d_y();
            let y = DVector::from_fn(d_y, |_, _| rng.random_range(0.1..2.0));
            let d = oracle_decision(&y, &p, SolveOptions::default()).unwrap();
            let c = p.task_cost(&d.z, &y).unwrap();
            let d2 = oracle_decision(&y, &p, SolveOptions::default()).unwrap();
            let c2 = p.task_cost(&d2.z, &y).unwrap();
            assert_relative_eq!(c - c2, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn nvqp_oracle_beats_random_probes() {
        let spec = NvqpSpec::generated(3, 5, 12.0);
        let p = Problem::Nvqp(spec.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = DVector::from_fn(3, |_, _| rng.random_range(0.5..3.0));
        let d = oracle_decision(&y, &p, SolveOptions::default()).unwrap();
        let best = p.task_cost(&d.z, &y).unwrap();
        for _ in 0..100 {
            // random feasible probe: nonnegative, scaled under the budget
            let mut z = DVector::from_fn(3, |_, _| rng.random_range(0.0..3.0));
            let spend = spec.p.dot(&z);
            if spend > spec.budget {
                z *= spec.budget / spend;
            }
            let c = p.task_cost(&z, &y).unwrap();
            assert!(best <= c + 1e-5, "probe beat oracle: {c} < {best}");
        }
    }

    #[test]
    fn saa_with_one_scenario_is_deterministic_solve() {
        let p = Problem::Nvqp(NvqpSpec::generated(2, 11, 8.0));
        let y = DVector::from_column_slice(&[1.0, 2.0]);
        let single = DMatrix::from_fn(1, 2, |_, c| y[c]);
        let a = saa_decision(&p, &single, SolveOptions::default()).unwrap();
        let b = oracle_decision(&y, &p, SolveOptions::default()).unwrap();
        assert!((a.z - b.z).amax() < 1e-9);
    }

    /// For an objective linear in y over a fixed feasible set, the SAA
    /// decision equals the decision at the sample mean.
    #[test]
    fn linear_objective_mean_propagation() {
        // min yᵀz over the simplex {z ⪰ 0, Σz ≤ 1}: SAA over samples y⁽ʲ⁾
        // has objective (mean y)ᵀ z, so both decisions coincide.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let d = 3;
            let m = 8;
            let samples = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0f64));
            let mean = DVector::from_fn(d, |i, _| samples.column(i).sum() / m as f64);

            let build = |lin: DVector<f64>| {
                let mut a = DMatrix::zeros(d + 1, d);
                for i in 0..d {
                    a[(i, i)] = -1.0;
                    a[(d, i)] = 1.0;
                }
                let mut b = DVector::zeros(d + 1);
                b[d] = 1.0;
                crate::qp::lp_to_qp(lin, a, b, 1e-7).unwrap()
            };

            // SAA program: same variable z for every scenario; linear part is
            // the average of the sampled objectives.
            let saa_lin = mean.clone();
            let qp_saa = build(saa_lin);
            let qp_mean = build(mean);
            let za = solve_qp(&qp_saa, SolveOptions::default()).unwrap().v;
            let zb = solve_qp(&qp_mean, SolveOptions::default()).unwrap().v;
            assert!((za - zb).amax() <= 1e-6);
        }
    }
}
