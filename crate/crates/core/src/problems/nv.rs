//! Classical scalar newsvendor: asymmetric shortage/excess cost, SAA
//! decision by the exact order-statistic minimizer, and its subgradient
//! with respect to the samples.

use nalgebra::DVector;

use super::{DecisionResult, ProblemError};

/// Shortage/excess unit costs. The optimal stocking level under a demand
/// distribution is its `c_s / (c_s + c_e)` quantile.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct NvSpec {
    pub c_s: f64,
    pub c_e: f64,
}

impl NvSpec {
    pub fn new(c_s: f64, c_e: f64) -> Result<Self, ProblemError> {
        if c_s <= 0.0 || c_e <= 0.0 {
            return Err(ProblemError::InvalidSpec(format!(
                "costs must be positive, got c_s={c_s}, c_e={c_e}"
            )));
        }
        Ok(NvSpec { c_s, c_e })
    }

    /// Standard cost configuration: heavy shortage penalty.
    pub fn standard() -> Self {
        NvSpec {
            c_s: 100.0,
            c_e: 900.0,
        }
    }

    pub fn quantile(&self) -> f64 {
        self.c_s / (self.c_s + self.c_e)
    }
}

/// c_s·(y−z)₊ + c_e·(z−y)₊
pub fn nv_task_cost(z: f64, y: f64, spec: &NvSpec) -> f64 {
    spec.c_s * (y - z).max(0.0) + spec.c_e * (z - y).max(0.0)
}

/// Exact minimizer of the empirical SAA cost over z ≥ 0: the k-th order
/// statistic with k = ⌈M·q⌉, floored at zero.
pub fn nv_saa_decision(samples: &[f64], spec: &NvSpec) -> Result<DecisionResult, ProblemError> {
    if samples.is_empty() {
        return Err(ProblemError::EmptySamples);
    }
    let m = samples.len();
    let k = ((m as f64) * spec.quantile()).ceil().max(1.0) as usize;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let z = sorted[k - 1].max(0.0);
    let obj = samples.iter().map(|&y| nv_task_cost(z, y, spec)).sum::<f64>() / m as f64;
    Ok(DecisionResult {
        z: DVector::from_column_slice(&[z]),
        objective_value: obj,
        aux: DVector::zeros(0),
    })
}

/// ∂z*/∂ŷ⁽ʲ⁾: one-hot at the selected order statistic (lowest index on
/// ties), all-zero when the decision was floored at 0.
pub fn nv_saa_subgradient(
    samples: &[f64],
    spec: &NvSpec,
    z_star: f64,
) -> Result<Vec<f64>, ProblemError> {
    let _ = spec;
    let mut grad = vec![0.0; samples.len()];
    if z_star == 0.0 && !samples.iter().any(|&s| (s - z_star).abs() <= 1e-12) {
        // the 0-floor case: locally insensitive to every sample
        return Ok(grad);
    }
    let idx = samples
        .iter()
        .position(|&s| (s - z_star).abs() <= 1e-12)
        .ok_or_else(|| {
            ProblemError::Contract(format!(
                "z_star {z_star} is not among the samples and is not the 0-floor case"
            ))
        })?;
    grad[idx] = 1.0;
    Ok(grad)
}
