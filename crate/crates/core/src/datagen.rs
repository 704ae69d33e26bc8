//! Synthetic dataset generators with controlled aleatoric and epistemic
//! uncertainty, plus CSV ingestion for real datasets.
//!
//! Each generator is described by a [`NoiseModel`] that owns the full
//! conditional law P(y | x). Dataset generation and the free-regret
//! oracle ([`true_conditional_samples`]) draw from the same model, so the
//! "true distribution" used in evaluation is by construction the one that
//! produced the data. Structural parameters of the vector-valued
//! generators (the NVQP feature map, the POP return directions) come from
//! a fixed structural seed, independent of the experiment seed: the
//! ground-truth mapping is one object, experiment seeds only change the
//! draws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::rng::{stream, substream, StreamKind};

/// Seed for structural parameters shared across all experiment seeds.
const STRUCTURAL_SEED: u64 = 0x5EED_0001;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row count mismatch: X has {0} rows, Y has {1}")]
    RowMismatch(usize, usize),
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("dataset has no generator tag; true conditional law unknown")]
    NoGenerator,
    #[error("csv: {0}")]
    Csv(String),
    #[error("csv line {line}: {msg}")]
    CsvRow { line: usize, msg: String },
    #[error("split sizes {0}+{1}+{2} exceed pool of {3}")]
    SplitTooLarge(usize, usize, usize, usize),
}

/// Input-output data; `generator_tag` links synthetic data back to its
/// conditional law so FR oracles can sample it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub generator_tag: Option<NoiseModel>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        generator_tag: Option<NoiseModel>,
    ) -> Result<Self, DataError> {
        if x.nrows() != y.nrows() {
            return Err(DataError::RowMismatch(x.nrows(), y.nrows()));
        }
        for r in 0..x.nrows() {
            if x.row(r).iter().any(|v| !v.is_finite()) || y.row(r).iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite(r));
            }
        }
        Ok(Dataset {
            x,
            y,
            generator_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.y.ncols()
    }

    fn take_rows(&self, idx: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(idx.len(), self.d_x(), |r, c| self.x[(idx[r], c)]);
        let y = DMatrix::from_fn(idx.len(), self.d_y(), |r, c| self.y[(idx[r], c)]);
        Dataset {
            x,
            y,
            generator_tag: self.generator_tag.clone(),
        }
    }

    /// Partition into train/val/test. Chronological splits slice in row
    /// order (the default for time-indexed files); otherwise rows are
    /// shuffled with the split seed first.
    pub fn split(
        &self,
        spec: &SplitSpec,
        chronological: bool,
    ) -> Result<(Dataset, Dataset, Dataset), DataError> {
        let need = spec.n_train + spec.n_val + spec.n_test;
        if need > self.len() {
            return Err(DataError::SplitTooLarge(
                spec.n_train,
                spec.n_val,
                spec.n_test,
                self.len(),
            ));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if !chronological {
            let mut rng = stream(spec.seed, StreamKind::Shuffle);
            // Fisher-Yates
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
        }
        let train = self.take_rows(&idx[..spec.n_train]);
        let val = self.take_rows(&idx[spec.n_train..spec.n_train + spec.n_val]);
        let test = self.take_rows(&idx[spec.n_train + spec.n_val..need]);
        Ok((train, val, test))
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Self {
        SplitSpec {
            n_train,
            n_val,
            n_test,
            seed,
        }
    }

    pub fn nv_default(seed: u64) -> Self {
        SplitSpec::new(1800, 1200, 1200, seed)
    }

    pub fn nvqp_default(seed: u64) -> Self {
        SplitSpec::new(4000, 2000, 2000, seed)
    }

    pub fn pop_default(seed: u64) -> Self {
        SplitSpec::new(1500, 900, 1500, seed)
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// Conditional law P(y | x) of a synthetic generator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum NoiseModel {
    /// NV1: y = g(x) + σ(x)·ε, g(x)=10+5x+3sin(4x), σ(x)=1+2x, y ⌊0.
    HeteroGaussian { noise_scale: f64 },
    /// NV2: y = g(x) + s·m(x) + 0.8·ε, s uniform on {−1,+1}, m(x)=4+2x.
    MultimodalGaussian { noise_scale: f64, mode_scale: f64 },
    /// NVQP: yⱼ = softplus(wⱼᵀ tanh(Vx))·10 + noise, classes cycling
    /// heteroscedastic-Gaussian / uniform / symmetric-bimodal over j.
    MixedPerOutput {
        v: DMatrix<f64>,
        w: DMatrix<f64>,
        noise_scale: f64,
    },
    /// POP: yⱼ = 0.05·tanh(aⱼᵀx) + 0.02·(1+|x₁|)·εⱼ.
    Returns {
        a: DMatrix<f64>,
        noise_scale: f64,
    },
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        (1.0 + u.exp()).ln()
    }
}

/// NV mean curve g(x) = 10 + 5x + 3·sin(4x).
pub fn nv_mean(x: f64) -> f64 {
    10.0 + 5.0 * x + 3.0 * (4.0 * x).sin()
}

/// NV1 spread σ(x) = 1 + 2x.
pub fn nv_sigma(x: f64) -> f64 {
    1.0 + 2.0 * x
}

/// NV2 mode offset m(x) = 4 + 2x.
pub fn nv_mode_offset(x: f64) -> f64 {
    4.0 + 2.0 * x
}

impl NoiseModel {
    pub fn nv1() -> Self {
        NoiseModel::HeteroGaussian { noise_scale: 1.0 }
    }

    pub fn nv1_noiseless() -> Self {
        NoiseModel::HeteroGaussian { noise_scale: 0.0 }
    }

    pub fn nv2() -> Self {
        NoiseModel::MultimodalGaussian {
            noise_scale: 1.0,
            mode_scale: 1.0,
        }
    }

    pub fn nvqp() -> Self {
        // fixed 8-unit feature map V: 8×4, w: 6×8
        let mut rng = stream(STRUCTURAL_SEED, StreamKind::WeightInit);
        let v = DMatrix::from_fn(8, 4, |_, _| StandardNormal.sample(&mut rng));
        let w = DMatrix::from_fn(6, 8, |_, _| StandardNormal.sample(&mut rng));
        NoiseModel::MixedPerOutput {
            v,
            w,
            noise_scale: 1.0,
        }
    }

    /// POP returns model with `d_y` assets over x ∈ R³.
    pub fn pop(d_y: usize) -> Self {
        let mut rng = substream(STRUCTURAL_SEED, StreamKind::WeightInit, 1);
        let a = DMatrix::from_fn(d_y, 3, |_, _| StandardNormal.sample(&mut rng));
        NoiseModel::Returns { a, noise_scale: 1.0 }
    }

    pub fn with_noise_scale(mut self, scale: f64) -> Self {
        match &mut self {
            NoiseModel::HeteroGaussian { noise_scale }
            | NoiseModel::MultimodalGaussian { noise_scale, .. }
            | NoiseModel::MixedPerOutput { noise_scale, .. }
            | NoiseModel::Returns { noise_scale, .. } => *noise_scale = scale,
        }
        self
    }

    pub fn d_x(&self) -> usize {
        match self {
            NoiseModel::HeteroGaussian { .. } | NoiseModel::MultimodalGaussian { .. } => 1,
            NoiseModel::MixedPerOutput { v, .. } => v.ncols(),
            NoiseModel::Returns { a, .. } => a.ncols(),
        }
    }

    pub fn d_y(&self) -> usize {
        match self {
            NoiseModel::HeteroGaussian { .. } | NoiseModel::MultimodalGaussian { .. } => 1,
            NoiseModel::MixedPerOutput { w, .. } => w.nrows(),
            NoiseModel::Returns { a, .. } => a.nrows(),
        }
    }

    /// Conditional mean E[y | x] (for the multimodal model the two modes
    /// are symmetric, so the mean is still g(x)).
    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            NoiseModel::HeteroGaussian { .. } | NoiseModel::MultimodalGaussian { .. } => {
                DVector::from_element(1, nv_mean(x[0]))
            }
            NoiseModel::MixedPerOutput { v, w, .. } => {
                // +1.5 bias keeps demand curves away from zero so the
                // noise tails rarely cross into negative demand
                let hidden = (v * x).map(f64::tanh);
                (w * hidden).map(|u| softplus(u + 1.5) * 10.0)
            }
            NoiseModel::Returns { a, .. } => (a * x).map(|u| 0.05 * u.tanh()),
        }
    }

    /// One conditional draw y ~ P(y | x).
    pub fn sample_y(&self, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            NoiseModel::HeteroGaussian { noise_scale } => {
                let e: f64 = StandardNormal.sample(rng);
                let y = nv_mean(x[0]) + noise_scale * nv_sigma(x[0]) * e;
                DVector::from_element(1, y.max(0.0))
            }
            NoiseModel::MultimodalGaussian {
                noise_scale,
                mode_scale,
            } => {
                let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let e: f64 = StandardNormal.sample(rng);
                let y = nv_mean(x[0])
                    + mode_scale * s * nv_mode_offset(x[0])
                    + noise_scale * 0.8 * e;
                DVector::from_element(1, y.max(0.0))
            }
            NoiseModel::MixedPerOutput { noise_scale, .. } => {
                let mean = self.mean(x);
                let spread = 1.0 + x.amax();
                DVector::from_fn(mean.len(), |j, _| {
                    let noise = match j % 3 {
                        0 => {
                            // heteroscedastic Gaussian
                            let e: f64 = StandardNormal.sample(rng);
                            0.3 * spread * e
                        }
                        1 => rng.random_range(-0.6..0.6),
                        _ => {
                            // symmetric bimodal
                            let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                            let e: f64 = StandardNormal.sample(rng);
                            0.5 * s + 0.2 * e
                        }
                    };
                    mean[j] + noise_scale * noise
                })
            }
            NoiseModel::Returns { noise_scale, .. } => {
                let mean = self.mean(x);
                let spread = 0.02 * (1.0 + x[0].abs());
                DVector::from_fn(mean.len(), |j, _| {
                    let e: f64 = StandardNormal.sample(rng);
                    mean[j] + noise_scale * spread * e
                })
            }
        }
    }

    /// Analytic conditional q-quantile where a closed form exists
    /// (heteroscedastic Gaussian only; the y ⌊0 floor is applied).
    pub fn analytic_quantile(&self, x: &DVector<f64>, q: f64) -> Option<DVector<f64>> {
        match self {
            NoiseModel::HeteroGaussian { noise_scale } => {
                let z = Normal::standard().inverse_cdf(q);
                let y = nv_mean(x[0]) + noise_scale * nv_sigma(x[0]) * z;
                Some(DVector::from_element(1, y.max(0.0)))
            }
            _ => None,
        }
    }

    /// One input draw from the generator's input density.
    pub fn sample_x(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            NoiseModel::HeteroGaussian { .. } | NoiseModel::MultimodalGaussian { .. } => {
                // density 0.8 on [0,1], 0.2 on (1,2]
                let lo = rng.random::<f64>() < 0.8;
                let u = rng.random::<f64>();
                DVector::from_element(1, if lo { u } else { 1.0 + u })
            }
            NoiseModel::MixedPerOutput { .. } | NoiseModel::Returns { .. } => {
                DVector::from_fn(self.d_x(), |_, _| rng.random_range(-1.0..1.0))
            }
        }
    }
}

fn generate(model: &NoiseModel, split: &SplitSpec) -> (Dataset, Dataset, Dataset, NoiseModel) {
    let mut rng = stream(split.seed, StreamKind::DataGen);
    let n = split.total();
    let mut x = DMatrix::zeros(n, model.d_x());
    let mut y = DMatrix::zeros(n, model.d_y());
    for r in 0..n {
        let xr = model.sample_x(&mut rng);
        let yr = model.sample_y(&xr, &mut rng);
        x.row_mut(r).copy_from(&xr.transpose());
        y.row_mut(r).copy_from(&yr.transpose());
    }
    let pool = Dataset::new(x, y, Some(model.clone())).expect("generated data is finite");
    let (train, val, test) = pool.split(split, true).expect("split sizes match pool");
    (train, val, test, model.clone())
}

/// Heteroscedastic-Gaussian newsvendor data (NV1).
pub fn gen_nv1(split: &SplitSpec) -> (Dataset, Dataset, Dataset, NoiseModel) {
    generate(&NoiseModel::nv1(), split)
}

/// Multimodal-Gaussian newsvendor data (NV2).
pub fn gen_nv2(split: &SplitSpec) -> (Dataset, Dataset, Dataset, NoiseModel) {
    generate(&NoiseModel::nv2(), split)
}

/// Vector newsvendor data with mixed per-output noise classes (x ∈ R⁴,
/// y ∈ R⁶).
pub fn gen_nvqp(split: &SplitSpec) -> (Dataset, Dataset, Dataset, NoiseModel) {
    generate(&NoiseModel::nvqp(), split)
}

/// Portfolio returns data (x ∈ R³, y ∈ R^d_y); `d_y` is overridable for
/// the asset-count sweep.
pub fn gen_pop(split: &SplitSpec, d_y: usize) -> (Dataset, Dataset, Dataset, NoiseModel) {
    generate(&NoiseModel::pop(d_y), split)
}

/// Generate like [`generate`] but with an explicit model, e.g. a
/// noise-scaled variant. Public for oracle construction in tests.
pub fn gen_with_model(
    model: &NoiseModel,
    split: &SplitSpec,
) -> (Dataset, Dataset, Dataset, NoiseModel) {
    generate(model, split)
}

/// M_oracle i.i.d. draws from the true conditional law at x, as an
/// M_oracle × d_y matrix.
pub fn true_conditional_samples(
    x: &DVector<f64>,
    model: &NoiseModel,
    m_oracle: usize,
    seed: u64,
) -> DMatrix<f64> {
    let mut rng = stream(seed, StreamKind::Oracle);
    let mut out = DMatrix::zeros(m_oracle, model.d_y());
    for r in 0..m_oracle {
        let yr = model.sample_y(x, &mut rng);
        out.row_mut(r).copy_from(&yr.transpose());
    }
    out
}

/// Load a dataset from CSV with header `x0..x{d_x−1},y0..y{d_y−1}`.
/// The result has no generator tag: FR is unavailable on real data.
pub fn load_csv(path: &std::path::Path, d_x: usize, d_y: usize) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    let mut expected: Vec<String> = (0..d_x).map(|i| format!("x{i}")).collect();
    expected.extend((0..d_y).map(|i| format!("y{i}")));
    let got: Vec<&str> = headers.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        let missing = expected
            .iter()
            .find(|e| !got.contains(&e.as_str()))
            .cloned()
            .unwrap_or_else(|| format!("{} columns, expected {}", got.len(), expected.len()));
        return Err(DataError::Csv(format!(
            "header mismatch: missing or misplaced column {missing}"
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| DataError::CsvRow {
            line,
            msg: e.to_string(),
        })?;
        if record.len() != d_x + d_y {
            return Err(DataError::CsvRow {
                line,
                msg: format!("expected {} fields, got {}", d_x + d_y, record.len()),
            });
        }
        let parse = |field: &str| -> Result<f64, DataError> {
            field.trim().parse::<f64>().map_err(|e| DataError::CsvRow {
                line,
                msg: format!("bad number {field:?}: {e}"),
            })
        };
        for f in record.iter().take(d_x) {
            xs.push(parse(f)?);
        }
        for f in record.iter().skip(d_x) {
            ys.push(parse(f)?);
        }
    }
    let n = xs.len() / d_x.max(1);
    Dataset::new(
        DMatrix::from_row_slice(n, d_x, &xs),
        DMatrix::from_row_slice(n, d_y, &ys),
        None,
    )
}

/// Export to the same CSV schema [`load_csv`] reads.
pub fn save_csv(ds: &Dataset, path: &std::path::Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Csv(e.to_string()))?;
    let mut header: Vec<String> = (0..ds.d_x()).map(|i| format!("x{i}")).collect();
    header.extend((0..ds.d_y()).map(|i| format!("y{i}")));
    writer
        .write_record(&header)
        .map_err(|e| DataError::Csv(e.to_string()))?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = Vec::with_capacity(ds.d_x() + ds.d_y());
        for c in 0..ds.d_x() {
            rec.push(format!("{:.17e}", ds.x[(r, c)]));
        }
        for c in 0..ds.d_y() {
            rec.push(format!("{:.17e}", ds.y[(r, c)]));
        }
        writer
            .write_record(&rec)
            .map_err(|e| DataError::Csv(e.to_string()))?;
    }
    writer.flush().map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(())
}
