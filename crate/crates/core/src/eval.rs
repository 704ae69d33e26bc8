//! Regret metrics, the five-seed experiment protocol, sampling-size and
//! train-size sweeps, configuration and persistence: the reproduction
//! surface emitting summary, sweep, and quantile-curve CSV artifacts.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    gen_with_model, load_csv, DataError, Dataset, NoiseModel, SplitSpec,
};
use crate::predictors::{
    gp_fit, MlpArchitecture, Predictor, PredictorError, Prior, VariationalWeights,
};
use crate::problems::{
    oracle_decision, saa_decision, NvSpec, NvqpSpec, PopSpec, Problem, ProblemError,
};
use crate::qp::SolveOptions;
use crate::rng::{stream, substream, StreamKind};
use crate::training::{
    mean_warm_start, train_combined, train_decoupled, train_deterministic, DetMode, TrainConfig,
    TrainError, TrainedModel,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{excluded} of {total} evaluation instances failed to solve (limit 5%)")]
    TooManyExclusions { excluded: usize, total: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(String),
}

/// Inference-time sample count default.
pub const DEFAULT_M: usize = 64;
/// Distribution-oracle sample count default (NV problems solve the SAA
/// in closed form, so a large M_oracle is cheap there).
pub const DEFAULT_M_ORACLE: usize = 2048;

// ── method and experiment identifiers ────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "D-ANN")]
    DAnn,
    #[serde(rename = "C-ANN")]
    CAnn,
    #[serde(rename = "D-GP")]
    DGp,
    #[serde(rename = "D-BNN")]
    DBnn,
    #[serde(rename = "C-BNN")]
    CBnn,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::DAnn,
        Method::CAnn,
        Method::DGp,
        Method::DBnn,
        Method::CBnn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::DAnn => "D-ANN",
            Method::CAnn => "C-ANN",
            Method::DGp => "D-GP",
            Method::DBnn => "D-BNN",
            Method::CBnn => "C-BNN",
        }
    }

    pub fn parse(s: &str) -> Result<Method, EvalError> {
        Method::ALL
            .iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                EvalError::Invalid(format!(
                    "unknown method {s:?}; valid: {}",
                    Method::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "NV1")]
    Nv1,
    #[serde(rename = "NV2")]
    Nv2,
    #[serde(rename = "NVQP")]
    Nvqp,
    #[serde(rename = "POP")]
    Pop,
    #[serde(rename = "POP-sweep")]
    PopSweep,
    #[serde(rename = "CSV")]
    Csv,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Nv1,
        Experiment::Nv2,
        Experiment::Nvqp,
        Experiment::Pop,
        Experiment::PopSweep,
        Experiment::Csv,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Nv1 => "NV1",
            Experiment::Nv2 => "NV2",
            Experiment::Nvqp => "NVQP",
            Experiment::Pop => "POP",
            Experiment::PopSweep => "POP-sweep",
            Experiment::Csv => "CSV",
        }
    }

    pub fn parse(s: &str) -> Result<Experiment, EvalError> {
        Experiment::ALL
            .iter()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                EvalError::Invalid(format!(
                    "unknown experiment {s:?}; valid: {}",
                    Experiment::ALL.map(|e| e.name()).join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ── configuration ────────────────────────────────────────────────────

/// Fully resolved experiment configuration; every run snapshots it into
/// the RunRecord.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Inference sample count M.
    pub m: usize,
    /// Training sample count M^t.
    pub m_t: usize,
    pub epochs: usize,
    /// Per-method defaults apply when absent.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub k: Option<f64>,
    pub scheduler_gamma: f64,
    pub val_cap: Option<usize>,
    /// Hidden widths override; per-experiment default when absent.
    pub hidden: Option<Vec<usize>>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// POP asset count d_y.
    pub d_y: usize,
    pub m_oracle: usize,
    /// Cap on test instances evaluated per seed.
    pub eval_cap: Option<usize>,
    pub out_dir: PathBuf,
    pub csv_path: Option<PathBuf>,
    pub csv_d_x: usize,
    pub csv_d_y: usize,
}

impl ExperimentConfig {
    pub fn default_for(experiment: Experiment) -> Self {
        let (n_train, n_val, n_test) = match experiment {
            Experiment::Nv1 | Experiment::Nv2 => (1800, 1200, 1200),
            Experiment::Nvqp => (4000, 2000, 2000),
            _ => (1500, 900, 1500),
        };
        let m_t = match experiment {
            Experiment::Pop | Experiment::PopSweep => 32,
            _ => 16,
        };
        let m_oracle = match experiment {
            Experiment::Nv1 | Experiment::Nv2 => DEFAULT_M_ORACLE,
            _ => 128, // QP-backed oracles; SAA size is the cost driver
        };
        ExperimentConfig {
            experiment,
            methods: Method::ALL.to_vec(),
            seeds: (0..5).collect(),
            m: DEFAULT_M,
            m_t,
            epochs: 30,
            learning_rate: None,
            batch_size: 32,
            k: None,
            scheduler_gamma: 0.99,
            val_cap: Some(200),
            hidden: None,
            n_train,
            n_val,
            n_test,
            d_y: 10,
            m_oracle,
            eval_cap: Some(200),
            out_dir: PathBuf::from("runs"),
            csv_path: None,
            csv_d_x: 1,
            csv_d_y: 1,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.m < 1 || self.m_t < 1 || self.m_oracle < 1 {
            return Err(EvalError::Invalid("M, M_t, M_oracle must be ≥ 1".into()));
        }
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(EvalError::Invalid("methods and seeds must be nonempty".into()));
        }
        if self.experiment == Experiment::Csv && self.csv_path.is_none() {
            return Err(EvalError::Invalid("CSV experiment needs csv_path".into()));
        }
        Ok(())
    }

    /// FNV-1a hash of the serialized config; stamped into every output.
    /// The output directory is not part of the hash: where results land
    /// does not change what was computed.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.out_dir = PathBuf::new();
        let json = serde_json::to_string(&hashed).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    fn arch(&self, d_x: usize, d_y: usize) -> MlpArchitecture {
        match &self.hidden {
            Some(h) => MlpArchitecture::new(d_x, h.clone(), d_y, crate::predictors::Activation::Tanh)
                .expect("positive dims"),
            None => match self.experiment {
                Experiment::Nv1 | Experiment::Nv2 | Experiment::Csv => {
                    MlpArchitecture::nv_default(d_x, d_y)
                }
                _ => MlpArchitecture::wide_default(d_x, d_y),
            },
        }
    }

    fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let lr = self.learning_rate.unwrap_or(match (method, self.experiment) {
            (Method::DBnn, _) => 0.0007,
            (Method::CBnn, _) => 0.0005,
            (_, Experiment::Nv1 | Experiment::Nv2 | Experiment::Csv) => 0.0015,
            (_, Experiment::Nvqp) => 0.002,
            _ => 0.001,
        });
        let mut cfg = TrainConfig::new(lr, self.epochs, seed);
        cfg.batch_size = self.batch_size;
        cfg.k = self.k;
        cfg.m_t = match method {
            Method::DAnn | Method::CAnn => 1,
            _ => self.m_t,
        };
        cfg.scheduler_gamma = self.scheduler_gamma;
        cfg.val_cap = self.val_cap;
        cfg
    }
}

/// TOML file layout: `[experiment]`, `[train]`, `[problem]` sections,
/// all keys optional on top of the per-experiment defaults.
#[derive(Debug, Default, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub experiment: FileExperiment,
    #[serde(default)]
    pub train: FileTrain,
    #[serde(default)]
    pub problem: FileProblem,
}

#[derive(Debug, Default, Deserialize)]
pub struct FileExperiment {
    pub name: Option<String>,
    pub methods: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
    pub m: Option<usize>,
    pub m_t: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
pub struct FileTrain {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub k: Option<f64>,
    pub scheduler_gamma: Option<f64>,
    pub val_cap: Option<usize>,
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
pub struct FileProblem {
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub n_test: Option<usize>,
    pub d_y: Option<usize>,
    pub m_oracle: Option<usize>,
    pub eval_cap: Option<usize>,
    pub csv_path: Option<PathBuf>,
    pub csv_d_x: Option<usize>,
    pub csv_d_y: Option<usize>,
}

impl ExperimentConfig {
    /// Build from a TOML file; `name` must be present in the file unless
    /// supplied by the caller (CLI flag).
    pub fn from_file(path: &Path, experiment: Option<Experiment>) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Io(format!("read {}: {e}", path.display())))?;
        let file: FileConfig = toml::from_str(&text)
            .map_err(|e| EvalError::Invalid(format!("parse {}: {e}", path.display())))?;
        let exp = match (experiment, &file.experiment.name) {
            (Some(e), _) => e,
            (None, Some(n)) => Experiment::parse(n)?,
            (None, None) => {
                return Err(EvalError::Invalid(
                    "no experiment named in file or flags".into(),
                ))
            }
        };
        let mut cfg = ExperimentConfig::default_for(exp);
        cfg.apply_file(&file)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, file: &FileConfig) -> Result<(), EvalError> {
        if let Some(ms) = &file.experiment.methods {
            self.methods = ms.iter().map(|s| Method::parse(s)).collect::<Result<_, _>>()?;
        }
        if let Some(s) = &file.experiment.seeds {
            self.seeds = s.clone();
        }
        if let Some(m) = file.experiment.m {
            self.m = m;
        }
        if let Some(mt) = file.experiment.m_t {
            self.m_t = mt;
        }
        if let Some(out) = &file.experiment.out {
            self.out_dir = out.clone();
        }
        if let Some(e) = file.train.epochs {
            self.epochs = e;
        }
        if file.train.learning_rate.is_some() {
            self.learning_rate = file.train.learning_rate;
        }
        if let Some(b) = file.train.batch_size {
            self.batch_size = b;
        }
        if file.train.k.is_some() {
            self.k = file.train.k;
        }
        if let Some(g) = file.train.scheduler_gamma {
            self.scheduler_gamma = g;
        }
        if file.train.val_cap.is_some() {
            self.val_cap = file.train.val_cap;
        }
        if file.train.hidden.is_some() {
            self.hidden = file.train.hidden.clone();
        }
        if let Some(n) = file.problem.n_train {
            self.n_train = n;
        }
        if let Some(n) = file.problem.n_val {
            self.n_val = n;
        }
        if let Some(n) = file.problem.n_test {
            self.n_test = n;
        }
        if let Some(d) = file.problem.d_y {
            self.d_y = d;
        }
        if let Some(m) = file.problem.m_oracle {
            self.m_oracle = m;
        }
        if file.problem.eval_cap.is_some() {
            self.eval_cap = file.problem.eval_cap;
        }
        if file.problem.csv_path.is_some() {
            self.csv_path = file.problem.csv_path.clone();
        }
        if let Some(d) = file.problem.csv_d_x {
            self.csv_d_x = d;
        }
        if let Some(d) = file.problem.csv_d_y {
            self.csv_d_y = d;
        }
        Ok(())
    }
}

// ── regret metrics ───────────────────────────────────────────────────

/// Decision optimal for the *actual conditional distribution* at x:
/// analytic quantile for the heteroscedastic-Gaussian newsvendor,
/// otherwise an SAA over M_oracle true-conditional samples.
pub fn distribution_oracle_decision(
    x: &DVector<f64>,
    model: &NoiseModel,
    problem: &Problem,
    m_oracle: usize,
    seed: u64,
    opts: SolveOptions,
) -> Result<DVector<f64>, EvalError> {
    if let (Problem::Nv(spec), NoiseModel::HeteroGaussian { .. }) = (problem, model) {
        if let Some(q) = model.analytic_quantile(x, spec.quantile()) {
            return Ok(q);
        }
    }
    let samples = crate::datagen::true_conditional_samples(x, model, m_oracle, seed);
    let dec = saa_decision(problem, &samples, opts)?;
    Ok(dec.z)
}

/// Per-instance baseline costs shared by every method under evaluation:
/// the hindsight optimum f(z*(yᵢ), yᵢ) and, when the generator is known,
/// the distribution-oracle cost f(z*(yᵢ^dist), yᵢ).
pub struct EvalBaselines {
    /// Indices of test rows with a solvable baseline.
    pub rows: Vec<usize>,
    pub hindsight_costs: Vec<f64>,
    pub dist_costs: Option<Vec<f64>>,
}

pub fn compute_baselines(
    problem: &Problem,
    test: &Dataset,
    noise: Option<&NoiseModel>,
    m_oracle: usize,
    seed: u64,
    cap: Option<usize>,
    opts: SolveOptions,
) -> Result<EvalBaselines, EvalError> {
    let n = cap.map_or(test.len(), |c| c.min(test.len()));
    let mut rows = Vec::with_capacity(n);
    let mut hindsight = Vec::with_capacity(n);
    let mut dist = noise.map(|_| Vec::with_capacity(n));
    let mut excluded = 0usize;
    for i in 0..n {
        let y = test.y.row(i).transpose();
        let hind = match oracle_decision(&y, problem, opts) {
            Ok(d) => problem.task_cost(&d.z, &y)?,
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        if let Some(model) = noise {
            let x = test.x.row(i).transpose();
            let z = match distribution_oracle_decision(&x, model, problem, m_oracle, seed, opts) {
                Ok(z) => z,
                Err(_) => {
                    excluded += 1;
                    continue;
                }
            };
            dist.as_mut().unwrap().push(problem.task_cost(&z, &y)?);
        }
        rows.push(i);
        hindsight.push(hind);
    }
    if excluded * 20 > n {
        return Err(EvalError::TooManyExclusions {
            excluded,
            total: n,
        });
    }
    Ok(EvalBaselines {
        rows,
        hindsight_costs: hindsight,
        dist_costs: dist,
    })
}

/// R (and FR when baselines carry distribution-oracle costs) of one
/// predictor over the shared baseline instance set.
pub struct EvalOutcome {
    pub r: f64,
    pub fr: Option<f64>,
    pub excluded: usize,
    pub used: usize,
}

pub fn evaluate_predictor(
    predictor: &Predictor,
    problem: &Problem,
    test: &Dataset,
    baselines: &EvalBaselines,
    m: usize,
    seed: u64,
    opts: SolveOptions,
) -> Result<EvalOutcome, EvalError> {
    let mut r_sum = 0.0;
    let mut fr_sum = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for (pos, &i) in baselines.rows.iter().enumerate() {
        let x: Vec<f64> = test.x.row(i).iter().copied().collect();
        let mut rng = substream(seed, StreamKind::Sampling, i as u64);
        let samples = predictor.predict_samples(&x, m, &mut rng)?;
        let dec = match saa_decision(problem, &samples, opts) {
            Ok(d) => d,
            Err(_) => {
                excluded += 1;
                continue;
            }
        };
        let y = test.y.row(i).transpose();
        let cost = problem.task_cost(&dec.z, &y)?;
        r_sum += cost - baselines.hindsight_costs[pos];
        if let Some(dist) = &baselines.dist_costs {
            fr_sum += cost - dist[pos];
        }
        used += 1;
    }
    let total = baselines.rows.len();
    if excluded * 20 > total || used == 0 {
        return Err(EvalError::TooManyExclusions { excluded, total });
    }
    Ok(EvalOutcome {
        r: r_sum / used as f64,
        fr: baselines.dist_costs.as_ref().map(|_| fr_sum / used as f64),
        excluded,
        used,
    })
}

/// Average regret R = (1/N)·Σ f(z*(xᵢ), yᵢ) − f(z*(yᵢ), yᵢ).
pub fn regret(
    predictor: &Predictor,
    test: &Dataset,
    problem: &Problem,
    m: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let opts = SolveOptions::default();
    let baselines = compute_baselines(problem, test, None, 1, seed, None, opts)?;
    Ok(evaluate_predictor(predictor, problem, test, &baselines, m, seed, opts)?.r)
}

/// Free-aleatoric regret FR: as R but against the distribution oracle.
#[allow(clippy::too_many_arguments)]
pub fn free_regret(
    predictor: &Predictor,
    test: &Dataset,
    problem: &Problem,
    m: usize,
    noise: &NoiseModel,
    m_oracle: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let opts = SolveOptions::default();
    let baselines = compute_baselines(problem, test, Some(noise), m_oracle, seed, None, opts)?;
    let out = evaluate_predictor(predictor, problem, test, &baselines, m, seed, opts)?;
    Ok(out.fr.expect("baselines carry distribution-oracle costs"))
}

// ── reports and provenance ───────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretReport {
    pub experiment: String,
    pub method: String,
    pub r_mean: f64,
    pub r_std: f64,
    pub fr_mean: Option<f64>,
    pub fr_std: Option<f64>,
    pub r_per_seed: Vec<f64>,
    pub fr_per_seed: Option<Vec<f64>>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RegretReport {
    pub fn from_per_seed(
        experiment: Experiment,
        method: Method,
        r: Vec<f64>,
        fr: Option<Vec<f64>>,
    ) -> Self {
        let (r_mean, r_std) = mean_std(&r);
        let (fr_mean, fr_std) = match &fr {
            Some(v) => {
                let (m, s) = mean_std(v);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        RegretReport {
            experiment: experiment.name().to_string(),
            method: method.name().to_string(),
            r_mean,
            r_std,
            fr_mean,
            fr_std,
            r_per_seed: r,
            fr_per_seed: fr,
        }
    }
}

/// One sweep point (sampling or train-size sweep).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m_t: usize,
    pub m: usize,
    pub n_train: usize,
    pub reports: Vec<RegretReport>,
}

/// Full provenance of a run: re-executing from this record reproduces
/// the metrics bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub reports: Vec<RegretReport>,
    pub sweep: Vec<SweepPoint>,
    /// "method seed N: error" strings for method-seed runs that failed.
    pub failures: Vec<String>,
    pub wall_secs: f64,
    pub method_secs: Vec<(String, f64)>,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| EvalError::Io(format!("serialize run record: {e}")))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Io(format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Io(format!("parse run record: {e}")))
    }
}

fn write_atomic(path: &Path, content: &str) -> Result<(), EvalError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::Io(format!("mkdir: {e}")))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).map_err(|e| EvalError::Io(format!("write: {e}")))?;
    std::fs::rename(&tmp, path).map_err(|e| EvalError::Io(format!("rename: {e}")))
}

// ── experiment assembly ──────────────────────────────────────────────

/// Seed-independent structural context of an experiment: the problem and
/// (synthetic runs) the generating noise model.
pub struct ExperimentSetup {
    pub problem: Problem,
    pub noise: Option<NoiseModel>,
}

/// Seed used to derive seed-independent structure (POP p̄, NVQP budget).
const SETUP_SEED: u64 = 0xBA5E_0001;

pub fn build_setup(cfg: &ExperimentConfig) -> Result<ExperimentSetup, EvalError> {
    match cfg.experiment {
        Experiment::Nv1 => Ok(ExperimentSetup {
            problem: Problem::Nv(NvSpec::standard()),
            noise: Some(NoiseModel::nv1()),
        }),
        Experiment::Nv2 => Ok(ExperimentSetup {
            problem: Problem::Nv(NvSpec::standard()),
            noise: Some(NoiseModel::nv2()),
        }),
        Experiment::Nvqp => {
            let model = NoiseModel::nvqp();
            let d_z = model.d_y();
            let mut spec = NvqpSpec::generated(d_z, SETUP_SEED, 1.0);
            // budget from a fixed pool of outcomes so every seed shares
            // one problem instance
            let pool = fixed_outcome_pool(&model, 64);
            spec.calibrate_budget(&pool)?;
            Ok(ExperimentSetup {
                problem: Problem::Nvqp(spec),
                noise: Some(model),
            })
        }
        Experiment::Pop | Experiment::PopSweep => {
            let model = NoiseModel::pop(cfg.d_y);
            let pool = fixed_outcome_pool(&model, 2000);
            let d = model.d_y();
            let mut p_bar = DVector::zeros(d);
            for y in &pool {
                p_bar += y;
            }
            p_bar /= pool.len() as f64;
            Ok(ExperimentSetup {
                problem: Problem::Pop(PopSpec::generated(p_bar, SETUP_SEED)),
                noise: Some(model),
            })
        }
        Experiment::Csv => {
            // real data: scalar newsvendor on the provided labels, R only
            if cfg.csv_d_y != 1 {
                return Err(EvalError::Invalid(
                    "CSV experiment currently supports d_y = 1 (scalar newsvendor)".into(),
                ));
            }
            Ok(ExperimentSetup {
                problem: Problem::Nv(NvSpec::standard()),
                noise: None,
            })
        }
    }
}

fn fixed_outcome_pool(model: &NoiseModel, n: usize) -> Vec<DVector<f64>> {
    let mut rng = stream(SETUP_SEED, StreamKind::Oracle);
    (0..n)
        .map(|_| {
            let x = model.sample_x(&mut rng);
            model.sample_y(&x, &mut rng)
        })
        .collect()
}

/// Data splits for one experiment seed.
pub fn build_data(
    cfg: &ExperimentConfig,
    setup: &ExperimentSetup,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), EvalError> {
    match (&setup.noise, &cfg.csv_path) {
        (Some(model), _) => {
            let split = SplitSpec::new(cfg.n_train, cfg.n_val, cfg.n_test, seed);
            let (train, val, test, _) = gen_with_model(model, &split);
            Ok((train, val, test))
        }
        (None, Some(path)) => {
            let ds = load_csv(path, cfg.csv_d_x, cfg.csv_d_y)?;
            let total = ds.len();
            let n_test = cfg.n_test.min(total / 3);
            let n_val = cfg.n_val.min(total / 3);
            let n_train = total - n_val - n_test;
            let split = SplitSpec::new(n_train, n_val, n_test, seed);
            Ok(ds.split(&split, true)?)
        }
        (None, None) => Err(EvalError::Invalid("CSV experiment needs csv_path".into())),
    }
}

/// Posterior-mean warm start for decoupled BNN training: a short MSE fit
/// hands the mean net structure that heteroscedastic-NLL gradients
/// (scaled by 1/σ²) discover too slowly under large aleatoric noise.
fn mse_seeded_theta(
    cfg: &ExperimentConfig,
    arch: &MlpArchitecture,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<VariationalWeights, EvalError> {
    let det_cfg = cfg.train_config(Method::DAnn, seed);
    let pre = train_deterministic(arch, None, train, val, &det_cfg, DetMode::DecoupledMse, None)?;
    let weights = match pre.predictor {
        Predictor::Ann { weights, .. } => weights,
        _ => unreachable!("MSE training returns an ANN"),
    };
    Ok(mean_warm_start(arch, &weights, train, seed))
}

/// Train one method on one seed's data. Combined variants warm-start
/// from their decoupled counterpart (cold-started task training can sit
/// in zero-subgradient regions).
pub fn train_method(
    method: Method,
    cfg: &ExperimentConfig,
    setup: &ExperimentSetup,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
) -> Result<TrainedModel, EvalError> {
    let arch = cfg.arch(train.d_x(), train.d_y());
    let tc = cfg.train_config(method, seed);
    let prior = Prior::default();
    let model = match method {
        Method::DAnn => {
            train_deterministic(&arch, None, train, val, &tc, DetMode::DecoupledMse, None)?
        }
        Method::CAnn => {
            let pre_cfg = cfg.train_config(Method::DAnn, seed);
            let pre =
                train_deterministic(&arch, None, train, val, &pre_cfg, DetMode::DecoupledMse, None)?;
            let weights = match pre.predictor {
                Predictor::Ann { weights, .. } => weights,
                _ => unreachable!("MSE training returns an ANN"),
            };
            train_deterministic(
                &arch,
                Some(&setup.problem),
                train,
                val,
                &tc,
                DetMode::CombinedTask,
                Some(weights),
            )?
        }
        Method::DGp => {
            let models = gp_fit(&train.x, &train.y)?;
            TrainedModel {
                predictor: Predictor::Gp { models },
                history: Vec::new(),
                best_epoch: 0,
                k_used: None,
            }
        }
        Method::DBnn => {
            let init = mse_seeded_theta(cfg, &arch, train, val, seed)?;
            train_decoupled(&arch, &prior, train, val, &tc, Some(init))?
        }
        Method::CBnn => {
            let pre_cfg = cfg.train_config(Method::DBnn, seed);
            let init = mse_seeded_theta(cfg, &arch, train, val, seed)?;
            let pre = train_decoupled(&arch, &prior, train, val, &pre_cfg, Some(init))?;
            let theta = match pre.predictor {
                Predictor::Bnn { theta, .. } => theta,
                _ => unreachable!("decoupled training returns a BNN"),
            };
            train_combined(&arch, &prior, &setup.problem, train, val, &tc, Some(theta))?
        }
    };
    Ok(model)
}

// ── protocol drivers ─────────────────────────────────────────────────

/// Preference order for which trained predictor to retain for the
/// quantile-curve artifact and checkpoint.
fn retention_rank(method: Method) -> usize {
    match method {
        Method::DBnn => 0,
        Method::CBnn => 1,
        Method::DGp => 2,
        Method::CAnn => 3,
        Method::DAnn => 4,
    }
}

struct Reports {
    reports: Vec<RegretReport>,
    failures: Vec<String>,
    /// Predictor trained on the first seed, preferred-sampler first.
    retained: Option<(Method, Predictor)>,
}

fn run_reports(cfg: &ExperimentConfig) -> Result<Reports, EvalError> {
    let setup = build_setup(cfg)?;
    let opts = SolveOptions::default();
    let mut per_method_r: Vec<Vec<f64>> = vec![Vec::new(); cfg.methods.len()];
    let mut per_method_fr: Vec<Vec<f64>> = vec![Vec::new(); cfg.methods.len()];
    let mut failures = Vec::new();
    let mut retained: Option<(Method, Predictor)> = None;
    for &seed in &cfg.seeds {
        let (train, val, test) = build_data(cfg, &setup, seed)?;
        let baselines = compute_baselines(
            &setup.problem,
            &test,
            setup.noise.as_ref(),
            cfg.m_oracle,
            seed,
            cfg.eval_cap,
            opts,
        )?;
        for (mi, &method) in cfg.methods.iter().enumerate() {
            // a failed method is recorded; the rest of the run continues
            let trained = match train_method(method, cfg, &setup, &train, &val, seed) {
                Ok(t) => t,
                Err(e) => {
                    failures.push(format!("{} seed {seed}: {e}", method.name()));
                    continue;
                }
            };
            if seed == cfg.seeds[0]
                && retained
                    .as_ref()
                    .is_none_or(|(kept, _)| retention_rank(method) < retention_rank(*kept))
            {
                retained = Some((method, trained.predictor.clone()));
            }
            let m_eval = match method {
                Method::DAnn | Method::CAnn => 1,
                _ => cfg.m,
            };
            let out = match evaluate_predictor(
                &trained.predictor,
                &setup.problem,
                &test,
                &baselines,
                m_eval,
                seed,
                opts,
            ) {
                Ok(o) => o,
                Err(e) => {
                    failures.push(format!("{} seed {seed}: {e}", method.name()));
                    continue;
                }
            };
            per_method_r[mi].push(out.r);
            if let Some(fr) = out.fr {
                per_method_fr[mi].push(fr);
            }
        }
    }
    let reports = cfg
        .methods
        .iter()
        .enumerate()
        .filter(|(mi, _)| !per_method_r[*mi].is_empty())
        .map(|(mi, &method)| {
            let fr = if per_method_fr[mi].len() == per_method_r[mi].len()
                && !per_method_fr[mi].is_empty()
            {
                Some(per_method_fr[mi].clone())
            } else {
                None
            };
            RegretReport::from_per_seed(cfg.experiment, method, per_method_r[mi].clone(), fr)
        })
        .collect();
    Ok(Reports {
        reports,
        failures,
        retained,
    })
}

/// Five-seed protocol: per seed regenerate data, train every requested
/// method, evaluate R/FR; persist `runrecord.json` and `results.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord, EvalError> {
    cfg.validate()?;
    let t0 = std::time::Instant::now();
    let out = run_reports(cfg)?;
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        reports: out.reports,
        sweep: Vec::new(),
        failures: out.failures,
        wall_secs: t0.elapsed().as_secs_f64(),
        method_secs: Vec::new(),
    };
    persist(&record, cfg)?;
    if let Some((_, predictor)) = &out.retained {
        crate::predictors::save_checkpoint(predictor, &cfg.out_dir.join("checkpoint.json"))?;
        let setup = build_setup(cfg)?;
        if let Some(noise) = &setup.noise {
            // scalar problems get the mean/quantile-curve artifact
            if noise.d_y() == 1 && predictor.d_y() == 1 {
                let q = match &setup.problem {
                    Problem::Nv(spec) => spec.quantile(),
                    _ => 0.5,
                };
                let xs: Vec<f64> = (0..50).map(|i| 0.01 + 0.02 * i as f64).collect();
                write_quantile_curves_csv(
                    predictor,
                    noise,
                    q,
                    &xs,
                    cfg.m.max(256),
                    cfg.seeds[0],
                    &cfg.hash(),
                    &cfg.out_dir.join("quantile_curves.csv"),
                )?;
            }
        }
    }
    Ok(record)
}

/// Sampling-size sweep over (M_t, M) pairs; emits `sweep.csv`.
pub fn sweep_sampling(
    cfg: &ExperimentConfig,
    pairs: &[(usize, usize)],
) -> Result<RunRecord, EvalError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(EvalError::Invalid("sweep needs at least one pair".into()));
    }
    let t0 = std::time::Instant::now();
    let mut sweep = Vec::with_capacity(pairs.len());
    let mut failures = Vec::new();
    for &(m_t, m) in pairs {
        let mut point_cfg = cfg.clone();
        point_cfg.m_t = m_t;
        point_cfg.m = m;
        let mut out = run_reports(&point_cfg)?;
        failures.append(&mut out.failures);
        sweep.push(SweepPoint {
            m_t,
            m,
            n_train: point_cfg.n_train,
            reports: out.reports,
        });
    }
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        reports: sweep.last().map(|p| p.reports.clone()).unwrap_or_default(),
        sweep,
        failures,
        wall_secs: t0.elapsed().as_secs_f64(),
        method_secs: Vec::new(),
    };
    persist(&record, cfg)?;
    Ok(record)
}

/// Train-size sweep at fixed (M_t, M); emits `sweep.csv` keyed by
/// n_train.
pub fn sweep_trainsize(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<RunRecord, EvalError> {
    cfg.validate()?;
    if sizes.is_empty() {
        return Err(EvalError::Invalid("sweep needs at least one size".into()));
    }
    let t0 = std::time::Instant::now();
    let mut sweep = Vec::with_capacity(sizes.len());
    let mut failures = Vec::new();
    for &n in sizes {
        let mut point_cfg = cfg.clone();
        point_cfg.n_train = n;
        let mut out = run_reports(&point_cfg)?;
        failures.append(&mut out.failures);
        sweep.push(SweepPoint {
            m_t: point_cfg.m_t,
            m: point_cfg.m,
            n_train: n,
            reports: out.reports,
        });
    }
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        reports: sweep.last().map(|p| p.reports.clone()).unwrap_or_default(),
        sweep,
        failures,
        wall_secs: t0.elapsed().as_secs_f64(),
        method_secs: Vec::new(),
    };
    persist(&record, cfg)?;
    Ok(record)
}

fn persist(record: &RunRecord, cfg: &ExperimentConfig) -> Result<(), EvalError> {
    record.save(&cfg.out_dir.join("runrecord.json"))?;
    write_results_csv(&record.reports, &cfg.hash(), &cfg.out_dir.join("results.csv"))?;
    if !record.sweep.is_empty() {
        write_sweep_csv(&record.sweep, &cfg.hash(), &cfg.out_dir.join("sweep.csv"))?;
    }
    Ok(())
}

// ── CSV artifacts ────────────────────────────────────────────────────

/// Per-method summary output: method, metric, mean, std, per-seed columns.
pub fn write_results_csv(
    reports: &[RegretReport],
    config_hash: &str,
    path: &Path,
) -> Result<(), EvalError> {
    let n_seeds = reports.iter().map(|r| r.r_per_seed.len()).max().unwrap_or(0);
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("method,metric,mean,std");
    for i in 0..n_seeds {
        out.push_str(&format!(",seed{i}"));
    }
    out.push('\n');
    let mut push_row = |method: &str, metric: &str, mean: f64, std: f64, per: &[f64]| {
        out.push_str(&format!("{method},{metric},{mean:.17e},{std:.17e}"));
        for v in per {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    };
    for r in reports {
        push_row(&r.method, "R", r.r_mean, r.r_std, &r.r_per_seed);
        if let (Some(m), Some(s), Some(per)) = (r.fr_mean, r.fr_std, &r.fr_per_seed) {
            push_row(&r.method, "FR", m, s, per);
        }
    }
    write_atomic(path, &out)
}

/// Sweep output: one row per (point, method, metric).
pub fn write_sweep_csv(
    sweep: &[SweepPoint],
    config_hash: &str,
    path: &Path,
) -> Result<(), EvalError> {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("m_t,m,n_train,method,metric,mean,std\n");
    for point in sweep {
        for r in &point.reports {
            out.push_str(&format!(
                "{},{},{},{},R,{:.17e},{:.17e}\n",
                point.m_t, point.m, point.n_train, r.method, r.r_mean, r.r_std
            ));
            if let (Some(m), Some(s)) = (r.fr_mean, r.fr_std) {
                out.push_str(&format!(
                    "{},{},{},{},FR,{:.17e},{:.17e}\n",
                    point.m_t, point.m, point.n_train, r.method, m, s
                ));
            }
        }
    }
    write_atomic(path, &out)
}

/// Quantile-curve output for scalar problems: true and predicted mean and
/// q-quantile curves over a grid of x values.
pub fn write_quantile_curves_csv(
    predictor: &Predictor,
    noise: &NoiseModel,
    q: f64,
    xs: &[f64],
    m: usize,
    seed: u64,
    config_hash: &str,
    path: &Path,
) -> Result<(), EvalError> {
    if predictor.d_y() != 1 || noise.d_y() != 1 {
        return Err(EvalError::Invalid("quantile curves need d_y = 1".into()));
    }
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("x,true_mean,true_quantile,pred_mean,pred_quantile\n");
    let mut rng = stream(seed, StreamKind::Oracle);
    for &x in xs {
        let xv = DVector::from_element(1, x);
        let true_mean = noise.mean(&xv)[0];
        let true_q = match noise.analytic_quantile(&xv, q) {
            Some(v) => v[0],
            None => {
                let samples = crate::datagen::true_conditional_samples(&xv, noise, m.max(512), seed);
                empirical_quantile(samples.column(0).iter().copied().collect(), q)
            }
        };
        let samples = predictor.predict_samples(&[x], m, &mut rng)?;
        let col: Vec<f64> = samples.column(0).iter().copied().collect();
        let pred_mean = col.iter().sum::<f64>() / col.len() as f64;
        let pred_q = empirical_quantile(col, q);
        out.push_str(&format!(
            "{x:.17e},{true_mean:.17e},{true_q:.17e},{pred_mean:.17e},{pred_q:.17e}\n"
        ));
    }
    write_atomic(path, &out)
}

fn empirical_quantile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((values.len() as f64) * q).ceil().max(1.0) as usize - 1;
    values[k.min(values.len() - 1)]
}

/// A DMatrix row as a Vec (evaluation-side convenience).
pub fn matrix_row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::{Activation, MlpWeights};

    fn tmp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("stochop-eval-{name}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    /// ANN that predicts `value` for every input: zero weights, so tanh
    /// layers emit 0 and only the output bias survives.
    fn constant_ann(value: f64) -> Predictor {
        let arch = MlpArchitecture::new(1, vec![4], 1, Activation::Tanh).unwrap();
        let mut weights = MlpWeights::zeros(&arch);
        let last = weights.layers.last_mut().unwrap();
        last.b.values_mut()[0] = value;
        Predictor::Ann { arch, weights }
    }

    fn scalar_dataset(xs: &[f64], ys: &[f64], tag: Option<NoiseModel>) -> Dataset {
        let n = xs.len();
        Dataset::new(
            DMatrix::from_iterator(n, 1, xs.iter().copied()),
            DMatrix::from_iterator(n, 1, ys.iter().copied()),
            tag,
        )
        .unwrap()
    }

    fn nv_problem() -> Problem {
        Problem::Nv(NvSpec::standard())
    }

    #[test]
    fn method_and_experiment_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        for e in Experiment::ALL {
            assert_eq!(Experiment::parse(e.name()).unwrap(), e);
        }
        let err = Method::parse("X-NET").unwrap_err().to_string();
        for m in Method::ALL {
            assert!(err.contains(m.name()), "error must list {}: {err}", m.name());
        }
    }

    #[test]
    fn config_hash_is_stable_and_config_sensitive() {
        let cfg = ExperimentConfig::default_for(Experiment::Nv1);
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.m = cfg.m + 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn toml_config_overrides_defaults() {
        let dir = tmp_dir("toml");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.toml");
        std::fs::write(
            &path,
            r#"
[experiment]
name = "NVQP"
methods = ["D-BNN", "C-BNN"]
seeds = [0, 1]
m = 16
m_t = 4

[train]
epochs = 7
learning_rate = 0.01
hidden = [8, 8]

[problem]
n_train = 123
m_oracle = 32
"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::from_file(&path, None).unwrap();
        assert_eq!(cfg.experiment, Experiment::Nvqp);
        assert_eq!(cfg.methods, vec![Method::DBnn, Method::CBnn]);
        assert_eq!(cfg.seeds, vec![0, 1]);
        assert_eq!(cfg.m, 16);
        assert_eq!(cfg.m_t, 4);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.learning_rate, Some(0.01));
        assert_eq!(cfg.hidden, Some(vec![8, 8]));
        assert_eq!(cfg.n_train, 123);
        assert_eq!(cfg.m_oracle, 32);
        // untouched keys keep experiment defaults
        assert_eq!(cfg.n_val, 2000);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn toml_unknown_method_is_rejected() {
        let dir = tmp_dir("toml-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.toml");
        std::fs::write(&path, "[experiment]\nname = \"NV1\"\nmethods = [\"Q-NET\"]\n").unwrap();
        let err = ExperimentConfig::from_file(&path, None).unwrap_err();
        assert!(matches!(err, EvalError::Invalid(_)));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn nv1_three_point_regret_matches_hand_computation() {
        // constant prediction 6 against outcomes 5, 7, 9 with costs
        // (100, 900): regrets 900, 100, 300 -> mean 433.33...
        let test = scalar_dataset(&[0.1, 0.5, 0.9], &[5.0, 7.0, 9.0], None);
        let r = regret(&constant_ann(6.0), &test, &nv_problem(), 1, 0).unwrap();
        let expected = (900.0 + 100.0 + 300.0) / 3.0;
        assert!((r - expected).abs() < 1e-9, "R = {r}, expected {expected}");
    }

    #[test]
    fn perfect_prediction_has_zero_regret() {
        let test = scalar_dataset(&[0.2, 0.4, 0.6], &[5.0, 5.0, 5.0], None);
        let r = regret(&constant_ann(5.0), &test, &nv_problem(), 1, 0).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn free_regret_never_exceeds_regret() {
        let model = NoiseModel::nv1();
        let split = SplitSpec::new(10, 10, 120, 7);
        let (_, _, test, _) = gen_with_model(&model, &split);
        let problem = nv_problem();
        let opts = SolveOptions::default();
        let baselines =
            compute_baselines(&problem, &test, Some(&model), 256, 7, Some(100), opts).unwrap();
        let out =
            evaluate_predictor(&constant_ann(8.0), &problem, &test, &baselines, 1, 7, opts)
                .unwrap();
        let fr = out.fr.unwrap();
        assert!(fr <= out.r + 1e-12, "FR = {fr} must not exceed R = {}", out.r);
        // strict gap expected under real noise
        assert!(out.r - fr > 1.0, "R − FR = {}", out.r - fr);
    }

    #[test]
    fn noiseless_free_regret_equals_regret() {
        let model = NoiseModel::nv1_noiseless();
        let split = SplitSpec::new(10, 10, 80, 11);
        let (_, _, test, _) = gen_with_model(&model, &split);
        let problem = nv_problem();
        let opts = SolveOptions::default();
        let baselines =
            compute_baselines(&problem, &test, Some(&model), 16, 11, None, opts).unwrap();
        let out =
            evaluate_predictor(&constant_ann(9.0), &problem, &test, &baselines, 1, 11, opts)
                .unwrap();
        assert_eq!(out.fr.unwrap(), out.r, "no aleatoric noise: FR must equal R");
    }

    #[test]
    fn true_conditional_sampler_has_small_free_regret() {
        // a model that samples the exact conditional law, at M = 2048,
        // is within 5% of the distribution oracle
        let model = NoiseModel::nv1();
        let split = SplitSpec::new(10, 10, 100, 13);
        let (_, _, test, _) = gen_with_model(&model, &split);
        let problem = nv_problem();
        let opts = SolveOptions::default();
        let m = 2048;
        let mut fr_sum = 0.0;
        let mut scale_sum = 0.0;
        for i in 0..test.len() {
            let x = test.x.row(i).transpose();
            let y = test.y.row(i).transpose();
            let samples = crate::datagen::true_conditional_samples(&x, &model, m, 9000 + i as u64);
            let z = saa_decision(&problem, &samples, opts).unwrap().z;
            let z_star =
                distribution_oracle_decision(&x, &model, &problem, m, 17, opts).unwrap();
            fr_sum += problem.task_cost(&z, &y).unwrap() - problem.task_cost(&z_star, &y).unwrap();
            scale_sum += problem.task_cost(&z_star, &y).unwrap().abs();
        }
        let fr = fr_sum / test.len() as f64;
        let scale = scale_sum / test.len() as f64;
        assert!(fr.abs() <= 0.05 * scale, "FR = {fr}, scale = {scale}");
    }

    #[test]
    fn saa_distribution_oracle_matches_analytic_quantile() {
        let model = NoiseModel::nv1();
        let problem = nv_problem();
        let opts = SolveOptions::default();
        let mut gap_sum = 0.0;
        let xs: Vec<f64> = (0..9).map(|i| 0.1 + 0.1 * i as f64).collect();
        for (i, &x) in xs.iter().enumerate() {
            let xv = DVector::from_element(1, x);
            let samples =
                crate::datagen::true_conditional_samples(&xv, &model, 4096, 500 + i as u64);
            let z_saa = saa_decision(&problem, &samples, opts).unwrap().z[0];
            let z_true = model.analytic_quantile(&xv, NvSpec::standard().quantile()).unwrap()[0];
            gap_sum += (z_saa - z_true).abs();
        }
        let mean_gap = gap_sum / xs.len() as f64;
        assert!(mean_gap <= 0.05, "mean |z_SAA − z_analytic| = {mean_gap}");
    }

    #[test]
    fn results_csv_round_trips_aggregates() {
        let r = vec![1.25, 0.5, 0.75, 2.0, 1.0];
        let fr = vec![0.25, 0.125, 0.5, 1.0, 0.375];
        let report =
            RegretReport::from_per_seed(Experiment::Nv1, Method::DBnn, r.clone(), Some(fr));
        let dir = tmp_dir("csv");
        let path = dir.join("results.csv");
        write_results_csv(std::slice::from_ref(&report), "deadbeef00000000", &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config_hash=deadbeef00000000");
        assert_eq!(lines.next().unwrap(), "method,metric,mean,std,seed0,seed1,seed2,seed3,seed4");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "D-BNN");
        assert_eq!(row[1], "R");
        let mean: f64 = row[2].parse().unwrap();
        let std: f64 = row[3].parse().unwrap();
        let per: Vec<f64> = row[4..].iter().map(|v| v.parse().unwrap()).collect();
        let (m2, s2) = mean_std(&per);
        assert!((mean - m2).abs() < 1e-12 && (std - s2).abs() < 1e-12);
        assert_eq!(per, r);
        let _ = std::fs::remove_dir_all(&dir);
    }

    fn smoke_config(out: PathBuf) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default_for(Experiment::Nv1);
        cfg.methods = vec![Method::DAnn];
        cfg.seeds = vec![0];
        cfg.n_train = 100;
        cfg.n_val = 40;
        cfg.n_test = 40;
        cfg.epochs = 5;
        cfg.hidden = Some(vec![8]);
        cfg.m = 1;
        cfg.m_t = 1;
        cfg.batch_size = 16;
        cfg.val_cap = Some(20);
        cfg.eval_cap = Some(25);
        cfg.m_oracle = 64;
        cfg.out_dir = out;
        cfg
    }

    #[test]
    fn smoke_run_is_reproducible_and_well_formed() {
        let dir_a = tmp_dir("smoke-a");
        let dir_b = tmp_dir("smoke-b");
        let record_a = run_experiment(&smoke_config(dir_a.clone())).unwrap();
        let record_b = run_experiment(&smoke_config(dir_b.clone())).unwrap();
        assert!(record_a.failures.is_empty(), "{:?}", record_a.failures);
        assert_eq!(record_a.reports.len(), 1);
        let rep = &record_a.reports[0];
        assert_eq!(rep.method, "D-ANN");
        assert!(rep.fr_mean.is_some(), "synthetic data must report FR");
        assert!(rep.fr_mean.unwrap() <= rep.r_mean + 1e-12);
        // identical seeds, identical outputs
        assert!(dir_a.join("checkpoint.json").exists());
        assert!(dir_a.join("quantile_curves.csv").exists());
        let csv_a = std::fs::read_to_string(dir_a.join("results.csv")).unwrap();
        let csv_b = std::fs::read_to_string(dir_b.join("results.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(csv_a.starts_with(&format!("# config_hash={}", record_a.config_hash)));

        // provenance: re-executing from the loaded record reproduces the
        // metrics exactly
        let loaded = RunRecord::load(&dir_a.join("runrecord.json")).unwrap();
        assert_eq!(
            serde_json::to_string(&loaded.reports).unwrap(),
            serde_json::to_string(&record_a.reports).unwrap()
        );
        let rerun = run_experiment(&loaded.config).unwrap();
        assert_eq!(
            serde_json::to_string(&rerun.reports).unwrap(),
            serde_json::to_string(&record_a.reports).unwrap()
        );
        let _ = std::fs::remove_dir_all(&dir_a);
        let _ = std::fs::remove_dir_all(&dir_b);
    }

    #[test]
    fn single_pair_sweep_degenerates_to_run_experiment() {
        let dir_run = tmp_dir("sw-run");
        let dir_sweep = tmp_dir("sw-sweep");
        let run = run_experiment(&smoke_config(dir_run.clone())).unwrap();
        let cfg = smoke_config(dir_sweep.clone());
        let sweep = sweep_sampling(&cfg, &[(cfg.m_t, cfg.m)]).unwrap();
        assert_eq!(sweep.sweep.len(), 1);
        assert_eq!(
            serde_json::to_string(&sweep.sweep[0].reports).unwrap(),
            serde_json::to_string(&run.reports).unwrap()
        );
        let text = std::fs::read_to_string(dir_sweep.join("sweep.csv")).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# config_hash="));
        assert_eq!(lines.next().unwrap(), "m_t,m,n_train,method,metric,mean,std");
        assert!(text.contains("D-ANN,R,") && text.contains("D-ANN,FR,"));
        let _ = std::fs::remove_dir_all(&dir_run);
        let _ = std::fs::remove_dir_all(&dir_sweep);
    }

    #[test]
    fn quantile_curves_csv_is_well_formed() {
        let dir = tmp_dir("curves");
        let path = dir.join("quantile_curves.csv");
        let xs: Vec<f64> = (0..5).map(|i| 0.2 * i as f64 + 0.1).collect();
        write_quantile_curves_csv(
            &constant_ann(7.0),
            &NoiseModel::nv1(),
            0.1,
            &xs,
            64,
            3,
            "0123456789abcdef",
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash=0123456789abcdef");
        assert_eq!(lines[1], "x,true_mean,true_quantile,pred_mean,pred_quantile");
        assert_eq!(lines.len(), 2 + xs.len());
        for line in &lines[2..] {
            let vals: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(vals.len(), 5);
            // q = 0.1 of a Gaussian sits below its mean
            assert!(vals[2] < vals[1]);
            // the constant predictor's mean and quantile coincide
            assert!((vals[3] - 7.0).abs() < 1e-12 && (vals[4] - 7.0).abs() < 1e-12);
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default_for(Experiment::Nv1);
        cfg.methods.clear();
        assert!(matches!(cfg.validate(), Err(EvalError::Invalid(_))));
        let mut cfg = ExperimentConfig::default_for(Experiment::Csv);
        cfg.csv_path = None;
        assert!(matches!(cfg.validate(), Err(EvalError::Invalid(_))));
        let cfg = ExperimentConfig::default_for(Experiment::Nv1);
        assert!(sweep_sampling(&cfg, &[]).is_err());
        assert!(sweep_trainsize(&cfg, &[]).is_err());
    }
}
