//! Criterion benchmarks for the two hot paths: the interior-point QP
//! solver (forward and KKT backward) and reverse-mode autodiff through
//! an MLP loss.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use stochop_core::autodiff::Tape;
use stochop_core::predictors::{
    ann_forward, mlp_params_on_tape, Activation, MlpArchitecture, MlpWeights,
};
use stochop_core::problems::{NvqpSpec, Problem};
use stochop_core::qp::{backward_kkt, solve_qp, SolveOptions};

fn saa_qp(m: usize) -> stochop_core::qp::QpStandardForm {
    let spec = NvqpSpec::generated(4, 7, 150.0);
    let problem = Problem::Nvqp(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples = DMatrix::from_fn(m, 4, |_, _| 5.0 + 4.0 * rng.random::<f64>());
    problem.build_saa(&samples).expect("well-posed SAA").qp
}

fn bench_qp(c: &mut Criterion) {
    let opts = SolveOptions::default();
    for m in [8usize, 32] {
        let qp = saa_qp(m);
        c.bench_function(&format!("qp_solve_saa_m{m}"), |b| {
            b.iter(|| solve_qp(std::hint::black_box(&qp), opts).unwrap())
        });
        let sol = solve_qp(&qp, opts).unwrap();
        let dl_dv = DVector::from_element(qp.h.nrows(), 1.0);
        c.bench_function(&format!("qp_backward_kkt_m{m}"), |b| {
            b.iter(|| backward_kkt(std::hint::black_box(&qp), &sol, &dl_dv).unwrap())
        });
    }
}

fn bench_autodiff(c: &mut Criterion) {
    let arch = MlpArchitecture::new(4, vec![64, 32], 2, Activation::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let weights = MlpWeights::init(&arch, &mut rng);
    let x: Vec<f64> = (0..4).map(|i| 0.1 + 0.2 * i as f64).collect();
    c.bench_function("mlp_forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let vars = mlp_params_on_tape(&tape, &weights);
            let out = ann_forward(&tape, &x, &vars, &arch).unwrap();
            let loss = out.square().unwrap().sum().unwrap();
            tape.backward(&loss).unwrap()
        })
    });
}

criterion_group!(benches, bench_qp, bench_autodiff);
criterion_main!(benches);
