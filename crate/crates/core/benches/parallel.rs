//! Sequential vs. rayon execution of the three data-parallel hot loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hdpcmdp::control::{cem_plan, evaluate, CemConfig, ContextSource, LearnedModel, MpcAgent, Plan};
use hdpcmdp::dynamics::NetworkSpec;
use hdpcmdp::envs::{ContextProcess, Env, Plant, RandomAgent, SwitchingLinear};
use hdpcmdp::experiment::random_dataset;
use hdpcmdp::inference::{elbo_gradients, Objective, VariationalParams};
use hdpcmdp::par::Parallelism;
use hdpcmdp::prior::{HdpHyper, PriorKind};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn linear_env() -> Env {
    Env::new(Plant::SwitchingLinear(SwitchingLinear::benchmark()), ContextProcess::sticky_pair(5)).unwrap()
}

fn true_model(env: &Env) -> LearnedModel {
    let Plant::SwitchingLinear(p) = &env.plant else { unreachable!() };
    LearnedModel::new(env.process.chain.clone(), p.true_params()).unwrap()
}

fn cem_rollouts(c: &mut Criterion) {
    let env = linear_env();
    let model = true_model(&env);
    let mut group = c.benchmark_group("cem_rollouts");
    for (name, exec) in MODES {
        let cfg = CemConfig { exec, ..CemConfig::default() };
        let plan = Plan::zeros(cfg.horizon, 2, cfg.init_std);
        let reward = |s: &[f64], a: &[f64]| env.plant.reward(s, a);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| {
                cem_plan(&model, &reward, 1.0, black_box(&[0.2, -0.1]), &[0.5, 0.5], &plan, &cfg, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

fn batch_elbo(c: &mut Criterion) {
    let env = linear_env();
    let data = random_dataset(&env, 20, 100, 7, Parallelism::Sequential).unwrap();
    let hyper = HdpHyper::with_k(5);
    let spec = NetworkSpec::new(2, 2, &[32]);
    let vp = VariationalParams::init(&spec, &hyper, PriorKind::Hdp, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut group = c.benchmark_group("batch_elbo");
    for (name, exec) in MODES {
        let obj = Objective { exec, ..Objective::new(&hyper, PriorKind::Hdp, data.len()) };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            b.iter(|| elbo_gradients(&vp, black_box(&data), &obj, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn evaluation_rollouts(c: &mut Criterion) {
    let env = linear_env();
    let model = true_model(&env);
    let random = RandomAgent::for_plant(&env.plant);
    let cem = CemConfig { n_pops: 30, n_iters: 2, ..CemConfig::default() };
    let mut group = c.benchmark_group("evaluation_rollouts");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("random", name), |b| {
            b.iter(|| evaluate(|| Ok(random.clone()), "random", &env, 64, 100, 9, exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("belief_mpc", name), |b| {
            b.iter(|| {
                let cfg = CemConfig { exec: Parallelism::Sequential, ..cem.clone() };
                evaluate(|| MpcAgent::new(&model, &env.plant, cfg.clone(), ContextSource::Belief), "mpc", &env, 8, 30, 9, exec)
                    .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, cem_rollouts, batch_elbo, evaluation_rollouts);
criterion_main!(benches);
