use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saddle_track::dynamics::{simulate, ControllerConfig, Mode};
use saddle_track::exec::{map_range, Execution};
use saddle_track::offline::{estimate_K, TimeGrid};
use saddle_track::shepherd::{Objective, ShepherdEnvironment, ShepherdParams, ShepherdScenario};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scenario(seed: u64) -> Arc<ShepherdScenario> {
    let params = ShepherdParams::default();
    Arc::new(ShepherdScenario::draw(&params, seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

fn gap_constant(c: &mut Criterion) {
    let sc = scenario(1);
    let grid = TimeGrid::new(1.0, 1e-2).unwrap();
    let env = ShepherdEnvironment::new(sc.clone(), Objective::BlackSheep);
    let set = sc.action_set();
    let x = sc.herd_center_action();
    let mut group = c.benchmark_group("estimate_K");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_K(&env, &grid, &set, &x, exec).unwrap())
        });
    }
    group.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let scenarios: Vec<_> = (1..=8).map(scenario).collect();
    let cfg = ControllerConfig::new(Mode::FeasibilityOnly, 50.0, 1e-3);
    let mut group = c.benchmark_group("feasibility_sweep_8_seeds");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_range(exec, scenarios.len(), |i| {
                    let sc = &scenarios[i];
                    let env = ShepherdEnvironment::new(sc.clone(), Objective::None);
                    let n = sc.action_dim();
                    let m = sc.sheep_count();
                    simulate(&env, &cfg, &vec![0.0; n], &vec![0.0; m], 1.0, &sc.action_set())
                        .unwrap()
                        .lipschitz_estimate
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, gap_constant, seed_sweep);
criterion_main!(benches);
