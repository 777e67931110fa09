use criterion::{criterion_group, criterion_main, Criterion};
use xdiff_core::par;
use xdiff_core::synth::{env_rollout, ScriptedPolicy, TaskKind, TaskSpec};

fn rollouts(c: &mut Criterion) {
    let task = TaskSpec::new(TaskKind::PickPlace);
    let seeds: Vec<u64> = (0..64).collect();
    let run = |_: usize, &seed: &u64| {
        let mut p = ScriptedPolicy::expert(&task, 8);
        env_rollout(&task, &mut p, seed, 8).success
    };
    let mut g = c.benchmark_group("expert_rollouts_64");
    g.bench_function("parallel", |b| b.iter(|| par::map(&seeds, run)));
    g.bench_function("sequential", |b| b.iter(|| par::map_seq(&seeds, run)));
    g.finish();
}

criterion_group!(benches, rollouts);
criterion_main!(benches);
