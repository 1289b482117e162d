//! Compares the rayon-backed maps against their sequential fallbacks on the
//! two data-parallel workloads the trainer actually runs: minibatch goal
//! relabeling and batched policy forwards.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hiro_core::correction::{relabel_batch, relabel_segment, CorrectionKind, CorrectionStrategy};
use hiro_core::goal::{Goal, GoalSpace};
use hiro_core::par;
use hiro_core::replay::HighSegment;
use hiro_core::rng::Rng;
use hiro_core::{Bounds, MlpParams, OutputTransform};

const STATE_DIM: usize = 7;
const GOAL_DIM: usize = 2;
const ACTION_DIM: usize = 2;
const SEGMENT_LEN: usize = 10;
const BATCH: usize = 128;

fn actor(rng: &mut Rng) -> MlpParams {
    let bounds = Bounds::uniform(ACTION_DIM, 1.0).unwrap();
    MlpParams::new(
        &[STATE_DIM + GOAL_DIM, 32, 32, ACTION_DIM],
        OutputTransform::TanhScaled(bounds),
        rng,
    )
    .unwrap()
}

fn segment(rng: &mut Rng) -> HighSegment {
    let state = |rng: &mut Rng| {
        (0..STATE_DIM)
            .map(|_| rng.uniform_in(-10.0, 10.0))
            .collect()
    };
    HighSegment {
        states: (0..SEGMENT_LEN).map(|_| state(rng)).collect(),
        goal: Goal::new((0..GOAL_DIM).map(|_| rng.uniform_in(-10.0, 10.0)).collect()),
        actions: (0..SEGMENT_LEN)
            .map(|_| (0..ACTION_DIM).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect(),
        env_reward_sum: rng.uniform_in(-20.0, 0.0),
        final_state: state(rng),
        terminal: false,
        behavior_sigma: 1.0,
        behavior_log_densities: None,
    }
}

/// Sequential twin of `relabel_batch`: same pre-drawn seeds, plain loop.
fn relabel_batch_seq(
    net: &MlpParams,
    segments: &[&HighSegment],
    space: &GoalSpace,
    strategy: &CorrectionStrategy,
    rng: &mut Rng,
) -> Vec<hiro_core::correction::RelabeledBatchEntry> {
    let seeds: Vec<u64> = (0..segments.len()).map(|_| rng.next_u64()).collect();
    par::map_slice_seq(segments, |i, segment| {
        let mut entry_rng = Rng::seed_from(seeds[i]);
        relabel_segment(net, segment, space, strategy, 0.1, &mut entry_rng).unwrap()
    })
}

fn bench_relabel(c: &mut Criterion) {
    let mut rng = Rng::seed_from(7);
    let net = actor(&mut rng);
    let space = GoalSpace::planar(10.0);
    let strategy = CorrectionStrategy::for_space(CorrectionKind::MaxLikelihood, &space, 1.0);
    let segments: Vec<HighSegment> = (0..BATCH).map(|_| segment(&mut rng)).collect();
    let refs: Vec<&HighSegment> = segments.iter().collect();

    let mut check_rng = Rng::seed_from(99);
    let parallel = relabel_batch(&net, &refs, &space, &strategy, 0.1, &mut check_rng).unwrap();
    let mut check_rng = Rng::seed_from(99);
    let sequential = relabel_batch_seq(&net, &refs, &space, &strategy, &mut check_rng);
    assert_eq!(parallel, sequential, "paths must agree bit for bit");

    let mut group = c.benchmark_group("relabel_batch_128");
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || Rng::seed_from(99),
            |mut rng| relabel_batch(&net, &refs, &space, &strategy, 0.1, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || Rng::seed_from(99),
            |mut rng| relabel_batch_seq(&net, &refs, &space, &strategy, &mut rng),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = Rng::seed_from(11);
    let net = actor(&mut rng);
    let inputs: Vec<Vec<f64>> = (0..2048)
        .map(|_| {
            (0..STATE_DIM + GOAL_DIM)
                .map(|_| rng.uniform_in(-10.0, 10.0))
                .collect()
        })
        .collect();

    let parallel = par::map_slice(&inputs, |_, x| net.forward(x).unwrap());
    let sequential = par::map_slice_seq(&inputs, |_, x| net.forward(x).unwrap());
    assert_eq!(parallel, sequential, "paths must agree bit for bit");

    let mut group = c.benchmark_group("policy_forward_2048");
    group.bench_function("parallel", |b| {
        b.iter(|| par::map_slice(&inputs, |_, x| net.forward(x).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_slice_seq(&inputs, |_, x| net.forward(x).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, bench_relabel, bench_forward);
criterion_main!(benches);
