//! Hot-path benchmarks: displacement voting at full patch count, the
//! batched contrastive/HSIC losses, and one full training step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hdccl_core::captioner::Vocab;
use hdccl_core::distill::{self, Bandwidth};
use hdccl_core::model::{self, Ablation, Model, ModelConfig, PairInput, StepPlan};
use hdccl_core::nn::Binder;
use hdccl_core::scenegen::{self, GenConfig};
use hdccl_core::shiftvote;
use hdccl_core::tape::{Elem, Tape};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, d), |_| f32::std_normal(rng))
}

fn bench_shift_voting(c: &mut Criterion) {
    let mut group = c.benchmark_group("shift_voting");
    for (rows, cols) in [(8, 8), (16, 16)] {
        let n = rows * cols;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bef = randn(&mut rng, n, 64);
        let mut aft = bef.clone();
        // content shifted one row down, top row replaced
        for r in (1..rows).rev() {
            for k in 0..cols {
                let dst = r * cols + k;
                let src = (r - 1) * cols + k;
                let row = aft.row(src).to_owned();
                aft.row_mut(dst).assign(&row);
            }
        }
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{rows}x{cols}")),
            &(bef, aft, (rows, cols)),
            |b, (bef, aft, grid)| {
                b.iter(|| {
                    shiftvote::estimate(
                        bef,
                        aft,
                        shiftvote::DEFAULT_TAU,
                        shiftvote::DEFAULT_RADIUS,
                        shiftvote::DEFAULT_THETA,
                        *grid,
                    )
                    .unwrap()
                })
            },
        );
    }
    group.finish();
}

fn bench_batch_losses(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, 32, 64);
    let b = randn(&mut rng, 32, 64);
    c.bench_function("info_nce_b32", |bench| {
        bench.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let loss = distill::info_nce(&mut tape, av, bv, 0.07).unwrap();
            tape.scalar(loss)
        })
    });
    c.bench_function("hsic_b32_median", |bench| {
        bench.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(b.clone());
            let loss = distill::hsic_loss(&mut tape, av, bv, Bandwidth::Median).unwrap();
            tape.scalar(loss)
        })
    });
}

fn bench_training_step(c: &mut Criterion) {
    let gen = GenConfig::default();
    let records: Vec<_> = (0..8)
        .map(|s| scenegen::generate_pair(s, &gen).unwrap())
        .collect();
    let raw: Vec<(Array2<f32>, Array2<f32>)> = records
        .iter()
        .map(|r| {
            (
                scenegen::render(&r.before, 64, 0.1, r.seed * 2).unwrap(),
                scenegen::render(&r.after, 64, 0.1, r.seed * 2 + 1).unwrap(),
            )
        })
        .collect();
    let vocab = Vocab::from_records(&records);
    let model: Model<f32> = Model::init(ModelConfig::default(), vocab, 0);
    let plan = StepPlan {
        caption_variant: vec![0; 8],
        negative: (0..8).map(|i| (i + 1) % 8).collect(),
        ablation_seed: 7,
    };

    c.bench_function("train_step_b8", |bench| {
        bench.iter(|| {
            let pairs: Vec<PairInput<f32>> = records
                .iter()
                .zip(&raw)
                .map(|(record, (bef, aft))| PairInput {
                    record,
                    raw_bef: bef,
                    raw_aft: aft,
                })
                .collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, &model.params, true);
            let vars = model::bind_model(&mut binder, &model.config);
            drop(binder);
            let losses = model::step_loss(
                &mut tape,
                &vars,
                &model.vocab,
                &pairs,
                &plan,
                &model.config,
                Ablation::None,
                0.01,
            )
            .unwrap();
            let grads = tape.backward(losses.total);
            let _ = grads;
            tape.scalar(losses.total)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_shift_voting, bench_batch_losses, bench_training_step
}
criterion_main!(benches);
