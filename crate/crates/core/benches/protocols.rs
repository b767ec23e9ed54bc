use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use ppir::dealer::{Dealer, MaterialPlan};
use ppir::numeric::{FixedPointConfig, Fx};
use ppir::parallel;
use ppir::pipeline::{outsource, synthetic_corpus};
use ppir::protocols::{demand, sec_mul_vec};
use ppir::securenn::{infer_batch, PoolMode, PublicModel};
use ppir::testing::{make_parties, run_parties, shares_of, Pair};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn cfg() -> FixedPointConfig {
    FixedPointConfig::default()
}

fn dealer_generate(c: &mut Criterion) {
    let mut plan = MaterialPlan::new();
    plan.scalars(200_000).cmps(20_000).triples((16, 16, 16), 200);
    let dealer = Dealer::new(1, cfg());
    let mut g = c.benchmark_group("dealer_generate");
    g.sample_size(10);
    for (name, seq) in MODES {
        parallel::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| dealer.generate(&plan).unwrap()));
    }
    parallel::set_sequential(false);
    g.finish();
}

fn sec_mul(c: &mut Criterion) {
    let n = 200_000;
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let xs: Vec<Fx> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let x = Pair(xs.clone(), vec![0.0; n]);
    let mut plan = MaterialPlan::new();
    demand::mul(&mut plan, n);
    let mut g = c.benchmark_group("sec_mul_vec");
    g.sample_size(10);
    for (name, seq) in MODES {
        parallel::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || make_parties(cfg(), &plan, 3).unwrap(),
                |(mut p1, mut p2)| {
                    run_parties(&mut p1, &mut p2, |p| sec_mul_vec(p, shares_of(p, &x), shares_of(p, &x))).unwrap()
                },
                BatchSize::PerIteration,
            )
        });
    }
    parallel::set_sequential(false);
    g.finish();
}

fn inference(c: &mut Criterion) {
    let side = 16;
    let model = PublicModel::toy(6, side);
    let images = synthetic_corpus(8, 2, side, 7);
    let stores = outsource(&images, 2, &cfg()).unwrap();
    let mut plan = MaterialPlan::new();
    model.demand(&mut plan, images.len(), PoolMode::Tournament).unwrap();
    let mut g = c.benchmark_group("infer_batch");
    g.sample_size(10);
    for (name, seq) in MODES {
        parallel::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter_batched(
                || make_parties(cfg(), &plan, 4).unwrap(),
                |(mut p1, mut p2)| {
                    run_parties(&mut p1, &mut p2, |p| {
                        infer_batch(p, &model, &stores.get(p.id).images, PoolMode::Tournament)
                    })
                    .unwrap()
                },
                BatchSize::PerIteration,
            )
        });
    }
    parallel::set_sequential(false);
    g.finish();
}

criterion_group!(benches, dealer_generate, sec_mul, inference);
criterion_main!(benches);
