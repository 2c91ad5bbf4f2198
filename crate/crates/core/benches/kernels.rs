//! Tape matmul, nearest-code search, and attention residual encoding.
//!
//! With the `parallel` feature each workload runs on the default rayon pool
//! and on a one-thread pool; without it only the sequential path exists.
//! Compare `cargo bench` with `cargo bench --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coda::codebook::{Codebook, InitScheme};
use coda::numkit::{Tape, Tensor};
use coda::quantize::{nearest_codes, rq_encode, Assigner, AttentionQuantizer, NormKind, ResidualQuantizer};

type Workload = Box<dyn Fn() + Send + Sync>;

fn workloads() -> Vec<(&'static str, Workload)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a: Tensor = Tensor::randn(vec![256, 128], 1.0, &mut rng);
    let b: Tensor = Tensor::randn(vec![128, 256], 1.0, &mut rng);
    let f: Tensor = Tensor::randn(vec![4096, 8], 1.0, &mut rng);
    let book = Codebook::init(512, 8, InitScheme::Gaussian, 1, None).unwrap();
    let codes = book.embeddings().clone();
    let attn = AttentionQuantizer::new(8, 8, 8, NormKind::Rms, 2).unwrap();
    let rq = ResidualQuantizer::new(4, book, Assigner::Attention(attn)).unwrap();
    let f2 = f.clone();
    vec![
        (
            "matmul_256x128x256",
            Box::new(move || {
                let mut tape = Tape::new();
                let av = tape.constant(a.clone());
                let bv = tape.constant(b.clone());
                std::hint::black_box(tape.matmul(av, bv).unwrap());
            }),
        ),
        (
            "nearest_codes_4096x512",
            Box::new(move || {
                std::hint::black_box(nearest_codes(&f, &codes).unwrap());
            }),
        ),
        (
            "rq_attn_encode_L4",
            Box::new(move || {
                std::hint::black_box(rq_encode(&f2, &rq, 1.0).unwrap());
            }),
        ),
    ]
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernels");
    group.sample_size(20);
    for (name, work) in workloads() {
        #[cfg(feature = "parallel")]
        {
            group.bench_function(BenchmarkId::new(name, "rayon_default"), |b| b.iter(&work));
            let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            group.bench_function(BenchmarkId::new(name, "rayon_1_thread"), |b| {
                b.iter(|| single.install(&work))
            });
        }
        #[cfg(not(feature = "parallel"))]
        group.bench_function(BenchmarkId::new(name, "sequential"), |b| b.iter(&work));
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
