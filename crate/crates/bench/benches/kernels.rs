use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rbe_bench::{random_codes, random_index, random_unit_vectors};
use rbe_core::codec::to_scaled_int;
use rbe_core::kernels::{build_lut, dot_bitwise, dot_reference, LutMode};
use rbe_core::{FloatFlatIndex, Geometry, Kernel, TopK};
use std::hint::black_box;

const CORPUS: usize = 100_000;
const K: usize = 10;

fn pair_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("pair");
    for (m, b) in [(64, 4), (128, 2), (256, 1)] {
        let geom = Geometry::new(m, b).unwrap();
        let codes = random_codes(geom, 2, 3);
        let (q, d) = (&codes[0], &codes[1]);
        let (qs, ds) = (to_scaled_int(q), to_scaled_int(d));
        let label = format!("m{m}_B{b}");
        g.bench_function(BenchmarkId::new("reference", &label), |bch| {
            bch.iter(|| dot_reference(black_box(&qs), black_box(&ds)))
        });
        g.bench_function(BenchmarkId::new("bitwise", &label), |bch| {
            bch.iter(|| dot_bitwise(black_box(q.words()), black_box(d.words()), geom).unwrap())
        });
        g.bench_function(BenchmarkId::new("build_lut", &label), |bch| {
            bch.iter(|| build_lut(black_box(&qs), LutMode::Exact).unwrap())
        });
    }
    g.finish();
}

fn full_scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan_100k");
    g.sample_size(20);
    g.throughput(Throughput::Elements(CORPUS as u64));
    for (m, b) in [(64, 4), (128, 2), (256, 1)] {
        let geom = Geometry::new(m, b).unwrap();
        let index = random_index(geom, CORPUS, 1);
        let queries = random_codes(geom, 16, 2);
        for kernel in [Kernel::Bitwise, Kernel::SdcExact, Kernel::SdcQ8] {
            let mut i = 0;
            g.bench_function(BenchmarkId::new(kernel.name(), format!("m{m}_B{b}")), |bch| {
                bch.iter(|| {
                    let mut top = TopK::new(K);
                    index.scan_into(&queries[i % queries.len()], kernel, &mut top).unwrap();
                    i += 1;
                    top
                })
            });
        }
    }
    let floats = random_unit_vectors(128, CORPUS, 4);
    let float_index = FloatFlatIndex::build(&floats).unwrap();
    let mut i = 0;
    g.bench_function(BenchmarkId::new("float", "d128"), |bch| {
        bch.iter(|| {
            let hits = float_index.search(floats.row(i % 16), K).unwrap();
            i += 1;
            hits
        })
    });
    g.finish();
}

criterion_group!(benches, pair_kernels, full_scan);
criterion_main!(benches);
