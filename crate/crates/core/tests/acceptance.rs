//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `RBE_ACCEPTANCE=2,5` restricts the run to the listed criteria.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rbe_core::codec::{to_scaled_int, PackedSegment};
use rbe_core::embstore::gen_synthetic;
use rbe_core::eval::{bench_kernels, run_experiment, ExperimentConfig, RetrievalBenchmark};
use rbe_core::index::{build_ivf, IvfParams};
use rbe_core::kernels::{build_lut, dot_bitwise, dot_reference, LutMode};
use rbe_core::model::{encode_checkpoint, FrozenSigns};
use rbe_core::trainer::{train, train_backward_compatible, TrainConfig};
use rbe_core::{
    FlatIndex, Geometry, Kernel, Mode, NormMode, PlaneMatrix, RbeConfig, RbeModel, RecurrentBinaryCode,
    SyntheticParams, BLOCK_LEN,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_code(rng: &mut ChaCha8Rng, m: usize, b: usize) -> RecurrentBinaryCode {
    let wpp = m.div_ceil(64);
    let words = (0..b * wpp)
        .map(|i| {
            let w: u64 = rng.random();
            let rem = m - (i % wpp) * 64;
            if rem >= 64 { w } else { w & ((1u64 << rem) - 1) }
        })
        .collect();
    RecurrentBinaryCode::from_words(m, b, words).unwrap()
}

/// Dots of `q` against every vector of `docs` under the three exact kernels.
fn all_dots(q: &RecurrentBinaryCode, docs: &[RecurrentBinaryCode], planes: &PlaneMatrix, seg: &PackedSegment) -> Result<[Vec<i32>; 3], String> {
    let geom = planes.geometry();
    let qs = to_scaled_int(q);
    let reference: Vec<i32> = docs.iter().map(|d| dot_reference(&qs, &to_scaled_int(d))).collect();
    let bitwise = (0..docs.len())
        .map(|i| dot_bitwise(q.words(), planes.vector(i), geom))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let lut = build_lut(&qs, LutMode::Exact).map_err(err)?;
    let mut sdc = Vec::with_capacity(docs.len());
    let mut out = [0i32; BLOCK_LEN];
    for block in seg.blocks() {
        lut.block_dots(block, &mut out).map_err(err)?;
        sdc.extend_from_slice(&out[..block.valid()]);
    }
    Ok([reference, bitwise, sdc])
}

fn criterion_1() -> Outcome {
    let mut pairs = 0u64;
    // (a) every code pair at m = 4
    for b in [1usize, 2, 4] {
        let m = 4;
        let geom = Geometry::new(m, b).map_err(err)?;
        let codes: Vec<RecurrentBinaryCode> = (0..1u64 << (m * b))
            .map(|c| {
                let words = (0..b).map(|p| (c >> (p * m)) & 0xf).collect();
                RecurrentBinaryCode::from_words(m, b, words).unwrap()
            })
            .collect();
        let n = codes.len();
        // column-major scaled values for the reference dot products
        let mut cols = vec![0i32; m * n];
        for (i, c) in codes.iter().enumerate() {
            for (j, v) in c.scaled_values().into_iter().enumerate() {
                cols[j * n + i] = v;
            }
        }
        let planes = PlaneMatrix::from_codes(geom, &codes).map_err(err)?;
        let seg = PackedSegment::new(geom, &codes, NormMode::Exact).map_err(err)?;
        let mut reference = vec![0i32; n];
        let mut bit = vec![0i32; n];
        let mut sdc = vec![0i32; n];
        let mut block_out = [0i32; BLOCK_LEN];
        for (qi, q) in codes.iter().enumerate() {
            let qs: Vec<i32> = (0..m).map(|j| cols[j * n + qi]).collect();
            reference.fill(0);
            for (j, &qv) in qs.iter().enumerate() {
                for (r, &dv) in reference.iter_mut().zip(&cols[j * n..(j + 1) * n]) {
                    *r += qv * dv;
                }
            }
            rbe_core::kernels::dot_bitwise_many(q.words(), &planes, 0, &mut bit);
            let lut = build_lut(&to_scaled_int(q), LutMode::Exact).map_err(err)?;
            for (block, chunk) in seg.blocks().iter().zip(sdc.chunks_mut(BLOCK_LEN)) {
                lut.block_dots(block, &mut block_out).map_err(err)?;
                chunk.copy_from_slice(&block_out[..chunk.len()]);
            }
            if reference != bit || reference != sdc {
                let di = (0..n).find(|&i| reference[i] != bit[i] || reference[i] != sdc[i]).unwrap_or(0);
                return Err(format!(
                    "B={b} pair ({qi}, {di}): reference {}, bitwise {}, sdc {}",
                    reference[di], bit[di], sdc[di]
                ));
            }
            pairs += codes.len() as u64;
        }
    }
    // (b) 10^5 random pairs per code dimension, spread over B in {1, 2, 4}
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in [64usize, 128] {
        for (b, queries) in [(1usize, 333), (2, 333), (4, 334)] {
            let geom = Geometry::new(m, b).map_err(err)?;
            let docs: Vec<RecurrentBinaryCode> = (0..100).map(|_| random_code(&mut rng, m, b)).collect();
            let planes = PlaneMatrix::from_codes(geom, &docs).map_err(err)?;
            let seg = PackedSegment::new(geom, &docs, NormMode::Exact).map_err(err)?;
            for _ in 0..queries {
                let q = random_code(&mut rng, m, b);
                let [r, bw, sdc] = all_dots(&q, &docs, &planes, &seg)?;
                if r != bw || r != sdc {
                    return Err(format!("m={m} B={b}: kernels disagree"));
                }
                pairs += docs.len() as u64;
            }
        }
    }
    Ok(format!("{pairs} code pairs identical across reference, bitwise and sdc-exact"))
}

/// Clustered corpus encoded with an untrained B=4, m=64 model.
fn coded_corpus(n_clusters: usize, seed: u64) -> Result<(Vec<u64>, Vec<RecurrentBinaryCode>), String> {
    let data = gen_synthetic(&SyntheticParams::new(n_clusters, 10, 128, 0.09, seed).with_latent_dim(32)).map_err(err)?;
    let model = RbeModel::new(RbeConfig::new(128, 64, 3), seed).map_err(err)?;
    let codes = model.encode_set(&data.set).map_err(err)?;
    Ok((data.set.ids().to_vec(), codes))
}

fn criterion_2() -> Outcome {
    let (ids, codes) = coded_corpus(1000, 2)?;
    let geom = Geometry::of(&codes[0]);
    let index = FlatIndex::build(geom, &codes, &ids, NormMode::Exact).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut jaccard = 0.0;
    let queries = 100;
    for _ in 0..queries {
        let q = &codes[rng.random_range(0..codes.len())];
        let ids_of = |k: Kernel| -> Result<Vec<u64>, String> {
            Ok(index.search(q, 20, k).map_err(err)?.into_iter().map(|n| n.id).collect())
        };
        let bw = ids_of(Kernel::Bitwise)?;
        let exact = ids_of(Kernel::SdcExact)?;
        if bw != exact {
            return Err(format!("bitwise {bw:?} vs sdc-exact {exact:?}"));
        }
        let a: HashSet<u64> = exact.into_iter().collect();
        let b: HashSet<u64> = ids_of(Kernel::SdcQ8)?.into_iter().collect();
        jaccard += a.intersection(&b).count() as f64 / a.union(&b).count() as f64;
    }
    jaccard /= queries as f64;
    check(
        jaccard >= 0.95,
        format!("bitwise == sdc-exact top-20 on {queries} queries; sdc-q8 mean Jaccard {jaccard:.4} (>= 0.95)"),
    )
}

fn best_qps(index: &FlatIndex, queries: &[RecurrentBinaryCode], kernel: Kernel) -> Result<f64, String> {
    let mut best: f64 = 0.0;
    for _ in 0..3 {
        let r = bench_kernels(index, queries, 10, &[kernel]).map_err(err)?;
        best = best.max(r[0].qps);
    }
    Ok(best)
}

fn criterion_3() -> Outcome {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ids: Vec<u64> = (0..n as u64).collect();
    let mut qps = Vec::new();
    for (m, b) in [(64usize, 4usize), (128, 2)] {
        let codes: Vec<RecurrentBinaryCode> = (0..n).map(|_| random_code(&mut rng, m, b)).collect();
        let index = FlatIndex::build(Geometry::new(m, b).map_err(err)?, &codes, &ids, NormMode::Exact).map_err(err)?;
        let queries: Vec<RecurrentBinaryCode> = (0..200).map(|_| random_code(&mut rng, m, b)).collect();
        let bitwise = best_qps(&index, &queries, Kernel::Bitwise)?;
        let sdc = if b == 4 { best_qps(&index, &queries, Kernel::SdcExact)? } else { 0.0 };
        qps.push((bitwise, sdc));
    }
    let (bw4, sdc4) = qps[0];
    let bw2 = qps[1].0;
    let ratio = sdc4 / bw4;
    check(
        ratio >= 1.5 && bw4 < bw2,
        format!(
            "256 bits, 1e5 vectors, 1 thread: sdc-exact {sdc4:.1} qps, bitwise B=4 {bw4:.1} qps (ratio {ratio:.2}, need >= 1.5), bitwise B=2 {bw2:.1} qps ({backend} backend)",
            backend = rbe_core::kernels::sdc_backend()
        ),
    )
}

fn criterion_4() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cfg = ExperimentConfig {
        report_dir: tmp.path().to_path_buf(),
        runs: 3,
        ..ExperimentConfig::default()
    };
    let summary = run_experiment(&cfg).map_err(err)?;
    let mean = |name: &str| summary.rows.iter().find(|r| r.method == name).map(|r| r.mean()).unwrap_or(f64::NAN);
    let (hash, ours, float) = (mean("hash"), mean("ours"), mean("float"));
    let per_run: Vec<String> = summary
        .rows
        .iter()
        .map(|r| format!("{}={:?}", r.method, r.recalls.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()))
        .collect();
    check(
        float >= ours && ours >= hash && float - ours <= 0.03 && ours - hash >= 0.01,
        format!(
            "Recall@10 over 3 seeds: float {float:.4} >= ours(B=4, m=64) {ours:.4} >= hash(B=1, m=256) {hash:.4}; float-ours {:.4} (<= 0.03), ours-hash {:.4} (>= 0.01) [{}]",
            float - ours,
            ours - hash,
            per_run.join(" ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = ExperimentConfig::default();
    let params = SyntheticParams::new(cfg.num_clusters, cfg.per_cluster, cfg.dim, cfg.noise_sigma, cfg.data_seed)
        .with_latent_dim(cfg.latent_dim);
    let data = gen_synthetic(&params).map_err(err)?;
    let bench = RetrievalBenchmark::split(&data, cfg.per_cluster, cfg.train_clusters, cfg.num_queries, cfg.data_seed)
        .map_err(err)?;
    let new_train = bench.train.drifted(0.01, 91);
    let new_corpus = bench.corpus.drifted(0.01, 92);
    let tcfg = cfg.train.clone();
    let config = RbeConfig::new(cfg.dim, 64, 3);

    let old = train(&RbeModel::new(config, 0).map_err(err)?, &bench.train, &bench.train_pairs, &tcfg)
        .map_err(err)?
        .model;
    let fresh = RbeModel::new(config, 100).map_err(err)?;
    let with_bc = train_backward_compatible(&fresh, &old, &new_train, &bench.train, &bench.train_pairs, &tcfg)
        .map_err(err)?
        .model;
    let no_bc_cfg = TrainConfig { bc_weight: 0.0, ..tcfg };
    let without_bc = train_backward_compatible(&fresh, &old, &new_train, &bench.train, &bench.train_pairs, &no_bc_cfg)
        .map_err(err)?
        .model;

    let old_index = old.encode_set(&bench.corpus).map_err(err)?;
    let recall = |queries: &[RecurrentBinaryCode]| -> Result<f64, String> {
        Ok(bench.code_recall(&old_index, queries, 20, Kernel::SdcExact).map_err(err)?.mean)
    };
    let old_old = recall(&old_index)?;
    let new_old = recall(&with_bc.encode_set(&new_corpus).map_err(err)?)?;
    let ablated = recall(&without_bc.encode_set(&new_corpus).map_err(err)?)?;
    check(
        new_old >= old_old - 0.02 && new_old - ablated >= 0.10,
        format!(
            "Recall@20: old->old {old_old:.4}, new->old with compatibility loss {new_old:.4} (>= {:.4}), without {ablated:.4} (drop {:.4}, need >= 0.10)",
            old_old - 0.02,
            new_old - ablated
        ),
    )
}

fn fd_check() -> Result<f64, String> {
    let cfg = RbeConfig::new(8, 6, 2).with_hidden_dim(10);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut model = RbeModel::new(cfg, 60).map_err(err)?.cast::<f64>();
    for t in model.params_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let x = Array2::from_shape_simple_fn((12, 8), || rng.random_range(-1.0..1.0));
    let c = Array2::from_shape_simple_fn((12, 6), || rng.random_range(-1.0..1.0));
    let loss = |decoded: &Array2<f64>| (decoded * &c).sum() + 0.5 * decoded.mapv(|v| v * v).sum();
    let fwd = model.forward(x.view(), Mode::Train).map_err(err)?;
    let frozen = FrozenSigns::from_forward(&fwd);
    let upstream = &c + &fwd.decoded;
    let (grads, _) = model.backward(fwd.tape.as_ref().unwrap(), upstream.view()).map_err(err)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (ti, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = model.params()[ti][k];
            let mut eval = |v: f64| -> Result<f64, String> {
                model.params_mut()[ti][k] = v;
                Ok(loss(&model.forward_surrogate(x.view(), &frozen).map_err(err)?.decoded))
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            model.params_mut()[ti][k] = orig;
            let rel = (numeric - g[k]).abs() / numeric.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn criterion_6() -> Outcome {
    let worst = fd_check()?;
    let data = gen_synthetic(&SyntheticParams::new(400, 10, 64, 0.09, 6).with_latent_dim(16)).map_err(err)?;
    let model = RbeModel::new(RbeConfig::new(64, 32, 3), 6).map_err(err)?;
    let cfg = TrainConfig {
        batch_size: 64,
        queue_len: 1024,
        hard_top_k: 32,
        epochs: 5,
        seed: 6,
        learning_rate: 0.01,
        momentum_coef: 0.99,
        cosine_decay: true,
        ..TrainConfig::default()
    };
    let a = train(&model, &data.set, &data.pairs, &cfg).map_err(err)?;
    let b = train(&model, &data.set, &data.pairs, &cfg).map_err(err)?;
    let losses: Vec<f64> = a.epochs.iter().map(|e| e.loss).collect();
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    let same = encode_checkpoint(&a.model) == encode_checkpoint(&b.model);
    let other = train(&model, &data.set, &data.pairs, &TrainConfig { seed: 7, ..cfg }).map_err(err)?;
    let seed_matters = encode_checkpoint(&other.model) != encode_checkpoint(&a.model);
    check(
        worst <= 1e-3 && decreasing && same && seed_matters,
        format!(
            "max FD relative error {worst:.2e} (<= 1e-3); epoch losses {:?} strictly decreasing: {decreasing}; identical checkpoints for one seed: {same}, different for another: {seed_matters}",
            losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn criterion_7() -> Outcome {
    let data = gen_synthetic(&SyntheticParams::new(1000, 10, 128, 0.09, 7).with_latent_dim(32)).map_err(err)?;
    let model = RbeModel::new(RbeConfig::new(128, 64, 3), 7).map_err(err)?;
    let codes = model.encode_set(&data.set).map_err(err)?;
    let geom = Geometry::of(&codes[0]);
    let params = IvfParams::for_count(codes.len());
    let ivf = build_ivf(&data.set, &codes, &model, &params).map_err(err)?;
    let flat = FlatIndex::build(geom, &codes, data.set.ids(), NormMode::Exact).map_err(err)?;
    let n_list = ivf.n_list();
    let queries: Vec<usize> = (0..codes.len()).step_by(50).collect();
    let mut exact: Vec<Vec<u64>> = Vec::new();
    for &q in &queries {
        let want = flat.search(&codes[q], 10, Kernel::SdcExact).map_err(err)?;
        let got = ivf.search(&codes[q], 10, n_list, Kernel::SdcExact).map_err(err)?;
        if want != got {
            return Err(format!("full probe differs from flat for row {q}"));
        }
        exact.push(want.into_iter().map(|n| n.id).collect());
    }
    let mut curve = Vec::new();
    for n_probe in 1..=n_list {
        let mut hit = 0usize;
        for (&q, truth) in queries.iter().zip(&exact) {
            let got: HashSet<u64> = ivf
                .search(&codes[q], 10, n_probe, Kernel::SdcExact)
                .map_err(err)?
                .into_iter()
                .map(|n| n.id)
                .collect();
            hit += truth.iter().filter(|id| got.contains(id)).count();
        }
        curve.push(hit as f64 / (10 * queries.len()) as f64);
    }
    let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
    check(
        monotone && curve.last() == Some(&1.0),
        format!(
            "{} vectors, {n_list} lists: full probe == flat for {} queries; Recall@10 vs exact top-10 monotone over n_probe 1..={n_list}: {monotone} (n_probe=1: {:.3}, {}: {:.3})",
            codes.len(),
            queries.len(),
            curve[0],
            params.default_n_probe(),
            curve[params.default_n_probe() - 1]
        ),
    )
}

fn criterion_8() -> Outcome {
    let cfg = ExperimentConfig::default();
    let count = (cfg.num_clusters - cfg.train_clusters) * cfg.per_cluster;
    let dim_bits = cfg.dim * 32;
    let code_bytes = count * dim_bits / 16 / 8;
    let data = gen_synthetic(
        &SyntheticParams::new(cfg.num_clusters - cfg.train_clusters, cfg.per_cluster, cfg.dim, cfg.noise_sigma, 8)
            .with_latent_dim(cfg.latent_dim),
    )
    .map_err(err)?;
    let model = RbeModel::new(RbeConfig::new(cfg.dim, cfg.total_bits / cfg.ours_bits_per_dim, cfg.ours_bits_per_dim - 1), 8)
        .map_err(err)?;
    let codes = model.encode_set(&data.set).map_err(err)?;
    let geom = Geometry::of(&codes[0]);
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in [NormMode::Exact, NormMode::Q16] {
        let seg = PackedSegment::new(geom, &codes, mode).map_err(err)?;
        let padded = count.div_ceil(BLOCK_LEN) * BLOCK_LEN;
        let expected = padded * dim_bits / 16 / 8 + padded * mode.bytes();
        let payload = seg.payload_bytes();
        let file = seg.encode().len();
        let header_and_crc = file - payload;
        ok &= payload == expected && padded == count && header_and_crc == 24 + 4;
        lines.push(format!(
            "{mode}: payload {payload} B = {code_bytes} code + {} norm (file {file} B incl. {header_and_crc} B header/crc)",
            count * mode.bytes()
        ));
    }
    let float_bytes = count * dim_bits / 8;
    ok &= float_bytes == 16 * code_bytes;
    check(ok, format!("{count} vectors, float payload {float_bytes} B = 16 x codes; {}", lines.join("; ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("kernel exactness", criterion_1),
        ("ranking equivalence", criterion_2),
        ("throughput ratio", criterion_3),
        ("recall ordering", criterion_4),
        ("backward compatibility", criterion_5),
        ("training sanity", criterion_6),
        ("ivf correctness", criterion_7),
        ("compression accounting", criterion_8),
    ];
    let only: Option<HashSet<usize>> = std::env::var("RBE_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
