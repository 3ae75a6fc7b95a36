//! Recall, latency benchmarks and the experiment runner.

mod experiment;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentSummary, MethodRow, REPORT_DIR_ENV};

use crate::embstore::{EmbeddingSet, GroundTruth, PairList, SyntheticData};
use crate::error::{Error, Result};
use crate::index::{FlatIndex, FloatFlatIndex, Kernel, Neighbor, TopK};
use crate::model::RecurrentBinaryCode;

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub k: usize,
    /// `(query id, recall)` in input order.
    pub per_query: Vec<(u64, f64)>,
    pub mean: f64,
    pub dataset: String,
    pub model: String,
    pub kernel: String,
}

impl RecallReport {
    pub fn labelled(mut self, dataset: &str, model: &str, kernel: &str) -> Self {
        self.dataset = dataset.into();
        self.model = model.into();
        self.kernel = kernel.into();
        self
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("query,recall@{}\n", self.k);
        for (q, r) in &self.per_query {
            let _ = writeln!(s, "{q},{r:.6}");
        }
        s
    }
}

/// Per query `|relevant ∩ top-k| / |relevant|`, averaged.
///
/// `results` holds ranked ids per query; only the first `k` count. Every
/// query must have ground truth.
pub fn recall_at_k(results: &[(u64, Vec<u64>)], truth: &GroundTruth, k: usize) -> Result<RecallReport> {
    let mut per_query = Vec::with_capacity(results.len());
    for (q, ids) in results {
        let relevant = truth.get(*q).ok_or(Error::UnknownId(*q))?;
        let rel: HashSet<u64> = relevant.iter().copied().collect();
        let top: HashSet<u64> = ids.iter().take(k).copied().collect();
        let r = if rel.is_empty() {
            0.0
        } else {
            rel.intersection(&top).count() as f64 / rel.len() as f64
        };
        per_query.push((*q, r));
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|p| p.1).sum::<f64>() / per_query.len() as f64
    };
    Ok(RecallReport {
        k,
        per_query,
        mean,
        dataset: String::new(),
        model: String::new(),
        kernel: String::new(),
    })
}

/// Drops `query` from a ranked list (searched with `k + 1`) and keeps `k`.
pub fn leave_one_out(hits: Vec<Neighbor>, query: u64, k: usize) -> Vec<u64> {
    hits.into_iter().map(|n| n.id).filter(|&id| id != query).take(k).collect()
}

/// Train/eval split of a clustered synthetic set: the first
/// `train_clusters` clusters train the model, the rest form the corpus, and
/// `num_queries` corpus members are searched leave-one-out against it.
#[derive(Debug, Clone)]
pub struct RetrievalBenchmark {
    pub train: EmbeddingSet,
    pub train_pairs: PairList,
    pub corpus: EmbeddingSet,
    /// Query ids, all members of the corpus.
    pub queries: Vec<u64>,
    /// Rows of `queries` inside `corpus`.
    pub query_rows: Vec<usize>,
    pub truth: GroundTruth,
}

impl RetrievalBenchmark {
    pub fn split(data: &SyntheticData, per_cluster: usize, train_clusters: usize, num_queries: usize, seed: u64) -> Result<Self> {
        let n = data.set.len();
        let cut = train_clusters * per_cluster;
        if per_cluster == 0 || !n.is_multiple_of(per_cluster) || cut >= n {
            return Err(Error::invalid(format!(
                "cannot hold out clusters: {n} rows, {per_cluster} per cluster, {train_clusters} for training"
            )));
        }
        let train_rows: Vec<usize> = (0..cut).collect();
        let corpus_rows: Vec<usize> = (cut..n).collect();
        let train = data.set.select(&train_rows);
        let corpus = data.set.select(&corpus_rows);
        let train_ids: HashSet<u64> = train.ids().iter().copied().collect();
        let train_pairs = PairList::new(
            data.pairs
                .pairs
                .iter()
                .copied()
                .filter(|(a, p)| train_ids.contains(a) && train_ids.contains(p))
                .collect(),
        );
        let take = num_queries.min(corpus.len());
        let mut query_rows = sample(&mut ChaCha8Rng::seed_from_u64(seed), corpus.len(), take).into_vec();
        query_rows.sort_unstable();
        let queries: Vec<u64> = query_rows.iter().map(|&r| corpus.ids()[r]).collect();
        let mut truth = GroundTruth::new();
        for &q in &queries {
            let rel = data.truth.get(q).ok_or(Error::UnknownId(q))?;
            truth.insert(q, rel.to_vec())?;
        }
        Ok(Self {
            train,
            train_pairs,
            corpus,
            queries,
            query_rows,
            truth,
        })
    }

    /// Leave-one-out recall with queries encoded by `query_codes` (aligned
    /// with the corpus rows) against an index of `corpus_codes`.
    pub fn code_recall(
        &self,
        corpus_codes: &[RecurrentBinaryCode],
        query_codes: &[RecurrentBinaryCode],
        k: usize,
        kernel: Kernel,
    ) -> Result<RecallReport> {
        let geom = crate::codec::Geometry::of(corpus_codes.first().ok_or_else(|| Error::invalid("empty corpus"))?);
        let index = FlatIndex::build(geom, corpus_codes, self.corpus.ids(), crate::codec::NormMode::Exact)?;
        let results = self
            .queries
            .iter()
            .zip(&self.query_rows)
            .map(|(&q, &r)| Ok((q, leave_one_out(index.search(&query_codes[r], k + 1, kernel)?, q, k))))
            .collect::<Result<Vec<_>>>()?;
        recall_at_k(&results, &self.truth, k).map(|r| r.labelled("synthetic", "rbe", kernel.name()))
    }

    /// Leave-one-out recall of exact cosine search on the float corpus.
    pub fn float_recall(&self, k: usize) -> Result<RecallReport> {
        let index = FloatFlatIndex::build(&self.corpus)?;
        let results = self
            .queries
            .iter()
            .zip(&self.query_rows)
            .map(|(&q, &r)| Ok((q, leave_one_out(index.search(self.corpus.row(r), k + 1)?, q, k))))
            .collect::<Result<Vec<_>>>()?;
        recall_at_k(&results, &self.truth, k).map(|r| r.labelled("synthetic", "float", "float"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub kernel: String,
    pub bits: usize,
    pub total_vectors: usize,
    pub queries: usize,
    pub seconds_per_query: f64,
    pub qps: f64,
    pub threads: usize,
}

pub const BENCH_COLUMNS: &str = "kernel,bits,total_vectors,queries,seconds_per_query,qps,threads";

pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut s = format!("{BENCH_COLUMNS}\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.9},{:.3},{}",
            r.kernel, r.bits, r.total_vectors, r.queries, r.seconds_per_query, r.qps, r.threads
        );
    }
    s
}

const WARMUP_QUERIES: usize = 8;

fn timed(name: &str, bits: usize, total: usize, queries: usize, mut run: impl FnMut(usize) -> Result<()>) -> Result<BenchReport> {
    if queries == 0 {
        return Err(Error::invalid("no queries to measure"));
    }
    for q in 0..queries.min(WARMUP_QUERIES) {
        run(q)?;
    }
    let start = Instant::now();
    for q in 0..queries {
        run(q)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        kernel: name.into(),
        bits,
        total_vectors: total,
        queries,
        seconds_per_query: elapsed / queries as f64,
        qps: queries as f64 / elapsed,
        threads: 1,
    })
}

/// Single-threaded exhaustive search latency per kernel. A short warm-up
/// precedes the timed pass over all `queries`.
pub fn bench_kernels(index: &FlatIndex, queries: &[RecurrentBinaryCode], k: usize, kernels: &[Kernel]) -> Result<Vec<BenchReport>> {
    let bits = index.geometry().total_bits();
    kernels
        .iter()
        .map(|&kernel| {
            let mut top = TopK::new(k);
            timed(kernel.name(), bits, index.len(), queries.len(), |q| {
                top = TopK::new(k);
                index.scan_into(&queries[q], kernel, &mut top)
            })
        })
        .collect()
}

/// Float cosine baseline with the same protocol as [`bench_kernels`].
pub fn bench_float(index: &FloatFlatIndex, queries: &EmbeddingSet, k: usize) -> Result<BenchReport> {
    timed("float", 32 * queries.dim(), index.len(), queries.len(), |q| {
        index.search(queries.row(q), k).map(|_| ())
    })
}
