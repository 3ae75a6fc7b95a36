use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rbe_core::embstore::{gen_synthetic, load_embeddings, save_embeddings};
use rbe_core::eval::{bench_csv, bench_float, bench_kernels, recall_at_k, run_experiment, ExperimentConfig};
use rbe_core::index::{build_ivf, load_index, save_flat, save_ivf, AnyIndex, IvfParams};
use rbe_core::model::{load_model, save_model};
use rbe_core::trainer::{train, train_backward_compatible, write_report_csv};
use rbe_core::{
    EmbeddingSet, FlatIndex, FloatFlatIndex, Geometry, GroundTruth, Kernel, NormMode, PairList, RbeConfig, RbeModel,
    SyntheticParams, TrainConfig,
};

mod results;

#[derive(Parser)]
#[command(name = "rbe", version, about = "Recurrent binary embeddings: train, encode, index, search, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clustered synthetic dataset with pairs and ground truth.
    GenData(GenDataArgs),
    /// Convert a headerless CSV of floats (one row per line) to EMBF.
    ImportCsv(ImportCsvArgs),
    /// Train a binarization model.
    Train(TrainArgs),
    /// Train a model whose codes stay comparable with an existing model's.
    TrainBc(TrainBcArgs),
    /// Encode embeddings into a flat index directory.
    Encode(EncodeArgs),
    /// Encode embeddings and build a flat or IVF index.
    BuildIndex(BuildIndexArgs),
    /// Search an index with float queries and write ranked results as CSV.
    Search(SearchArgs),
    /// Compute Recall@k of a results CSV against ground truth.
    Eval(EvalArgs),
    /// Single-threaded latency of the scan kernels over a flat index.
    Bench(BenchArgs),
    /// Run a full experiment from a key=value config file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for data.embf, pairs.embp and truth.embg.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    clusters: usize,
    #[arg(long, default_value_t = 10)]
    per_cluster: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Dimension of the subspace holding centers and noise (full sphere when absent).
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    sigma: f32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct ImportCsvArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for [`TrainConfig`] keys, applied after `--config`.
#[derive(Args, Default)]
struct TrainFlags {
    /// key=value training config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    grad_clip_norm: Option<f32>,
    #[arg(long)]
    queue_len: Option<usize>,
    #[arg(long)]
    hard_top_k: Option<usize>,
    #[arg(long)]
    momentum_coef: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cosine_decay: Option<bool>,
    #[arg(long)]
    bc_weight: Option<f32>,
    #[arg(long)]
    val_queries: Option<usize>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        let overrides: [(&str, Option<String>); 12] = [
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("temperature", self.temperature.map(|v| v.to_string())),
            ("grad_clip_norm", self.grad_clip_norm.map(|v| v.to_string())),
            ("queue_len", self.queue_len.map(|v| v.to_string())),
            ("hard_top_k", self.hard_top_k.map(|v| v.to_string())),
            ("momentum_coef", self.momentum_coef.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("cosine_decay", self.cosine_decay.map(|v| v.to_string())),
            ("bc_weight", self.bc_weight.map(|v| v.to_string())),
            ("val_queries", self.val_queries.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Shape of a freshly initialized model.
#[derive(Args)]
struct ModelShape {
    /// Code dimension m.
    #[arg(long, default_value_t = 64)]
    code_dim: usize,
    /// Bits per dimension B (one base plane plus B-1 residual planes).
    #[arg(long = "B", default_value_t = 4)]
    bits: usize,
    /// Hidden width of the reconstruction blocks (input dimension when absent).
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
}

impl ModelShape {
    fn model(&self, input_dim: usize) -> Result<RbeModel> {
        if let Some(path) = &self.init {
            return Ok(load_model(path)?);
        }
        if self.bits == 0 {
            bail!("--B must be at least 1");
        }
        let mut cfg = RbeConfig::new(input_dim, self.code_dim, self.bits - 1);
        if let Some(h) = self.hidden_dim {
            cfg = cfg.with_hidden_dim(h);
        }
        Ok(RbeModel::new(cfg, self.model_seed)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step CSV report (appended to when it already exists).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    shape: ModelShape,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct TrainBcArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Checkpoint of the model whose index must stay searchable.
    #[arg(long)]
    old_model: PathBuf,
    /// Embeddings the old model was trained on, row-aligned with `--data`.
    #[arg(long)]
    old_data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    shape: ModelShape,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexType {
    Flat,
    Ivf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory (a flat index).
    #[arg(long)]
    out: PathBuf,
    /// Stored norm precision: exact or q16.
    #[arg(long, default_value = "exact")]
    norm_mode: NormMode,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "type", value_enum, default_value_t = IndexType::Flat)]
    kind: IndexType,
    /// Number of IVF lists (sqrt of the corpus size when absent).
    #[arg(long)]
    nlist: Option<usize>,
    /// Expected bits per dimension; must match the model.
    #[arg(long = "B")]
    bits: Option<usize>,
    #[arg(long, default_value = "exact")]
    norm_mode: NormMode,
    #[arg(long, default_value_t = 20)]
    kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Lists probed by default at search time.
    #[arg(long)]
    nprobe: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Model used to encode the queries.
    #[arg(long)]
    model: PathBuf,
    /// Float query embeddings (EMBF).
    #[arg(long)]
    queries: PathBuf,
    /// reference, bitwise, sdc-exact or sdc-q8 (index default when absent).
    #[arg(long)]
    kernel: Option<Kernel>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// IVF lists to probe (index default when absent).
    #[arg(long)]
    nprobe: Option<usize>,
    /// Drop each query's own id from its results.
    #[arg(long)]
    exclude_self: bool,
    /// Results CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Results CSV written by `search`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Per-query recall CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Flat index directory.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    query_file: PathBuf,
    /// Number of timed queries, taken from the front of the query file.
    #[arg(long, default_value_t = 200)]
    queries: usize,
    #[arg(long, value_delimiter = ',', default_value = "bitwise,sdc-exact,sdc-q8")]
    kernels: Vec<Kernel>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Float corpus for the float baseline row.
    #[arg(long)]
    float_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::ImportCsv(a) => import_csv(a),
        Command::Train(a) => train_cmd(a),
        Command::TrainBc(a) => train_bc(a),
        Command::Encode(a) => encode(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Run(a) => run(a),
    }
}

fn load_set(path: &Path) -> Result<EmbeddingSet> {
    load_embeddings(path).with_context(|| format!("loading embeddings {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut params = SyntheticParams::new(a.clusters, a.per_cluster, a.dim, a.sigma, a.seed);
    if let Some(l) = a.latent_dim {
        params = params.with_latent_dim(l);
    }
    let data = gen_synthetic(&params)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_embeddings(&data.set, a.out.join("data.embf"))?;
    data.pairs.save(a.out.join("pairs.embp"))?;
    data.truth.save(a.out.join("truth.embg"))?;
    eprintln!("{} vectors, {} pairs, {} queries with truth", data.set.len(), data.pairs.len(), data.truth.len());
    Ok(())
}

fn import_csv(a: ImportCsvArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut dim = None;
    let mut data = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("line {}", line_no + 1))?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => bail!("line {}: {} values, expected {d}", line_no + 1, row.len()),
            Some(_) => {}
        }
        data.extend(row);
    }
    let Some(dim) = dim else { bail!("{} has no rows", a.input.display()) };
    let set = EmbeddingSet::from_rows(dim, data)?;
    save_embeddings(&set, &a.out)?;
    eprintln!("{} rows of dimension {dim}", set.len());
    Ok(())
}

fn finish_training(out: &Path, report: Option<&Path>, cfg: &TrainConfig, outcome: rbe_core::TrainOutcome) -> Result<()> {
    if let Some(path) = report {
        write_report_csv(path, cfg, &outcome.steps)?;
    }
    for (e, r) in outcome.epochs.iter().enumerate() {
        eprintln!("epoch {e}: loss {:.5} bc_loss {:.5} grad_norm {:.4}", r.loss, r.bc_loss, r.grad_norm);
    }
    save_model(&outcome.model, out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let data = load_set(&a.data)?;
    let pairs = PairList::load(&a.pairs)?;
    let model = a.shape.model(data.dim())?;
    let outcome = train(&model, &data, &pairs, &cfg)?;
    finish_training(&a.out, a.report.as_deref(), &cfg, outcome)
}

fn train_bc(a: TrainBcArgs) -> Result<()> {
    let cfg = a.train.resolve()?;
    let data = load_set(&a.data)?;
    let old_data = load_set(&a.old_data)?;
    let pairs = PairList::load(&a.pairs)?;
    let old = load_model(&a.old_model)?;
    let model = a.shape.model(data.dim())?;
    let outcome = train_backward_compatible(&model, &old, &data, &old_data, &pairs, &cfg)?;
    finish_training(&a.out, a.report.as_deref(), &cfg, outcome)
}

fn encode_with(model_path: &Path, data_path: &Path) -> Result<(RbeModel, EmbeddingSet, Geometry, Vec<rbe_core::RecurrentBinaryCode>)> {
    let model = load_model(model_path)?;
    let data = load_set(data_path)?;
    let codes = model.encode_set(&data)?;
    let cfg = model.config();
    let geom = Geometry::new(cfg.code_dim, cfg.bits_per_dim())?;
    Ok((model, data, geom, codes))
}

fn encode(a: EncodeArgs) -> Result<()> {
    let (_, data, geom, codes) = encode_with(&a.model, &a.data)?;
    let index = FlatIndex::build(geom, &codes, data.ids(), a.norm_mode)?;
    save_flat(&index, &a.out)?;
    eprintln!("{} codes of {} bits", codes.len(), geom.total_bits());
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let (model, data, geom, codes) = encode_with(&a.model, &a.data)?;
    if let Some(b) = a.bits {
        if b != geom.bits_per_dim {
            bail!("--B {b} does not match the model's {} bits per dimension", geom.bits_per_dim);
        }
    }
    match a.kind {
        IndexType::Flat => save_flat(&FlatIndex::build(geom, &codes, data.ids(), a.norm_mode)?, &a.out)?,
        IndexType::Ivf => {
            let mut params = IvfParams::for_count(data.len());
            if let Some(n) = a.nlist {
                params.n_list = n;
            }
            params.kmeans_iters = a.kmeans_iters;
            params.seed = a.seed;
            params.norm_mode = a.norm_mode;
            let nprobe = a.nprobe.unwrap_or_else(|| params.default_n_probe());
            let index = build_ivf(&data, &codes, &model, &params)?;
            save_ivf(&index, &a.out, nprobe)?;
        }
    }
    eprintln!("indexed {} vectors into {}", data.len(), a.out.display());
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let (manifest, index) = load_index(&a.index)?;
    let model = load_model(&a.model)?;
    let queries = load_set(&a.queries)?;
    let codes = model.encode_set(&queries)?;
    let kernel = a.kernel.unwrap_or(manifest.default_kernel);
    let nprobe = a.nprobe.unwrap_or(manifest.default_n_probe);
    let fetch = a.k + usize::from(a.exclude_self);
    let mut rows = Vec::with_capacity(queries.len());
    for (&qid, code) in queries.ids().iter().zip(&codes) {
        let hits = match &index {
            AnyIndex::Flat(f) => f.search(code, fetch, kernel)?,
            AnyIndex::Ivf(ivf) => ivf.search(code, fetch, nprobe, kernel)?,
        };
        let hits = hits
            .into_iter()
            .filter(|n| !a.exclude_self || n.id != qid)
            .take(a.k)
            .collect();
        rows.push((qid, hits));
    }
    emit(a.out.as_deref(), &results::render(&rows))
}

fn eval(a: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    let results = results::parse(&text)?;
    let truth = GroundTruth::load(&a.truth)?;
    let report = recall_at_k(&results, &truth, a.k)?;
    if let Some(path) = &a.out {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("recall@{} {:.6} over {} queries", report.k, report.mean, report.per_query.len());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let index = match load_index(&a.index)?.1 {
        AnyIndex::Flat(f) => f,
        AnyIndex::Ivf(_) => bail!("bench scans a flat index; {} is IVF", a.index.display()),
    };
    let model = load_model(&a.model)?;
    let all = load_set(&a.query_file)?;
    let take: Vec<usize> = (0..a.queries.min(all.len())).collect();
    let queries = all.select(&take);
    let codes = model.encode_set(&queries)?;
    let mut reports = bench_kernels(&index, &codes, a.k, &a.kernels)?;
    if let Some(path) = &a.float_data {
        let floats = FloatFlatIndex::build(&load_set(path)?)?;
        reports.push(bench_float(&floats, &queries, a.k)?);
    }
    emit(a.out.as_deref(), &bench_csv(&reports))
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let summary = run_experiment(&cfg)?;
    for row in &summary.rows {
        println!(
            "{:<6} B={} m={:<4} bits={:<4} recall@{} {:.4}",
            row.method,
            row.bits_per_dim,
            row.code_dim,
            row.total_bits,
            cfg.k,
            row.mean()
        );
    }
    println!("reports in {}", summary.dir.display());
    Ok(())
}
