use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::RetrievalBenchmark;
use crate::embstore::{gen_synthetic, SyntheticParams};
use crate::error::{Error, Result};
use crate::index::Kernel;
use crate::model::{load_model, RbeConfig, RbeModel};
use crate::trainer::{report_csv, train, TrainConfig};

/// Overrides the report directory of [`run_experiment`].
pub const REPORT_DIR_ENV: &str = "RBE_REPORT_DIR";

/// Flat `key=value` experiment description. Keys prefixed with `train.`
/// are forwarded to [`TrainConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub report_dir: PathBuf,
    pub num_clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    /// 0 keeps clusters on the full sphere.
    pub latent_dim: usize,
    pub noise_sigma: f32,
    pub data_seed: u64,
    pub train_clusters: usize,
    pub num_queries: usize,
    pub total_bits: usize,
    pub ours_bits_per_dim: usize,
    pub hash_bits_per_dim: usize,
    pub k: usize,
    pub kernel: Kernel,
    /// Independent model seeds averaged per method.
    pub runs: usize,
    pub model_seed: u64,
    /// Checkpoint used for the `ours` row instead of training one.
    pub model_path: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    /// The `table2_analogue` experiment.
    fn default() -> Self {
        Self {
            name: "table2_analogue".into(),
            report_dir: PathBuf::from("reports"),
            num_clusters: 20_000,
            per_cluster: 10,
            dim: 128,
            latent_dim: 32,
            noise_sigma: 0.09,
            data_seed: 7,
            train_clusters: 10_000,
            num_queries: 1000,
            total_bits: 256,
            ours_bits_per_dim: 4,
            hash_bits_per_dim: 1,
            k: 10,
            kernel: Kernel::SdcExact,
            runs: 1,
            model_seed: 0,
            model_path: None,
            train: TrainConfig {
                learning_rate: 0.01,
                momentum_coef: 0.99,
                cosine_decay: true,
                epochs: 6,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let (key, value) = (key.trim(), value.trim());
        if let Some(tk) = key.strip_prefix("train.") {
            return self.train.set(tk, value);
        }
        match key {
            "name" => self.name = value.into(),
            "report_dir" => self.report_dir = value.into(),
            "num_clusters" => self.num_clusters = parse(key, value)?,
            "per_cluster" => self.per_cluster = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "train_clusters" => self.train_clusters = parse(key, value)?,
            "num_queries" => self.num_queries = parse(key, value)?,
            "total_bits" => self.total_bits = parse(key, value)?,
            "ours_bits_per_dim" => self.ours_bits_per_dim = parse(key, value)?,
            "hash_bits_per_dim" => self.hash_bits_per_dim = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "kernel" => self.kernel = value.parse()?,
            "runs" => self.runs = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "model_path" => self.model_path = (!value.is_empty()).then(|| value.into()),
            other => return Err(Error::Config(format!("unknown experiment key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for b in [self.ours_bits_per_dim, self.hash_bits_per_dim] {
            if b == 0 || !self.total_bits.is_multiple_of(b) {
                return Err(Error::Config(format!(
                    "total_bits {} is not a multiple of {b} bits per dimension",
                    self.total_bits
                )));
            }
        }
        if self.runs == 0 || self.k == 0 || self.num_queries == 0 {
            return Err(Error::Config("runs, k and num_queries must be positive".into()));
        }
        if self.latent_dim > self.dim {
            return Err(Error::Config(format!("latent_dim {} exceeds dim {}", self.latent_dim, self.dim)));
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name={}", self.name);
        let _ = writeln!(s, "report_dir={}", self.report_dir.display());
        let _ = writeln!(s, "num_clusters={}", self.num_clusters);
        let _ = writeln!(s, "per_cluster={}", self.per_cluster);
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "latent_dim={}", self.latent_dim);
        let _ = writeln!(s, "noise_sigma={}", self.noise_sigma);
        let _ = writeln!(s, "data_seed={}", self.data_seed);
        let _ = writeln!(s, "train_clusters={}", self.train_clusters);
        let _ = writeln!(s, "num_queries={}", self.num_queries);
        let _ = writeln!(s, "total_bits={}", self.total_bits);
        let _ = writeln!(s, "ours_bits_per_dim={}", self.ours_bits_per_dim);
        let _ = writeln!(s, "hash_bits_per_dim={}", self.hash_bits_per_dim);
        let _ = writeln!(s, "k={}", self.k);
        let _ = writeln!(s, "kernel={}", self.kernel);
        let _ = writeln!(s, "runs={}", self.runs);
        let _ = writeln!(s, "model_seed={}", self.model_seed);
        let _ = writeln!(
            s,
            "model_path={}",
            self.model_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        );
        for line in self.train.to_kv_text().lines() {
            let _ = writeln!(s, "train.{line}");
        }
        s
    }

    fn synthetic(&self) -> SyntheticParams {
        let p = SyntheticParams::new(self.num_clusters, self.per_cluster, self.dim, self.noise_sigma, self.data_seed);
        if self.latent_dim > 0 {
            p.with_latent_dim(self.latent_dim)
        } else {
            p
        }
    }
}

/// One row of `recall.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub bits_per_dim: usize,
    pub code_dim: usize,
    pub total_bits: usize,
    /// Recall@k per run.
    pub recalls: Vec<f64>,
}

impl MethodRow {
    pub fn mean(&self) -> f64 {
        self.recalls.iter().sum::<f64>() / self.recalls.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub dir: PathBuf,
    pub rows: Vec<MethodRow>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.into(),
        source: Box::new(e),
    })
}

fn version_stamp() -> String {
    let described = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("rbe {} ({d})", env!("CARGO_PKG_VERSION")),
        None => format!("rbe {}", env!("CARGO_PKG_VERSION")),
    }
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Runs gen-data, train, encode, build, search and eval for the hash, ours
/// and float rows and writes the reports under `report_dir/name` (or
/// `$RBE_REPORT_DIR/name`).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    stage("config", cfg.validate())?;
    let root = std::env::var_os(REPORT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.report_dir.clone());
    let dir = root.join(&cfg.name);
    stage("config", fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)))?;
    stage("config", write(dir.join("config.txt"), &cfg.to_kv_text()))?;
    stage("config", write(dir.join("version.txt"), &format!("{}\n", version_stamp())))?;

    let pretrained = match &cfg.model_path {
        Some(p) => Some(stage("train", load_model(p))?),
        None => None,
    };
    let data = stage("gen-data", gen_synthetic(&cfg.synthetic()))?;
    let bench = stage(
        "gen-data",
        RetrievalBenchmark::split(&data, cfg.per_cluster, cfg.train_clusters, cfg.num_queries, cfg.data_seed),
    )?;

    let mut rows = Vec::new();
    for (method, bits) in [("hash", cfg.hash_bits_per_dim), ("ours", cfg.ours_bits_per_dim)] {
        let code_dim = cfg.total_bits / bits;
        let mut row = MethodRow {
            method: method.into(),
            bits_per_dim: bits,
            code_dim,
            total_bits: cfg.total_bits,
            recalls: Vec::new(),
        };
        for run in 0..cfg.runs {
            let seed = cfg.model_seed + run as u64;
            let model = match (&pretrained, method) {
                (Some(m), "ours") => m.clone(),
                _ => {
                    let config = RbeConfig::new(cfg.dim, code_dim, bits - 1);
                    let init = stage("train", RbeModel::new(config, seed))?;
                    let tcfg = TrainConfig {
                        seed,
                        ..cfg.train.clone()
                    };
                    let out = stage("train", train(&init, &bench.train, &bench.train_pairs, &tcfg))?;
                    stage(
                        "train",
                        write(dir.join(format!("train_{method}_run{run}.csv")), &report_csv(&tcfg, &out.epochs)),
                    )?;
                    out.model
                }
            };
            let codes = stage("encode", model.encode_set(&bench.corpus))?;
            let kernel = if method == "ours" { cfg.kernel } else { Kernel::Bitwise };
            let report = stage("search", bench.code_recall(&codes, &codes, cfg.k, kernel))?;
            row.recalls.push(report.mean);
            stage(
                "eval",
                write(dir.join(format!("recall_{method}_run{run}.csv")), &report.to_csv()),
            )?;
        }
        rows.push(row);
    }
    let float = stage("eval", bench.float_recall(cfg.k))?;
    rows.push(MethodRow {
        method: "float".into(),
        bits_per_dim: 32,
        code_dim: cfg.dim,
        total_bits: 32 * cfg.dim,
        recalls: vec![float.mean],
    });

    let mut csv = format!("method,bits_per_dim,code_dim,total_bits,runs,recall@{}\n", cfg.k);
    let mut summary = format!("{}\n{}\n", cfg.name, version_stamp());
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.6}",
            r.method,
            r.bits_per_dim,
            r.code_dim,
            r.total_bits,
            r.recalls.len(),
            r.mean()
        );
        let _ = writeln!(summary, "{:<6} B={:<2} m={:<4} recall@{} {:.4}", r.method, r.bits_per_dim, r.code_dim, cfg.k, r.mean());
    }
    stage("eval", write(dir.join("recall.csv"), &csv))?;
    stage("eval", write(dir.join("summary.txt"), &summary))?;
    Ok(ExperimentSummary { dir, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let text = "\
name=small
num_clusters=120
per_cluster=5
dim=32
latent_dim=8
noise_sigma=0.1
train_clusters=80
num_queries=40
total_bits=64
train.batch_size=32
train.queue_len=128
train.hard_top_k=16
train.epochs=2
";
        ExperimentConfig::parse(text).unwrap()
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = small();
        assert_eq!(ExperimentConfig::parse(&cfg.to_kv_text()).unwrap(), cfg);
        assert!(ExperimentConfig::parse("bogus=1").is_err());
        assert!(ExperimentConfig::parse("train.bogus=1").is_err());
    }

    #[test]
    fn pipeline_is_deterministic_and_writes_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.report_dir = tmp.path().to_path_buf();
        let a = run_experiment(&cfg).unwrap();
        let methods: Vec<&str> = a.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["hash", "ours", "float"]);
        let first = fs::read_to_string(a.dir.join("recall.csv")).unwrap();
        assert_eq!(first.lines().count(), 4);
        assert!(a.dir.join("config.txt").exists() && a.dir.join("version.txt").exists());
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(fs::read_to_string(b.dir.join("recall.csv")).unwrap(), first);
    }

    #[test]
    fn missing_model_names_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.report_dir = tmp.path().to_path_buf();
        cfg.model_path = Some(tmp.path().join("nope.rbem"));
        let err = run_experiment(&cfg).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage, .. } if stage == "train"));
        assert!(err.to_string().contains("nope.rbem"), "{err}");
    }
}
