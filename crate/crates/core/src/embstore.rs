//! Float embedding datasets, positive pairs and ground truth.
//!
//! On-disk layouts (all little-endian):
//!
//! ```text
//! EMBF  "EMBF" | version u16 = 1 | flags u16 = 0 | count u64 | dim u32 | reserved u32
//!       | count*dim f32, row-major | crc32c(payload) u32
//! .ids  count u64 ids (sidecar next to an EMBF file)
//! EMBP  "EMBP" | count u64 | count * (anchor u64, positive u64)
//! EMBG  "EMBG" | num_queries u64 | per query: qid u64, n u32, n * u64
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{read_file, ByteReader, ByteWriter};

const EMBF_MAGIC: &[u8; 4] = b"EMBF";
const EMBF_VERSION: u16 = 1;
const EMBF_HEADER_LEN: usize = 24;
const EMBP_MAGIC: &[u8; 4] = b"EMBP";
const EMBG_MAGIC: &[u8; 4] = b"EMBG";

/// A dense `count x dim` matrix of finite `f32` rows, each with a unique id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        let count = data.len() / dim;
        if ids.len() != count {
            return Err(Error::invalid(format!(
                "{} ids for {count} rows",
                ids.len()
            )));
        }
        if let Some(row) = first_non_finite_row(&data, dim) {
            return Err(Error::NonFinite { row });
        }
        let mut seen = HashSet::with_capacity(count);
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self { dim, data, ids })
    }

    /// Rows with ids `0..count`.
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        let count = data.len().checked_div(dim).unwrap_or(0);
        Self::new(dim, data, (0..count as u64).collect())
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Row view as an ndarray matrix.
    pub fn matrix(&self) -> ndarray::ArrayView2<'_, f32> {
        ndarray::ArrayView2::from_shape((self.len(), self.dim), &self.data)
            .expect("shape checked at construction")
    }

    pub fn id_index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Copies the given rows (by position) into a new set, keeping their ids.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            ids.push(self.ids[r]);
        }
        Self {
            dim: self.dim,
            data,
            ids,
        }
    }

    /// Simulates an upgraded backbone: every row plus isotropic Gaussian
    /// drift of standard deviation `sigma` per coordinate, renormalized.
    pub fn drifted(&self, sigma: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.dim) {
            for x in row.iter_mut() {
                let n: f32 = rng.sample(StandardNormal);
                *x += sigma * n;
            }
            normalize_in_place(row);
        }
        Self {
            dim: self.dim,
            data,
            ids: self.ids.clone(),
        }
    }
}

fn first_non_finite_row(data: &[f32], dim: usize) -> Option<usize> {
    data.iter().position(|x| !x.is_finite()).map(|p| p / dim)
}

pub(crate) fn normalize_in_place(row: &mut [f32]) {
    let norm = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in row.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

fn ids_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Encodes a set as EMBF bytes (without the id sidecar).
pub fn encode_embf(set: &EmbeddingSet) -> Vec<u8> {
    let mut w = ByteWriter::with_capacity(EMBF_HEADER_LEN + set.data.len() * 4 + 4);
    w.bytes(EMBF_MAGIC);
    w.u16(EMBF_VERSION);
    w.u16(0);
    w.u64(set.len() as u64);
    w.u32(set.dim as u32);
    w.u32(0);
    w.f32s(&set.data);
    let crc = crc32c::crc32c(&w.as_slice()[EMBF_HEADER_LEN..]);
    w.u32(crc);
    w.into_inner()
}

/// Decodes EMBF bytes; ids default to `0..count`.
pub fn decode_embf(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = ByteReader::new(bytes, "EMBF file");
    r.magic(EMBF_MAGIC)?;
    let version = r.u16()?;
    if version != EMBF_VERSION {
        return Err(Error::format("EMBF file", format!("unsupported version {version}")));
    }
    let flags = r.u16()?;
    if flags != 0 {
        return Err(Error::format("EMBF file", format!("unknown flags {flags:#x}")));
    }
    let count = r.u64()?;
    let dim = r.u32()? as usize;
    let _reserved = r.u32()?;
    if dim == 0 {
        return Err(Error::format("EMBF file", "dim is zero"));
    }
    let n = r.check_len(count.saturating_mul(dim as u64), 4)?;
    let payload_start = r.position();
    let data = r.f32s(n)?;
    let computed = crc32c::crc32c(&bytes[payload_start..r.position()]);
    let stored = r.u32()?;
    if stored != computed {
        return Err(Error::Checksum {
            what: "EMBF payload",
            stored,
            computed,
        });
    }
    r.finish()?;
    if let Some(row) = first_non_finite_row(&data, dim) {
        return Err(Error::NonFinite { row });
    }
    EmbeddingSet::from_rows(dim, data)
}

/// Writes the EMBF file and its `.ids` sidecar.
pub fn save_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embf(set)).map_err(|e| Error::io(path, e))?;
    let mut w = ByteWriter::with_capacity(set.len() * 8);
    for &id in &set.ids {
        w.u64(id);
    }
    w.write_to(&ids_sidecar(path))
}

/// Reads an EMBF file; ids come from the `.ids` sidecar when present.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let mut set = decode_embf(&read_file(path)?)?;
    let sidecar = ids_sidecar(path);
    if sidecar.exists() {
        let bytes = read_file(&sidecar)?;
        if bytes.len() != set.len() * 8 {
            return Err(Error::format(
                "ids sidecar",
                format!("{} bytes for {} rows", bytes.len(), set.len()),
            ));
        }
        let ids: Vec<u64> = bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set = EmbeddingSet::new(set.dim, set.data, ids)?;
    }
    Ok(set)
}

/// Ordered (anchor, positive) id pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<(u64, u64)>,
}

impl PairList {
    pub fn new(pairs: Vec<(u64, u64)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks that anchors resolve in `anchors`, positives in `positives`,
    /// and that no pair is reflexive when both sides use the same set.
    pub fn validate(&self, anchors: &EmbeddingSet, positives: &EmbeddingSet) -> Result<()> {
        let a: HashSet<u64> = anchors.ids().iter().copied().collect();
        let same = std::ptr::eq(anchors, positives);
        let p: HashSet<u64> = if same {
            a.clone()
        } else {
            positives.ids().iter().copied().collect()
        };
        for &(x, y) in &self.pairs {
            if !a.contains(&x) {
                return Err(Error::UnknownId(x));
            }
            if !p.contains(&y) {
                return Err(Error::UnknownId(y));
            }
            if same && x == y {
                return Err(Error::invalid(format!("reflexive pair ({x}, {x})")));
            }
        }
        Ok(())
    }

    /// Connected components of the pair graph, as a map from id to the
    /// smallest id in its component. Ids in one component are treated as
    /// the same underlying item when mining negatives.
    pub fn groups(&self) -> HashMap<u64, u64> {
        let mut parent: HashMap<u64, u64> = HashMap::new();
        fn find(parent: &mut HashMap<u64, u64>, x: u64) -> u64 {
            let mut root = x;
            while let Some(&p) = parent.get(&root) {
                if p == root {
                    break;
                }
                root = p;
            }
            let mut cur = x;
            while cur != root {
                let next = parent[&cur];
                parent.insert(cur, root);
                cur = next;
            }
            root
        }
        for &(a, b) in &self.pairs {
            parent.entry(a).or_insert(a);
            parent.entry(b).or_insert(b);
            let ra = find(&mut parent, a);
            let rb = find(&mut parent, b);
            if ra != rb {
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                parent.insert(hi, lo);
            }
        }
        let keys: Vec<u64> = parent.keys().copied().collect();
        keys.into_iter()
            .map(|k| (k, find(&mut parent, k)))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::with_capacity(12 + self.pairs.len() * 16);
        w.bytes(EMBP_MAGIC);
        w.u64(self.pairs.len() as u64);
        for &(a, b) in &self.pairs {
            w.u64(a);
            w.u64(b);
        }
        w.write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let mut r = ByteReader::new(&bytes, "EMBP file");
        r.magic(EMBP_MAGIC)?;
        let count = r.u64()?;
        let n = r.check_len(count, 16)?;
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            pairs.push((r.u64()?, r.u64()?));
        }
        r.finish()?;
        Ok(Self { pairs })
    }
}

/// Relevant document ids per query id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    entries: BTreeMap<u64, Vec<u64>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: u64, relevant: Vec<u64>) -> Result<()> {
        if relevant.is_empty() {
            return Err(Error::invalid(format!(
                "query {query} has no relevant documents"
            )));
        }
        self.entries.insert(query, relevant);
        Ok(())
    }

    pub fn get(&self, query: u64) -> Option<&[u64]> {
        self.entries.get(&query).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[u64])> {
        self.entries.iter().map(|(&q, r)| (q, r.as_slice()))
    }

    /// Every referenced id must exist in `docs` (and queries in `queries`).
    pub fn validate(&self, queries: &EmbeddingSet, docs: &EmbeddingSet) -> Result<()> {
        let q: HashSet<u64> = queries.ids().iter().copied().collect();
        let d: HashSet<u64> = docs.ids().iter().copied().collect();
        for (qid, rel) in self.iter() {
            if !q.contains(&qid) {
                return Err(Error::UnknownId(qid));
            }
            if let Some(&bad) = rel.iter().find(|id| !d.contains(id)) {
                return Err(Error::UnknownId(bad));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(EMBG_MAGIC);
        w.u64(self.entries.len() as u64);
        for (&q, rel) in &self.entries {
            w.u64(q);
            w.u32(rel.len() as u32);
            for &d in rel {
                w.u64(d);
            }
        }
        w.write_to(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let mut r = ByteReader::new(&bytes, "EMBG file");
        r.magic(EMBG_MAGIC)?;
        let nq = r.u64()?;
        let nq = r.check_len(nq, 12)?;
        let mut truth = GroundTruth::new();
        for _ in 0..nq {
            let q = r.u64()?;
            let n = r.u32()? as u64;
            let n = r.check_len(n, 8)?;
            let rel = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            truth
                .insert(q, rel)
                .map_err(|e| Error::format("EMBG file", e.to_string()))?;
        }
        r.finish()?;
        Ok(truth)
    }
}

/// Parameters of the clustered synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub num_clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    /// When set, centers and noise live in a random `latent_dim`-dimensional
    /// subspace of the ambient space instead of the full sphere.
    pub latent_dim: Option<usize>,
}

impl SyntheticParams {
    pub fn new(num_clusters: usize, per_cluster: usize, dim: usize, noise_sigma: f32, seed: u64) -> Self {
        Self {
            num_clusters,
            per_cluster,
            dim,
            noise_sigma,
            seed,
            latent_dim: None,
        }
    }

    pub fn with_latent_dim(mut self, latent_dim: usize) -> Self {
        self.latent_dim = Some(latent_dim);
        self
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub set: EmbeddingSet,
    pub pairs: PairList,
    pub truth: GroundTruth,
}

/// Clustered unit vectors: centers uniform on the unit sphere, members are
/// `center + N(0, sigma^2 I)` renormalized. Member `j` of cluster `c` has id
/// `c * per_cluster + j`; each member is paired with the next member of its
/// cluster (cyclically) and its ground truth is all of its siblings.
pub fn gen_synthetic(params: &SyntheticParams) -> Result<SyntheticData> {
    let &SyntheticParams {
        num_clusters,
        per_cluster,
        dim,
        noise_sigma,
        seed,
        latent_dim,
    } = params;
    if num_clusters == 0 || per_cluster == 0 || dim == 0 {
        return Err(Error::invalid("cluster count, cluster size and dim must be positive"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise_sigma must be finite and non-negative"));
    }
    let latent = latent_dim.unwrap_or(dim);
    if latent == 0 || latent > dim {
        return Err(Error::invalid(format!("latent_dim {latent} not in 1..={dim}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = if latent < dim {
        Some(random_orthonormal_basis(&mut rng, dim, latent))
    } else {
        None
    };

    let count = num_clusters * per_cluster;
    let mut data = Vec::with_capacity(count * dim);
    let mut center = vec![0f32; latent];
    let mut member = vec![0f32; latent];
    for _ in 0..num_clusters {
        for c in center.iter_mut() {
            *c = rng.sample(StandardNormal);
        }
        normalize_in_place(&mut center);
        for _ in 0..per_cluster {
            for (m, &c) in member.iter_mut().zip(&center) {
                let n: f32 = rng.sample(StandardNormal);
                *m = c + noise_sigma * n;
            }
            normalize_in_place(&mut member);
            match &basis {
                None => data.extend_from_slice(&member),
                Some(b) => {
                    // b is latent x dim with orthonormal rows
                    let start = data.len();
                    data.resize(start + dim, 0.0);
                    let out = &mut data[start..];
                    for (k, &z) in member.iter().enumerate() {
                        let row = &b[k * dim..(k + 1) * dim];
                        for (o, &bv) in out.iter_mut().zip(row) {
                            *o += (z as f64 * bv) as f32;
                        }
                    }
                    normalize_in_place(out);
                }
            }
        }
    }
    let set = EmbeddingSet::from_rows(dim, data)?;

    let mut pairs = Vec::new();
    let mut truth = GroundTruth::new();
    if per_cluster >= 2 {
        pairs.reserve(count);
        for c in 0..num_clusters {
            let base = (c * per_cluster) as u64;
            let pc = per_cluster as u64;
            for j in 0..pc {
                pairs.push((base + j, base + (j + 1) % pc));
                let siblings = (0..pc).filter(|&s| s != j).map(|s| base + s).collect();
                truth.insert(base + j, siblings)?;
            }
        }
    }
    Ok(SyntheticData {
        set,
        pairs: PairList::new(pairs),
        truth,
    })
}

/// `k` orthonormal rows of length `dim` (modified Gram-Schmidt in f64).
fn random_orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Vec<f64> {
    let mut basis = vec![0f64; k * dim];
    let mut i = 0;
    while i < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..i {
            let b = &basis[j * dim..(j + 1) * dim];
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for (dst, x) in basis[i * dim..(i + 1) * dim].iter_mut().zip(&v) {
            *dst = x / norm;
        }
        i += 1;
    }
    basis
}
