//! Index directories.
//!
//! ```text
//! manifest.txt        key=value lines: kind, geometry, norm mode, defaults
//! codes.rbei          all codes as one RBEI segment (IVF: grouped by list)
//! codes.rbei.ids      u64 ids in segment order
//! offsets.bin         IVF only: "RBEO" | n_list u64 | (n_list + 1) u64 | crc32c
//! centroids.embf      IVF only: float centroids (EMBF)
//! centroids.rbei      IVF only: centroid codes
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{FlatIndex, IvfIndex, Kernel};
use crate::codec::{Geometry, NormMode, PackedSegment};
use crate::embstore::{load_embeddings, save_embeddings, EmbeddingSet};
use crate::error::{Error, Result};
use crate::io::{read_file, ByteReader, ByteWriter};
use crate::model::RecurrentBinaryCode;

const MANIFEST: &str = "manifest.txt";
const CODES: &str = "codes.rbei";
const IDS: &str = "codes.rbei.ids";
const OFFSETS: &str = "offsets.bin";
const CENTROIDS: &str = "centroids.embf";
const CENTROID_CODES: &str = "centroids.rbei";
const OFFSETS_MAGIC: &[u8; 4] = b"RBEO";

/// Parsed `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexManifest {
    pub kind: String,
    pub geometry: Geometry,
    pub norm_mode: NormMode,
    pub count: usize,
    pub n_list: usize,
    pub default_kernel: Kernel,
    pub default_n_probe: usize,
}

impl IndexManifest {
    fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format=rbe-index");
        let _ = writeln!(s, "version=1");
        let _ = writeln!(s, "kind={}", self.kind);
        let _ = writeln!(s, "code_dim={}", self.geometry.code_dim);
        let _ = writeln!(s, "bits_per_dim={}", self.geometry.bits_per_dim);
        let _ = writeln!(s, "norm_mode={}", self.norm_mode);
        let _ = writeln!(s, "count={}", self.count);
        let _ = writeln!(s, "n_list={}", self.n_list);
        let _ = writeln!(s, "default_kernel={}", self.default_kernel);
        let _ = writeln!(s, "default_n_probe={}", self.default_n_probe);
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::format("index manifest", detail);
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| bad(format!("{k} is not a number")))
        };
        if get("format")? != "rbe-index" || get("version")? != "1" {
            return Err(bad("unsupported format or version".into()));
        }
        let kind = get("kind")?.to_owned();
        if kind != "flat" && kind != "ivf" {
            return Err(bad(format!("unknown kind {kind:?}")));
        }
        Ok(Self {
            kind,
            geometry: Geometry::new(num("code_dim")?, num("bits_per_dim")?)?,
            norm_mode: get("norm_mode")?.parse()?,
            count: num("count")?,
            n_list: num("n_list")?,
            default_kernel: get("default_kernel")?.parse()?,
            default_n_probe: num("default_n_probe")?,
        })
    }
}

/// A loaded index of either kind.
#[derive(Debug, Clone)]
pub enum AnyIndex {
    Flat(FlatIndex),
    Ivf(IvfIndex),
}

fn write_ids(path: &Path, ids: impl IntoIterator<Item = u64>) -> Result<()> {
    let mut w = ByteWriter::default();
    for id in ids {
        w.u64(id);
    }
    w.write_to(path)
}

fn read_ids(path: &Path, count: usize) -> Result<Vec<u64>> {
    let bytes = read_file(path)?;
    if bytes.len() != count * 8 {
        return Err(Error::format("index ids", format!("{} bytes for {count} ids", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn segment_of(geom: Geometry, codes: &[RecurrentBinaryCode], mode: NormMode) -> Result<PackedSegment> {
    PackedSegment::new(geom, codes, mode)
}

pub fn save_flat(index: &FlatIndex, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    prepare_dir(dir)?;
    let seg = match index.packed() {
        Some(p) => p.clone(),
        None => segment_of(index.geometry(), &index.codes(), index.norm_mode())?,
    };
    seg.save(dir.join(CODES))?;
    write_ids(&dir.join(IDS), index.ids().iter().copied())?;
    let manifest = IndexManifest {
        kind: "flat".into(),
        geometry: index.geometry(),
        norm_mode: index.norm_mode(),
        count: index.len(),
        n_list: 1,
        default_kernel: Kernel::SdcExact,
        default_n_probe: 1,
    };
    write_text(dir.join(MANIFEST), &manifest.render())
}

pub fn save_ivf(index: &IvfIndex, dir: impl AsRef<Path>, default_n_probe: usize) -> Result<()> {
    let dir = dir.as_ref();
    prepare_dir(dir)?;
    let geom = index.geometry();
    let mode = index.norm_mode();
    let mut codes = Vec::with_capacity(index.len());
    let mut offsets = Vec::with_capacity(index.n_list() + 1);
    offsets.push(0u64);
    for list in index.lists() {
        codes.extend(list.codes());
        offsets.push(codes.len() as u64);
    }
    segment_of(geom, &codes, mode)?.save(dir.join(CODES))?;
    write_ids(&dir.join(IDS), index.lists().iter().flat_map(|l| l.ids().iter().copied()))?;

    let mut w = ByteWriter::default();
    w.bytes(OFFSETS_MAGIC);
    w.u64(index.n_list() as u64);
    for o in &offsets {
        w.u64(*o);
    }
    w.seal();
    w.write_to(&dir.join(OFFSETS))?;

    let c = index.centroids();
    let centroids = EmbeddingSet::from_rows(c.ncols(), c.iter().copied().collect())?;
    save_embeddings(&centroids, dir.join(CENTROIDS))?;
    let coarse = index.coarse();
    segment_of(geom, &coarse.codes(), mode)?.save(dir.join(CENTROID_CODES))?;

    let manifest = IndexManifest {
        kind: "ivf".into(),
        geometry: geom,
        norm_mode: mode,
        count: index.len(),
        n_list: index.n_list(),
        default_kernel: Kernel::SdcExact,
        default_n_probe,
    };
    write_text(dir.join(MANIFEST), &manifest.render())
}

fn read_offsets(path: &Path, n_list: usize, count: usize) -> Result<Vec<usize>> {
    const WHAT: &str = "posting-list offsets";
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, WHAT);
    r.magic(OFFSETS_MAGIC)?;
    let n = r.u64()?;
    if n != n_list as u64 {
        return Err(Error::format(WHAT, format!("{n} lists, manifest says {n_list}")));
    }
    let n = r.check_len(n + 1, 8)?;
    let offsets = (0..n).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    r.verify_sealed()?;
    r.finish()?;
    let monotone = offsets.windows(2).all(|w| w[0] <= w[1]);
    if offsets.first() != Some(&0) || offsets.last() != Some(&count) || !monotone {
        return Err(Error::format(WHAT, "offsets are not a partition of the codes"));
    }
    Ok(offsets)
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<(IndexManifest, AnyIndex)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = IndexManifest::parse(&text)?;
    let seg = PackedSegment::load(dir.join(CODES))?;
    if seg.geometry() != manifest.geometry || seg.len() != manifest.count || seg.norm_mode() != manifest.norm_mode {
        return Err(Error::format("index directory", "segment does not match the manifest"));
    }
    let codes = seg.to_codes();
    let ids = read_ids(&dir.join(IDS), codes.len())?;
    let geom = manifest.geometry;
    let mode = manifest.norm_mode;
    let index = if manifest.kind == "flat" {
        AnyIndex::Flat(FlatIndex::build(geom, &codes, &ids, mode)?)
    } else {
        let offsets = read_offsets(&dir.join(OFFSETS), manifest.n_list, codes.len())?;
        let lists = offsets
            .windows(2)
            .map(|w| FlatIndex::build(geom, &codes[w[0]..w[1]], &ids[w[0]..w[1]], mode))
            .collect::<Result<Vec<_>>>()?;
        let cset = load_embeddings(dir.join(CENTROIDS))?;
        let centroids = Array2::from_shape_vec((cset.len(), cset.dim()), cset.data().to_vec())
            .map_err(|e| Error::format("centroid file", e.to_string()))?;
        let cseg = PackedSegment::load(dir.join(CENTROID_CODES))?;
        let list_ids: Vec<u64> = (0..cseg.len() as u64).collect();
        let coarse = FlatIndex::build(geom, &cseg.to_codes(), &list_ids, mode)?;
        AnyIndex::Ivf(IvfIndex::assemble(geom, centroids, coarse, lists)?)
    };
    Ok((manifest, index))
}
