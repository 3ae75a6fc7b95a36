//! Exhaustive and inverted-file top-k search over binary codes.

mod ivf;
mod kmeans;
mod store;
mod topk;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

pub use ivf::{build_ivf, IvfIndex, IvfParams};
pub use kmeans::{assign_nearest, kmeans, KMeans};
pub use store::{load_index, save_flat, save_ivf, AnyIndex, IndexManifest};
pub use topk::{merge_topk, Neighbor, TopK};

use crate::codec::{to_scaled_int, Geometry, NormMode, PackedSegment, PlaneMatrix, BLOCK_LEN};
use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::kernels::{build_lut, cosine, dot_bitwise_many, dot_f32, query_factor, LutMode};
use crate::model::RecurrentBinaryCode;

/// Similarity kernel used to score codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kernel {
    /// Scaled-integer dot product, one dimension at a time.
    Reference,
    /// Plane-pair popcount decomposition.
    Bitwise,
    /// Nibble lookup tables with exact 16-bit entries.
    SdcExact,
    /// Nibble lookup tables with 8-bit affine entries.
    SdcQ8,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Reference, Kernel::Bitwise, Kernel::SdcExact, Kernel::SdcQ8];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Reference => "reference",
            Kernel::Bitwise => "bitwise",
            Kernel::SdcExact => "sdc-exact",
            Kernel::SdcQ8 => "sdc-q8",
        }
    }

    /// Whether scores are exact binary cosines.
    pub fn is_exact(self) -> bool {
        self != Kernel::SdcQ8
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown kernel {s:?}")))
    }
}

/// Pushes unless `score` is already below the heap's floor. NaN scores
/// always reach `push`, which orders them totally.
#[inline(always)]
fn offer(top: &mut TopK, floor: &mut f32, id: u64, score: f32) {
    if score < *floor {
        return;
    }
    top.push(id, score);
    *floor = top.floor();
}

/// Exhaustive index over one set of codes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    geom: Geometry,
    norm_mode: NormMode,
    ids: Vec<u64>,
    /// `n * m` scaled lattice values for the reference kernel.
    scaled: Vec<i16>,
    planes: PlaneMatrix,
    /// Absent when the geometry has no nibble layout.
    packed: Option<PackedSegment>,
}

impl FlatIndex {
    pub fn build(
        geom: Geometry,
        codes: &[RecurrentBinaryCode],
        ids: &[u64],
        norm_mode: NormMode,
    ) -> Result<Self> {
        if codes.len() != ids.len() {
            return Err(Error::invalid(format!("{} codes for {} ids", codes.len(), ids.len())));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(&dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::DuplicateId(dup));
        }
        let planes = PlaneMatrix::from_codes(geom, codes)?;
        let packed = match geom.check_sdc() {
            Ok(()) => Some(PackedSegment::new(geom, codes, norm_mode)?),
            Err(_) => None,
        };
        let mut scaled = Vec::with_capacity(codes.len() * geom.code_dim);
        for c in codes {
            scaled.extend(c.scaled_values().into_iter().map(|v| v as i16));
        }
        Ok(Self {
            geom,
            norm_mode,
            ids: ids.to_vec(),
            scaled,
            planes,
            packed,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn planes(&self) -> &PlaneMatrix {
        &self.planes
    }

    pub fn packed(&self) -> Option<&PackedSegment> {
        self.packed.as_ref()
    }

    pub fn codes(&self) -> Vec<RecurrentBinaryCode> {
        self.planes.to_codes()
    }

    fn check_query(&self, query: &RecurrentBinaryCode) -> Result<()> {
        if Geometry::of(query) != self.geom {
            return Err(Error::invalid(format!(
                "query shape {:?} against index shape {:?}",
                Geometry::of(query),
                self.geom
            )));
        }
        Ok(())
    }

    /// Scores every stored vector and offers it to `top`.
    pub fn scan_into(&self, query: &RecurrentBinaryCode, kernel: Kernel, top: &mut TopK) -> Result<()> {
        self.check_query(query)?;
        if self.is_empty() || top.k() == 0 {
            return Ok(());
        }
        let qf = query_factor(query.inv_norm(), self.geom.residual_loops());
        match kernel {
            Kernel::Reference => {
                let q: Vec<i32> = query.scaled_values();
                let m = self.geom.code_dim;
                let mut floor = top.floor();
                for (i, &id) in self.ids.iter().enumerate() {
                    let d = &self.scaled[i * m..(i + 1) * m];
                    let dot: i32 = q.iter().zip(d).map(|(a, &b)| a * b as i32).sum();
                    offer(top, &mut floor, id, cosine(dot, qf, self.planes.inv_norm(i)));
                }
            }
            Kernel::Bitwise => {
                let mut dots = [0i32; BLOCK_LEN];
                let mut floor = top.floor();
                for (c, ids) in self.ids.chunks(BLOCK_LEN).enumerate() {
                    let start = c * BLOCK_LEN;
                    let dots = &mut dots[..ids.len()];
                    dot_bitwise_many(query.words(), &self.planes, start, dots);
                    let norms = &self.planes.inv_norms()[start..start + ids.len()];
                    for ((&id, &dot), &n) in ids.iter().zip(dots.iter()).zip(norms) {
                        offer(top, &mut floor, id, cosine(dot, qf, n));
                    }
                }
            }
            Kernel::SdcExact | Kernel::SdcQ8 => {
                let packed = self.packed.as_ref().ok_or_else(|| {
                    Error::invalid(format!("{kernel} needs 1, 2 or 4 bits per dimension"))
                })?;
                let mode = if kernel == Kernel::SdcExact {
                    LutMode::Exact
                } else {
                    LutMode::Q8
                };
                let lut = build_lut(&to_scaled_int(query), mode)?;
                let mut dots = [0i32; BLOCK_LEN];
                let mut scores = [0f32; BLOCK_LEN];
                let mut floor = top.floor();
                for (block, ids) in packed.blocks().iter().zip(self.ids.chunks(BLOCK_LEN)) {
                    lut.block_scores(block, &mut dots, &mut scores)?;
                    for (&id, &s) in ids.iter().zip(&scores[..block.valid()]) {
                        offer(top, &mut floor, id, s);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn search(&self, query: &RecurrentBinaryCode, k: usize, kernel: Kernel) -> Result<Vec<Neighbor>> {
        let mut top = TopK::new(k.min(self.len()));
        self.scan_into(query, kernel, &mut top)?;
        Ok(top.into_sorted_vec())
    }
}

/// Exhaustive float cosine search, the uncompressed baseline.
#[derive(Debug, Clone)]
pub struct FloatFlatIndex {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
}

impl FloatFlatIndex {
    /// Rows are normalized on the way in; zero rows are rejected.
    pub fn build(set: &EmbeddingSet) -> Result<Self> {
        let mut data = set.data().to_vec();
        for (i, row) in data.chunks_mut(set.dim()).enumerate() {
            normalize(row).ok_or_else(|| Error::invalid(format!("row {i} is a zero vector")))?;
        }
        Ok(Self {
            dim: set.dim(),
            data,
            ids: set.ids().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut q = query.to_vec();
        normalize(&mut q).ok_or_else(|| Error::invalid("query is a zero vector"))?;
        let mut top = TopK::new(k.min(self.len()));
        for (row, &id) in self.data.chunks_exact(self.dim).zip(&self.ids) {
            top.push(id, dot_f32(&q, row));
        }
        Ok(top.into_sorted_vec())
    }
}

fn normalize(v: &mut [f32]) -> Option<()> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(())
}
