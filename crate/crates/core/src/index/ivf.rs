use ndarray::{Array2, Axis};

use super::kmeans::{assign_nearest, kmeans};
use super::{FlatIndex, Kernel, Neighbor, TopK};
use crate::codec::{Geometry, NormMode};
use crate::embstore::{normalize_in_place, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{RbeModel, RecurrentBinaryCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IvfParams {
    pub n_list: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub norm_mode: NormMode,
}

impl IvfParams {
    /// `sqrt(count)` lists.
    pub fn for_count(count: usize) -> Self {
        Self {
            n_list: ((count as f64).sqrt().round() as usize).max(1),
            kmeans_iters: 20,
            seed: 0,
            norm_mode: NormMode::Exact,
        }
    }

    /// `max(1, n_list / 16)`
    pub fn default_n_probe(&self) -> usize {
        (self.n_list / 16).max(1)
    }
}

/// Two-layer index: binary-coded centroids route a query to posting lists,
/// each an exhaustive [`FlatIndex`].
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    geom: Geometry,
    /// Float centroids used for build-time assignment, `n_list x d`.
    centroids: Array2<f32>,
    /// Centroid codes scored at query time.
    coarse: FlatIndex,
    lists: Vec<FlatIndex>,
}

/// Clusters `floats` with k-means, assigns every vector to its nearest float
/// centroid, and encodes the (normalized) centroids with `model` so that the
/// coarse layer can be scored with binary kernels.
pub fn build_ivf(
    floats: &EmbeddingSet,
    codes: &[RecurrentBinaryCode],
    model: &RbeModel,
    params: &IvfParams,
) -> Result<IvfIndex> {
    if floats.len() != codes.len() {
        return Err(Error::invalid(format!(
            "{} float rows for {} codes",
            floats.len(),
            codes.len()
        )));
    }
    if floats.dim() != model.config().input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.config().input_dim,
            got: floats.dim(),
        });
    }
    let geom = Geometry::new(model.config().code_dim, model.config().bits_per_dim())?;
    let km = kmeans(floats, params.n_list, params.kmeans_iters, params.seed)?;
    let (assign, _) = assign_nearest(floats.matrix(), km.centroids.view());
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); params.n_list];
    for (i, &a) in assign.iter().enumerate() {
        members[a].push(i);
    }
    let lists = members
        .iter()
        .map(|rows| {
            let c: Vec<RecurrentBinaryCode> = rows.iter().map(|&i| codes[i].clone()).collect();
            let ids: Vec<u64> = rows.iter().map(|&i| floats.ids()[i]).collect();
            FlatIndex::build(geom, &c, &ids, params.norm_mode)
        })
        .collect::<Result<Vec<_>>>()?;
    IvfIndex::from_parts(geom, km.centroids, model, lists, params.norm_mode)
}

impl IvfIndex {
    pub(crate) fn from_parts(
        geom: Geometry,
        centroids: Array2<f32>,
        model: &RbeModel,
        lists: Vec<FlatIndex>,
        norm_mode: NormMode,
    ) -> Result<Self> {
        let mut unit = centroids.clone();
        for mut row in unit.axis_iter_mut(Axis(0)) {
            normalize_in_place(row.as_slice_mut().expect("standard layout"));
        }
        let centroid_codes = model.encode_rows(unit.view())?;
        let list_ids: Vec<u64> = (0..centroids.nrows() as u64).collect();
        let coarse = FlatIndex::build(geom, &centroid_codes, &list_ids, norm_mode)?;
        Self::assemble(geom, centroids, coarse, lists)
    }

    pub(crate) fn assemble(geom: Geometry, centroids: Array2<f32>, coarse: FlatIndex, lists: Vec<FlatIndex>) -> Result<Self> {
        if coarse.len() != lists.len() || centroids.nrows() != lists.len() {
            return Err(Error::invalid("centroid and posting-list counts differ"));
        }
        if coarse.geometry() != geom || lists.iter().any(|l| l.geometry() != geom) {
            return Err(Error::invalid("posting lists do not share one geometry"));
        }
        Ok(Self {
            geom,
            centroids,
            coarse,
            lists,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn n_list(&self) -> usize {
        self.lists.len()
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(FlatIndex::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centroids(&self) -> &Array2<f32> {
        &self.centroids
    }

    pub fn coarse(&self) -> &FlatIndex {
        &self.coarse
    }

    pub fn lists(&self) -> &[FlatIndex] {
        &self.lists
    }

    pub fn norm_mode(&self) -> NormMode {
        self.coarse.norm_mode()
    }

    /// Lists visited for `query`: the `n_probe` best-scoring centroids.
    pub fn probe(&self, query: &RecurrentBinaryCode, n_probe: usize, kernel: Kernel) -> Result<Vec<usize>> {
        if n_probe == 0 || n_probe > self.n_list() {
            return Err(Error::invalid(format!(
                "n_probe {n_probe} outside 1..={}",
                self.n_list()
            )));
        }
        Ok(self
            .coarse
            .search(query, n_probe, kernel)?
            .into_iter()
            .map(|n| n.id as usize)
            .collect())
    }

    pub fn search(&self, query: &RecurrentBinaryCode, k: usize, n_probe: usize, kernel: Kernel) -> Result<Vec<Neighbor>> {
        let probed = self.probe(query, n_probe, kernel)?;
        let mut top = TopK::new(k.min(self.len()));
        for l in probed {
            self.lists[l].scan_into(query, kernel, &mut top)?;
        }
        Ok(top.into_sorted_vec())
    }
}
