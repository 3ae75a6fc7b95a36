use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, ArrayView2};

/// Fixed-capacity FIFO of unit-length code vectors with their source ids.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    /// Ring buffer, `capacity x m`.
    rows: Array2<f32>,
    ids: Vec<u64>,
    /// Exclusion key of each entry (the group of its source id).
    groups: Vec<u64>,
    head: usize,
    len: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            rows: Array2::zeros((capacity, dim)),
            ids: vec![0; capacity],
            groups: vec![0; capacity],
            head: 0,
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.ids.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    fn physical(&self, pos: usize) -> usize {
        (self.head + pos) % self.capacity()
    }

    /// Entry `pos` in insertion order (0 is the oldest present entry).
    pub fn entry(&self, pos: usize) -> (u64, ArrayView1<'_, f32>) {
        assert!(pos < self.len);
        let p = self.physical(pos);
        (self.ids[p], self.rows.row(p))
    }

    /// Appends rows (normalized here), evicting the oldest entries once full.
    pub fn push_batch(&mut self, rows: ArrayView2<'_, f32>, ids: &[u64], groups: &[u64]) {
        assert_eq!(rows.nrows(), ids.len());
        assert_eq!(rows.nrows(), groups.len());
        let cap = self.capacity();
        if cap == 0 {
            return;
        }
        for (i, row) in rows.rows().into_iter().enumerate() {
            let slot = if self.len < cap {
                let s = self.physical(self.len);
                self.len += 1;
                s
            } else {
                let s = self.head;
                self.head = (self.head + 1) % cap;
                s
            };
            let norm = row.dot(&row).sqrt();
            let mut dst = self.rows.row_mut(slot);
            dst.assign(&row);
            if norm > 0.0 {
                dst.mapv_inplace(|v| v / norm);
            }
            self.ids[slot] = ids[i];
            self.groups[slot] = groups[i];
        }
    }

    /// Physical rows; only the first `len()` slots after wrapping are valid.
    pub(crate) fn buffer(&self) -> ArrayView2<'_, f32> {
        self.rows.view()
    }

    /// Hardest negatives for every anchor row of `anchors` (any scale),
    /// skipping entries whose group equals `anchor_groups[i]`. Returns
    /// physical row indices ordered by (similarity desc, insertion asc).
    pub(crate) fn select_batch(&self, anchors: ArrayView2<'_, f32>, anchor_groups: &[u64], k: usize) -> Vec<Vec<usize>> {
        if self.len == 0 || k == 0 {
            return vec![Vec::new(); anchors.nrows()];
        }
        let sims = anchors.dot(&self.rows.t());
        let mut scratch = Vec::with_capacity(self.len);
        anchors
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, _)| {
                let row = sims.row(i);
                let g = anchor_groups[i];
                select_top(
                    (0..self.len).filter_map(|pos| {
                        let p = self.physical(pos);
                        (self.groups[p] != g).then(|| (row[p], pos))
                    }),
                    k,
                    &mut scratch,
                )
                .into_iter()
                .map(|pos| self.physical(pos))
                .collect()
            })
            .collect()
    }
}

/// Positions of the `k` best `(similarity, position)` candidates, ordered by
/// similarity descending, then position ascending.
fn select_top(cands: impl Iterator<Item = (f32, usize)>, k: usize, scratch: &mut Vec<(f32, usize)>) -> Vec<usize> {
    let cmp = |a: &(f32, usize), b: &(f32, usize)| -> Ordering { b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)) };
    scratch.clear();
    scratch.extend(cands);
    if scratch.len() > k {
        scratch.select_nth_unstable_by(k, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    scratch.iter().map(|c| c.1).collect()
}

/// The `k` queue entries most cosine-similar to `anchor`, excluding source
/// ids in `exclude_ids`. Positions are in insertion order (0 = oldest);
/// ties go to the older entry.
pub fn select_hard_negatives(anchor: &[f32], queue: &NegativeQueue, k: usize, exclude_ids: &HashSet<u64>) -> Vec<usize> {
    let a = ArrayView1::from(anchor);
    let mut scratch = Vec::new();
    select_top(
        (0..queue.len()).filter_map(|pos| {
            let (id, row) = queue.entry(pos);
            (!exclude_ids.contains(&id)).then(|| (a.dot(&row), pos))
        }),
        k,
        &mut scratch,
    )
}
