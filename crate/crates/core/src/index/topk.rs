use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// One search hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub score: f32,
}

impl Neighbor {
    /// Result order: higher score first, then smaller id.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.id.cmp(&other.id))
    }
}

/// Heap entry ordered so that the worst hit is the maximum.
#[derive(Debug, Clone, Copy)]
struct Worst(Neighbor);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst {}

impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

/// The `k` best `(id, score)` pairs seen so far; ties go to the smaller id.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Worst>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    /// Scores strictly below this cannot enter: the worst kept score once
    /// full, negative infinity before.
    #[inline]
    pub fn floor(&self) -> f32 {
        self.worst().map_or(f32::NEG_INFINITY, |w| w.score)
    }

    /// Current worst kept hit, once full.
    pub fn worst(&self) -> Option<Neighbor> {
        if self.is_full() {
            self.heap.peek().map(|w| w.0)
        } else {
            None
        }
    }

    #[inline]
    pub fn push(&mut self, id: u64, score: f32) {
        if self.k == 0 {
            return;
        }
        let cand = Neighbor { id, score };
        if self.heap.len() < self.k {
            self.heap.push(Worst(cand));
        } else if let Some(mut top) = self.heap.peek_mut() {
            if cand.rank_cmp(&top.0) == Ordering::Less {
                *top = Worst(cand);
            }
        }
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = Neighbor>) {
        for n in items {
            self.push(n.id, n.score);
        }
    }

    /// Hits sorted best first.
    pub fn into_sorted_vec(self) -> Vec<Neighbor> {
        let mut v: Vec<Neighbor> = self.heap.into_iter().map(|w| w.0).collect();
        v.sort_by(Neighbor::rank_cmp);
        v
    }

    pub fn to_sorted_vec(&self) -> Vec<Neighbor> {
        self.clone().into_sorted_vec()
    }
}

/// Top `k` over the union of `partials`.
pub fn merge_topk<'a>(partials: impl IntoIterator<Item = &'a TopK>, k: usize) -> TopK {
    let mut out = TopK::new(k);
    for p in partials {
        out.extend(p.heap.iter().map(|w| w.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(items: &[Neighbor], k: usize) -> Vec<Neighbor> {
        let mut v = items.to_vec();
        v.sort_by(Neighbor::rank_cmp);
        v.truncate(k);
        v
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        let mut t = TopK::new(2);
        for id in [5, 3, 9, 1] {
            t.push(id, 0.5);
        }
        let ids: Vec<u64> = t.into_sorted_vec().iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![1, 3]);
    }

    #[test]
    fn zero_k_and_empty_merge() {
        let mut t = TopK::new(0);
        t.push(1, 1.0);
        assert!(t.is_empty());
        let mut a = TopK::new(3);
        a.push(4, 0.1);
        a.push(2, 0.9);
        let merged = merge_topk([&a, &TopK::new(3)], 3);
        assert_eq!(merged.into_sorted_vec(), a.into_sorted_vec());
    }

    fn neighbors() -> impl Strategy<Value = Vec<Neighbor>> {
        prop::collection::vec((0u64..50, -4i32..4), 0..60).prop_map(|v| {
            let mut seen = std::collections::HashSet::new();
            v.into_iter()
                .filter(|(id, _)| seen.insert(*id))
                .map(|(id, s)| Neighbor {
                    id,
                    score: s as f32 / 4.0,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_full_sort(items in neighbors(), k in 0usize..20) {
            let mut t = TopK::new(k);
            t.extend(items.iter().copied());
            prop_assert_eq!(t.into_sorted_vec(), brute(&items, k));
        }

        #[test]
        fn sharding_does_not_change_results(items in neighbors(), k in 1usize..20, shards in 1usize..8) {
            let parts: Vec<TopK> = (0..shards)
                .map(|s| {
                    let mut t = TopK::new(k);
                    t.extend(items.iter().skip(s).step_by(shards).copied());
                    t
                })
                .collect();
            let merged = merge_topk(parts.iter(), k);
            prop_assert_eq!(merged.into_sorted_vec(), brute(&items, k));
            // associativity: ((a + b) + rest) == (a + (b + rest))
            if parts.len() >= 3 {
                let left = merge_topk([&merge_topk(parts[..2].iter(), k)].into_iter().chain(&parts[2..]), k);
                let right_tail = merge_topk(parts[1..].iter(), k);
                let right = merge_topk([&parts[0], &right_tail], k);
                prop_assert_eq!(left.into_sorted_vec(), right.into_sorted_vec());
            }
        }
    }
}
