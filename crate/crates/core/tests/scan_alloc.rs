//! The scan loop must not allocate per candidate: allocation counts for a
//! query are the same whether the index holds 1k or 32k codes.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use rbe_core::model::RecurrentBinaryCode;
use rbe_core::{FlatIndex, Geometry, Kernel, NormMode, TopK};

struct Counting;

thread_local! {
    static ALLOCS: Cell<usize> = const { Cell::new(0) };
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        ALLOCS.with(|c| c.set(c.get() + 1));
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        ALLOCS.with(|c| c.set(c.get() + 1));
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn allocs_during(f: impl FnOnce()) -> usize {
    let before = ALLOCS.with(Cell::get);
    f();
    ALLOCS.with(Cell::get) - before
}

fn codes(geom: Geometry, n: usize) -> Vec<RecurrentBinaryCode> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    (0..n)
        .map(|_| {
            let words = (0..geom.bits_per_dim)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    state
                })
                .collect();
            RecurrentBinaryCode::from_words(geom.code_dim, geom.bits_per_dim, words).unwrap()
        })
        .collect()
}

fn index(geom: Geometry, n: usize) -> FlatIndex {
    let ids: Vec<u64> = (0..n as u64).collect();
    FlatIndex::build(geom, &codes(geom, n), &ids, NormMode::Exact).unwrap()
}

#[test]
fn scan_allocations_do_not_grow_with_candidates() {
    let geom = Geometry::new(64, 4).unwrap();
    let small = index(geom, 1_000);
    let large = index(geom, 32_000);
    let query = codes(geom, 1).pop().unwrap();
    for kernel in Kernel::ALL {
        let mut counts = Vec::new();
        for idx in [&small, &large] {
            let mut top = TopK::new(10);
            idx.scan_into(&query, kernel, &mut top).unwrap();
            let mut top = TopK::new(10);
            counts.push(allocs_during(|| idx.scan_into(&query, kernel, &mut top).unwrap()));
        }
        assert_eq!(counts[0], counts[1], "{}: {counts:?}", kernel.name());
        assert!(counts[1] < 16, "{}: {} allocations per query", kernel.name(), counts[1]);
    }
}
