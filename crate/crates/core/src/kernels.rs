//! Similarity kernels over recurrent binary codes.
//!
//! All integer kernels produce `2^{2u}` times the dot product of the decoded
//! lattice vectors. [`cosine`] turns that into a cosine with one shared
//! formula, so every exact kernel yields bit-identical scores.

use crate::codec::{Geometry, PackedCodeBlock, PlaneMatrix, ScaledIntCode, BLOCK_LEN};
use crate::error::{Error, Result};

/// Query-side factor of [`cosine`]: `inv_norm_q / 2^{2u}`.
pub fn query_factor(inv_norm_q: f64, residual_loops: usize) -> f32 {
    (inv_norm_q as f32) * (-2.0 * residual_loops as f32).exp2()
}

/// `dot * inv_norm_q * inv_norm_d / 2^{2u}`, with the query terms folded
/// into `qfactor` (see [`query_factor`]).
#[inline]
pub fn cosine(dot: i32, qfactor: f32, inv_norm_d: f32) -> f32 {
    dot as f32 * qfactor * inv_norm_d
}

/// Exact `sum_j q_j d_j` over scaled lattice integers.
pub fn dot_reference(q: &ScaledIntCode, d: &ScaledIntCode) -> i32 {
    assert_eq!(q.values.len(), d.values.len(), "code dimensions differ");
    q.values.iter().zip(&d.values).map(|(a, b)| a * b).sum()
}

/// `+-1` dot product of two sign planes of `m` bits: `m - 2 popcount(x ^ y)`.
/// Bits above `m` are masked out.
pub fn plane_dot(x: &[u64], y: &[u64], m: usize) -> i32 {
    assert_eq!(x.len(), y.len());
    assert!(x.len() * 64 >= m);
    let mut diff = 0u32;
    for (k, (a, b)) in x.iter().zip(y).enumerate() {
        let bits = m.saturating_sub(k * 64).min(64);
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        diff += ((a ^ b) & mask).count_ones();
    }
    m as i32 - 2 * diff as i32
}

#[inline(always)]
fn bitwise_body(q: &[u64], d: &[u64], m: usize, b: usize, wpp: usize) -> i32 {
    // plane words are zero-padded, so XOR of padding is zero
    let u = b - 1;
    let wsum: i32 = (0..b).map(|p| 1i32 << (u - p)).sum();
    let mut weighted_diff = 0i32;
    for p in 0..b {
        let qp = &q[p * wpp..(p + 1) * wpp];
        for t in 0..b {
            let dt = &d[t * wpp..(t + 1) * wpp];
            let mut diff = 0u32;
            for k in 0..wpp {
                diff += (qp[k] ^ dt[k]).count_ones();
            }
            weighted_diff += (diff as i32) << (2 * u - p - t);
        }
    }
    m as i32 * wsum * wsum - 2 * weighted_diff
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn bitwise_popcnt(q: &[u64], d: &[u64], m: usize, b: usize, wpp: usize) -> i32 {
    bitwise_body(q, d, m, b, wpp)
}

/// [`bitwise_body`] with the plane count and words per plane fixed at
/// compile time so the plane-pair loops unroll.
#[inline(always)]
fn bitwise_fixed<const B: usize, const W: usize>(q: &[u64], d: &[u64], m: usize) -> i32 {
    let (q, d) = (&q[..B * W], &d[..B * W]);
    let u = B - 1;
    let wsum: i32 = (0..B).map(|p| 1i32 << (u - p)).sum();
    let mut weighted_diff = 0i32;
    for p in 0..B {
        for t in 0..B {
            let mut diff = 0u32;
            for k in 0..W {
                diff += (q[p * W + k] ^ d[t * W + k]).count_ones();
            }
            weighted_diff += (diff as i32) << (2 * u - p - t);
        }
    }
    m as i32 * wsum * wsum - 2 * weighted_diff
}

#[inline(always)]
fn many_fixed<const B: usize, const W: usize>(q: &[u64], docs: &PlaneMatrix, start: usize, out: &mut [i32]) {
    let m = docs.geometry().code_dim;
    let stride = B * W;
    let words = &docs.raw_words()[start * stride..(start + out.len()) * stride];
    for (o, d) in out.iter_mut().zip(words.chunks_exact(stride)) {
        *o = bitwise_fixed::<B, W>(q, d, m);
    }
}

#[inline(always)]
fn many_dispatch(q: &[u64], docs: &PlaneMatrix, start: usize, out: &mut [i32]) {
    let g = docs.geometry();
    match (g.bits_per_dim, g.words_per_plane()) {
        (1, 1) => many_fixed::<1, 1>(q, docs, start, out),
        (1, 2) => many_fixed::<1, 2>(q, docs, start, out),
        (1, 4) => many_fixed::<1, 4>(q, docs, start, out),
        (2, 1) => many_fixed::<2, 1>(q, docs, start, out),
        (2, 2) => many_fixed::<2, 2>(q, docs, start, out),
        (2, 4) => many_fixed::<2, 4>(q, docs, start, out),
        (4, 1) => many_fixed::<4, 1>(q, docs, start, out),
        (4, 2) => many_fixed::<4, 2>(q, docs, start, out),
        (4, 4) => many_fixed::<4, 4>(q, docs, start, out),
        (b, wpp) => {
            for (k, o) in out.iter_mut().enumerate() {
                *o = bitwise_body(q, docs.vector(start + k), g.code_dim, b, wpp);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn bitwise_many_popcnt(q: &[u64], docs: &PlaneMatrix, start: usize, out: &mut [i32]) {
    many_dispatch(q, docs, start, out)
}

fn has_popcnt() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("popcnt")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Bit-plane kernel: `sum_{p,t} 2^{u-p} 2^{u-t} plane_dot(q_p, d_t)`.
/// `q` and `d` hold all plane words of one vector each.
pub fn dot_bitwise(q: &[u64], d: &[u64], geom: Geometry) -> Result<i32> {
    let w = geom.words_per_vector();
    if q.len() != w || d.len() != w {
        return Err(Error::invalid(format!(
            "plane words {} and {} for geometry {geom:?}",
            q.len(),
            d.len()
        )));
    }
    let (m, b, wpp) = (geom.code_dim, geom.bits_per_dim, geom.words_per_plane());
    #[cfg(target_arch = "x86_64")]
    if has_popcnt() {
        // SAFETY: the feature was detected at runtime.
        return Ok(unsafe { bitwise_popcnt(q, d, m, b, wpp) });
    }
    Ok(bitwise_body(q, d, m, b, wpp))
}

/// [`dot_bitwise`] against vectors `start..start + out.len()` of `docs`.
pub fn dot_bitwise_many(q: &[u64], docs: &PlaneMatrix, start: usize, out: &mut [i32]) {
    let g = docs.geometry();
    assert_eq!(q.len(), g.words_per_vector());
    assert!(start + out.len() <= docs.len());
    #[cfg(target_arch = "x86_64")]
    if has_popcnt() {
        // SAFETY: the feature was detected at runtime.
        unsafe { bitwise_many_popcnt(q, docs, start, out) };
        return;
    }
    many_dispatch(q, docs, start, out);
}

/// Lookup-table representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LutMode {
    /// 16-bit entries holding the exact partial dot products.
    Exact,
    /// 8-bit entries, `T ~ scale * t + bias`, saturating 16-bit accumulation.
    Q8,
}

#[derive(Debug, Clone)]
enum Tables {
    Exact {
        /// `slots * 16`
        table: Vec<i16>,
        /// Low and high bytes of every slot's table, each 16-byte table
        /// repeated twice to fill a 256-bit register.
        lo: Vec<u8>,
        hi: Vec<u8>,
        /// Slots that can be summed in 16 bits without overflow.
        flush_every: usize,
    },
    Q8 {
        table: Vec<u8>,
        scale: f32,
        bias: f32,
        doubled: Vec<u8>,
    },
}

/// Per-slot lookup tables of one query: `T_s[c]` is the query's partial dot
/// product with a document whose nibble at slot `s` is `c`.
#[derive(Debug, Clone)]
pub struct QueryLut {
    geom: Geometry,
    qfactor: f32,
    tables: Tables,
}

/// Builds the query tables; rejects values that are not odd lattice points.
pub fn build_lut(q: &ScaledIntCode, mode: LutMode) -> Result<QueryLut> {
    let geom = Geometry::new(q.values.len(), q.bits_per_dim)?;
    geom.check_sdc()?;
    let top = geom.max_scaled();
    if let Some(v) = q.values.iter().find(|&&v| v % 2 == 0 || v.abs() > top) {
        return Err(Error::invalid(format!(
            "{v} is not an odd lattice value for {} bits",
            q.bits_per_dim
        )));
    }
    let b = geom.bits_per_dim;
    let per = geom.dims_per_slot();
    let field = (1u32 << b) - 1;
    let slots = geom.slots();
    let mut exact = Vec::with_capacity(slots * 16);
    for s in 0..slots {
        for c in 0..16u32 {
            let mut t = 0i32;
            for k in 0..per {
                let shift = (per - 1 - k) * b;
                let code = (c >> shift) & field;
                t += q.values[s * per + k] * (2 * code as i32 - top);
            }
            exact.push(t as i16);
        }
    }
    let qfactor = query_factor(q.inv_norm, geom.residual_loops());
    let tables = match mode {
        LutMode::Exact => {
            let max_abs = exact.iter().map(|t| t.unsigned_abs() as usize).max().unwrap_or(1).max(1);
            let mut lo = Vec::with_capacity(slots * 32);
            let mut hi = Vec::with_capacity(slots * 32);
            for row in exact.chunks(16) {
                for _ in 0..2 {
                    lo.extend(row.iter().map(|&t| t as u16 as u8));
                    hi.extend(row.iter().map(|&t| (t as u16 >> 8) as u8));
                }
            }
            Tables::Exact {
                table: exact,
                lo,
                hi,
                flush_every: (i16::MAX as usize / max_abs).max(1),
            }
        }
        LutMode::Q8 => {
            let min = *exact.iter().min().unwrap_or(&0) as f32;
            let max = *exact.iter().max().unwrap_or(&0) as f32;
            let scale = if max > min { (max - min) / 255.0 } else { 1.0 };
            let table: Vec<u8> = exact
                .iter()
                .map(|&t| ((t as f32 - min) / scale).round().clamp(0.0, 255.0) as u8)
                .collect();
            let doubled = table.chunks(16).flat_map(|r| r.iter().chain(r)).copied().collect();
            Tables::Q8 {
                table,
                scale,
                bias: min,
                doubled,
            }
        }
    };
    Ok(QueryLut {
        geom,
        qfactor,
        tables,
    })
}

impl QueryLut {
    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn mode(&self) -> LutMode {
        match self.tables {
            Tables::Exact { .. } => LutMode::Exact,
            Tables::Q8 { .. } => LutMode::Q8,
        }
    }

    pub fn qfactor(&self) -> f32 {
        self.qfactor
    }

    /// Exact table entry; for q8 tables, the dequantized entry.
    pub fn entry(&self, slot: usize, c: u8) -> f32 {
        let i = slot * 16 + c as usize;
        match &self.tables {
            Tables::Exact { table, .. } => table[i] as f32,
            Tables::Q8 {
                table, scale, bias, ..
            } => table[i] as f32 * scale + bias,
        }
    }

    /// `(scale, bias)` of a q8 table.
    pub fn affine(&self) -> Option<(f32, f32)> {
        match self.tables {
            Tables::Q8 { scale, bias, .. } => Some((scale, bias)),
            Tables::Exact { .. } => None,
        }
    }

    fn check_block(&self, block: &PackedCodeBlock) -> Result<()> {
        if block.geometry() != self.geom {
            return Err(Error::invalid(format!(
                "query geometry {:?} against block geometry {:?}",
                self.geom,
                block.geometry()
            )));
        }
        Ok(())
    }

    /// Integer dots of all [`BLOCK_LEN`] lanes (padding lanes included).
    /// For q8 tables the result is the rounded dequantized estimate.
    pub fn block_dots(&self, block: &PackedCodeBlock, out: &mut [i32; BLOCK_LEN]) -> Result<()> {
        self.check_block(block)?;
        let slots = self.geom.slots();
        let nib = block.nibbles();
        match &self.tables {
            Tables::Exact {
                table,
                lo,
                hi,
                flush_every,
            } => {
                #[cfg(target_arch = "x86_64")]
                if has_avx2() {
                    // SAFETY: avx2 detected; slices sized by build_lut and pack.
                    unsafe { simd::exact_block_avx2(lo, hi, nib, slots, *flush_every, out) };
                    return Ok(());
                }
                let _ = (lo, hi, flush_every);
                exact_block_scalar(table, nib, slots, out);
            }
            Tables::Q8 {
                table,
                scale,
                bias,
                doubled,
            } => {
                let mut acc = [0u16; BLOCK_LEN];
                #[cfg(target_arch = "x86_64")]
                let done = if has_avx2() {
                    // SAFETY: as above.
                    unsafe { simd::q8_block_avx2(doubled, nib, slots, &mut acc) };
                    true
                } else {
                    false
                };
                #[cfg(not(target_arch = "x86_64"))]
                let done = false;
                if !done {
                    let _ = doubled;
                    q8_block_scalar(table, nib, slots, &mut acc);
                }
                let offset = slots as f32 * bias;
                for (o, &a) in out.iter_mut().zip(&acc) {
                    *o = round_to_i32(a as f32 * scale + offset);
                }
            }
        }
        Ok(())
    }

    /// Portable exact-mode scan of one block, for cross-checking the SIMD path.
    pub fn block_dots_scalar(&self, block: &PackedCodeBlock, out: &mut [i32; BLOCK_LEN]) -> Result<()> {
        self.check_block(block)?;
        match &self.tables {
            Tables::Exact { table, .. } => exact_block_scalar(table, block.nibbles(), self.geom.slots(), out),
            Tables::Q8 {
                table, scale, bias, ..
            } => {
                let mut acc = [0u16; BLOCK_LEN];
                q8_block_scalar(table, block.nibbles(), self.geom.slots(), &mut acc);
                let offset = self.geom.slots() as f32 * bias;
                for (o, &a) in out.iter_mut().zip(&acc) {
                    *o = round_to_i32(a as f32 * scale + offset);
                }
            }
        }
        Ok(())
    }

    /// Cosine scores of all lanes of `block`.
    pub fn block_scores(&self, block: &PackedCodeBlock, dots: &mut [i32; BLOCK_LEN], scores: &mut [f32; BLOCK_LEN]) -> Result<()> {
        self.block_dots(block, dots)?;
        for ((s, &d), &n) in scores.iter_mut().zip(dots.iter()).zip(block.inv_norms()) {
            *s = cosine(d, self.qfactor, n);
        }
        Ok(())
    }
}

fn exact_block_scalar(table: &[i16], nib: &[u8], slots: usize, out: &mut [i32; BLOCK_LEN]) {
    *out = [0; BLOCK_LEN];
    for s in 0..slots {
        let t = &table[s * 16..s * 16 + 16];
        let bytes = &nib[s * 16..s * 16 + 16];
        for (i, &byte) in bytes.iter().enumerate() {
            out[2 * i] += t[(byte & 0xf) as usize] as i32;
            out[2 * i + 1] += t[(byte >> 4) as usize] as i32;
        }
    }
}

/// Half-away-from-zero rounding without a libm call.
#[inline(always)]
fn round_to_i32(x: f32) -> i32 {
    (x + 0.5f32.copysign(x)) as i32
}

fn q8_block_scalar(table: &[u8], nib: &[u8], slots: usize, acc: &mut [u16; BLOCK_LEN]) {
    *acc = [0; BLOCK_LEN];
    for s in 0..slots {
        let t = &table[s * 16..s * 16 + 16];
        let bytes = &nib[s * 16..s * 16 + 16];
        for (i, &byte) in bytes.iter().enumerate() {
            acc[2 * i] = acc[2 * i].saturating_add(t[(byte & 0xf) as usize] as u16);
            acc[2 * i + 1] = acc[2 * i + 1].saturating_add(t[(byte >> 4) as usize] as u16);
        }
    }
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Name of the lookup-table implementation selected on this machine.
pub fn sdc_backend() -> &'static str {
    if has_avx2() {
        "avx2"
    } else {
        "scalar"
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use crate::codec::BLOCK_LEN;

    /// Index register for one slot: low nibbles (even lanes) in the lower
    /// 128 bits, high nibbles (odd lanes) in the upper 128 bits.
    #[inline(always)]
    unsafe fn slot_index(nib: &[u8; 16]) -> __m256i {
        let raw: __m128i = std::mem::transmute(*nib);
        let mask = _mm_set1_epi8(0x0f);
        let lo = _mm_and_si128(raw, mask);
        let hi = _mm_and_si128(_mm_srli_epi16::<4>(raw), mask);
        _mm256_set_m128i(hi, lo)
    }

    /// Lane order of the four 8-wide accumulators back into vector order.
    #[inline(always)]
    fn scatter<T: Copy>(parts: [[T; 8]; 4], out: &mut [T; BLOCK_LEN]) {
        for k in 0..8 {
            out[2 * k] = parts[0][k];
            out[2 * k + 1] = parts[1][k];
            out[16 + 2 * k] = parts[2][k];
            out[17 + 2 * k] = parts[3][k];
        }
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn exact_block_avx2(
        lo: &[u8],
        hi: &[u8],
        nib: &[u8],
        slots: usize,
        flush_every: usize,
        out: &mut [i32; BLOCK_LEN],
    ) {
        debug_assert!(lo.len() >= slots * 32 && hi.len() >= slots * 32 && nib.len() >= slots * 16);
        let mut wide = [_mm256_setzero_si256(); 4];
        let mut s = 0;
        while s < slots {
            let end = (s + flush_every).min(slots);
            let mut acc_lo = _mm256_setzero_si256();
            let mut acc_hi = _mm256_setzero_si256();
            // Loads go through fixed-size arrays: the `loadu` intrinsics carry
            // precondition checks in debug-assertion builds.
            let slot_nibs = nib[s * 16..end * 16].as_chunks::<16>().0;
            let tl = lo[s * 32..end * 32].as_chunks::<32>().0;
            let th = hi[s * 32..end * 32].as_chunks::<32>().0;
            for (n, (l, h)) in slot_nibs.iter().zip(tl.iter().zip(th)) {
                let idx = slot_index(n);
                let tl: __m256i = std::mem::transmute(*l);
                let th: __m256i = std::mem::transmute(*h);
                let rl = _mm256_shuffle_epi8(tl, idx);
                let rh = _mm256_shuffle_epi8(th, idx);
                acc_lo = _mm256_add_epi16(acc_lo, _mm256_unpacklo_epi8(rl, rh));
                acc_hi = _mm256_add_epi16(acc_hi, _mm256_unpackhi_epi8(rl, rh));
            }
            let halves = [
                _mm256_castsi256_si128(acc_lo),
                _mm256_extracti128_si256::<1>(acc_lo),
                _mm256_castsi256_si128(acc_hi),
                _mm256_extracti128_si256::<1>(acc_hi),
            ];
            for (w, h) in wide.iter_mut().zip(halves) {
                *w = _mm256_add_epi32(*w, _mm256_cvtepi16_epi32(h));
            }
            s = end;
        }
        let parts: [[i32; 8]; 4] = wide.map(|w| std::mem::transmute(w));
        scatter(parts, out);
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn q8_block_avx2(table: &[u8], nib: &[u8], slots: usize, acc: &mut [u16; BLOCK_LEN]) {
        debug_assert!(table.len() >= slots * 32 && nib.len() >= slots * 16);
        let zero = _mm256_setzero_si256();
        let mut acc_lo = zero;
        let mut acc_hi = zero;
        let tables = table[..slots * 32].as_chunks::<32>().0;
        for (n, tab) in nib[..slots * 16].as_chunks::<16>().0.iter().zip(tables) {
            let idx = slot_index(n);
            let tab: __m256i = std::mem::transmute(*tab);
            let r = _mm256_shuffle_epi8(tab, idx);
            acc_lo = _mm256_adds_epu16(acc_lo, _mm256_unpacklo_epi8(r, zero));
            acc_hi = _mm256_adds_epu16(acc_hi, _mm256_unpackhi_epi8(r, zero));
        }
        let a: [u16; 16] = std::mem::transmute(acc_lo);
        let b: [u16; 16] = std::mem::transmute(acc_hi);
        let part = |src: &[u16; 16], off: usize| -> [u16; 8] { std::array::from_fn(|k| src[off + k]) };
        scatter([part(&a, 0), part(&a, 8), part(&b, 0), part(&b, 8)], acc);
    }
}

/// Scores of every valid vector of a scan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreBatch {
    pub dots: Vec<i32>,
    pub scores: Vec<f32>,
}

impl ScoreBatch {
    pub fn clear(&mut self) {
        self.dots.clear();
        self.scores.clear();
    }
}

/// Scans `blocks` in order, appending one dot and one cosine per valid vector.
pub fn scan_sdc(lut: &QueryLut, blocks: &[PackedCodeBlock], out: &mut ScoreBatch) -> Result<()> {
    let mut dots = [0i32; BLOCK_LEN];
    let mut scores = [0f32; BLOCK_LEN];
    for block in blocks {
        lut.block_scores(block, &mut dots, &mut scores)?;
        out.dots.extend_from_slice(&dots[..block.valid()]);
        out.scores.extend_from_slice(&scores[..block.valid()]);
    }
    Ok(())
}

/// Cosine similarity of two float vectors, accumulated in `f64`.
pub fn dot_float(x: &[f32], y: &[f32]) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let (mut xy, mut xx, mut yy) = (0f64, 0f64, 0f64);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a as f64, b as f64);
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    Ok((xy / (xx.sqrt() * yy.sqrt())) as f32)
}

/// Plain `f32` inner product, for rows that are already unit length.
#[inline]
pub fn dot_f32(x: &[f32], y: &[f32]) -> f32 {
    // eight partial sums let the compiler vectorize without fast-math
    let mut acc = [0f32; 8];
    let xs = x.chunks_exact(8);
    let ys = y.chunks_exact(8);
    let tail: f32 = xs.remainder().iter().zip(ys.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xs.zip(ys) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}
