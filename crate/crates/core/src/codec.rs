//! Storage and scan layouts for recurrent binary codes.
//!
//! Two layouts are provided:
//!
//! * [`PlaneMatrix`] keeps each vector's sign planes as 64-bit words, ready
//!   for the popcount kernel.
//! * [`PackedCodeBlock`] transposes [`BLOCK_LEN`] codes into 4-bit slots so
//!   that one byte-shuffle looks up a slot for a whole group of vectors.
//!
//! A nibble covers `4 / B` dimensions. Each dimension contributes its `B`
//! plane bits with plane 0 as the most significant, so the nibble code `c`
//! of a single dimension satisfies `2^u * v = 2c - (2^B - 1)`. With `B = 2`
//! the earlier dimension sits in the high two bits; with `B = 1` the first
//! of the four dimensions is bit 3.
//!
//! Inside a slot, vector `j` lives in byte `j / 2`: even vectors in the low
//! nibble, odd vectors in the high nibble. Any group of `W` consecutive
//! vectors with `W` dividing [`BLOCK_LEN`] is therefore a contiguous
//! `W / 2`-byte read.
//!
//! Segment file (`RBEI`, little-endian):
//!
//! ```text
//! "RBEI" | version u16 = 1 | B u8 | norm_mode u8 | m u32 | count u64 | V u32
//!        | per block: slots * V/2 nibble bytes, then V norms (f32 or u16)
//!        | crc32c of all preceding bytes
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, ByteReader, ByteWriter};
use crate::model::code::words_per_plane;
use crate::model::RecurrentBinaryCode;

/// Vectors per packed block.
pub const BLOCK_LEN: usize = 32;
const BYTES_PER_SLOT: usize = BLOCK_LEN / 2;
const RBEI_MAGIC: &[u8; 4] = b"RBEI";
const RBEI_VERSION: u16 = 1;
const MAX_CODE_DIM: usize = 1 << 20;

/// Code shape shared by every vector of an index: `m` dimensions with `B`
/// bits each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub code_dim: usize,
    pub bits_per_dim: usize,
}

impl Geometry {
    pub fn new(code_dim: usize, bits_per_dim: usize) -> Result<Self> {
        if code_dim == 0 || code_dim > MAX_CODE_DIM {
            return Err(Error::invalid(format!("code dimension {code_dim} out of range")));
        }
        if !(1..=16).contains(&bits_per_dim) {
            return Err(Error::invalid(format!("bits per dimension {bits_per_dim}")));
        }
        Ok(Self {
            code_dim,
            bits_per_dim,
        })
    }

    pub fn of(code: &RecurrentBinaryCode) -> Self {
        Self {
            code_dim: code.code_dim(),
            bits_per_dim: code.bits_per_dim(),
        }
    }

    pub fn residual_loops(&self) -> usize {
        self.bits_per_dim - 1
    }

    pub fn total_bits(&self) -> usize {
        self.code_dim * self.bits_per_dim
    }

    pub fn words_per_plane(&self) -> usize {
        words_per_plane(self.code_dim)
    }

    pub fn words_per_vector(&self) -> usize {
        self.words_per_plane() * self.bits_per_dim
    }

    /// Largest scaled lattice value `2^B - 1`.
    pub fn max_scaled(&self) -> i32 {
        (1 << self.bits_per_dim) - 1
    }

    /// Whether the nibble layout applies: `B` in {1, 2, 4} and `m * B` a
    /// multiple of four.
    pub fn check_sdc(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.bits_per_dim) {
            return Err(Error::invalid(format!(
                "nibble packing needs 1, 2 or 4 bits per dimension, got {}",
                self.bits_per_dim
            )));
        }
        if !self.total_bits().is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "{} total bits do not fill whole nibbles",
                self.total_bits()
            )));
        }
        Ok(())
    }

    /// Nibble slots per vector, `m * B / 4`.
    pub fn slots(&self) -> usize {
        self.total_bits() / 4
    }

    /// Dimensions covered by one slot, `4 / B`.
    pub fn dims_per_slot(&self) -> usize {
        4 / self.bits_per_dim
    }

    fn check_code(&self, code: &RecurrentBinaryCode) -> Result<()> {
        if Self::of(code) != *self {
            return Err(Error::invalid(format!(
                "code of shape {:?} in a collection of shape {self:?}",
                Self::of(code)
            )));
        }
        Ok(())
    }
}

/// Decoded scaled value `2c - (2^B - 1)` of a per-dimension code `c`.
pub fn decode_nibble_value(c: u8, bits_per_dim: usize) -> i32 {
    2 * c as i32 - ((1 << bits_per_dim) - 1)
}

/// How per-vector inverse norms are stored in packed blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NormMode {
    /// 32-bit float.
    #[default]
    Exact,
    /// 16-bit fixed point over `(0, 2^u / sqrt(m)]`, relative error at most
    /// `(2^B - 1) / 131070`.
    Q16,
}

impl NormMode {
    pub fn bytes(self) -> usize {
        match self {
            NormMode::Exact => 4,
            NormMode::Q16 => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            NormMode::Exact => 0,
            NormMode::Q16 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(NormMode::Exact),
            1 => Ok(NormMode::Q16),
            _ => Err(Error::format("RBEI segment", format!("unknown norm mode {tag}"))),
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(NormMode::Exact),
            "q16" => Ok(NormMode::Q16),
            _ => Err(Error::invalid(format!("unknown norm mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::Exact => "exact",
            NormMode::Q16 => "q16",
        })
    }
}

/// A stored inverse norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StoredNorm {
    Exact(f32),
    Q16(u16),
}

/// Fixed-point step of the q16 norm: the largest possible inverse norm,
/// `2^u / sqrt(m)`, maps to 65535.
fn q16_step(geom: Geometry) -> f64 {
    (1u64 << geom.residual_loops()) as f64 / (geom.code_dim as f64).sqrt() / 65535.0
}

pub fn quantize_norm(inv_norm: f64, mode: NormMode, geom: Geometry) -> StoredNorm {
    match mode {
        NormMode::Exact => StoredNorm::Exact(inv_norm as f32),
        NormMode::Q16 => {
            let q = (inv_norm / q16_step(geom)).round().clamp(1.0, 65535.0);
            StoredNorm::Q16(q as u16)
        }
    }
}

impl StoredNorm {
    pub fn value(self, geom: Geometry) -> f32 {
        match self {
            StoredNorm::Exact(v) => v,
            StoredNorm::Q16(q) => (q as f64 * q16_step(geom)) as f32,
        }
    }
}

/// Odd lattice integers `2^u * v_j` of one code, plus its inverse norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledIntCode {
    pub values: Vec<i32>,
    pub bits_per_dim: usize,
    pub inv_norm: f64,
}

impl ScaledIntCode {
    pub fn geometry(&self) -> Geometry {
        Geometry {
            code_dim: self.values.len(),
            bits_per_dim: self.bits_per_dim,
        }
    }
}

pub fn to_scaled_int(code: &RecurrentBinaryCode) -> ScaledIntCode {
    ScaledIntCode {
        values: code.scaled_values(),
        bits_per_dim: code.bits_per_dim(),
        inv_norm: code.inv_norm(),
    }
}

/// `n` codes as contiguous plane words: vector `i` occupies
/// `words_per_vector` words, plane after plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneMatrix {
    geom: Geometry,
    words: Vec<u64>,
    inv_norms: Vec<f32>,
}

impl PlaneMatrix {
    pub fn empty(geom: Geometry) -> Self {
        Self {
            geom,
            words: Vec::new(),
            inv_norms: Vec::new(),
        }
    }

    pub fn from_codes(geom: Geometry, codes: &[RecurrentBinaryCode]) -> Result<Self> {
        let mut out = Self::empty(geom);
        out.words.reserve(codes.len() * geom.words_per_vector());
        for code in codes {
            geom.check_code(code)?;
            out.words.extend_from_slice(code.words());
            out.inv_norms.push(code.inv_norm() as f32);
        }
        Ok(out)
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn len(&self) -> usize {
        self.inv_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_norms.is_empty()
    }

    /// All plane words of vector `i`.
    pub fn vector(&self, i: usize) -> &[u64] {
        let w = self.geom.words_per_vector();
        &self.words[i * w..(i + 1) * w]
    }

    pub(crate) fn raw_words(&self) -> &[u64] {
        &self.words
    }

    pub fn inv_norm(&self, i: usize) -> f32 {
        self.inv_norms[i]
    }

    pub fn inv_norms(&self) -> &[f32] {
        &self.inv_norms
    }

    pub fn bit(&self, i: usize, plane: usize, dim: usize) -> bool {
        let wpp = self.geom.words_per_plane();
        self.vector(i)[plane * wpp + dim / 64] >> (dim % 64) & 1 == 1
    }

    pub fn code(&self, i: usize) -> RecurrentBinaryCode {
        RecurrentBinaryCode::from_words(
            self.geom.code_dim,
            self.geom.bits_per_dim,
            self.vector(i).to_vec(),
        )
        .expect("words validated on the way in")
    }

    pub fn to_codes(&self) -> Vec<RecurrentBinaryCode> {
        (0..self.len()).map(|i| self.code(i)).collect()
    }
}

pub fn to_planes(codes: &[RecurrentBinaryCode]) -> Result<PlaneMatrix> {
    let geom = codes
        .first()
        .map(Geometry::of)
        .ok_or_else(|| Error::invalid("cannot infer a geometry from zero codes"))?;
    PlaneMatrix::from_codes(geom, codes)
}

/// Nibble of `code` at `slot`.
pub(crate) fn code_nibble(code: &RecurrentBinaryCode, slot: usize) -> u8 {
    let b = code.bits_per_dim();
    let per = 4 / b;
    let mut c = 0u8;
    for k in 0..per {
        let dim = slot * per + k;
        for p in 0..b {
            c = (c << 1) | code.bit(p, dim) as u8;
        }
    }
    c
}

/// [`BLOCK_LEN`] codes in slot-major nibble layout plus their norms. Lanes
/// at or beyond `valid` are zero and must be ignored by scanners.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedCodeBlock {
    geom: Geometry,
    valid: usize,
    nibbles: Vec<u8>,
    norms: Vec<StoredNorm>,
    /// Dequantized norms, kept alongside for the scan loop.
    inv_norms: [f32; BLOCK_LEN],
}

impl PackedCodeBlock {
    pub fn pack(geom: Geometry, codes: &[RecurrentBinaryCode], mode: NormMode) -> Result<Self> {
        geom.check_sdc()?;
        if codes.is_empty() || codes.len() > BLOCK_LEN {
            return Err(Error::invalid(format!(
                "a block holds 1..={BLOCK_LEN} codes, got {}",
                codes.len()
            )));
        }
        let slots = geom.slots();
        let mut nibbles = vec![0u8; slots * BYTES_PER_SLOT];
        let mut norms = vec![quantize_norm(0.0, mode, geom); BLOCK_LEN];
        let mut inv_norms = [0f32; BLOCK_LEN];
        for (j, code) in codes.iter().enumerate() {
            geom.check_code(code)?;
            for s in 0..slots {
                let c = code_nibble(code, s);
                nibbles[s * BYTES_PER_SLOT + j / 2] |= c << (4 * (j % 2));
            }
            norms[j] = quantize_norm(code.inv_norm(), mode, geom);
            inv_norms[j] = norms[j].value(geom);
        }
        for n in &mut norms[codes.len()..] {
            *n = match mode {
                NormMode::Exact => StoredNorm::Exact(0.0),
                NormMode::Q16 => StoredNorm::Q16(0),
            };
        }
        Ok(Self {
            geom,
            valid: codes.len(),
            nibbles,
            norms,
            inv_norms,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn valid(&self) -> usize {
        self.valid
    }

    /// `slots * BLOCK_LEN / 2` bytes, slot-major.
    pub fn nibbles(&self) -> &[u8] {
        &self.nibbles
    }

    pub fn nibble(&self, slot: usize, lane: usize) -> u8 {
        self.nibbles[slot * BYTES_PER_SLOT + lane / 2] >> (4 * (lane % 2)) & 0xf
    }

    pub fn stored_norms(&self) -> &[StoredNorm] {
        &self.norms
    }

    pub fn inv_norms(&self) -> &[f32; BLOCK_LEN] {
        &self.inv_norms
    }

    /// Plane bit of `(lane, plane, dim)` read through the nibble layout.
    pub fn bit(&self, lane: usize, plane: usize, dim: usize) -> bool {
        let b = self.geom.bits_per_dim;
        let per = 4 / b;
        let c = self.nibble(dim / per, lane);
        let shift = (per - 1 - dim % per) * b + (b - 1 - plane);
        c >> shift & 1 == 1
    }

    /// Recovers the valid codes. The inverse norm is recomputed from the bits,
    /// so it is exact regardless of the storage mode.
    pub fn unpack(&self) -> Vec<RecurrentBinaryCode> {
        (0..self.valid)
            .map(|lane| {
                RecurrentBinaryCode::from_bit_fn(self.geom.code_dim, self.geom.bits_per_dim, |p, j| {
                    self.bit(lane, p, j)
                })
                .expect("geometry validated at pack time")
            })
            .collect()
    }

    /// Serialized size: nibble bytes plus one stored norm per lane.
    pub fn byte_len(&self) -> usize {
        self.nibbles.len() + BLOCK_LEN * self.norm_mode().bytes()
    }

    pub fn norm_mode(&self) -> NormMode {
        match self.norms[0] {
            StoredNorm::Exact(_) => NormMode::Exact,
            StoredNorm::Q16(_) => NormMode::Q16,
        }
    }
}

pub fn pack_block(codes: &[RecurrentBinaryCode], mode: NormMode) -> Result<PackedCodeBlock> {
    let geom = codes
        .first()
        .map(Geometry::of)
        .ok_or_else(|| Error::invalid("cannot pack zero codes"))?;
    PackedCodeBlock::pack(geom, codes, mode)
}

pub fn unpack_block(block: &PackedCodeBlock) -> Vec<RecurrentBinaryCode> {
    block.unpack()
}

/// An ordered run of packed blocks; all blocks but the last are full.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSegment {
    geom: Geometry,
    norm_mode: NormMode,
    count: usize,
    blocks: Vec<PackedCodeBlock>,
}

impl PackedSegment {
    pub fn new(geom: Geometry, codes: &[RecurrentBinaryCode], norm_mode: NormMode) -> Result<Self> {
        geom.check_sdc()?;
        let blocks = codes
            .chunks(BLOCK_LEN)
            .map(|chunk| PackedCodeBlock::pack(geom, chunk, norm_mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geom,
            norm_mode,
            count: codes.len(),
            blocks,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn blocks(&self) -> &[PackedCodeBlock] {
        &self.blocks
    }

    pub fn to_codes(&self) -> Vec<RecurrentBinaryCode> {
        self.blocks.iter().flat_map(|b| b.unpack()).collect()
    }

    /// Bytes of the serialized block array.
    pub fn payload_bytes(&self) -> usize {
        self.blocks.iter().map(|b| b.byte_len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(32 + self.payload_bytes());
        w.bytes(RBEI_MAGIC);
        w.u16(RBEI_VERSION);
        w.u8(self.geom.bits_per_dim as u8);
        w.u8(self.norm_mode.tag());
        w.u32(self.geom.code_dim as u32);
        w.u64(self.count as u64);
        w.u32(BLOCK_LEN as u32);
        for block in &self.blocks {
            w.bytes(&block.nibbles);
            for n in &block.norms {
                match *n {
                    StoredNorm::Exact(v) => w.f32(v),
                    StoredNorm::Q16(q) => w.u16(q),
                }
            }
        }
        w.seal();
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "RBEI segment";
        let mut r = ByteReader::new(bytes, WHAT);
        r.magic(RBEI_MAGIC)?;
        let version = r.u16()?;
        if version != RBEI_VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let b = r.u8()? as usize;
        let norm_mode = NormMode::from_tag(r.u8()?)?;
        let m = r.u32()? as usize;
        let count = r.u64()?;
        let v = r.u32()? as usize;
        if v != BLOCK_LEN {
            return Err(Error::format(WHAT, format!("block length {v}, expected {BLOCK_LEN}")));
        }
        let geom = Geometry::new(m, b)
            .and_then(|g| g.check_sdc().map(|_| g))
            .map_err(|e| Error::format(WHAT, e.to_string()))?;
        let block_bytes = geom.slots() * BYTES_PER_SLOT + BLOCK_LEN * norm_mode.bytes();
        let num_blocks = count.div_ceil(BLOCK_LEN as u64);
        let num_blocks = r.check_len(num_blocks, block_bytes)?;
        let count = count as usize;
        let mut blocks = Vec::with_capacity(num_blocks);
        for i in 0..num_blocks {
            let valid = (count - i * BLOCK_LEN).min(BLOCK_LEN);
            let nibbles = r.take(geom.slots() * BYTES_PER_SLOT)?.to_vec();
            let mut norms = Vec::with_capacity(BLOCK_LEN);
            let mut inv_norms = [0f32; BLOCK_LEN];
            for lane in 0..BLOCK_LEN {
                let n = match norm_mode {
                    NormMode::Exact => StoredNorm::Exact(r.f32()?),
                    NormMode::Q16 => StoredNorm::Q16(r.u16()?),
                };
                inv_norms[lane] = n.value(geom);
                norms.push(n);
            }
            if let Some(lane) = (0..valid).find(|&l| !(inv_norms[l] > 0.0 && inv_norms[l].is_finite())) {
                return Err(Error::format(WHAT, format!("block {i} lane {lane}: bad norm")));
            }
            blocks.push(PackedCodeBlock {
                geom,
                valid,
                nibbles,
                norms,
                inv_norms,
            });
        }
        r.verify_sealed()?;
        r.finish()?;
        Ok(Self {
            geom,
            norm_mode,
            count,
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_code(rng: &mut impl Rng, m: usize, b: usize) -> RecurrentBinaryCode {
        let top = (1 << b) - 1;
        let values: Vec<i32> = (0..m).map(|_| 2 * rng.random_range(0..=top) - top).collect();
        RecurrentBinaryCode::from_scaled(&values, b).unwrap()
    }

    #[test]
    fn single_all_positive_plane() {
        let code = RecurrentBinaryCode::from_signs(&[vec![1i8; 70]]).unwrap();
        let pm = to_planes(std::slice::from_ref(&code)).unwrap();
        assert_eq!(pm.vector(0), &[u64::MAX, 0b111111]);
        assert_eq!(pm.code(0), code);
    }

    #[test]
    fn planes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, b) in &[(3, 1), (64, 4), (100, 3), (128, 2)] {
            let codes: Vec<_> = (0..1000).map(|_| random_code(&mut rng, m, b)).collect();
            let pm = to_planes(&codes).unwrap();
            assert_eq!(pm.to_codes(), codes);
            if m % 64 != 0 {
                let wpp = pm.geometry().words_per_plane();
                for i in 0..pm.len() {
                    for p in 0..b {
                        assert_eq!(pm.vector(i)[p * wpp + wpp - 1] >> (m % 64), 0);
                    }
                }
            }
        }
    }

    #[test]
    fn mixed_shapes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let codes = vec![random_code(&mut rng, 8, 2), random_code(&mut rng, 8, 4)];
        assert!(to_planes(&codes).is_err());
        assert!(pack_block(&codes, NormMode::Exact).is_err());
    }

    #[test]
    fn identical_codes_give_identical_nibbles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let code = random_code(&mut rng, 16, 4);
        let block = pack_block(&vec![code; BLOCK_LEN], NormMode::Exact).unwrap();
        for s in 0..16 {
            let first = block.nibble(s, 0);
            assert!((0..BLOCK_LEN).all(|j| block.nibble(s, j) == first));
        }
    }

    #[test]
    fn all_positive_dimension_is_full_nibble() {
        let planes = vec![vec![1i8, -1, 1, -1]; 4];
        let block = pack_block(&[RecurrentBinaryCode::from_signs(&planes).unwrap()], NormMode::Exact).unwrap();
        assert_eq!(block.nibble(0, 0), 0b1111);
        assert_eq!(block.nibble(1, 0), 0b0000);
    }

    /// Element-at-a-time packer written straight from the layout rules.
    fn naive_pack(codes: &[RecurrentBinaryCode]) -> Vec<u8> {
        let g = Geometry::of(&codes[0]);
        let b = g.bits_per_dim;
        let mut out = vec![0u8; g.slots() * 16];
        for (j, code) in codes.iter().enumerate() {
            let sv = code.scaled_values();
            for s in 0..g.slots() {
                let mut c = 0u32;
                for k in 0..4 / b {
                    let v = sv[s * (4 / b) + k];
                    c = (c << b) | ((v + g.max_scaled()) / 2) as u32;
                }
                let byte = &mut out[s * 16 + j / 2];
                if j % 2 == 0 {
                    *byte |= c as u8;
                } else {
                    *byte |= (c as u8) << 4;
                }
            }
        }
        out
    }

    #[test]
    fn packer_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in [1, 2, 4] {
            for n in [1, 7, 32] {
                let codes: Vec<_> = (0..n).map(|_| random_code(&mut rng, 24, b)).collect();
                let block = pack_block(&codes, NormMode::Exact).unwrap();
                assert_eq!(block.nibbles(), naive_pack(&codes).as_slice());
                assert_eq!(unpack_block(&block), codes);
                // layout identity with the plane matrix
                let pm = to_planes(&codes).unwrap();
                for j in 0..n {
                    for p in 0..b {
                        for d in 0..24 {
                            assert_eq!(block.bit(j, p, d), pm.bit(j, p, d));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn three_bits_cannot_be_packed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let codes = vec![random_code(&mut rng, 8, 3)];
        assert!(pack_block(&codes, NormMode::Exact).is_err());
    }

    #[test]
    fn scaled_int_examples() {
        let code = RecurrentBinaryCode::from_signs(&[vec![1i8; 3], vec![-1; 3]]).unwrap();
        assert_eq!(to_scaled_int(&code).values, vec![1, 1, 1]);
        let code = RecurrentBinaryCode::from_signs(&vec![vec![-1i8; 3]; 4]).unwrap();
        assert_eq!(to_scaled_int(&code).values, vec![-15, -15, -15]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let code = random_code(&mut rng, 40, 3);
            let s = to_scaled_int(&code);
            for (v, d) in s.values.iter().zip(code.decode()) {
                assert_eq!(*v as f64, d * 4.0);
            }
        }
    }

    #[test]
    fn norm_quantization() {
        let g = Geometry::new(64, 1).unwrap();
        let code = RecurrentBinaryCode::from_signs(&[vec![1i8; 64]]).unwrap();
        assert_eq!(code.inv_norm(), 0.125);
        assert_eq!(quantize_norm(0.125, NormMode::Exact, g).value(g), 0.125);
        assert_eq!(quantize_norm(0.125, NormMode::Q16, g).value(g), 0.125);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bound = 2f64.powi(-12);
        for b in [1, 2, 4] {
            let g = Geometry::new(64, b).unwrap();
            for _ in 0..100_000 / 3 {
                let inv = random_code(&mut rng, 64, b).inv_norm();
                let exact = quantize_norm(inv, NormMode::Exact, g).value(g);
                assert_eq!(exact, inv as f32);
                let q = quantize_norm(inv, NormMode::Q16, g).value(g) as f64;
                assert!(((q - inv) / inv).abs() <= bound);
            }
        }
    }

    #[test]
    fn segment_file_round_trip_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = Geometry::new(64, 4).unwrap();
        for mode in [NormMode::Exact, NormMode::Q16] {
            let codes: Vec<_> = (0..100).map(|_| random_code(&mut rng, 64, 4)).collect();
            let seg = PackedSegment::new(g, &codes, mode).unwrap();
            assert_eq!(seg.blocks().len(), 4);
            assert_eq!(seg.blocks()[3].valid(), 4);
            assert_eq!(seg.payload_bytes(), 4 * (64 * 4 / 8 * 32 + 32 * mode.bytes()));
            let bytes = seg.encode();
            assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 4 + 8 + 4 + seg.payload_bytes() + 4);
            let back = PackedSegment::decode(&bytes).unwrap();
            assert_eq!(back, seg);
            assert_eq!(back.to_codes(), codes);
            let mut bad = bytes.clone();
            bad[40] ^= 0x10;
            assert!(PackedSegment::decode(&bad).is_err());
        }
        let empty = PackedSegment::new(g, &[], NormMode::Exact).unwrap();
        assert_eq!(PackedSegment::decode(&empty.encode()).unwrap(), empty);
    }
}
