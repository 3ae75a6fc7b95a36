use crate::error::{Error, Result};

/// Sign planes of one recurrent binary code.
///
/// Plane 0 is the base code, plane `i` the residual added with weight
/// `2^-i`. Bit 1 stands for `+1`, bit 0 for `-1`. Each plane occupies
/// `ceil(m / 64)` words with zero padding above bit `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentBinaryCode {
    code_dim: usize,
    num_planes: usize,
    words: Vec<u64>,
    inv_norm: f64,
}

pub(crate) fn words_per_plane(code_dim: usize) -> usize {
    code_dim.div_ceil(64)
}

impl RecurrentBinaryCode {
    /// Builds a code from packed plane words, validating the padding bits.
    pub fn from_words(code_dim: usize, num_planes: usize, words: Vec<u64>) -> Result<Self> {
        if code_dim == 0 || num_planes == 0 {
            return Err(Error::invalid("code needs at least one dimension and one plane"));
        }
        let wpp = words_per_plane(code_dim);
        if words.len() != wpp * num_planes {
            return Err(Error::invalid(format!(
                "{} words for {num_planes} planes of {code_dim} bits",
                words.len()
            )));
        }
        let tail = code_dim % 64;
        if tail != 0 {
            let pad_mask = !((1u64 << tail) - 1);
            for p in 0..num_planes {
                if words[p * wpp + wpp - 1] & pad_mask != 0 {
                    return Err(Error::invalid("non-zero padding bits in plane"));
                }
            }
        }
        let mut code = Self {
            code_dim,
            num_planes,
            words,
            inv_norm: 0.0,
        };
        code.inv_norm = code.compute_inv_norm();
        Ok(code)
    }

    /// `signs[p][j]` is the sign of plane `p` at dimension `j`; positive
    /// values map to `+1`, everything else to `-1`.
    pub fn from_signs<S: AsRef<[i8]>>(signs: &[S]) -> Result<Self> {
        let num_planes = signs.len();
        let code_dim = signs.first().map_or(0, |s| s.as_ref().len());
        if signs.iter().any(|s| s.as_ref().len() != code_dim) {
            return Err(Error::invalid("planes of unequal length"));
        }
        Self::from_bit_fn(code_dim, num_planes, |p, j| signs[p].as_ref()[j] > 0)
    }

    pub(crate) fn from_bit_fn(
        code_dim: usize,
        num_planes: usize,
        bit: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        let wpp = words_per_plane(code_dim);
        let mut words = vec![0u64; wpp * num_planes];
        for p in 0..num_planes {
            for j in 0..code_dim {
                if bit(p, j) {
                    words[p * wpp + j / 64] |= 1 << (j % 64);
                }
            }
        }
        Self::from_words(code_dim, num_planes, words)
    }

    /// Inverse of [`scaled_values`](Self::scaled_values): every value must be
    /// odd and within `+-(2^B - 1)`.
    pub fn from_scaled(values: &[i32], bits_per_dim: usize) -> Result<Self> {
        if bits_per_dim == 0 || bits_per_dim > 16 {
            return Err(Error::invalid(format!("bits per dimension {bits_per_dim}")));
        }
        let top = (1i32 << bits_per_dim) - 1;
        for &v in values {
            if v % 2 == 0 || v.abs() > top {
                return Err(Error::invalid(format!(
                    "{v} is not an odd lattice value for {bits_per_dim} bits"
                )));
            }
        }
        Self::from_bit_fn(values.len(), bits_per_dim, |p, j| {
            let c = ((values[j] + top) / 2) as u32;
            (c >> (bits_per_dim - 1 - p)) & 1 == 1
        })
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn num_planes(&self) -> usize {
        self.num_planes
    }

    pub fn residual_loops(&self) -> usize {
        self.num_planes - 1
    }

    pub fn bits_per_dim(&self) -> usize {
        self.num_planes
    }

    pub fn total_bits(&self) -> usize {
        self.num_planes * self.code_dim
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn plane(&self, p: usize) -> &[u64] {
        let wpp = words_per_plane(self.code_dim);
        &self.words[p * wpp..(p + 1) * wpp]
    }

    pub fn bit(&self, p: usize, j: usize) -> bool {
        self.plane(p)[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn sign(&self, p: usize, j: usize) -> i32 {
        if self.bit(p, j) {
            1
        } else {
            -1
        }
    }

    /// `2^u * v_j`: odd integers in `[-(2^B - 1), 2^B - 1]`.
    pub fn scaled_values(&self) -> Vec<i32> {
        let u = self.residual_loops();
        (0..self.code_dim)
            .map(|j| {
                (0..self.num_planes)
                    .map(|p| self.sign(p, j) << (u - p))
                    .sum()
            })
            .collect()
    }

    /// Lattice values `v_j = b0_j + sum_i 2^-i r_{i-1,j}`.
    pub fn decode(&self) -> Vec<f64> {
        let scale = (1u64 << self.residual_loops()) as f64;
        self.scaled_values()
            .into_iter()
            .map(|s| s as f64 / scale)
            .collect()
    }

    /// `1 / ||v||` of the decoded vector.
    pub fn inv_norm(&self) -> f64 {
        self.inv_norm
    }

    fn compute_inv_norm(&self) -> f64 {
        let sq: i64 = self
            .scaled_values()
            .iter()
            .map(|&s| (s as i64) * (s as i64))
            .sum();
        (1u64 << self.residual_loops()) as f64 / (sq as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_residual_example() {
        let code = RecurrentBinaryCode::from_signs(&[[1i8], [-1]]).unwrap();
        assert_eq!(code.decode(), vec![0.5]);
    }

    #[test]
    fn all_positive_three_residuals() {
        let planes = vec![vec![1i8; 5]; 4];
        let code = RecurrentBinaryCode::from_signs(&planes).unwrap();
        assert!(code.decode().iter().all(|&v| v == 1.875));
        assert!(code.scaled_values().iter().all(|&v| v == 15));
    }

    #[test]
    fn every_plane_combination_is_an_odd_lattice_point() {
        // exhaustive over all 2^B sign patterns of one dimension
        for b in 1..=4usize {
            let mut seen = std::collections::BTreeSet::new();
            for pattern in 0u32..(1 << b) {
                let planes: Vec<Vec<i8>> = (0..b)
                    .map(|p| vec![if pattern >> p & 1 == 1 { 1 } else { -1 }])
                    .collect();
                let code = RecurrentBinaryCode::from_signs(&planes).unwrap();
                let s = code.scaled_values()[0];
                assert!(s % 2 != 0 && s.abs() < (1 << b));
                let back = RecurrentBinaryCode::from_scaled(&[s], b).unwrap();
                assert_eq!(back, code);
                seen.insert(s);
            }
            // decode is injective per dimension
            assert_eq!(seen.len(), 1 << b);
        }
    }

    #[test]
    fn inv_norm_of_pure_sign_code() {
        let code = RecurrentBinaryCode::from_signs(&[vec![1i8, -1, 1, 1]]).unwrap();
        assert_eq!(code.inv_norm(), 0.5);
    }

    #[test]
    fn padding_bits_are_rejected() {
        assert!(RecurrentBinaryCode::from_words(3, 1, vec![0b1000]).is_err());
        assert!(RecurrentBinaryCode::from_words(3, 1, vec![0b0111]).is_ok());
        assert!(RecurrentBinaryCode::from_scaled(&[2], 2).is_err());
        assert!(RecurrentBinaryCode::from_scaled(&[5], 2).is_err());
    }
}
