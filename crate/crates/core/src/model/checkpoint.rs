//! `RBEM` checkpoint files.
//!
//! ```text
//! "RBEM" | version u16 = 1 | d u32 | m u32 | u u32 | h u32
//!        | tag_len u32 | tag utf-8
//!        | per block (W0..Wu, R0..R(u-1)):
//!            fc1.weight, fc1.bias, bn.gamma, bn.beta,
//!            bn.running_mean, bn.running_var, fc2.weight, fc2.bias   (f32 LE)
//!        | crc32c of all preceding bytes
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{BatchNorm, Linear, MlpBlock, RbeConfig, RbeModel};
use crate::error::{Error, Result};
use crate::io::{read_file, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"RBEM";
const VERSION: u16 = 1;
const WHAT: &str = "RBEM checkpoint";

fn write_block(w: &mut ByteWriter, b: &MlpBlock<f32>) {
    let tensors = [
        b.fc1.weight.as_slice().unwrap(),
        b.fc1.bias.as_slice().unwrap(),
        b.bn.gamma.as_slice().unwrap(),
        b.bn.beta.as_slice().unwrap(),
        b.bn.running_mean.as_slice().unwrap(),
        b.bn.running_var.as_slice().unwrap(),
        b.fc2.weight.as_slice().unwrap(),
        b.fc2.bias.as_slice().unwrap(),
    ];
    for t in tensors {
        w.f32s(t);
    }
}

fn read_block(r: &mut ByteReader<'_>, dim_in: usize, hidden: usize, dim_out: usize) -> Result<MlpBlock<f32>> {
    let mut vec = |n: usize| -> Result<Array1<f32>> { Ok(Array1::from(r.f32s(n)?)) };
    let fc1_w = vec(hidden * dim_in)?;
    let fc1_b = vec(hidden)?;
    let gamma = vec(hidden)?;
    let beta = vec(hidden)?;
    let running_mean = vec(hidden)?;
    let running_var = vec(hidden)?;
    let fc2_w = vec(dim_out * hidden)?;
    let fc2_b = vec(dim_out)?;
    let mat = |a: Array1<f32>, rows, cols| -> Array2<f32> {
        a.into_shape_with_order((rows, cols)).expect("length read to match")
    };
    let block = MlpBlock {
        fc1: Linear {
            weight: mat(fc1_w, hidden, dim_in),
            bias: fc1_b,
        },
        bn: BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        },
        fc2: Linear {
            weight: mat(fc2_w, dim_out, hidden),
            bias: fc2_b,
        },
    };
    if block.params().iter().chain(&block.buffers()).any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::format(WHAT, "non-finite parameter"));
    }
    if block.bn.running_var.iter().any(|&v| v <= 0.0) {
        return Err(Error::format(WHAT, "non-positive running variance"));
    }
    Ok(block)
}

pub fn encode_checkpoint(model: &RbeModel<f32>) -> Vec<u8> {
    let c = model.config();
    let mut w = ByteWriter::with_capacity(64 + model.num_params() * 4);
    w.bytes(MAGIC);
    w.u16(VERSION);
    for v in [c.input_dim, c.code_dim, c.residual_loops, c.hidden_dim] {
        w.u32(v as u32);
    }
    w.u32(model.version_tag.len() as u32);
    w.bytes(model.version_tag.as_bytes());
    for b in model.binarize_blocks().iter().chain(model.reconstruct_blocks()) {
        write_block(&mut w, b);
    }
    w.seal();
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RbeModel<f32>> {
    let mut r = ByteReader::new(bytes, WHAT);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(WHAT, format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let m = r.u32()? as usize;
    let u = r.u32()? as usize;
    let h = r.u32()? as usize;
    let config = RbeConfig {
        input_dim: d,
        code_dim: m,
        residual_loops: u,
        hidden_dim: h,
    };
    config
        .validate()
        .map_err(|e| Error::format(WHAT, e.to_string()))?;
    let tag_len = r.u32()?;
    let tag_len = r.check_len(tag_len as u64, 1)?;
    let tag = std::str::from_utf8(r.take(tag_len)?)
        .map_err(|_| Error::format(WHAT, "version tag is not UTF-8"))?
        .to_owned();
    let per_w = h * d + 5 * h + m * h + m;
    let per_r = h * m + 5 * h + d * h + d;
    let expected = ((u + 1) * per_w + u * per_r) as u64;
    r.check_len(expected, 4)?;
    let binarize = (0..=u)
        .map(|_| read_block(&mut r, d, h, m))
        .collect::<Result<Vec<_>>>()?;
    let reconstruct = (0..u)
        .map(|_| read_block(&mut r, m, h, d))
        .collect::<Result<Vec<_>>>()?;
    r.verify_sealed()?;
    r.finish()?;
    RbeModel::from_parts(config, binarize, reconstruct, tag)
}

pub fn save_model(model: &RbeModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RbeModel<f32>> {
    decode_checkpoint(&read_file(path.as_ref())?)
}
