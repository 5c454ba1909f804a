//! Binary dump of Jacobians and suffix products.
//!
//! Layout (little-endian): magic `LBITRACE`, `u32` version, `u64` K, `u64` r,
//! `u64` batch, then `J[b][k]` for every batch element and region, then
//! `P[b][k]` for `k = 0..=K`, each matrix row-major f64.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LBITRACE";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// `jacobians[b][k]`, each `[r, r]`.
    pub jacobians: Vec<Vec<Tensor>>,
    /// `products[b][k]` for `k = 0..=K`.
    pub products: Vec<Vec<Tensor>>,
}

pub fn write_trace(path: &Path, trace: &Trace) -> Result<()> {
    let batch = trace.jacobians.len();
    let k = trace.jacobians.first().map_or(0, Vec::len);
    let r = trace.products.first().and_then(|p| p.first()).map_or(0, |m| m.shape()[0]);
    if trace.products.len() != batch {
        return Err(Error::dim("write_trace", "jacobian and product batch sizes differ"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [k, r, batch] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for (group, expected) in [(&trace.jacobians, k), (&trace.products, k + 1)] {
        for per_batch in group.iter() {
            if per_batch.len() != expected {
                return Err(Error::dim("write_trace", "ragged trace"));
            }
            for m in per_batch {
                if m.shape() != [r, r] {
                    return Err(Error::dim("write_trace", format!("matrix {:?}, expected [{r}, {r}]", m.shape())));
                }
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 36 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a trace file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize;
    let (k, r, batch) = (word(0), word(1), word(2));
    let expected = 36 + 8 * r * r * batch * (2 * k + 1);
    if bytes.len() != expected {
        return Err(Error::Format(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut pos = 36;
    let mut matrix = || {
        let data = bytes[pos..pos + 8 * r * r]
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * r * r;
        Tensor::new(vec![r, r], data)
    };
    let mut jacobians = Vec::with_capacity(batch);
    for _ in 0..batch {
        jacobians.push((0..k).map(|_| matrix()).collect::<Result<Vec<_>>>()?);
    }
    let mut products = Vec::with_capacity(batch);
    for _ in 0..batch {
        products.push((0..=k).map(|_| matrix()).collect::<Result<Vec<_>>>()?);
    }
    Ok(Trace { jacobians, products })
}
