//! Tensor snapshot format: a text header line `shape: d0 d1 ...` followed by
//! the values as little-endian f64.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_snapshot_to<W: Write>(w: &mut W, tensor: &Tensor) -> std::io::Result<()> {
    let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "shape: {}", dims.join(" "))?;
    let mut bytes = Vec::with_capacity(tensor.len() * 8);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub fn read_snapshot_from<R: BufRead>(r: &mut R) -> Result<Tensor> {
    let mut header = String::new();
    r.read_line(&mut header)
        .map_err(|e| Error::io("reading snapshot header", e))?;
    let dims = header
        .trim_end()
        .strip_prefix("shape:")
        .ok_or_else(|| Error::Checkpoint(format!("bad snapshot header `{}`", header.trim_end())))?;
    let shape = dims
        .split_whitespace()
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad dimension `{d}` in snapshot header")))
        })
        .collect::<Result<Vec<_>>>()?;
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::io("reading snapshot payload", e))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_snapshot(path: &Path, tensor: &Tensor) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    write_snapshot_to(&mut w, tensor).map_err(|e| Error::io(ctx(), e))?;
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn read_snapshot(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_snapshot_from(&mut BufReader::new(file))
}
