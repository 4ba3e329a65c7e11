//! On-disk parameter checkpoints: a versioned little-endian binary holding
//! every trainable tensor and batch-norm running moment by name.
//!
//! Layout: header (8-byte magic, version u32, K u32, the nine extractor
//! config fields, n_classes u32, tensor count u32), then one record per
//! tensor (name length u32, UTF-8 name, rank u32, dims u32 each, raw
//! little-endian 64-bit floats). Round-trips are bit-exact, so a reloaded
//! network scores batches identically to the one that was saved.

use crate::error::{Error, Result};
use crate::model::{EnsembleNetwork, ExtractorConfig};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"ECLCKPT\0";
const VERSION: u32 = 1;

fn write_usize_u32(w: &mut impl Write, label: &str, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Format(format!("{label} {v} exceeds the checkpoint u32 range")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_record(w: &mut impl Write, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    write_usize_u32(w, "tensor name length", name.len())?;
    w.write_all(name.as_bytes())?;
    write_usize_u32(w, "tensor rank", dims.len())?;
    for &d in dims {
        write_usize_u32(w, "tensor dim", d)?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Saves every parameter and running moment of `net` to `path`.
pub fn save_checkpoint(path: &Path, net: &EnsembleNetwork) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_usize_u32(&mut w, "ensemble size", net.k())?;
    let cfg = &net.cfg;
    write_usize_u32(&mut w, "channels", cfg.channels)?;
    write_usize_u32(&mut w, "samples", cfg.samples)?;
    write_usize_u32(&mut w, "temporal_filters", cfg.temporal_filters)?;
    write_usize_u32(&mut w, "depth_multiplier", cfg.depth_multiplier)?;
    write_usize_u32(&mut w, "separable_filters", cfg.separable_filters)?;
    write_usize_u32(&mut w, "temporal_kernel_len", cfg.temporal_kernel_len)?;
    write_usize_u32(&mut w, "pool1", cfg.pool1)?;
    write_usize_u32(&mut w, "pool2", cfg.pool2)?;
    w.write_all(&cfg.dropout_p.to_le_bytes())?;
    write_usize_u32(&mut w, "n_classes", net.n_classes)?;

    let params = net.named_tensors();
    let moments = net.state_tensors();
    write_usize_u32(&mut w, "tensor count", params.len() + moments.len())?;
    for (name, tensor) in params {
        write_record(&mut w, &name, tensor.shape(), tensor.data())?;
    }
    for (name, values) in moments {
        write_record(&mut w, &name, &[values.len()], &values)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32_usize(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_exact(r)?) as usize)
}

fn read_record(r: &mut impl Read) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = read_u32_usize(r)?;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
    let rank = read_u32_usize(r)?;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u32_usize(r)?);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(read_exact(r)?));
    }
    Ok((name, dims, data))
}

/// Loads a checkpoint written by [`save_checkpoint`] into a freshly built
/// network. Every tensor the architecture expects must be present with its
/// exact shape, and the file must not carry tensors the architecture lacks.
pub fn load_checkpoint(path: &Path) -> Result<EnsembleNetwork> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let k = read_u32_usize(&mut r)?;
    let cfg = ExtractorConfig {
        channels: read_u32_usize(&mut r)?,
        samples: read_u32_usize(&mut r)?,
        temporal_filters: read_u32_usize(&mut r)?,
        depth_multiplier: read_u32_usize(&mut r)?,
        separable_filters: read_u32_usize(&mut r)?,
        temporal_kernel_len: read_u32_usize(&mut r)?,
        pool1: read_u32_usize(&mut r)?,
        pool2: read_u32_usize(&mut r)?,
        dropout_p: f64::from_le_bytes(read_exact(&mut r)?),
    };
    let n_classes = read_u32_usize(&mut r)?;
    let n_tensors = read_u32_usize(&mut r)?;

    let mut records: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_tensors {
        let (name, dims, data) = read_record(&mut r)?;
        if records.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor record {name}")));
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format(
            "checkpoint has trailing bytes beyond declared tensors".into(),
        ));
    }

    let mut net = EnsembleNetwork::new(cfg, k, n_classes, 0)?;
    for (name, tensor) in net.named_tensors_mut() {
        let (dims, data) = records
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if dims != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {dims:?}, architecture expects {:?}",
                tensor.shape()
            )));
        }
        *tensor = crate::tensor::Tensor::new(dims, data)?;
    }
    for (name, values) in net.state_tensors_mut() {
        let (dims, data) = records
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if dims != [values.len()] {
            return Err(Error::Format(format!(
                "tensor {name} has shape {dims:?}, architecture expects [{}]",
                values.len()
            )));
        }
        *values = data;
    }
    if let Some(name) = records.into_keys().next() {
        return Err(Error::Format(format!(
            "checkpoint carries unknown tensor {name}"
        )));
    }
    Ok(net)
}
