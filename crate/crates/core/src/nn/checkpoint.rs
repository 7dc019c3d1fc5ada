//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes   "FTRG"
//! version      u32       FORMAT_VERSION
//! desc_len     u32
//! descriptor   desc_len bytes of UTF-8 JSON:
//!              {"scalar": "f32"|"f64", "arch": <ArchitectureSpec>}
//! n_records    u32
//! n_records × record:
//!   name_len   u32
//!   name       name_len bytes of UTF-8, e.g. "layers.0.weight"
//!   ndim       u32
//!   dims       ndim × u64
//!   values     product(dims) scalars, little-endian IEEE-754 of the
//!              descriptor's scalar width
//! ```
//!
//! Records appear in layer order. Each convolution or dense layer contributes
//! `weight` then `bias`; each batch norm contributes `gamma`, `beta`,
//! `running_mean`, `running_var`. The stream must end exactly after the last
//! record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::{Layer, Network};
use crate::nn::spec::ArchitectureSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTRG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    scalar: String,
    arch: ArchitectureSpec,
}

fn records<T: Scalar>(net: &Network<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        for (name, p) in layer.params() {
            out.push((
                format!("layers.{i}.{name}"),
                p.value.shape().to_vec(),
                p.value.data().to_vec(),
            ));
        }
        if let Layer::BatchNorm(bn) = layer {
            let c = bn.channels();
            out.push((format!("layers.{i}.running_mean"), vec![c], bn.running_mean.clone()));
            out.push((format!("layers.{i}.running_var"), vec![c], bn.running_var.clone()));
        }
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes architecture, parameters and running statistics.
pub fn checkpoint_save<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    for (name, p) in net.named_params() {
        p.value.check_finite(&name)?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let desc = serde_json::to_vec(&Descriptor {
        scalar: T::NAME.to_string(),
        arch: net.arch().clone(),
    })?;
    put_u32(&mut out, desc.len());
    out.extend_from_slice(&desc);
    let recs = records(net);
    put_u32(&mut out, recs.len());
    for (name, shape, values) in recs {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len());
        for d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!(
                    "stream truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)? as usize;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(field, "invalid UTF-8"))
    }
}

/// Rebuilds a network from [`checkpoint_save`] output. Any inconsistency
/// fails without returning a partial network.
pub fn checkpoint_load<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a filter-triage checkpoint"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let desc_raw = r.string("descriptor")?;
    let desc: Descriptor = serde_json::from_str(&desc_raw).map_err(|e| Error::format("descriptor", e.to_string()))?;
    if desc.scalar != T::NAME {
        return Err(Error::format(
            "descriptor.scalar",
            format!("checkpoint holds {} values, requested {}", desc.scalar, T::NAME),
        ));
    }
    let mut net = Network::<T>::new(desc.arch, 0).map_err(|e| Error::format("descriptor.arch", e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = records(&net).into_iter().map(|(n, s, _)| (n, s)).collect();
    let count = r.u32("n_records")? as usize;
    if count != expected.len() {
        return Err(Error::format(
            "n_records",
            format!("{count} records, architecture needs {}", expected.len()),
        ));
    }
    let mut loaded: Vec<Vec<T>> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let got = r.string("record.name")?;
        if &got != name {
            return Err(Error::format(
                "record.name",
                format!("expected `{name}`, found `{got}`"),
            ));
        }
        let ndim = r.u32(name)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64(name)? as usize);
        }
        if &dims != shape {
            return Err(Error::format(
                name,
                format!("shape {dims:?}, architecture needs {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * T::BYTES, name)?;
        let values: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(name, "non-finite value"));
        }
        loaded.push(values);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        ));
    }

    let mut it = loaded.into_iter();
    for layer in net.layers_mut() {
        for (_, p) in layer.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = Tensor::new(shape, it.next().expect("record count checked"))?;
        }
        if let Layer::BatchNorm(bn) = layer {
            bn.running_mean = it.next().expect("record count checked");
            bn.running_var = it.next().expect("record count checked");
        }
    }
    Ok(net)
}

/// Reads a checkpoint file.
pub fn load_file<T: Scalar>(path: &std::path::Path) -> Result<Network<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_load(&bytes)
}

/// Writes a checkpoint file.
pub fn save_file<T: Scalar>(net: &Network<T>, path: &std::path::Path) -> Result<()> {
    let bytes = checkpoint_save(net)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
