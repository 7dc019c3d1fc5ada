//! Internal dataset file.
//!
//! ```text
//! magic        4 bytes  "FTDS"
//! version      u32      DATASET_VERSION
//! n            u64      image count
//! class_count  u32
//! shape        3 × u32  C, H, W
//! split        u8       0 train, 1 val, 2 test
//! prov_len     u32
//! provenance   prov_len bytes of UTF-8 JSON
//! labels       n × u16
//! ids          n × u64
//! pixels       n·C·H·W × f32
//! ```
//!
//! Integers and floats are little-endian. Pixels are stored as f32 because
//! distorted images are not quantized.

use std::path::Path;

use crate::data::{Dataset, Provenance, SplitTag};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"FTDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.class_count > u16::MAX as usize + 1 {
        return Err(Error::Usage("class count exceeds the u16 label field".into()));
    }
    let prov = serde_json::to_vec(&ds.provenance)?;
    let mut out = Vec::with_capacity(64 + prov.len() + ds.len() * 10 + ds.pixels.len() * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.class_count as u32).to_le_bytes());
    for d in ds.image_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(ds.split.code());
    out.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    out.extend_from_slice(&prov);
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u16).to_le_bytes());
    }
    for &id in &ds.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for &p in &ds.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(Error::format(field, format!("truncated: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, field: &str) -> Result<[u8; N]> {
        Ok(self.take(N, field)?.try_into().expect("length checked"))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format("magic", "not a filter-triage dataset file"));
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != DATASET_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(c.array("n")?) as usize;
    let class_count = u32::from_le_bytes(c.array("class_count")?) as usize;
    let mut shape = [0usize; 3];
    for d in &mut shape {
        *d = u32::from_le_bytes(c.array("shape")?) as usize;
    }
    let split =
        SplitTag::from_code(c.array::<1>("split")?[0]).ok_or_else(|| Error::format("split", "unknown split code"))?;
    let prov_len = u32::from_le_bytes(c.array("provenance")?) as usize;
    let provenance: Provenance = serde_json::from_slice(c.take(prov_len, "provenance")?)
        .map_err(|e| Error::format("provenance", e.to_string()))?;
    let d: usize = shape.iter().product();
    let expected = n
        .checked_mul(2 + 8 + 4 * d)
        .ok_or_else(|| Error::format("n", "image count overflows"))?;
    if bytes.len() - c.pos != expected {
        return Err(Error::format(
            "payload",
            format!(
                "expected {expected} bytes for {n} images, found {}",
                bytes.len() - c.pos
            ),
        ));
    }
    let labels = c
        .take(2 * n, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect();
    let ids = c
        .take(8 * n, "ids")?
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let pixels = c
        .take(4 * n * d, "pixels")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Dataset::new(shape, pixels, labels, ids, class_count, split, provenance)
        .map_err(|e| Error::format("payload", e.to_string()))
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortion::DistortionSpec;

    fn sample() -> Dataset {
        Dataset::new(
            [2, 1, 2],
            vec![0.0, 1.5, 254.25, 3.0, 7.0, 8.0, 9.0, 10.0],
            vec![3, 0],
            vec![5, 1_000_001],
            4,
            SplitTag::Test,
            Provenance {
                source: "unit".into(),
                distortion: Some(DistortionSpec::awgn(15.0, 2)),
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let ds = sample();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = encode_dataset(&sample()).unwrap();
        for cut in [0, 2, 10, bytes.len() - 1] {
            assert!(
                matches!(decode_dataset(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(matches!(decode_dataset(&extra), Err(Error::Format { .. })));
    }
}
