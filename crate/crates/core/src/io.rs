//! Binary tensor container plus a JSON sidecar manifest.
//!
//! A container file is a sequence of records. Each record is:
//!
//! ```text
//! magic   8 bytes  "RREFBANK"
//! version u32 LE
//! rank    u32 LE
//! extents u64 LE x rank
//! dtype   u8       0 = f64, 1 = f32
//! data    raw little-endian row-major payload
//! ```
//!
//! The sidecar manifest (same path with `.json` appended) names each record
//! in order and may carry arbitrary extra metadata under `"meta"`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RREFBANK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Dtype> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

/// One named tensor inside a container.
#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub dtype: Dtype,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    index: usize,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    PathBuf::from(os)
}

fn write_record(out: &mut impl Write, t: &Tensor, dtype: Dtype) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    out.write_all(&[dtype.tag()])?;
    match dtype {
        Dtype::F64 => {
            for &v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_record(input: &mut impl Read) -> Result<Option<(Tensor, Dtype)>> {
    let mut magic = [0u8; 8];
    match input.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    input.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        input.read_exact(&mut u64buf)?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let dtype = Dtype::from_tag(tag[0])?;
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    match dtype {
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..len {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..len {
                input.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
    }
    Ok(Some((Tensor::from_vec(&shape, data)?, dtype)))
}

/// Writes named tensors and the sidecar manifest. `meta` is stored verbatim
/// in the manifest.
pub fn write_bank(
    path: &Path,
    records: &[(&str, &Tensor, Dtype)],
    meta: serde_json::Value,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let mut entries = Vec::with_capacity(records.len());
    for (index, (name, tensor, dtype)) in records.iter().enumerate() {
        write_record(&mut out, tensor, *dtype)?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            index,
            shape: tensor.shape().to_vec(),
            dtype: *dtype,
        });
    }
    out.flush()?;
    let manifest = Manifest {
        version: VERSION,
        tensors: entries,
        meta,
    };
    let mut mf = BufWriter::new(File::create(manifest_path(path))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    Ok(())
}

/// Reads every record of a container. Names come from the manifest when it
/// exists and is consistent; otherwise records are named by index.
pub fn read_bank(path: &Path) -> Result<(Vec<NamedTensor>, serde_json::Value)> {
    let mut input = BufReader::new(File::open(path)?);
    let mut tensors = Vec::new();
    while let Some((tensor, dtype)) = read_record(&mut input)? {
        tensors.push(NamedTensor {
            name: format!("tensor{}", tensors.len()),
            tensor,
            dtype,
        });
    }
    let mpath = manifest_path(path);
    let mut meta = serde_json::Value::Null;
    if mpath.exists() {
        let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(&mpath)?))?;
        for entry in &manifest.tensors {
            let rec = tensors.get_mut(entry.index).ok_or_else(|| {
                Error::Format(format!(
                    "manifest entry {} points past {} records",
                    entry.index,
                    entry.name
                ))
            })?;
            if rec.tensor.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "manifest shape {:?} disagrees with record shape {:?} for {}",
                    entry.shape,
                    rec.tensor.shape(),
                    entry.name
                )));
            }
            rec.name = entry.name.clone();
        }
        meta = manifest.meta;
    }
    Ok((tensors, meta))
}

/// Looks up one tensor by manifest name.
pub fn find_tensor<'a>(records: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn tempdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "rrefbank-test-{}-{:x}",
            std::process::id(),
            Rng::new(std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .subsec_nanos() as u64)
            .next_u64()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let dir = tempdir();
        let path = dir.join("bank.rrefbank");
        let mut rng = Rng::new(50);
        let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let meta = serde_json::json!({ "purpose": "test" });
        write_bank(&path, &[("weights", &t, Dtype::F64)], meta).unwrap();
        let (records, meta) = read_bank(&path).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].name, "weights");
        assert_eq!(meta["purpose"], "test");
        for (a, b) in t.data().iter().zip(records[0].tensor.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn f32_roundtrip_loses_only_precision() {
        let dir = tempdir();
        let path = dir.join("bank32.rrefbank");
        let t = Tensor::from_vec(&[3], vec![1.5, -0.25, 1.0e-3]).unwrap();
        write_bank(&path, &[("t", &t, Dtype::F32)], serde_json::Value::Null).unwrap();
        let (records, _) = read_bank(&path).unwrap();
        for (a, b) in t.data().iter().zip(records[0].tensor.data()) {
            assert!((a - b).abs() <= a.abs() * 1e-7 + 1e-10);
        }
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempdir();
        let path = dir.join("bad.rrefbank");
        std::fs::write(&path, b"NOTABANKxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_bank(&path), Err(Error::Format(_))));
        std::fs::remove_dir_all(dir).unwrap();
    }

    proptest! {
        #[test]
        fn multi_record_roundtrip(
            a in proptest::collection::vec(-1.0e6..1.0e6f64, 1..32),
            b in proptest::collection::vec(-1.0e6..1.0e6f64, 1..32),
        ) {
            let dir = tempdir();
            let path = dir.join("multi.rrefbank");
            let ta = Tensor::from_vec(&[a.len()], a).unwrap();
            let tb = Tensor::from_vec(&[b.len()], b).unwrap();
            write_bank(
                &path,
                &[("a", &ta, Dtype::F64), ("b", &tb, Dtype::F64)],
                serde_json::Value::Null,
            )
            .unwrap();
            let (records, _) = read_bank(&path).unwrap();
            prop_assert_eq!(records.len(), 2);
            prop_assert_eq!(records[0].tensor.data(), ta.data());
            prop_assert_eq!(records[1].tensor.data(), tb.data());
            prop_assert_eq!(find_tensor(&records, "b").unwrap().tensor.data(), tb.data());
            std::fs::remove_dir_all(dir).unwrap();
        }
    }
}
