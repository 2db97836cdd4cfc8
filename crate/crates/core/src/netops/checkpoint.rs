//! Named-tensor container used for checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RRNETCK\0"
//! version  u32      1
//! count    u32      number of entries
//! entries  count × { name_len u32, name utf-8, dtype u8 (0 = f64), rank u32, dims u64 × rank }
//! payload  for each entry in order, product(dims) little-endian f64
//! ```
//!
//! A [`ParamStore`] is stored as its parameters, the Adam moments under
//! `adam.m/<name>` and `adam.v/<name>`, and the step counter as `adam.step`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::params::Param;
use super::{NetError, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"RRNETCK\0";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub fn write_tensors<W: Write>(out: &mut W, entries: &[(String, &Tensor)]) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[DTYPE_F64])?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in entries {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>, NetError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NetError::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(NetError::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = read_u32(input)? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| NetError::Format("tensor name is not utf-8".into()))?;
        let mut dtype = [0u8; 1];
        input.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(NetError::Format(format!(
                "tensor {name}: unsupported dtype {}",
                dtype[0]
            )));
        }
        let rank = read_u32(input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(input).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        headers.push((name, shape));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

/// Writes `store` to `path` via a temporary file and rename.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), NetError> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (name, p) in &store.params {
        entries.push((name.clone(), &p.value));
    }
    for (name, p) in &store.params {
        entries.push((format!("adam.m/{name}"), &p.m));
        entries.push((format!("adam.v/{name}"), &p.v));
    }
    let step = Tensor::scalar(store.step as f64);
    entries.push(("adam.step".into(), &step));

    let mut buf = Vec::new();
    write_tensors(&mut buf, &entries)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NetError> {
    let mut file = io::BufReader::new(fs::File::open(path)?);
    let entries = read_tensors(&mut file)?;
    let mut store = ParamStore::new();
    let mut moments = Vec::new();
    for (name, t) in entries {
        if name == "adam.step" {
            store.step = t.item() as u64;
        } else if name.starts_with("adam.") {
            moments.push((name, t));
        } else {
            store.insert(&name, t)?;
        }
    }
    for (name, t) in moments {
        let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m/") {
            (0, p)
        } else if let Some(p) = name.strip_prefix("adam.v/") {
            (1, p)
        } else {
            return Err(NetError::Format(format!("unknown entry {name}")));
        };
        let param: &mut Param = store
            .params
            .get_mut(pname)
            .ok_or_else(|| NetError::Format(format!("moment {name} has no parameter")))?;
        if t.shape() != param.value.shape() {
            return Err(NetError::Format(format!("moment {name} shape mismatch")));
        }
        if slot == 0 {
            param.m = t;
        } else {
            param.v = t;
        }
    }
    Ok(store)
}
