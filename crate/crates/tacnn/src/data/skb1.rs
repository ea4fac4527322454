//! SKB1 binary sample store.
//!
//! Layout (all integers little-endian):
//!   magic `b"SKB1"`, version `u16`,
//!   then per sample until end of stream:
//!     id length `u16`, id bytes (UTF-8),
//!     class count K `u32`, label `f32[K]`,
//!     M', C, T, V as `u32`,
//!     coordinate data `f32[M' * C * T * V]`, row-major per person.

use std::io::{Read, Write};

use crate::data::SkeletonSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const SKB1_MAGIC: &[u8; 4] = b"SKB1";
pub const SKB1_VERSION: u16 = 1;

// Caps keep a hostile header from forcing huge allocations before the
// stream runs dry.
const MAX_CLASSES: u32 = 1 << 20;
const MAX_EXTENT: u32 = 1 << 20;
const MAX_ELEMENTS: u64 = 1 << 28;

fn read_u16<R: Read>(r: &mut R) -> std::io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::format(format!("truncated record: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads `n` f32 values in bounded chunks so a lying header cannot force
/// a giant allocation up front.
fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n.min(1 << 16));
    let mut remaining = n;
    let mut buf = vec![0u8; 4 * 4096];
    while remaining > 0 {
        let take = remaining.min(4096);
        let bytes = &mut buf[..take * 4];
        r.read_exact(bytes)
            .map_err(|e| Error::format(format!("truncated f32 block: {e}")))?;
        for chunk in bytes.chunks_exact(4) {
            out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        remaining -= take;
    }
    Ok(out)
}

pub fn write_skb1<W: Write>(w: &mut W, samples: &[SkeletonSample]) -> Result<()> {
    w.write_all(SKB1_MAGIC)?;
    w.write_all(&SKB1_VERSION.to_le_bytes())?;
    for s in samples {
        let id = s.id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(Error::format(format!("sample id longer than 65535 bytes: {}", s.id)));
        }
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(s.label.len() as u32).to_le_bytes())?;
        for &v in &s.label {
            w.write_all(&v.to_le_bytes())?;
        }
        let d = s.dims();
        for ext in [s.persons.len(), d[1], d[2], d[3]] {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
        for p in &s.persons {
            for &v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_skb1<R: Read>(mut r: R) -> Result<Vec<SkeletonSample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::format(format!("cannot read magic: {e}")))?;
    if &magic != SKB1_MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected SKB1")));
    }
    let version = read_u16(&mut r).map_err(|e| Error::format(format!("cannot read version: {e}")))?;
    if version != SKB1_VERSION {
        return Err(Error::format(format!("unsupported SKB1 version {version}")));
    }
    let mut samples = Vec::new();
    loop {
        // End of stream between records is the normal termination.
        let id_len = match read_u16(&mut r) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::format(format!("cannot read id length: {e}"))),
        };
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes)
            .map_err(|e| Error::format(format!("truncated id: {e}")))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::format("sample id is not UTF-8".to_string()))?;
        let k = read_u32(&mut r)?;
        if k == 0 || k > MAX_CLASSES {
            return Err(Error::format(format!("implausible class count {k}")));
        }
        let label = read_f32s(&mut r, k as usize)?;
        let m = read_u32(&mut r)?;
        let c = read_u32(&mut r)?;
        let t = read_u32(&mut r)?;
        let v = read_u32(&mut r)?;
        for ext in [m, c, t, v] {
            if ext == 0 || ext > MAX_EXTENT {
                return Err(Error::format(format!("implausible extent {ext} in {id}")));
            }
        }
        let per_person = c as u64 * t as u64 * v as u64;
        if m as u64 * per_person > MAX_ELEMENTS {
            return Err(Error::format(format!("sample {id} exceeds the element cap")));
        }
        let mut persons = Vec::with_capacity(m as usize);
        for _ in 0..m {
            let data = read_f32s(&mut r, per_person as usize)?;
            persons.push(
                Tensor4::from_vec([1, c as usize, t as usize, v as usize], data)
                    .map_err(|e| Error::format(format!("sample {id}: {e}")))?,
            );
        }
        samples.push(
            SkeletonSample::new(id, label, persons)
                .map_err(|e| Error::format(format!("invalid sample record: {e}")))?,
        );
    }
    Ok(samples)
}
