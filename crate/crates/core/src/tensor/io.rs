//! Binary blob format shared by tensors and volumes:
//!
//! ```text
//! magic[6] | dtype u8 | rank u8 | extents: rank x u64 LE | data LE
//! ```
//!
//! dtype tags: 0 = f32, 1 = f64, 2 = u8 (labelmaps only).

use std::io::{Read, Write};

use super::{DType, Tensor};
use crate::error::{Error, Result};

const LABEL_TAG: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobKind {
    /// `UHTEN1`
    Tensor,
    /// `UHVOL1`
    Volume,
}

impl BlobKind {
    pub fn magic(self) -> &'static [u8; 6] {
        match self {
            BlobKind::Tensor => b"UHTEN1",
            BlobKind::Volume => b"UHVOL1",
        }
    }
}

fn write_header(w: &mut impl Write, kind: BlobKind, tag: u8, shape: &[usize]) -> Result<()> {
    w.write_all(kind.magic())?;
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    w.write_all(&[tag, rank])?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, kind: BlobKind) -> Result<(u8, Vec<usize>)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != kind.magic() {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(kind.magic())
        )));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let [tag, rank] = head;
    if rank == 0 {
        return Err(Error::Format("rank 0 blob".into()));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf)?;
        let e = u64::from_le_bytes(buf);
        if e == 0 || e > (1 << 40) {
            return Err(Error::Format(format!("implausible extent {e}")));
        }
        shape.push(e as usize);
    }
    Ok((tag, shape))
}

pub fn write_blob(w: &mut impl Write, kind: BlobKind, t: &Tensor) -> Result<()> {
    write_header(w, kind, t.dtype().tag(), t.shape())?;
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    match t.dtype() {
        DType::F32 => t.data().iter().for_each(|&v| bytes.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| bytes.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_blob(r: &mut impl Read, kind: BlobKind) -> Result<Tensor> {
    let (tag, shape) = read_header(r, kind)?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("dtype tag {tag} is not a real type")))?;
    let n: usize = shape.iter().product();
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let mut bytes = vec![0u8; n * width];
    r.read_exact(&mut bytes)?;
    let data = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    Ok(Tensor::new(&shape, data)?.cast(dtype))
}

pub fn write_label_blob(w: &mut impl Write, shape: &[usize], labels: &[u8]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), labels.len());
    write_header(w, BlobKind::Volume, LABEL_TAG, shape)?;
    w.write_all(labels)?;
    Ok(())
}

pub fn read_label_blob(r: &mut impl Read) -> Result<(Vec<usize>, Vec<u8>)> {
    let (tag, shape) = read_header(r, BlobKind::Volume)?;
    if tag != LABEL_TAG {
        return Err(Error::Format(format!("expected u8 labelmap blob, found dtype tag {tag}")));
    }
    let mut labels = vec![0u8; shape.iter().product()];
    r.read_exact(&mut labels)?;
    Ok((shape, labels))
}
