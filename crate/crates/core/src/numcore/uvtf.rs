//! "UVTF" binary tensor files.
//!
//! Layout, all little-endian: magic `UVTF`, version `u32`, dtype `u8`
//! (0 = f32, 1 = u16, 2 = u8), ndim `u8`, `ndim` × `u64` dims, then the
//! row-major payload. Several records may be concatenated in one file.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UVTF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum UvtfData {
    F32(Tensor<f32>),
    U16 { dims: Vec<usize>, data: Vec<u16> },
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl UvtfData {
    pub fn dims(&self) -> &[usize] {
        match self {
            UvtfData::F32(t) => t.dims(),
            UvtfData::U16 { dims, .. } | UvtfData::U8 { dims, .. } => dims,
        }
    }

    fn code(&self) -> u8 {
        match self {
            UvtfData::F32(_) => 0,
            UvtfData::U16 { .. } => 1,
            UvtfData::U8 { .. } => 2,
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            UvtfData::F32(t) => Ok(t),
            _ => Err(Error::Format("expected an f32 record".into())),
        }
    }

    pub fn into_u16(self) -> Result<(Vec<usize>, Vec<u16>)> {
        match self {
            UvtfData::U16 { dims, data } => Ok((dims, data)),
            _ => Err(Error::Format("expected a u16 record".into())),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self {
            UvtfData::U8 { dims, data } => Ok((dims, data)),
            _ => Err(Error::Format("expected a u8 record".into())),
        }
    }
}

pub fn write_record<W: Write>(w: &mut W, rec: &UvtfData) -> std::io::Result<()> {
    let dims = rec.dims();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[rec.code(), dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match rec {
        UvtfData::F32(t) => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        UvtfData::U16 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        UvtfData::U8 { data, .. } => w.write_all(data)?,
    }
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R) -> Result<Option<UvtfData>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::Format(e.to_string())),
    }
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let fmt = |e: std::io::Error| Error::Format(e.to_string());
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(fmt)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr).map_err(fmt)?;
    let mut dims = Vec::with_capacity(hdr[1] as usize);
    for _ in 0..hdr[1] {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(fmt)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    let rec = match hdr[0] {
        0 => {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf).map_err(fmt)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            UvtfData::F32(Tensor::from_vec(&dims, data)?)
        }
        1 => {
            let mut buf = vec![0u8; 2 * n];
            r.read_exact(&mut buf).map_err(fmt)?;
            let data = buf
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            UvtfData::U16 { dims, data }
        }
        2 => {
            let mut data = vec![0u8; n];
            r.read_exact(&mut data).map_err(fmt)?;
            UvtfData::U8 { dims, data }
        }
        code => return Err(Error::Format(format!("unknown dtype code {code}"))),
    };
    Ok(Some(rec))
}

pub fn write_file(path: &Path, records: &[UvtfData]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        write_record(&mut buf, r).map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<UvtfData>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = std::io::Cursor::new(bytes);
    let mut out = Vec::new();
    while let Some(r) = read_record(&mut cur)? {
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_record(&mut buf, &UvtfData::F32(t)).unwrap();
        let mut expect = b"UVTF".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&[0, 1]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut cur = std::io::Cursor::new(b"UVTX\x01\0\0\0".to_vec());
        assert!(read_record(&mut cur).is_err());
        let mut buf = Vec::new();
        write_record(&mut buf, &UvtfData::U8 { dims: vec![4], data: vec![1, 2, 3, 4] }).unwrap();
        buf.pop();
        assert!(read_record(&mut std::io::Cursor::new(buf)).is_err());
    }

    proptest! {
        #[test]
        fn records_round_trip(dims in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let mut rng = crate::numcore::Rng::new(seed);
            let f = Tensor::from_fn(&dims, |_| rng.uniform_in(-5.0, 5.0) as f32);
            let recs = vec![
                UvtfData::F32(f),
                UvtfData::U16 { dims: dims.clone(), data: (0..n).map(|i| (i * 7) as u16).collect() },
                UvtfData::U8 { dims: dims.clone(), data: (0..n).map(|i| i as u8).collect() },
            ];
            let mut buf = Vec::new();
            for r in &recs { write_record(&mut buf, r).unwrap(); }
            let mut cur = std::io::Cursor::new(buf);
            let mut back = Vec::new();
            while let Some(r) = read_record(&mut cur).unwrap() { back.push(r); }
            prop_assert_eq!(back, recs);
        }
    }
}
