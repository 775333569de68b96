//! CTEN tensor container.
//!
//! ```text
//! "CTEN" | version: u16 | count: u32
//! count × ( name_len: u16 | name: UTF-8 | rank: u8 | dims: rank × u32 | payload: f64 × Π dims )
//! ```
//!
//! All integers and floats little-endian, payload row-major.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::FeatureMap;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"CTEN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CtenTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl CtenTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: u64 = dims.iter().map(|&d| d as u64).product();
        if expected != data.len() as u64 {
            return Err(Error::Validation(format!(
                "tensor '{name}' with dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Validation(format!("tensor '{name}' has rank {}", dims.len())));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Validation("tensor name too long".into()));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Result<Self> {
        Self::new(name, vec![m.rows() as u32, m.cols() as u32], m.as_slice().to_vec())
    }

    pub fn from_feature_map(name: impl Into<String>, f: &FeatureMap) -> Result<Self> {
        Self::new(
            name,
            vec![f.height() as u32, f.width() as u32, f.channels() as u32],
            f.data().to_vec(),
        )
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::from_vec(r as usize, c as usize, self.data.clone()),
            _ => Err(Error::Format(format!("tensor '{}' is not rank 2", self.name))),
        }
    }

    /// Rank-3 tensors as `H × W × C`; rank-2 ones as a single channel.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        match self.dims[..] {
            [h, w, c] => FeatureMap::new(h as usize, w as usize, c as usize, self.data.clone()),
            [h, w] => FeatureMap::new(h as usize, w as usize, 1, self.data.clone()),
            _ => Err(Error::Format(format!(
                "tensor '{}' of rank {} is not a feature map",
                self.name,
                self.dims.len()
            ))),
        }
    }
}

pub fn write<W: Write>(mut out: W, tensors: &[CtenTensor]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::Validation(format!("duplicate tensor name '{}'", t.name)));
        }
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        out.write_all(&(t.name.len() as u16).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&[t.dims.len() as u8])?;
        for d in &t.dims {
            out.write_all(&d.to_le_bytes())?;
        }
        for v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated CTEN data".into()))?;
    Ok(buf)
}

pub fn read<R: Read>(mut input: R) -> Result<Vec<CtenTensor>> {
    if &read_exact::<_, 4>(&mut input)? != MAGIC {
        return Err(Error::Format("missing CTEN magic".into()));
    }
    let version = u16::from_le_bytes(read_exact(&mut input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported CTEN version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut input)?);
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut input)?) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|_| Error::Format("truncated CTEN name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name '{name}'")));
        }
        let rank = read_exact::<_, 1>(&mut input)?[0] as usize;
        let dims: Vec<u32> = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(read_exact(&mut input)?)))
            .collect::<Result<_>>()?;
        let n: u64 = dims.iter().map(|&d| d as u64).product();
        let mut payload = vec![0u8; (n as usize) * 8];
        input
            .read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("payload of '{name}' is shorter than its dims")))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(CtenTensor { name, dims, data });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last CTEN entry".into()));
    }
    Ok(out)
}

pub fn write_file(path: &Path, tensors: &[CtenTensor]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), tensors)
}

pub fn read_file(path: &Path) -> Result<Vec<CtenTensor>> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = CtenTensor::new("ab", vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &[t]).unwrap();
        assert_eq!(&buf[..4], b"CTEN");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[1, 0, 0, 0]);
        assert_eq!(&buf[10..12], &[2, 0]);
        assert_eq!(&buf[12..14], b"ab");
        assert_eq!(buf[14], 2);
        assert_eq!(&buf[15..23], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&buf[23..31], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 23 + 16);
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = CtenTensor::new("x", vec![1], vec![0.0]).unwrap();
        assert!(matches!(write(Vec::new(), &[t.clone(), t]), Err(Error::Validation(_))));
    }

    #[test]
    fn payload_length_checked() {
        assert!(CtenTensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
        let t = CtenTensor::new("x", vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &[t]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read(&buf[..]), Err(Error::Format(_))));
        assert!(matches!(read(&b"NOPE"[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            entries in prop::collection::vec(
                (prop::collection::vec(1u32..5, 0..4), any::<u64>()),
                0..5,
            )
        ) {
            let tensors: Vec<CtenTensor> = entries
                .iter()
                .enumerate()
                .map(|(i, (dims, bits))| {
                    let n: u32 = dims.iter().product();
                    let data = (0..n as u64).map(|k| f64::from_bits(bits.wrapping_add(k.wrapping_mul(0x9E37_79B9)))).collect();
                    CtenTensor::new(format!("t{i}"), dims.clone(), data).unwrap()
                })
                .collect();
            let mut buf = Vec::new();
            write(&mut buf, &tensors).unwrap();
            let back = read(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (a, b) in back.iter().zip(&tensors) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.dims, &b.dims);
                let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
