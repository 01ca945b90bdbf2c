//! `SPC1` tensor container.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SPC1"
//! 4       1           dtype (0 = f32, 1 = f64, 2 = u16 labels)
//! 5       1           ndim
//! 6       4 * ndim    dims, u32 little-endian
//! ...     elem * n    payload, row-major little-endian
//! ```

use crate::error::{Error, Result};
use crate::filtering::LabelMap;
use crate::tensor::Tensor;
use std::path::Path;

pub const TENSOR_MAGIC: &[u8; 4] = b"SPC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::dim(format!("tensor file rank {} out of range", dims.len())));
        }
        if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::dim(format!("tensor file dims {dims:?} out of range")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!("dims {dims:?} need {n} elements, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Stores `t` as 32-bit reals (lossy for values not representable in f32).
    pub fn from_tensor_f32(t: &Tensor) -> Self {
        Self {
            dims: t.shape().to_vec(),
            data: TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_tensor_f64(t: &Tensor) -> Self {
        Self {
            dims: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    pub fn from_labels(labels: &LabelMap) -> Self {
        Self {
            dims: vec![labels.height(), labels.width()],
            data: TensorData::U16(labels.data().to_vec()),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Widens any dtype to a 64-bit tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let v = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U16(v) => v.iter().map(|&x| x as f64).collect(),
        };
        Tensor::new(self.dims.clone(), v)
    }

    pub fn to_labels(&self, num_classes: usize) -> Result<LabelMap> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::U16(v), &[h, w]) => LabelMap::new(h, w, num_classes, v.clone()),
            _ => Err(Error::Data(format!(
                "expected a 2-d u16 label file, got {:?} with dims {:?}",
                self.dtype(),
                self.dims
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses one tensor from the front of `bytes`, returning it and the
    /// number of bytes consumed. Errors carry the offset of the bad field.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::parse(0, "missing SPC1 magic"));
        }
        let dtype = match bytes.get(4) {
            None => return Err(Error::parse(4, "truncated before dtype")),
            Some(&c) => DType::from_code(c).ok_or_else(|| Error::parse(4, format!("unknown dtype code {c}")))?,
        };
        let ndim = match bytes.get(5) {
            None => return Err(Error::parse(5, "truncated before rank")),
            Some(0) => return Err(Error::parse(5, "rank 0 tensor")),
            Some(&n) => n as usize,
        };
        let mut dims = Vec::with_capacity(ndim);
        let mut pos = 6;
        for _ in 0..ndim {
            let field = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::parse(pos, "truncated dimension field"))?;
            let d = u32::from_le_bytes(field.try_into().expect("4 bytes")) as usize;
            if d == 0 {
                return Err(Error::parse(pos, "zero-length dimension"));
            }
            dims.push(d);
            pos += 4;
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::parse(6, "element count overflows"))?;
        let size = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::parse(6, "payload size overflows"))?;
        let payload = bytes.get(pos..pos + size).ok_or_else(|| {
            Error::parse(
                bytes.len(),
                format!("payload needs {size} bytes from offset {pos}, file ends early"),
            )
        })?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                    .collect(),
            ),
        };
        Ok((Self { dims, data }, pos + size))
    }

    /// Parses a whole file; trailing bytes are an error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::parse(used, format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(t)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::decode(&bytes).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.encode())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = TensorFile::new(vec![2, 1], TensorData::U16(vec![7, 258])).unwrap();
        let b = t.encode();
        assert_eq!(&b[..6], b"SPC1\x02\x02");
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..], &[7, 0, 2, 1]);
        assert_eq!(TensorFile::decode(&b).unwrap(), t);
    }

    #[test]
    fn f64_tensor_round_trip_3x4x5() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i as f64).sin() * 1e-3 + 1.0 / 3.0);
        let f = TensorFile::from_tensor_f64(&t);
        let back = TensorFile::decode(&f.encode()).unwrap().to_tensor().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn parse_errors_report_offsets() {
        let good = TensorFile::from_tensor_f32(&Tensor::zeros(&[2, 2])).encode();
        let off = |b: &[u8]| match TensorFile::decode(b) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(off(b"XPC1"), 0);
        let mut b = good.clone();
        b[4] = 9;
        assert_eq!(off(&b), 4);
        let mut b = good.clone();
        b[5] = 0;
        assert_eq!(off(&b), 5);
        let mut b = good.clone();
        b[10..14].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(off(&b), 10);
        assert_eq!(off(&good[..9]), 6);
        assert_eq!(off(&good[..20]), 20);
        let mut b = good.clone();
        b.push(0);
        assert_eq!(off(&b), good.len());
    }

    #[test]
    fn labels_round_trip_and_validate() {
        let l = LabelMap::new(2, 3, 5, vec![0, 4, 1, 2, 3, 4]).unwrap();
        let f = TensorFile::decode(&TensorFile::from_labels(&l).encode()).unwrap();
        assert_eq!(f.to_labels(5).unwrap(), l);
        assert!(matches!(f.to_labels(4), Err(Error::Data(_))));
        assert!(TensorFile::from_tensor_f32(&Tensor::zeros(&[2, 3])).to_labels(5).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.spc");
        let f = TensorFile::from_tensor_f32(&Tensor::from_fn(&[4, 2], |i| i as f64 * 0.5));
        f.write(&p).unwrap();
        assert_eq!(TensorFile::read(&p).unwrap(), f);
    }

    proptest! {
        #[test]
        fn f32_bits_survive(values in proptest::collection::vec(any::<u32>(), 1..64)) {
            let v: Vec<f32> = values.iter().map(|&b| f32::from_bits(b)).collect();
            let f = TensorFile::new(vec![v.len()], TensorData::F32(v.clone())).unwrap();
            let TensorData::F32(back) = TensorFile::decode(&f.encode()).unwrap().data().clone() else {
                panic!("dtype changed");
            };
            prop_assert!(back.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
