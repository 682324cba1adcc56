//! On-disk formats.
//!
//! Every tensor lives in its own file:
//!
//! ```text
//! offset  size       field
//! 0       4          magic "NCSD"
//! 4       4          format version, u32 LE (currently 1)
//! 8       1          dtype code: 0 = f32, 1 = u8, 2 = i32
//! 9       4          rank, u32 LE
//! 13      4 * rank   dims, u32 LE each
//! ..      ..         payload, row-major, little-endian
//! ```
//!
//! Manifests and configs are JSON/TOML text next to the tensors.

pub mod checkpoint;
pub mod dataset;

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCSD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
    I32 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            2 => Some(DType::I32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }
}

/// A tensor as stored in a container file. Rank 0 is a scalar with one value.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl StoredTensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::arg(format!(
                "dims {dims:?} describe {n} values but {} were given",
                data.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::arg(format!("dims {dims:?} exceed u32")));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn i32(dims: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(dims, TensorData::I32(data))
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

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        match &self.data {
            TensorData::F32(v) => Ok(v.clone()),
            other => Err(Error::Data(format!("expected f32 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn from_array2_u8(a: &Array2<u8>) -> Self {
        let (h, w) = a.dim();
        Self {
            dims: vec![h, w],
            data: TensorData::U8(a.iter().copied().collect()),
        }
    }

    pub fn from_array2_f32(a: &Array2<f32>) -> Self {
        let (h, w) = a.dim();
        Self {
            dims: vec![h, w],
            data: TensorData::F32(a.iter().copied().collect()),
        }
    }

    /// Instance ids are stored as i32.
    pub fn from_array2_ids(a: &Array2<u32>) -> Result<Self> {
        let (h, w) = a.dim();
        let data = a
            .iter()
            .map(|&v| i32::try_from(v).map_err(|_| Error::arg(format!("instance id {v} exceeds i32"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dims: vec![h, w],
            data: TensorData::I32(data),
        })
    }

    pub fn from_array3_f32(a: &Array3<f32>) -> Self {
        let (h, w, c) = a.dim();
        Self {
            dims: vec![h, w, c],
            data: TensorData::F32(a.iter().copied().collect()),
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::Data(format!("expected rank-2 tensor, found dims {:?}", self.dims))),
        }
    }

    pub fn to_array2_u8(&self) -> Result<Array2<u8>> {
        let shape = self.dims2()?;
        match &self.data {
            TensorData::U8(v) => Ok(Array2::from_shape_vec(shape, v.clone()).expect("checked dims")),
            other => Err(Error::Data(format!("expected u8 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn to_array2_f32(&self) -> Result<Array2<f32>> {
        let shape = self.dims2()?;
        Ok(Array2::from_shape_vec(shape, self.to_f32()?).expect("checked dims"))
    }

    pub fn to_array2_ids(&self) -> Result<Array2<u32>> {
        let shape = self.dims2()?;
        match &self.data {
            TensorData::I32(v) => {
                let ids = v
                    .iter()
                    .map(|&x| u32::try_from(x).map_err(|_| Error::Data(format!("negative instance id {x}"))))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Array2::from_shape_vec(shape, ids).expect("checked dims"))
            }
            other => Err(Error::Data(format!("expected i32 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn to_array3_f32(&self) -> Result<Array3<f32>> {
        let shape = match self.dims[..] {
            [h, w, c] => (h, w, c),
            _ => return Err(Error::Data(format!("expected rank-3 tensor, found dims {:?}", self.dims))),
        };
        Ok(Array3::from_shape_vec(shape, self.to_f32()?).expect("checked dims"))
    }
}

pub fn encode_tensor(t: &StoredTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * t.dims.len() + t.data.len() * t.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(t.dtype() as u8);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<StoredTensor> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected \"NCSD\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let code = r.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or(Error::Format {
        offset: 8,
        msg: format!("unknown dtype code {code}"),
    })?;
    let rank = r.u32("rank")? as usize;
    let dims = (0..rank)
        .map(|_| r.u32("dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Format {
            offset: 13,
            msg: format!("dims {dims:?} overflow"),
        })?;
    let payload_at = r.pos;
    let payload = r.take(n * dtype.size(), "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after payload", bytes.len() - r.pos),
        });
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::I32 => TensorData::I32(
            payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    };
    debug_assert_eq!(payload_at + n * dtype.size(), bytes.len());
    Ok(StoredTensor { dims, data })
}

pub fn write_tensor(path: &Path, t: &StoredTensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

pub fn read_tensor(path: &Path) -> Result<StoredTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest over several files, in the given order.
pub fn digest_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::io(*p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float_matrix_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ncsd");
        let t = StoredTensor::f32(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, f32::NAN, 1e30]).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(encode_tensor(&back), encode_tensor(&t));
        assert_eq!(back.dims(), &[2, 3]);
    }

    #[test]
    fn scalar_round_trip() {
        let t = StoredTensor::f32(vec![], vec![42.5]).unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.dims().len(), 0);
    }

    #[test]
    fn header_layout() {
        let t = StoredTensor::u8(vec![2], vec![7, 9]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"NCSD");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b[8], 1);
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..17], &2u32.to_le_bytes());
        assert_eq!(&b[17..], &[7, 9]);
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut b = encode_tensor(&StoredTensor::i32(vec![1], vec![5]).unwrap());
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn bad_version_and_dtype() {
        let good = encode_tensor(&StoredTensor::i32(vec![1], vec![5]).unwrap());
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 4, .. })));
        let mut b = good.clone();
        b[8] = 7;
        assert!(matches!(decode_tensor(&b), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let b = encode_tensor(&StoredTensor::f32(vec![4], vec![1.0; 4]).unwrap());
        for cut in [2, 10, 15, b.len() - 1] {
            assert!(matches!(decode_tensor(&b[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
    }

    proptest! {
        #[test]
        fn any_tensor_round_trips(dims in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let vals: Vec<i32> = (0..n as u64).map(|i| (seed.wrapping_mul(i + 1) >> 7) as i32).collect();
            let t = StoredTensor::i32(dims.clone(), vals).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back, t);
            let f: Vec<f32> = (0..n as u64).map(|i| f32::from_bits((seed ^ i) as u32)).collect();
            let t = StoredTensor::f32(dims, f).unwrap();
            prop_assert_eq!(encode_tensor(&decode_tensor(&encode_tensor(&t)).unwrap()), encode_tensor(&t));
        }
    }
}
