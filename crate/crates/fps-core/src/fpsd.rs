//! FPSD, the crate's bit-exact binary array container, plus the multi-tensor
//! bundle used for checkpoints.
//!
//! Array layout, all little-endian:
//!
//! ```text
//! magic   "FPSD"            4 bytes
//! version u16               = 1
//! dtype   u8                1 = f32, 2 = f64, 3 = complex64 (interleaved f32)
//! ndim    u8
//! dims    ndim x u32
//! payload product(dims) x element size, row-major
//! ```
//!
//! A bundle file concatenates named arrays:
//!
//! ```text
//! magic   "FPSB"            4 bytes
//! version u16               = 1
//! count   u32
//! entries count x { name_len u16, name utf-8, FPSD-encoded array }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FpsError, Result};

pub const ARRAY_MAGIC: &[u8; 4] = b"FPSD";
pub const BUNDLE_MAGIC: &[u8; 4] = b"FPSB";
pub const FORMAT_VERSION: u16 = 1;

/// Element type codes of the array payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    /// Interleaved (re, im) float32 pairs.
    Complex64 = 3,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::Complex64 => 8,
        }
    }

    fn from_code(code: u8, offset: u64) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::Complex64),
            other => Err(FpsError::Format {
                offset,
                message: format!("unknown dtype code {other}"),
            }),
        }
    }
}

/// A decoded array: dims plus the payload as f64 scalars. Complex64 arrays
/// decode to interleaved (re, im) scalar pairs with an implicit trailing
/// factor of 2 kept out of `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct FpsdArray {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl FpsdArray {
    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Self {
        FpsdArray { dtype: Dtype::F64, dims, values }
    }

    pub fn scalar_count(&self) -> usize {
        let n: usize = self.dims.iter().product();
        match self.dtype {
            Dtype::Complex64 => 2 * n,
            _ => n,
        }
    }
}

pub fn encode_array(arr: &FpsdArray) -> Result<Vec<u8>> {
    if arr.dims.len() > u8::MAX as usize {
        return Err(FpsError::InvalidInput("too many dimensions".into()));
    }
    if arr.values.len() != arr.scalar_count() {
        return Err(FpsError::shape(
            format!("{} scalars for dims {:?}", arr.scalar_count(), arr.dims),
            format!("{}", arr.values.len()),
        ));
    }
    let mut out = Vec::with_capacity(16 + arr.values.len() * 8);
    out.extend_from_slice(ARRAY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(arr.dtype as u8);
    out.push(arr.dims.len() as u8);
    for &d in &arr.dims {
        let d = u32::try_from(d)
            .map_err(|_| FpsError::InvalidInput(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match arr.dtype {
        Dtype::F64 => {
            for &v in &arr.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 | Dtype::Complex64 => {
            for &v in &arr.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let start = self.pos as usize;
        if start + n > self.buf.len() {
            return Err(FpsError::Format {
                offset: self.pos,
                message: format!("truncated while reading {what}"),
            });
        }
        self.pos += n as u64;
        Ok(&self.buf[start..start + n])
    }
}

fn decode_array_at(cur: &mut Cursor) -> Result<FpsdArray> {
    let magic_off = cur.pos;
    let magic = cur.take(4, "magic")?;
    if magic != ARRAY_MAGIC {
        return Err(FpsError::Format {
            offset: magic_off,
            message: format!("bad magic {magic:?}, expected \"FPSD\""),
        });
    }
    let ver_off = cur.pos;
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FpsError::Format {
            offset: ver_off,
            message: format!("unsupported version {version}"),
        });
    }
    let dtype_off = cur.pos;
    let dtype = Dtype::from_code(cur.take(1, "dtype")?[0], dtype_off)?;
    let ndim = cur.take(1, "ndim")?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(u32::from_le_bytes(cur.take(4, "dims")?.try_into().unwrap()) as usize);
    }
    let n: usize = dims.iter().product();
    let scalars = match dtype {
        Dtype::Complex64 => 2 * n,
        _ => n,
    };
    // scalar width: f64 -> 8 bytes, f32 and complex64 components -> 4 bytes
    let width = if dtype == Dtype::F64 { 8 } else { 4 };
    let payload_off = cur.pos;
    let payload = cur.take(scalars * width, "payload").map_err(|_| FpsError::Format {
        offset: payload_off,
        message: format!("truncated payload: need {} bytes for dims {dims:?}", scalars * width),
    })?;
    let values = if dtype == Dtype::F64 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()
    };
    Ok(FpsdArray { dtype, dims, values })
}

pub fn decode_array(bytes: &[u8]) -> Result<FpsdArray> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let arr = decode_array_at(&mut cur)?;
    if (cur.pos as usize) != bytes.len() {
        return Err(FpsError::Format {
            offset: cur.pos,
            message: format!("{} trailing bytes after payload", bytes.len() - cur.pos as usize),
        });
    }
    Ok(arr)
}

pub fn write_array(path: &Path, arr: &FpsdArray) -> Result<()> {
    let bytes = encode_array(arr)?;
    let tmp = path.with_extension("fpsd.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<FpsdArray> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_array(&bytes)
}

/// Named tensor bundle. BTreeMap keeps the manifest order canonical, which
/// makes encoded bundles byte-identical across runs.
pub type Bundle = BTreeMap<String, FpsdArray>;

pub fn encode_bundle(bundle: &Bundle) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
    for (name, arr) in bundle {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(FpsError::InvalidInput(format!("tensor name too long: {name}")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&encode_array(arr)?);
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4, "bundle magic")?;
    if magic != BUNDLE_MAGIC {
        return Err(FpsError::Format {
            offset: 0,
            message: format!("bad bundle magic {magic:?}, expected \"FPSB\""),
        });
    }
    let ver_off = cur.pos;
    let version = u16::from_le_bytes(cur.take(2, "bundle version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FpsError::Format {
            offset: ver_off,
            message: format!("unsupported bundle version {version}"),
        });
    }
    let count = u32::from_le_bytes(cur.take(4, "bundle count")?.try_into().unwrap());
    let mut bundle = Bundle::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2, "name length")?.try_into().unwrap()) as usize;
        let name_off = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| FpsError::Format {
                offset: name_off,
                message: "tensor name is not utf-8".into(),
            })?
            .to_string();
        let arr = decode_array_at(&mut cur)?;
        bundle.insert(name, arr);
    }
    if (cur.pos as usize) != bytes.len() {
        return Err(FpsError::Format {
            offset: cur.pos,
            message: "trailing bytes after last bundle entry".into(),
        });
    }
    Ok(bundle)
}

pub fn write_bundle(path: &Path, bundle: &Bundle) -> Result<()> {
    let bytes = encode_bundle(bundle)?;
    let tmp = path.with_extension("fpsb.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<Bundle> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_bundle(&bytes)
}
