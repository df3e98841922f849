//! Read-only NIfTI-1 single-file (`.nii`) support.
//!
//! Only the subset needed for pre-registered inputs is handled: `n+1` magic,
//! `float32` or `int16` voxels, 3D or 4D volumes. Orientation and affine
//! metadata are ignored. Intensity scaling (`scl_slope`, `scl_inter`) is
//! applied when the slope is non-zero.

use std::fs;
use std::path::Path;

use crate::data::Tensor;
use crate::{Error, Result};

const HEADER_SIZE: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().expect("4 bytes");
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

/// Loads a NIfTI-1 volume as a 4D tensor with axes `(x, y, z, t)`.
///
/// 3D files get a time extent of 1.
pub fn load_nifti(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Unsupported(format!(
            "file is {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let sizeof_hdr: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    let endian = if i32::from_le_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::Unsupported("sizeof_hdr is not 348".into()));
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::Unsupported(
            "magic is not \"n+1\" (only single-file NIfTI-1 is read)".into(),
        ));
    }
    let r = Reader { bytes, endian };

    let ndim = r.i16(40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::Unsupported(format!("dim[0] = {ndim}, expected 3 or 4")));
    }
    let mut dims = [1usize; 4];
    for (k, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * k);
        if v < 1 {
            return Err(Error::Unsupported(format!("dim[{}] = {v}", k + 1)));
        }
        *d = v as usize;
    }

    let datatype = r.i16(70);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::Unsupported(format!(
                "datatype code {other} (supported: int16 = 4, float32 = 16)"
            )))
        }
    };
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Unsupported(format!("vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n: usize = dims.iter().product();
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::Shape(format!(
            "data section truncated: need {end} bytes, file has {}",
            bytes.len()
        )));
    }

    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let scale = |v: f64| if slope != 0.0 { v * slope + inter } else { v };

    let [nx, ny, nz, nt] = dims;
    let mut values = vec![0.0; n];
    // file order is x fastest; tensor order is t fastest
    for t in 0..nt {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let file_idx = x + nx * (y + ny * (z + nz * t));
                    let at = start + file_idx * width;
                    let raw = if datatype == DT_INT16 {
                        r.i16(at) as f64
                    } else {
                        r.f32(at) as f64
                    };
                    values[((x * ny + y) * nz + z) * nt + t] = scale(raw);
                }
            }
        }
    }
    Tensor::new(vec![nx, ny, nz, nt], values)
}
