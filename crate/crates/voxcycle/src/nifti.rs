//! NIfTI-1 single-file (.nii / .nii.gz) reading and writing.
//!
//! Scope: 3D volumes, datatypes int16 (code 4) and float32 (code 16), both
//! endiannesses on read, little-endian float32 on write. The qform/sform
//! orientation block is carried as opaque bytes and written back verbatim;
//! volumes are assumed pre-registered, so interpreting it is out of scope.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::tensor::Tensor;
use crate::volume::Volume;

pub const HEADER_SIZE: usize = 348;
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("not a NIfTI-1 header: sizeof_hdr is {0}, expected 348 in either byte order")]
    BadSizeofHdr(i32),
    #[error("bad magic {0:?}; only single-file NIfTI-1 (\"n+1\") is supported")]
    BadMagic([u8; 4]),
    #[error(".hdr/.img pairs are not supported; convert to single-file .nii")]
    PairFormat,
    #[error("unsupported datatype code {0}; supported: 4 (int16), 16 (float32)")]
    UnsupportedDatatype(i16),
    #[error("bitpix {bitpix} inconsistent with datatype code {datatype}")]
    BitpixMismatch { datatype: i16, bitpix: i16 },
    #[error("dim[0] = {0} outside 1..=7")]
    BadRank(i16),
    #[error("only 3D volumes are supported; dims are {0:?}")]
    Not3d(Vec<usize>),
    #[error("data section truncated: need {need} bytes at offset {offset}, file has {have}")]
    Truncated {
        need: usize,
        offset: usize,
        have: usize,
    },
    #[error("cannot write: {0}")]
    BadVolume(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed header fields this crate acts on, plus the raw 348 bytes for the
/// opaque remainder (descrip, qform/sform, ...).
#[derive(Debug, Clone)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub magic: [u8; 4],
    pub little_endian: bool,
    pub raw: Box<[u8; HEADER_SIZE]>,
}

impl NiftiHeader {
    /// Volume dims as (nx, ny, nz).
    pub fn dims_xyz(&self) -> (usize, usize, usize) {
        (self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize)
    }

    pub fn voxel_size(&self) -> (f32, f32, f32) {
        (self.pixdim[1], self.pixdim[2], self.pixdim[3])
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    le: bool,
}

impl<'a> Cursor<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.bytes[off..off + 2].try_into().unwrap();
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }
    fn f32_at(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

fn gunzip_if_needed(bytes: &[u8]) -> Result<Vec<u8>, NiftiError> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes.to_vec())
    }
}

/// Parse a NIfTI-1 byte stream (plain or gzip) into header + volume.
/// Integer voxels are decoded to f32 with `scl_slope`/`scl_inter` applied
/// when the slope is nonzero.
pub fn read_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Volume), NiftiError> {
    let bytes = gunzip_if_needed(bytes)?;
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated {
            need: HEADER_SIZE,
            offset: 0,
            have: bytes.len(),
        });
    }
    let le_probe = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be_probe = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let little_endian = if le_probe == HEADER_SIZE as i32 {
        true
    } else if be_probe == HEADER_SIZE as i32 {
        false
    } else {
        return Err(NiftiError::BadSizeofHdr(le_probe));
    };
    let c = Cursor {
        bytes: &bytes,
        le: little_endian,
    };

    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if &magic == MAGIC_PAIR {
        return Err(NiftiError::PairFormat);
    }
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(magic));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = c.i16_at(40 + 2 * i);
    }
    if !(1..=7).contains(&dim[0]) {
        return Err(NiftiError::BadRank(dim[0]));
    }
    let rank = dim[0] as usize;
    let dims: Vec<usize> = dim[1..=rank].iter().map(|&d| d.max(0) as usize).collect();
    let effectively_3d =
        rank >= 3 && dims[..3].iter().all(|&d| d > 0) && dims[3..].iter().all(|&d| d <= 1);
    if !effectively_3d {
        return Err(NiftiError::Not3d(dims));
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);

    let datatype = c.i16_at(70);
    let bitpix = c.i16_at(72);
    let expected_bitpix = match datatype {
        DT_INT16 => 16,
        DT_FLOAT32 => 32,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    if bitpix != expected_bitpix {
        return Err(NiftiError::BitpixMismatch { datatype, bitpix });
    }

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = c.f32_at(76 + 4 * i);
    }
    let vox_offset = c.f32_at(108);
    let scl_slope = c.f32_at(112);
    let scl_inter = c.f32_at(116);

    let offset = vox_offset.max(HEADER_SIZE as f32) as usize;
    let voxels = nx * ny * nz;
    let need = voxels * (expected_bitpix as usize / 8);
    if bytes.len() < offset + need {
        return Err(NiftiError::Truncated {
            need,
            offset,
            have: bytes.len(),
        });
    }
    let payload = &bytes[offset..offset + need];

    // File order is x-fastest, which is exactly our [1, z, y, x] row-major
    // layout.
    let mut data = Vec::with_capacity(voxels);
    match datatype {
        DT_FLOAT32 => {
            for chunk in payload.chunks_exact(4) {
                let b: [u8; 4] = chunk.try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                data.push(if scl_slope != 0.0 {
                    v * scl_slope + scl_inter
                } else {
                    v
                });
            }
        }
        DT_INT16 => {
            for chunk in payload.chunks_exact(2) {
                let b: [u8; 2] = chunk.try_into().unwrap();
                let v = if little_endian {
                    i16::from_le_bytes(b)
                } else {
                    i16::from_be_bytes(b)
                } as f32;
                data.push(if scl_slope != 0.0 {
                    v * scl_slope + scl_inter
                } else {
                    v
                });
            }
        }
        _ => unreachable!(),
    }

    let mut raw = Box::new([0u8; HEADER_SIZE]);
    raw.copy_from_slice(&bytes[..HEADER_SIZE]);
    let header = NiftiHeader {
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset: offset as f32,
        scl_slope,
        scl_inter,
        magic,
        little_endian,
        raw,
    };
    let volume = Volume {
        data: Tensor::from_vec(&[1, nz, ny, nx], data),
        voxel_size: (pixdim[1], pixdim[2], pixdim[3]),
        norm: None,
        source: None,
        raw_header: Some(header.raw.clone()),
    };
    Ok((header, volume))
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Serialize a volume as little-endian float32 NIfTI-1 (vox_offset 352).
/// Opaque header bytes from the source file, when present, are carried over;
/// the fields this crate owns are rewritten.
pub fn write_nifti(volume: &Volume) -> Result<Vec<u8>, NiftiError> {
    let shape = volume.data.shape();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(NiftiError::BadVolume(format!(
            "expected [1, D, H, W] single-channel volume, got {shape:?}"
        )));
    }
    let (nz, ny, nx) = (shape[1], shape[2], shape[3]);
    if nx * ny * nz == 0 {
        return Err(NiftiError::BadVolume("empty volume".into()));
    }
    if [nx, ny, nz].iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::BadVolume(format!(
            "dimension exceeds NIfTI-1 i16 limit: {nx}x{ny}x{nz}"
        )));
    }

    let mut header = match &volume.raw_header {
        Some(raw) => *raw.clone(),
        None => [0u8; HEADER_SIZE],
    };
    put_i32(&mut header, 0, HEADER_SIZE as i32);
    put_i16(&mut header, 40, 3);
    put_i16(&mut header, 42, nx as i16);
    put_i16(&mut header, 44, ny as i16);
    put_i16(&mut header, 46, nz as i16);
    for i in 4..8 {
        put_i16(&mut header, 40 + 2 * i, 1);
    }
    put_i16(&mut header, 70, DT_FLOAT32);
    put_i16(&mut header, 72, 32);
    if volume.raw_header.is_none() {
        put_f32(&mut header, 76, 1.0); // qfac
    }
    put_f32(&mut header, 80, volume.voxel_size.0);
    put_f32(&mut header, 84, volume.voxel_size.1);
    put_f32(&mut header, 88, volume.voxel_size.2);
    put_f32(&mut header, 108, 352.0);
    put_f32(&mut header, 112, 0.0); // raw float values, no scaling
    put_f32(&mut header, 116, 0.0);
    header[344..348].copy_from_slice(MAGIC_SINGLE);

    let voxels = nx * ny * nz;
    let mut out = Vec::with_capacity(352 + 4 * voxels);
    out.extend_from_slice(&header);
    out.extend_from_slice(&[0u8; 4]); // no extensions
    for &v in volume.data.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_nifti_file(path: &Path) -> Result<(NiftiHeader, Volume), NiftiError> {
    let bytes = std::fs::read(path)?;
    let (header, mut volume) = read_nifti(&bytes)?;
    volume.source = Some(path.to_path_buf());
    Ok((header, volume))
}

/// Write `.nii` or, when the extension says so, gzip-compressed `.nii.gz`.
pub fn write_nifti_file(volume: &Volume, path: &Path) -> Result<(), NiftiError> {
    let bytes = write_nifti(volume)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz")) {
        let file = std::fs::File::create(path)?;
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

/// Gzip a serialized volume in memory (for tests and round trips).
pub fn gzip_bytes(bytes: &[u8]) -> Result<Vec<u8>, NiftiError> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(bytes)?;
    Ok(enc.finish()?)
}
