//! Single-channel 3D volumes: cropping to the working grid and intensity
//! normalization into the generator's tanh range.

use std::path::PathBuf;

use thiserror::Error;

use crate::nifti::HEADER_SIZE;
use crate::tensor::Tensor;

/// Default crop of the 1 mm MNI template grid (182 x 218 x 182) down to the
/// working grid, all axes divisible by four.
pub const DEFAULT_CROP_TARGET: (usize, usize, usize) = (152, 180, 120);
pub const DEFAULT_PERCENTILE: f64 = 99.5;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("crop axis {axis} out of range: offset {offset} + target {target} > extent {extent}")]
    CropOutOfRange {
        axis: usize,
        offset: usize,
        target: usize,
        extent: usize,
    },
    #[error("crop target has a zero-sized axis: {0:?}")]
    EmptyTarget((usize, usize, usize)),
    #[error("volume has no positive intensity mass; cannot normalize")]
    DegenerateRange,
    #[error("volume carries no normalization stats; normalize it first")]
    MissingStats,
    #[error("volume shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
}

/// Intensity window used by [`Volume::normalize_intensity`], kept so the
/// mapping can be inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub lo: f32,
    pub hi: f32,
}

/// Single-channel 3D image: `[1, D, H, W]` tensor plus voxel-size metadata.
/// `D/H/W` correspond to the file's z/y/x axes.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Tensor<f32>,
    /// (x, y, z) voxel edge lengths in mm.
    pub voxel_size: (f32, f32, f32),
    pub norm: Option<NormStats>,
    pub source: Option<PathBuf>,
    /// Original header bytes, preserved opaquely for qform/sform.
    pub raw_header: Option<Box<[u8; HEADER_SIZE]>>,
}

impl Volume {
    pub fn from_tensor(data: Tensor<f32>) -> Self {
        assert_eq!(data.shape().len(), 4, "volume tensors are [1, D, H, W]");
        Volume {
            data,
            voxel_size: (1.0, 1.0, 1.0),
            norm: None,
            source: None,
            raw_header: None,
        }
    }

    /// Dims as (nx, ny, nz), matching file order.
    pub fn dims_xyz(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[3], s[2], s[1])
    }

    /// Offset that centers `target` inside this volume.
    pub fn centered_offset(&self, target: (usize, usize, usize)) -> (usize, usize, usize) {
        let (nx, ny, nz) = self.dims_xyz();
        (
            nx.saturating_sub(target.0) / 2,
            ny.saturating_sub(target.1) / 2,
            nz.saturating_sub(target.2) / 2,
        )
    }

    /// Copy the `target` (x, y, z) sub-block starting at `offset` (default:
    /// centered).
    pub fn crop(
        &self,
        target: (usize, usize, usize),
        offset: Option<(usize, usize, usize)>,
    ) -> Result<Volume, VolumeError> {
        if target.0 == 0 || target.1 == 0 || target.2 == 0 {
            return Err(VolumeError::EmptyTarget(target));
        }
        let (nx, ny, nz) = self.dims_xyz();
        let off = offset.unwrap_or_else(|| self.centered_offset(target));
        for (axis, (o, (t, s))) in [
            (off.0, (target.0, nx)),
            (off.1, (target.1, ny)),
            (off.2, (target.2, nz)),
        ]
        .into_iter()
        .enumerate()
        {
            if o + t > s {
                return Err(VolumeError::CropOutOfRange {
                    axis,
                    offset: o,
                    target: t,
                    extent: s,
                });
            }
        }
        let (tx, ty, tz) = target;
        let mut out = Vec::with_capacity(tx * ty * tz);
        let src = self.data.data();
        for z in 0..tz {
            for y in 0..ty {
                let row = ((off.2 + z) * ny + (off.1 + y)) * nx + off.0;
                out.extend_from_slice(&src[row..row + tx]);
            }
        }
        Ok(Volume {
            data: Tensor::from_vec(&[1, tz, ty, tx], out),
            voxel_size: self.voxel_size,
            norm: self.norm,
            source: self.source.clone(),
            raw_header: self.raw_header.clone(),
        })
    }

    /// Map intensities into `[-1, 1]`: the window is `[0, hi]` where `hi` is
    /// the given percentile of the nonzero voxels; values are clipped to the
    /// window first. The window is stored for [`Self::denormalize`].
    pub fn normalize_intensity(&self, percentile: f64) -> Result<Volume, VolumeError> {
        let mut nonzero: Vec<f32> = self
            .data
            .data()
            .iter()
            .copied()
            .filter(|&v| v != 0.0)
            .collect();
        if nonzero.is_empty() {
            return Err(VolumeError::DegenerateRange);
        }
        nonzero.sort_unstable_by(f32::total_cmp);
        let rank = ((percentile / 100.0) * (nonzero.len() - 1) as f64).round() as usize;
        let hi = nonzero[rank.min(nonzero.len() - 1)];
        let lo = 0.0f32;
        if hi <= lo {
            return Err(VolumeError::DegenerateRange);
        }
        let scale = 2.0 / (hi - lo);
        let data = self
            .data
            .map(|v| (v.clamp(lo, hi) - lo) * scale - 1.0);
        Ok(Volume {
            data,
            voxel_size: self.voxel_size,
            norm: Some(NormStats { lo, hi }),
            source: self.source.clone(),
            raw_header: self.raw_header.clone(),
        })
    }

    /// Invert [`Self::normalize_intensity`] using the stored window.
    pub fn denormalize(&self) -> Result<Volume, VolumeError> {
        let stats = self.norm.ok_or(VolumeError::MissingStats)?;
        Ok(self.denormalize_with(stats))
    }

    /// Invert the affine map using an explicit window (e.g. the target
    /// domain's running stats at translation time).
    pub fn denormalize_with(&self, stats: NormStats) -> Volume {
        let half = (stats.hi - stats.lo) * 0.5;
        let data = self.data.map(|v| (v + 1.0) * half + stats.lo);
        Volume {
            data,
            voxel_size: self.voxel_size,
            norm: None,
            source: self.source.clone(),
            raw_header: self.raw_header.clone(),
        }
    }
}

/// Voxelwise agreement metrics; PSNR uses `reference max - min` as the peak
/// and is `+inf` for identical volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agreement {
    pub mae: f64,
    pub psnr: f64,
}

pub fn evaluate(pred: &Volume, reference: &Volume) -> Result<Agreement, VolumeError> {
    if pred.data.shape() != reference.data.shape() {
        return Err(VolumeError::ShapeMismatch {
            a: pred.data.shape().to_vec(),
            b: reference.data.shape().to_vec(),
        });
    }
    let n = pred.data.numel() as f64;
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let (mut rmin, mut rmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&p, &r) in pred.data.data().iter().zip(reference.data.data()) {
        let d = p as f64 - r as f64;
        abs_sum += d.abs();
        sq_sum += d * d;
        rmin = rmin.min(r as f64);
        rmax = rmax.max(r as f64);
    }
    let mae = abs_sum / n;
    let mse = sq_sum / n;
    let peak = rmax - rmin;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else if peak <= 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    };
    Ok(Agreement { mae, psnr })
}
