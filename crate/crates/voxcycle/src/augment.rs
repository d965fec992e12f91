//! Training-set expansion by random 3D rotations with trilinear resampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::exec;
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const DEFAULT_SIGMA_DEGREES: f64 = 10.0;
pub const DEFAULT_ROTATIONS_PER_VOLUME: usize = 10;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("rotation angle stddev must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("cannot augment an empty volume list")]
    EmptyInput,
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rigid rotation about the volume center, composed as `Rz * Ry * Rx` from
/// per-axis angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    pub angles_deg: [f64; 3],
    pub matrix: Mat3,
}

impl Rotation {
    pub fn from_angles(angles_deg: [f64; 3]) -> Self {
        let [ax, ay, az] = angles_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        Rotation {
            angles_deg,
            matrix: matmul(&rz, &matmul(&ry, &rx)),
        }
    }

    pub fn identity() -> Self {
        Rotation::from_angles([0.0, 0.0, 0.0])
    }

    /// Apply the inverse rotation (transpose, since the matrix is
    /// orthonormal) to a displacement vector.
    #[inline]
    fn inverse_apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// Draw three independent `Normal(0, sigma^2)` angles (degrees).
pub fn sample_rotation(rng: &mut ChaCha8Rng, sigma_degrees: f64) -> Result<Rotation, AugmentError> {
    if sigma_degrees < 0.0 {
        return Err(AugmentError::NegativeSigma(sigma_degrees));
    }
    if sigma_degrees == 0.0 {
        return Ok(Rotation::identity());
    }
    let dist = Normal::new(0.0, sigma_degrees).expect("valid sigma");
    Ok(Rotation::from_angles([
        dist.sample(rng),
        dist.sample(rng),
        dist.sample(rng),
    ]))
}

/// Inverse-mapping resample: every output voxel samples the input at
/// `R^-1 (p - center) + center` with trilinear interpolation; samples
/// outside the grid read as zero. Output shape equals input shape.
pub fn rotate_volume(volume: &Volume, rotation: &Rotation) -> Volume {
    let shape = volume.data.shape().to_vec();
    let (nz, ny, nx) = (shape[1], shape[2], shape[3]);
    let center = [
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    ];
    let src = volume.data.data();
    let mut out = Tensor::zeros(&shape);

    let sample = |x: f64, y: f64, z: f64| -> f32 {
        let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
        let (fx, fy, fz) = (x - x0, y - y0, z - z0);
        let (x0, y0, z0) = (x0 as isize, y0 as isize, z0 as isize);
        let mut acc = 0.0f64;
        for dz in 0..2isize {
            let zi = z0 + dz;
            if zi < 0 || zi >= nz as isize {
                continue;
            }
            let wz = if dz == 0 { 1.0 - fz } else { fz };
            for dy in 0..2isize {
                let yi = y0 + dy;
                if yi < 0 || yi >= ny as isize {
                    continue;
                }
                let wy = if dy == 0 { 1.0 - fy } else { fy };
                for dx in 0..2isize {
                    let xi = x0 + dx;
                    if xi < 0 || xi >= nx as isize {
                        continue;
                    }
                    let wx = if dx == 0 { 1.0 - fx } else { fx };
                    let v = src[(zi as usize * ny + yi as usize) * nx + xi as usize] as f64;
                    acc += wz * wy * wx * v;
                }
            }
        }
        acc as f32
    };

    // depth slabs of the single channel are contiguous and independent
    exec::for_each_slab(out.data_mut(), ny * nx, |z, plane| {
        for y in 0..ny {
            for x in 0..nx {
                let disp = [
                    x as f64 - center[0],
                    y as f64 - center[1],
                    z as f64 - center[2],
                ];
                let s = rotation.inverse_apply(disp);
                plane[y * nx + x] =
                    sample(s[0] + center[0], s[1] + center[1], s[2] + center[2]);
            }
        }
    });

    Volume {
        data: out,
        voxel_size: volume.voxel_size,
        norm: volume.norm,
        source: volume.source.clone(),
        raw_header: volume.raw_header.clone(),
    }
}

fn child_seed(seed: u64, volume_idx: usize, rotation_idx: usize) -> u64 {
    // splitmix-style mixing keeps per-job streams independent of ordering
    let mut x = seed
        ^ (volume_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (rotation_idx as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Each original plus `rotations_per_volume` rotated copies, in order
/// (vol0, vol0_rot1, ..., vol0_rotN, vol1, ...). Deterministic for a fixed
/// seed regardless of scheduling: every rotation draws from its own
/// `(volume, rotation)`-derived stream.
pub fn augment_dataset(
    volumes: &[Volume],
    rotations_per_volume: usize,
    sigma_degrees: f64,
    seed: u64,
) -> Result<Vec<Volume>, AugmentError> {
    if volumes.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    if sigma_degrees < 0.0 {
        return Err(AugmentError::NegativeSigma(sigma_degrees));
    }
    let mut out = Vec::with_capacity(volumes.len() * (1 + rotations_per_volume));
    for (vi, vol) in volumes.iter().enumerate() {
        out.push(vol.clone());
        for ri in 0..rotations_per_volume {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, vi, ri + 1));
            let rotation = sample_rotation(&mut rng, sigma_degrees)?;
            out.push(rotate_volume(vol, &rotation));
        }
    }
    Ok(out)
}
