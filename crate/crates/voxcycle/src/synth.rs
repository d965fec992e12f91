//! Synthetic two-domain toy data: Gaussian blob volumes (domain A) and
//! smoothed intensity inversions of independently drawn blobs (domain B).
//! Fields are raw intensities in `[0, 1]`, ready for the usual
//! normalize-into-tanh-range pipeline (or `to_tanh_range` for direct use).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

fn blob_field(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let mut field = vec![0.0f64; nx * ny * nz];
    let blobs = rng.gen_range(2..=4);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.2..0.8) * nx as f64;
        let cy = rng.gen_range(0.2..0.8) * ny as f64;
        let cz = rng.gen_range(0.2..0.8) * nz as f64;
        let sigma = rng.gen_range(0.10..0.22) * nx.min(ny).min(nz) as f64;
        let amp = rng.gen_range(0.6..1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for z in 0..nz {
            let dz = (z as f64 - cz).powi(2);
            for y in 0..ny {
                let dy = (y as f64 - cy).powi(2);
                for x in 0..nx {
                    let dx = (x as f64 - cx).powi(2);
                    field[(z * ny + y) * nx + x] += amp * (-(dx + dy + dz) * inv).exp();
                }
            }
        }
    }
    for v in &mut field {
        *v = v.min(1.0);
    }
    field
}

fn box_smooth(field: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let mut out = vec![0.0f64; field.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dz in -1isize..=1 {
                    let zi = z as isize + dz;
                    if zi < 0 || zi >= nz as isize {
                        continue;
                    }
                    for dy in -1isize..=1 {
                        let yi = y as isize + dy;
                        if yi < 0 || yi >= ny as isize {
                            continue;
                        }
                        for dx in -1isize..=1 {
                            let xi = x as isize + dx;
                            if xi < 0 || xi >= nx as isize {
                                continue;
                            }
                            acc += field[(zi as usize * ny + yi as usize) * nx + xi as usize];
                            count += 1.0;
                        }
                    }
                }
                out[(z * ny + y) * nx + x] = acc / count;
            }
        }
    }
    out
}

fn to_tensor(field: Vec<f64>, dims: [usize; 3]) -> Tensor<f32> {
    let [nz, ny, nx] = dims;
    Tensor::from_vec(
        &[1, nz, ny, nx],
        field.into_iter().map(|v| v as f32).collect(),
    )
}

/// Affinely map a `[0, 1]` field into the generator's `[-1, 1]` range.
pub fn to_tanh_range(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| 2.0 * v - 1.0)
}

/// One domain-A volume: a few Gaussian blobs on a dark background.
pub fn domain_a_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let field = blob_field(dims, rng);
    to_tensor(field, dims)
}

/// One domain-B volume: intensity inversion of an (independent) blob field,
/// box-smoothed once.
pub fn domain_b_volume(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let field = blob_field(dims, rng);
    let inverted: Vec<f64> = field.into_iter().map(|v| 1.0 - v).collect();
    to_tensor(box_smooth(&inverted, dims), dims)
}

/// Two unpaired domains of `n` volumes each; instances are disjoint (every
/// volume consumes its own RNG draws).
pub fn toy_domains(
    dims: [usize; 3],
    n: usize,
    seed: u64,
) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_9d1b_cbf3);
    let a = (0..n).map(|_| domain_a_volume(dims, &mut rng_a)).collect();
    let b = (0..n).map(|_| domain_b_volume(dims, &mut rng_b)).collect();
    (a, b)
}
