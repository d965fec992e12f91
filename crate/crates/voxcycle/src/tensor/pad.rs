//! Spatial padding (zero / reflect) with scatter-accumulate backward.

use crate::exec;
use crate::tensor::{Scalar, Tensor, TensorError, VolGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[inline]
fn mirror(i: isize, n: usize) -> usize {
    // Reflect without repeating the border sample: -1 -> 1, n -> n-2.
    let n = n as isize;
    let m = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    m as usize
}

/// Grow every spatial axis of `[C, D, H, W]` by `width` on each side.
pub fn pad<T: Scalar>(
    input: &Tensor<T>,
    width: usize,
    mode: PadMode,
) -> Result<Tensor<T>, TensorError> {
    let g = VolGeom::of(input)?;
    if width == 0 {
        return Ok(input.clone());
    }
    if mode == PadMode::Reflect {
        for (axis, n) in g.spatial().into_iter().enumerate() {
            if width >= n {
                return Err(TensorError::InvalidConfig {
                    op: "pad",
                    msg: format!(
                        "reflect width {width} must be smaller than spatial size {n} on axis {axis}"
                    ),
                });
            }
        }
    }
    let (pd, ph, pw) = (g.depth + 2 * width, g.height + 2 * width, g.width + 2 * width);
    let mut out = Tensor::zeros(&[g.channels, pd, ph, pw]);
    let in_plane = g.plane();
    let out_plane = pd * ph * pw;
    let src = input.data();

    exec::for_each_slab(out.data_mut(), out_plane, |c, plane| {
        let sp = &src[c * in_plane..(c + 1) * in_plane];
        for qd in 0..pd {
            let d = qd as isize - width as isize;
            let (in_d, valid_d) = match mode {
                PadMode::Reflect => (mirror(d, g.depth), true),
                PadMode::Zero => {
                    if d < 0 || d >= g.depth as isize {
                        (0, false)
                    } else {
                        (d as usize, true)
                    }
                }
            };
            for qh in 0..ph {
                let h = qh as isize - width as isize;
                let (in_h, valid_h) = match mode {
                    PadMode::Reflect => (mirror(h, g.height), true),
                    PadMode::Zero => {
                        if h < 0 || h >= g.height as isize {
                            (0, false)
                        } else {
                            (h as usize, true)
                        }
                    }
                };
                if !(valid_d && valid_h) {
                    continue; // zero mode: row stays zero
                }
                let dst_row = &mut plane[(qd * ph + qh) * pw..(qd * ph + qh) * pw + pw];
                let src_row = &sp[(in_d * g.height + in_h) * g.width
                    ..(in_d * g.height + in_h) * g.width + g.width];
                match mode {
                    PadMode::Zero => {
                        dst_row[width..width + g.width].copy_from_slice(src_row);
                    }
                    PadMode::Reflect => {
                        for (q, slot) in dst_row.iter_mut().enumerate() {
                            *slot = src_row[mirror(q as isize - width as isize, g.width)];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Backward of [`pad`]: scatter the padded gradient back onto the original
/// grid. Zero mode crops the interior; reflect mode accumulates each mirror
/// contribution onto its source voxel.
pub fn pad_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    width: usize,
    mode: PadMode,
) -> Result<Tensor<T>, TensorError> {
    let g = VolGeom::of(grad_out)?;
    if width == 0 {
        return Ok(grad_out.clone());
    }
    let (d, h, w) = (
        g.depth
            .checked_sub(2 * width)
            .filter(|&n| n > 0)
            .ok_or_else(|| TensorError::InvalidConfig {
                op: "pad_backward",
                msg: format!("padded depth {} too small for width {width}", g.depth),
            })?,
        g.height - 2 * width,
        g.width - 2 * width,
    );
    if mode == PadMode::Reflect {
        for (axis, n) in [d, h, w].into_iter().enumerate() {
            if width >= n {
                return Err(TensorError::InvalidConfig {
                    op: "pad_backward",
                    msg: format!(
                        "reflect width {width} must be smaller than unpadded size {n} on axis {axis}"
                    ),
                });
            }
        }
    }
    let mut out = Tensor::zeros(&[g.channels, d, h, w]);
    let out_plane = d * h * w;
    let in_plane = g.plane();
    let src = grad_out.data();

    exec::for_each_slab(out.data_mut(), out_plane, |c, plane| {
        let gp = &src[c * in_plane..(c + 1) * in_plane];
        for qd in 0..g.depth {
            for qh in 0..g.height {
                let row = &gp[(qd * g.height + qh) * g.width..(qd * g.height + qh + 1) * g.width];
                let dd = qd as isize - width as isize;
                let hh = qh as isize - width as isize;
                match mode {
                    PadMode::Zero => {
                        if dd < 0 || dd >= d as isize || hh < 0 || hh >= h as isize {
                            continue;
                        }
                        let base = (dd as usize * h + hh as usize) * w;
                        for (slot, &v) in plane[base..base + w].iter_mut().zip(&row[width..width + w])
                        {
                            *slot += v;
                        }
                    }
                    PadMode::Reflect => {
                        let td = mirror(dd, d);
                        let th = mirror(hh, h);
                        let base = (td * h + th) * w;
                        for (q, &v) in row.iter().enumerate() {
                            plane[base + mirror(q as isize - width as isize, w)] += v;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}
