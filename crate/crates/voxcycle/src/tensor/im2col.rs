//! Shared geometry for convolution-family ops: im2col gather, col2im
//! scatter-add, and the small GEMM drivers they feed.
//!
//! One `ConvGeom` describes the index map between a dense grid (conv input /
//! transpose-conv output) and a sparse grid (conv output / transpose-conv
//! input):
//!
//! ```text
//! dense[c, od*s + i - p, oh*s + j - p, ow*s + l - p]  <->  row(od,oh,ow)[c*k^3 + (i,j,l)]
//! ```
//!
//! Out-of-bounds dense coordinates read as zero (gather) or are dropped
//! (scatter), which is exactly symmetric zero padding.
//!
//! Every parallel loop here hands out disjoint `&mut` regions and keeps the
//! per-element accumulation order fixed, so results do not depend on the
//! thread count.

use crate::exec;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    /// Spatial dims of the dense grid.
    pub in_sp: [usize; 3],
    /// Spatial dims of the sparse grid.
    pub out_sp: [usize; 3],
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over `in_sp`.
    /// Caller has already validated that every output dim is >= 1.
    pub fn conv(in_sp: [usize; 3], k: usize, s: usize, p: usize) -> Self {
        let out = |n: usize| (n + 2 * p - k) / s + 1;
        ConvGeom {
            in_sp,
            out_sp: [out(in_sp[0]), out(in_sp[1]), out(in_sp[2])],
            k,
            s,
            p,
        }
    }

    /// Geometry of a transpose convolution whose *input* lives on the sparse
    /// grid `x_sp`; the dense grid is its output.
    pub fn transpose(x_sp: [usize; 3], k: usize, s: usize, p: usize, out_pad: usize) -> Self {
        let out = |n: usize| (n - 1) * s + k + out_pad - 2 * p;
        ConvGeom {
            in_sp: [out(x_sp[0]), out(x_sp[1]), out(x_sp[2])],
            out_sp: x_sp,
            k,
            s,
            p,
        }
    }

    pub fn positions(&self) -> usize {
        self.out_sp.iter().product()
    }

    pub fn in_plane(&self) -> usize {
        self.in_sp.iter().product()
    }

    /// Row length of a column panel for a dense grid with `c` channels.
    pub fn row_len(&self, c: usize) -> usize {
        c * self.k * self.k * self.k
    }

    #[inline]
    fn decompose(&self, pos: usize) -> (usize, usize, usize) {
        let hw = self.out_sp[1] * self.out_sp[2];
        (pos / hw, (pos % hw) / self.out_sp[2], pos % self.out_sp[2])
    }
}

/// Split `total` positions into ranges of roughly `target` each.
pub fn slab_ranges(total: usize, target: usize) -> Vec<(usize, usize)> {
    let step = target.max(1);
    (0..total)
        .step_by(step)
        .map(|p0| (p0, (p0 + step).min(total)))
        .collect()
}

/// Gather rows for sparse positions `p0..p1` from `src` (`[channels]` dense
/// planes) into `cols` (`(p1-p0) * row_len` elements, position-major).
pub fn im2col<T: Scalar>(
    src: &[T],
    channels: usize,
    geom: &ConvGeom,
    p0: usize,
    p1: usize,
    cols: &mut [T],
) {
    let k = geom.k;
    let row_len = geom.row_len(channels);
    debug_assert_eq!(cols.len(), (p1 - p0) * row_len);
    let [ind, inh, inw] = geom.in_sp;
    let in_plane = geom.in_plane();

    // Rows are independent; parallelize over row chunks.
    let rows_per_task = (256 / k.max(1)).max(8);
    exec::for_each_slab(cols, rows_per_task * row_len, |task, chunk| {
        let first = p0 + task * rows_per_task;
        for (r, row) in chunk.chunks_mut(row_len).enumerate() {
            let (od, oh, ow) = geom.decompose(first + r);
            let id0 = (od * geom.s) as isize - geom.p as isize;
            let ih0 = (oh * geom.s) as isize - geom.p as isize;
            let iw0 = (ow * geom.s) as isize - geom.p as isize;
            // Clip the width run once; it is shared by every (c, i, j).
            let l_lo = (-iw0).clamp(0, k as isize) as usize;
            let l_hi = ((inw as isize - iw0).clamp(0, k as isize)) as usize;
            let mut w = 0;
            for c in 0..channels {
                let plane = &src[c * in_plane..(c + 1) * in_plane];
                for i in 0..k {
                    let id = id0 + i as isize;
                    for j in 0..k {
                        let ih = ih0 + j as isize;
                        let seg = &mut row[w..w + k];
                        w += k;
                        if id < 0 || id >= ind as isize || ih < 0 || ih >= inh as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let line = (id as usize * inh + ih as usize) * inw;
                        seg[..l_lo].fill(T::zero());
                        seg[l_hi..].fill(T::zero());
                        if l_hi > l_lo {
                            let start = line + (iw0 + l_lo as isize) as usize;
                            seg[l_lo..l_hi].copy_from_slice(&plane[start..start + (l_hi - l_lo)]);
                        }
                    }
                }
            }
        }
    });
}

/// Scatter-add rows for sparse positions `p0..p1` into `dst` (`[channels]`
/// dense planes). Parallel over channels: each channel only touches its own
/// plane and its own row segment.
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    channels: usize,
    geom: &ConvGeom,
    p0: usize,
    p1: usize,
    dst: &mut [T],
) {
    let k = geom.k;
    let k3 = k * k * k;
    let row_len = geom.row_len(channels);
    debug_assert_eq!(cols.len(), (p1 - p0) * row_len);
    let [ind, inh, inw] = geom.in_sp;
    let in_plane = geom.in_plane();

    exec::for_each_slab(dst, in_plane, |c, plane| {
        for pos in p0..p1 {
            let row = &cols[(pos - p0) * row_len + c * k3..(pos - p0) * row_len + (c + 1) * k3];
            let (od, oh, ow) = geom.decompose(pos);
            let id0 = (od * geom.s) as isize - geom.p as isize;
            let ih0 = (oh * geom.s) as isize - geom.p as isize;
            let iw0 = (ow * geom.s) as isize - geom.p as isize;
            let l_lo = (-iw0).clamp(0, k as isize) as usize;
            let l_hi = ((inw as isize - iw0).clamp(0, k as isize)) as usize;
            if l_hi <= l_lo {
                continue;
            }
            for i in 0..k {
                let id = id0 + i as isize;
                if id < 0 || id >= ind as isize {
                    continue;
                }
                for j in 0..k {
                    let ih = ih0 + j as isize;
                    if ih < 0 || ih >= inh as isize {
                        continue;
                    }
                    let line = (id as usize * inh + ih as usize) * inw;
                    let start = line + (iw0 + l_lo as isize) as usize;
                    let seg = &row[(i * k + j) * k + l_lo..(i * k + j) * k + l_hi];
                    for (d, &v) in plane[start..start + (l_hi - l_lo)].iter_mut().zip(seg) {
                        *d += v;
                    }
                }
            }
        }
    });
}

/// How a `dot_rows` call initializes its output span.
pub enum Init<'a, T> {
    Bias(&'a [T]),
    Accumulate,
}

/// `out[o][off + i] (op)= bias[o] + dot(a_row_o, cols_row_i)` for
/// `o in 0..m`, `i in 0..p`.
///
/// `a` is `m` rows of `klen`; `cols` is `p` rows of `klen`; `out` rows have
/// stride `out_stride`. Channel-parallel in groups of four (feeding the
/// four-way dot kernel); position-parallel when `m` is too small to split.
pub fn dot_rows<T: Scalar>(
    a: &[T],
    m: usize,
    klen: usize,
    cols: &[T],
    p: usize,
    out: &mut [T],
    out_stride: usize,
    off: usize,
    init: Init<'_, T>,
) {
    let acc = matches!(init, Init::Accumulate);
    let bias = match init {
        Init::Bias(b) => Some(b),
        Init::Accumulate => None,
    };
    if m >= 4 {
        exec::for_each_slab(out, 4 * out_stride, |g, planes| {
            let o0 = g * 4;
            let rows = planes.len() / out_stride;
            for i in 0..p {
                let x = &cols[i * klen..(i + 1) * klen];
                if rows == 4 {
                    let d = T::dot4(
                        [
                            &a[o0 * klen..(o0 + 1) * klen],
                            &a[(o0 + 1) * klen..(o0 + 2) * klen],
                            &a[(o0 + 2) * klen..(o0 + 3) * klen],
                            &a[(o0 + 3) * klen..(o0 + 4) * klen],
                        ],
                        x,
                    );
                    for r in 0..4 {
                        let slot = &mut planes[r * out_stride + off + i];
                        let base = if acc {
                            *slot
                        } else {
                            bias.map_or(T::zero(), |b| b[o0 + r])
                        };
                        *slot = base + d[r];
                    }
                } else {
                    for r in 0..rows {
                        let o = o0 + r;
                        let d = T::dot(&a[o * klen..(o + 1) * klen], x);
                        let slot = &mut planes[r * out_stride + off + i];
                        let base = if acc {
                            *slot
                        } else {
                            bias.map_or(T::zero(), |b| b[o])
                        };
                        *slot = base + d;
                    }
                }
            }
        });
    } else {
        for o in 0..m {
            let row = &a[o * klen..(o + 1) * klen];
            let span = &mut out[o * out_stride + off..o * out_stride + off + p];
            let b = bias.map_or(T::zero(), |b| b[o]);
            let chunk = 1024usize;
            exec::for_each_slab(span, chunk, |t, piece| {
                for (i, slot) in piece.iter_mut().enumerate() {
                    let pos = t * chunk + i;
                    let d = T::dot(row, &cols[pos * klen..(pos + 1) * klen]);
                    *slot = if acc { *slot + d } else { b + d };
                }
            });
        }
    }
}

/// `gw[o][:] += sum_i coef[o][off + i] * cols_row_i` — the weight-gradient
/// GEMM. Parallel over groups of four `gw` rows so the column panel streams
/// once per group instead of once per row; the K axis splits when `m` is
/// too small to share.
pub fn accum_rows<T: Scalar>(
    gw: &mut [T],
    m: usize,
    klen: usize,
    cols: &[T],
    p: usize,
    coef: &[T],
    coef_stride: usize,
    off: usize,
) {
    if m >= 4 {
        exec::for_each_slab(gw, 4 * klen, |g, rows| {
            let o0 = g * 4;
            let n_rows = rows.len() / klen;
            for i in 0..p {
                let x = &cols[i * klen..(i + 1) * klen];
                for (r, row) in rows.chunks_mut(klen).enumerate().take(n_rows) {
                    let c = coef[(o0 + r) * coef_stride + off + i];
                    if c != T::zero() {
                        T::axpy(row, c, x);
                    }
                }
            }
        });
    } else {
        for o in 0..m {
            let coefs = &coef[o * coef_stride + off..o * coef_stride + off + p];
            let row = &mut gw[o * klen..(o + 1) * klen];
            let chunk = 2048usize;
            exec::for_each_slab(row, chunk, |t, piece| {
                let k0 = t * chunk;
                for (i, &c) in coefs.iter().enumerate() {
                    T::axpy(piece, c, &cols[i * klen + k0..i * klen + k0 + piece.len()]);
                }
            });
        }
    }
}

/// `cols[i][:] = sum_o coef[o][off + i] * a_row_o` — expansion GEMM used for
/// input gradients and the transpose-conv forward. Parallel over position
/// groups of four so each `a` row streams once per group.
pub fn expand_rows<T: Scalar>(
    cols: &mut [T],
    klen: usize,
    a: &[T],
    m: usize,
    coef: &[T],
    coef_stride: usize,
    off: usize,
) {
    exec::for_each_slab(cols, 4 * klen, |task, chunk| {
        chunk.fill(T::zero());
        let i0 = task * 4;
        let n_rows = chunk.len() / klen;
        for o in 0..m {
            let src = &a[o * klen..(o + 1) * klen];
            for (r, row) in chunk.chunks_mut(klen).enumerate().take(n_rows) {
                let c = coef[o * coef_stride + off + i0 + r];
                if c != T::zero() {
                    T::axpy(row, c, src);
                }
            }
        }
    });
}

/// Pick a slab size (in positions) so a column panel stays near 32 MB.
pub fn panel_positions<T: Scalar>(row_len: usize) -> usize {
    let budget = 32 << 20;
    (budget / (row_len.max(1) * std::mem::size_of::<T>())).clamp(1, 1 << 20)
}
