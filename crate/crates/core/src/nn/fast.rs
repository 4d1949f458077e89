//! Optimized convolution: per-chunk im2col feeding a packed SGEMM.
//!
//! Output rows are grouped into chunks of about [`CHUNK_VOXELS`] voxels. For
//! each chunk the receptive fields are gathered into a `(Cin*taps) x cols`
//! matrix and multiplied by the `(Cout) x (Cin*taps)` weight matrix straight
//! into the output tensor. Pointwise stride-1 convolutions skip the gather and
//! read the input in place. The factorized 1D kernels (`k x 1 x 1`,
//! `1 x k x 1`, `1 x 1 x k`) only loop over their single tap axis, and the
//! x-axis gather copies whole row segments whenever the x stride is 1.

use std::cell::RefCell;

use rayon::prelude::*;

use super::conv::check_conv_args;
use super::{rows_per_chunk, Activation, ConvSpec, SyncPtr, Tensor};
use crate::error::Result;

thread_local! {
    static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

pub fn conv3d_fast(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape4()?;
    let [od, oh, ow] = check_conv_args(xs, w, b, spec, false)?;
    let mut out = vec![0f32; spec.out_channels * od * oh * ow];
    conv3d_fast_into(
        x.data(),
        xs,
        w.data(),
        b.map(|b| b.data()),
        spec,
        Activation::None,
        &mut out,
    );
    Tensor::new(vec![spec.out_channels, od, oh, ow], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    /// 1x1x1, stride 1, no padding: the input already is the GEMM operand.
    Pointwise,
    /// Only one kernel axis is longer than 1.
    Axis(usize),
    General,
}

fn select_path(spec: &ConvSpec) -> Path {
    let long: Vec<usize> = (0..3).filter(|&a| spec.kernel[a] > 1).collect();
    match long[..] {
        [] if spec.stride == [1; 3] && spec.padding == [0; 3] => Path::Pointwise,
        [a] => Path::Axis(a),
        _ => Path::General,
    }
}

/// Caller guarantees shapes were validated and `out` holds `Cout * od*oh*ow`.
pub(crate) fn conv3d_fast_into(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
    act: Activation,
    out: &mut [f32],
) {
    let [cin, id, ih, iw] = xs;
    let [od, oh, ow] = spec
        .output_extent([id, ih, iw])
        .expect("validated by caller");
    let cout = spec.out_channels;
    let plane_in = id * ih * iw;
    let plane_out = od * oh * ow;
    assert_eq!(out.len(), cout * plane_out);
    assert_eq!(x.len(), cin * plane_in);
    let k = cin * spec.taps();
    let rows = od * oh;
    let per = rows_per_chunk(ow);
    let path = select_path(spec);
    let dst = SyncPtr(out.as_mut_ptr());

    let chunks: Vec<(usize, usize)> = (0..rows)
        .step_by(per)
        .map(|r0| (r0, (r0 + per).min(rows)))
        .collect();
    chunks.par_iter().for_each(|&(r0, r1)| {
        // capture the Send wrapper whole, not its raw-pointer field
        #[allow(clippy::redundant_locals)]
        let dst = dst;
        let cols = (r1 - r0) * ow;
        let c_ptr = unsafe { dst.0.add(r0 * ow) };
        match path {
            Path::Pointwise => unsafe {
                matrixmultiply::sgemm(
                    cout,
                    k,
                    cols,
                    1.0,
                    w.as_ptr(),
                    k as isize,
                    1,
                    x.as_ptr().add(r0 * ow),
                    plane_in as isize,
                    1,
                    0.0,
                    c_ptr,
                    plane_out as isize,
                    1,
                );
            },
            _ => SCRATCH.with(|s| {
                let mut col = s.borrow_mut();
                if col.len() < k * cols {
                    col.resize(k * cols, 0.0);
                }
                let col = &mut col[..k * cols];
                im2col(x, xs, spec, path, [od, oh, ow], r0, r1, col);
                unsafe {
                    matrixmultiply::sgemm(
                        cout,
                        k,
                        cols,
                        1.0,
                        w.as_ptr(),
                        k as isize,
                        1,
                        col.as_ptr(),
                        cols as isize,
                        1,
                        0.0,
                        c_ptr,
                        plane_out as isize,
                        1,
                    );
                }
            }),
        }
        if b.is_some() || act != Activation::None {
            for co in 0..cout {
                // SAFETY: chunk rows are disjoint across tasks.
                let seg = unsafe { std::slice::from_raw_parts_mut(c_ptr.add(co * plane_out), cols) };
                let bv = b.map_or(0.0, |b| b[co]);
                match act {
                    Activation::None => seg.iter_mut().for_each(|v| *v += bv),
                    Activation::Relu => seg.iter_mut().for_each(|v| *v = (*v + bv).max(0.0)),
                }
            }
        }
    });
}

/// Valid output x range `[lo, hi)` for kernel offset `dx`.
#[inline]
fn x_range(ow: usize, iw: usize, sx: usize, px: usize, dx: usize) -> (usize, usize) {
    let lo = if dx >= px { 0 } else { (px - dx).div_ceil(sx) };
    let hi = if iw + px > dx {
        ((iw - 1 + px - dx) / sx + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[inline]
fn gather_row(seg: &mut [f32], src: &[f32], sx: usize, px: usize, dx: usize) {
    let (lo, hi) = x_range(seg.len(), src.len(), sx, px, dx);
    seg[..lo].fill(0.0);
    seg[hi..].fill(0.0);
    if lo < hi {
        if sx == 1 {
            let off = lo + dx - px;
            seg[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
        } else {
            for (ox, v) in seg[lo..hi].iter_mut().enumerate() {
                *v = src[(ox + lo) * sx + dx - px];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    xs: [usize; 4],
    spec: &ConvSpec,
    path: Path,
    [_, oh, ow]: [usize; 3],
    r0: usize,
    r1: usize,
    col: &mut [f32],
) {
    let [cin, id, ih, iw] = xs;
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let cols = (r1 - r0) * ow;
    let plane_in = id * ih * iw;
    let taps = spec.taps();

    let mut fill = |ci: usize, t: usize, dz: usize, dy: usize, dx: usize| {
        let dst = &mut col[(ci * taps + t) * cols..][..cols];
        let src = &x[ci * plane_in..][..plane_in];
        for (j, r) in (r0..r1).enumerate() {
            let seg = &mut dst[j * ow..][..ow];
            let iz = ((r / oh) * sz + dz) as isize - pz as isize;
            let iy = ((r % oh) * sy + dy) as isize - py as isize;
            if iz < 0 || iy < 0 || iz >= id as isize || iy >= ih as isize {
                seg.fill(0.0);
                continue;
            }
            let row = &src[(iz as usize * ih + iy as usize) * iw..][..iw];
            gather_row(seg, row, sx, px, dx);
        }
    };

    for ci in 0..cin {
        match path {
            Path::Axis(0) => (0..kz).for_each(|d| fill(ci, d, d, 0, 0)),
            Path::Axis(1) => (0..ky).for_each(|d| fill(ci, d, 0, d, 0)),
            Path::Axis(_) => (0..kx).for_each(|d| fill(ci, d, 0, 0, d)),
            _ => {
                for dz in 0..kz {
                    for dy in 0..ky {
                        for dx in 0..kx {
                            fill(ci, (dz * ky + dy) * kx + dx, dz, dy, dx);
                        }
                    }
                }
            }
        }
    }
}
