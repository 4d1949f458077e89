use std::cell::RefCell;

use rayon::prelude::*;

use super::conv::check_conv_args;
use super::{rows_per_chunk, Activation, ConvSpec, SyncPtr, Tensor};
use crate::error::Result;

thread_local! {
    static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Reference transpose convolution (the adjoint of [`super::conv3d_direct`]).
///
/// Weight dims are `(Cin, Cout, kz, ky, kx)`. Output voxels accumulate in
/// `f64` in (ci, kz, ky, kx) order, bias last.
pub fn conv_transpose3d_direct(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let xs = x.shape4()?;
    let [od, oh, ow] = check_conv_args(xs, w, b, spec, true)?;
    let [cin, id, ih, iw] = xs;
    let cout = spec.out_channels;
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let plane = od * oh * ow;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0f32; cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst32)| {
        let mut acc = vec![0f64; plane];
        for ci in 0..cin {
            let src = &xd[ci * id * ih * iw..][..id * ih * iw];
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let wv = wd[(((ci * cout + co) * kz + dz) * ky + dy) * kx + dx] as f64;
                        for iz in 0..id {
                            let oz = (iz * sz + dz) as isize - pz as isize;
                            if oz < 0 || oz >= od as isize {
                                continue;
                            }
                            for iy in 0..ih {
                                let oy = (iy * sy + dy) as isize - py as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let row = &src[(iz * ih + iy) * iw..][..iw];
                                let base = (oz as usize * oh + oy as usize) * ow;
                                for (ix, &v) in row.iter().enumerate() {
                                    let ox = (ix * sx + dx) as isize - px as isize;
                                    if ox >= 0 && ox < ow as isize {
                                        acc[base + ox as usize] += wv * v as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let bv = b.map_or(0.0, |b| b.data()[co] as f64);
        for (o, a) in dst32.iter_mut().zip(&acc) {
            *o = (a + bv) as f32;
        }
    });
    Tensor::new(vec![cout, od, oh, ow], out)
}

/// Transpose convolution with a GEMM fast path for the non-overlapping case
/// (stride equal to kernel, no padding), which is how the network upsamples.
pub fn conv_transpose3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape4()?;
    let [od, oh, ow] = check_conv_args(xs, w, b, spec, true)?;
    if !is_non_overlapping(spec) {
        return conv_transpose3d_direct(x, w, b, spec);
    }
    let mut out = vec![0f32; spec.out_channels * od * oh * ow];
    conv_transpose3d_into(x.data(), xs, w.data(), b.map(|b| b.data()), spec, Activation::None, &mut out);
    Tensor::new(vec![spec.out_channels, od, oh, ow], out)
}

fn is_non_overlapping(spec: &ConvSpec) -> bool {
    spec.stride == spec.kernel && spec.padding == [0; 3]
}

/// Engine entry point. Falls back to the reference kernel when the taps of
/// neighbouring input voxels overlap.
pub(crate) fn conv_transpose3d_into(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    b: Option<&[f32]>,
    spec: &ConvSpec,
    act: Activation,
    out: &mut [f32],
) {
    let [cin, id, ih, iw] = xs;
    let cout = spec.out_channels;
    let [od, oh, ow] = spec
        .transpose_output_extent([id, ih, iw])
        .expect("validated by caller");
    let plane_out = od * oh * ow;
    assert_eq!(out.len(), cout * plane_out);

    if !is_non_overlapping(spec) {
        let xt = Tensor::new(xs.to_vec(), x.to_vec()).expect("valid dims");
        let wt = Tensor::new(spec.transpose_weight_dims(), w.to_vec()).expect("valid dims");
        let bt = b.map(|b| Tensor::new(vec![cout], b.to_vec()).expect("valid dims"));
        let y = conv_transpose3d_direct(&xt, &wt, bt.as_ref(), spec).expect("validated by caller");
        for (o, v) in out.iter_mut().zip(y.data()) {
            *o = act.apply(*v);
        }
        return;
    }

    let [kz, ky, kx] = spec.kernel;
    let taps = spec.taps();
    let m = cout * taps;
    let plane_in = id * ih * iw;
    let rows = id * ih;
    let per = rows_per_chunk(iw);
    let dst = SyncPtr(out.as_mut_ptr());
    let chunks: Vec<(usize, usize)> = (0..rows)
        .step_by(per)
        .map(|r0| (r0, (r0 + per).min(rows)))
        .collect();

    chunks.par_iter().for_each(|&(r0, r1)| {
        // capture the Send wrapper whole, not its raw-pointer field
        #[allow(clippy::redundant_locals)]
        let dst = dst;
        let cols = (r1 - r0) * iw;
        SCRATCH.with(|s| {
            let mut y = s.borrow_mut();
            if y.len() < m * cols {
                y.resize(m * cols, 0.0);
            }
            let y = &mut y[..m * cols];
            // y[(co, t), j] = sum_ci w[ci, co, t] * x[ci, j]
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    cin,
                    cols,
                    1.0,
                    w.as_ptr(),
                    1,
                    m as isize,
                    x.as_ptr().add(r0 * iw),
                    plane_in as isize,
                    1,
                    0.0,
                    y.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            for co in 0..cout {
                let bv = b.map_or(0.0, |b| b[co]);
                for dz in 0..kz {
                    for dy in 0..ky {
                        for dx in 0..kx {
                            let t = (dz * ky + dy) * kx + dx;
                            let src = &y[(co * taps + t) * cols..][..cols];
                            for (j, r) in (r0..r1).enumerate() {
                                let (iz, iy) = (r / ih, r % ih);
                                let base = co * plane_out + ((iz * kz + dz) * oh + iy * ky + dy) * ow + dx;
                                for (ix, &v) in src[j * iw..][..iw].iter().enumerate() {
                                    // SAFETY: each output voxel belongs to exactly one input voxel.
                                    unsafe { *dst.0.add(base + ix * kx) = act.apply(v + bv) };
                                }
                            }
                        }
                    }
                }
            }
        });
    });
}
