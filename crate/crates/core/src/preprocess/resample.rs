//! Axis-separable resampling.
//!
//! Grid mappings are axis aligned, so tensor-product interpolation factors
//! into one pass per axis (x, then y, then z). Each pass optionally applies an
//! anti-alias Gaussian, converts samples to cubic B-spline coefficients and
//! evaluates the spline at the back-projected voxel centres
//! `c = (i + 0.5) * n_in / n_out - 0.5`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::SyncPtr;
use crate::volume_io::{LabelVolume, Volume};

/// Pole of the cubic B-spline prefilter.
const POLE: f64 = -0.267_949_192_431_122_7; // sqrt(3) - 2
const PREFILTER_TOL: f64 = 1e-12;
/// Gaussian truncation radius in standard deviations.
const GAUSS_TRUNCATE: f64 = 4.0;
/// Columns per task when filtering along strided axes.
const BLOCK_COLS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Interp {
    Linear,
    Cubic,
}

/// Index of the input voxel nearest to output voxel `dst`'s back-projected
/// centre; exact ties go to the lower index.
pub(crate) fn nearest_source(dst: usize, n_in: usize, n_out: usize) -> usize {
    // ceil(c - 0.5) with c - 0.5 = ((2 dst + 1) n_in - 2 n_out) / (2 n_out)
    let num = (2 * dst as i64 + 1) * n_in as i64 - 2 * n_out as i64;
    let den = 2 * n_out as i64;
    let idx = num.div_euclid(den) + i64::from(num.rem_euclid(den) != 0);
    idx.clamp(0, n_in as i64 - 1) as usize
}

/// Resamples `v` onto `target` voxels with spline order 1 or 3.
///
/// In-plane axes (y, x) that shrink by a factor `f > 1` are first blurred by a
/// Gaussian of sigma `f / 2` voxels. Axes of extent 1 cannot carry a cubic
/// spline and are replicated instead (logged as a warning).
pub fn resample_image(v: &Volume, target: [usize; 3], order: usize) -> Result<Volume> {
    let interp = match order {
        1 => Interp::Linear,
        3 => Interp::Cubic,
        _ => return Err(Error::invalid(format!("spline order {order} unsupported (use 1 or 3)"))),
    };
    if target.contains(&0) {
        return Err(Error::invalid(format!("target shape {target:?} has a zero extent")));
    }
    let mut shape = v.shape();
    let mut data = v.data().to_vec();
    for axis in [2, 1, 0] {
        let (n_in, n_out) = (shape[axis], target[axis]);
        if n_in == n_out {
            continue;
        }
        if n_in == 1 && interp == Interp::Cubic {
            log::warn!("axis {axis} has extent 1; cubic interpolation degrades to replication");
        }
        let sigma = (axis != 0 && n_in > n_out).then(|| n_in as f64 / n_out as f64 / 2.0);
        data = resample_axis(&data, shape, axis, n_out, interp, sigma);
        shape[axis] = n_out;
    }
    Volume::new(v.geometry().resampled(target), data)
}

/// Filters every line along `axis`, producing `n_out` samples per line.
fn resample_axis(
    data: &[f32],
    shape: [usize; 3],
    axis: usize,
    n_out: usize,
    interp: Interp,
    sigma: Option<f64>,
) -> Vec<f32> {
    let n_in = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0f32; outer * n_out * inner];
    let gauss = sigma.map(gaussian_kernel);
    let taps = SampleTaps::new(n_in, n_out, interp);
    let dst = SyncPtr(out.as_mut_ptr());

    // A task covers `cw` adjacent lines of one outer slab; each line is a
    // column of an (n x cw) block.
    let cw = inner.min(BLOCK_COLS);
    let tasks: Vec<(usize, usize)> = (0..outer)
        .flat_map(|o| (0..inner).step_by(cw).map(move |i0| (o, i0)))
        .collect();
    let grain = if inner == 1 { 256 } else { 1 };
    tasks.par_chunks(grain).for_each(|group| {
        // capture the Send wrapper whole, not its raw-pointer field
        #[allow(clippy::redundant_locals)]
        let dst = dst;
        let mut block = Vec::new();
        let mut tmp = Vec::new();
        for &(o, i0) in group {
            let w = cw.min(inner - i0);
            block.clear();
            block.resize(n_in * w, 0f64);
            let src = &data[o * n_in * inner..][..n_in * inner];
            for j in 0..n_in {
                for (b, &s) in block[j * w..][..w].iter_mut().zip(&src[j * inner + i0..][..w]) {
                    *b = s as f64;
                }
            }
            if let Some(g) = &gauss {
                blur_block(&mut block, &mut tmp, n_in, w, g);
            }
            if interp == Interp::Cubic && n_in > 1 {
                prefilter_block(&mut block, n_in, w);
            }
            for m in 0..n_out {
                let (idx, wts) = taps.get(m);
                let base = (o * n_out + m) * inner + i0;
                for c in 0..w {
                    let mut acc = 0.0;
                    for (k, &wt) in wts.iter().enumerate() {
                        acc += wt * block[idx[k] * w + c];
                    }
                    // SAFETY: (o, m, i0..i0+w) ranges are disjoint across tasks.
                    unsafe { *dst.0.add(base + c) = acc as f32 };
                }
            }
        }
    });
    out
}

/// Precomputed sample positions and weights for one axis.
struct SampleTaps {
    idx: Vec<[usize; 4]>,
    wts: Vec<[f64; 4]>,
    len: usize,
}

impl SampleTaps {
    fn new(n_in: usize, n_out: usize, interp: Interp) -> Self {
        let mut idx = Vec::with_capacity(n_out);
        let mut wts = Vec::with_capacity(n_out);
        let len = if n_in == 1 {
            1
        } else if interp == Interp::Cubic {
            4
        } else {
            2
        };
        let mirror = |i: i64| -> usize {
            let last = n_in as i64 - 1;
            let mut i = i.abs();
            if i > last {
                i = 2 * last - i;
            }
            i.clamp(0, last) as usize
        };
        for m in 0..n_out {
            let c = ((m as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let base = c.floor();
            let t = c - base;
            let i = base as i64;
            match len {
                1 => {
                    idx.push([0; 4]);
                    wts.push([1.0, 0.0, 0.0, 0.0]);
                }
                2 => {
                    idx.push([i as usize, mirror(i + 1).min(n_in - 1), 0, 0]);
                    wts.push([1.0 - t, t, 0.0, 0.0]);
                }
                _ => {
                    let t2 = t * t;
                    let t3 = t2 * t;
                    idx.push([mirror(i - 1), mirror(i), mirror(i + 1), mirror(i + 2)]);
                    wts.push([
                        (1.0 - t).powi(3) / 6.0,
                        (4.0 - 6.0 * t2 + 3.0 * t3) / 6.0,
                        (1.0 + 3.0 * t + 3.0 * t2 - 3.0 * t3) / 6.0,
                        t3 / 6.0,
                    ]);
                }
            }
        }
        SampleTaps { idx, wts, len }
    }

    fn get(&self, m: usize) -> (&[usize], &[f64]) {
        (&self.idx[m][..self.len], &self.wts[m][..self.len])
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (GAUSS_TRUNCATE * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian along the block's rows with clamp-to-edge boundaries.
fn blur_block(block: &mut [f64], tmp: &mut Vec<f64>, n: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as i64;
    tmp.clear();
    tmp.resize(n * w, 0.0);
    for j in 0..n {
        let dst = &mut tmp[j * w..][..w];
        for (t, &g) in kernel.iter().enumerate() {
            let s = (j as i64 + t as i64 - r).clamp(0, n as i64 - 1) as usize;
            for (d, &v) in dst.iter_mut().zip(&block[s * w..][..w]) {
                *d += g * v;
            }
        }
    }
    block.copy_from_slice(tmp);
}

/// In-place conversion of samples to cubic B-spline coefficients with
/// mirror-symmetric boundaries (causal then anti-causal recursion).
fn prefilter_block(block: &mut [f64], n: usize, w: usize) {
    let z = POLE;
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    block.iter_mut().for_each(|v| *v *= gain);

    // causal initialisation
    let horizon = (PREFILTER_TOL.ln() / z.abs().ln()).ceil() as usize;
    let mut c0 = vec![0f64; w];
    if horizon < n {
        let mut zn = 1.0;
        for k in 0..horizon {
            for (c, &v) in c0.iter_mut().zip(&block[k * w..][..w]) {
                *c += zn * v;
            }
            zn *= z;
        }
    } else {
        let iz = 1.0 / z;
        let mut zn = z;
        let mut z2n = z.powi(n as i32 - 1);
        for (c, (&a, &b)) in c0.iter_mut().zip(block[..w].iter().zip(&block[(n - 1) * w..][..w])) {
            *c = a + z2n * b;
        }
        // z^(2n-2) / z, as in the reference recursion
        #[allow(clippy::misrefactored_assign_op)]
        {
            z2n *= z2n * iz;
        }
        for k in 1..n - 1 {
            for (c, &v) in c0.iter_mut().zip(&block[k * w..][..w]) {
                *c += (zn + z2n) * v;
            }
            zn *= z;
            z2n *= iz;
        }
        c0.iter_mut().for_each(|c| *c /= 1.0 - zn * zn);
    }
    block[..w].copy_from_slice(&c0);
    for k in 1..n {
        let (prev, cur) = block.split_at_mut(k * w);
        for (c, &p) in cur[..w].iter_mut().zip(&prev[(k - 1) * w..]) {
            *c += z * p;
        }
    }
    // anti-causal initialisation
    {
        let (prev, last) = block.split_at_mut((n - 1) * w);
        for (c, &p) in last.iter_mut().zip(&prev[(n - 2) * w..]) {
            *c = (z / (z * z - 1.0)) * (z * p + *c);
        }
    }
    for k in (0..n - 1).rev() {
        let (cur, next) = block.split_at_mut((k + 1) * w);
        for (c, &nx) in cur[k * w..].iter_mut().zip(&next[..w]) {
            *c = z * (nx - *c);
        }
    }
}

/// Nearest-neighbour resampling of a label map.
pub fn resample_labels_nearest(lv: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    if target.contains(&0) {
        return Err(Error::invalid(format!("target shape {target:?} has a zero extent")));
    }
    let src_shape = lv.shape();
    let maps: Vec<Vec<usize>> = (0..3)
        .map(|a| (0..target[a]).map(|i| nearest_source(i, src_shape[a], target[a])).collect())
        .collect();
    let plane = target[1] * target[2];
    let mut out = vec![0u8; target.iter().product()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, dst)| {
        let sz = maps[0][z];
        for y in 0..target[1] {
            let sy = maps[1][y];
            for x in 0..target[2] {
                dst[y * target[2] + x] = lv.get(sz, sy, maps[2][x]);
            }
        }
    });
    LabelVolume::new(lv.geometry().resampled(target), out, lv.classes())
}
