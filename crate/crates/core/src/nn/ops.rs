use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

const ELEM_CHUNK: usize = 1 << 14;

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = vec![0.0; x.len()];
    relu_into(x.data(), &mut out);
    Tensor::new(x.dims().to_vec(), out).expect("same dims")
}

pub(crate) fn relu_into(x: &[f32], out: &mut [f32]) {
    out.par_chunks_mut(ELEM_CHUNK)
        .zip(x.par_chunks(ELEM_CHUNK))
        .for_each(|(o, i)| {
            for (o, &v) in o.iter_mut().zip(i) {
                *o = v.max(0.0);
            }
        });
}

/// How the two operands of an [`add`] line up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand holds one value per leading-axis channel.
    PerChannel { channels: usize, inner: usize },
    /// Left operand is the per-channel one.
    PerChannelLeft { channels: usize, inner: usize },
    /// NumPy-style broadcasting of right-aligned dims.
    General,
}

/// Output dims and broadcast kind for `x + y`.
pub(crate) fn broadcast_dims(x: &[usize], y: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if x == y {
        return Ok((x.to_vec(), Broadcast::Same));
    }
    let per_channel = |full: &[usize], small: &[usize]| -> Option<(usize, usize)> {
        let c = full[0];
        let ok = full.len() > 1
            && small.len() == full.len()
            && small[0] == c
            && small[1..].iter().all(|&d| d == 1);
        ok.then(|| (c, full[1..].iter().product()))
    };
    if let Some((channels, inner)) = per_channel(x, y) {
        return Ok((x.to_vec(), Broadcast::PerChannel { channels, inner }));
    }
    if let Some((channels, inner)) = per_channel(y, x) {
        return Ok((y.to_vec(), Broadcast::PerChannelLeft { channels, inner }));
    }
    let rank = x.len().max(y.len());
    let pad = |d: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - d.len()];
        v.extend_from_slice(d);
        v
    };
    let (xp, yp) = (pad(x), pad(y));
    let mut out = Vec::with_capacity(rank);
    for (&a, &b) in xp.iter().zip(&yp) {
        if a == b || b == 1 {
            out.push(a);
        } else if a == 1 {
            out.push(b);
        } else {
            return Err(Error::shape(format!("cannot add tensors of dims {x:?} and {y:?}")));
        }
    }
    Ok((out, Broadcast::General))
}

/// Elementwise sum with NumPy-style broadcasting. Equal dims and a
/// per-channel `(C,1,1,1)` operand against `(C,D,H,W)` take fast paths.
pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (dims, _) = broadcast_dims(x.dims(), y.dims())?;
    let mut out = vec![0.0; dims.iter().product()];
    add_into(x.data(), x.dims(), y.data(), y.dims(), &mut out)?;
    Tensor::new(dims, out)
}

pub(crate) fn add_into(x: &[f32], xd: &[usize], y: &[f32], yd: &[usize], out: &mut [f32]) -> Result<()> {
    let (dims, kind) = broadcast_dims(xd, yd)?;
    debug_assert_eq!(out.len(), dims.iter().product::<usize>());
    match kind {
        Broadcast::Same => out
            .par_chunks_mut(ELEM_CHUNK)
            .zip(x.par_chunks(ELEM_CHUNK).zip(y.par_chunks(ELEM_CHUNK)))
            .for_each(|(o, (a, b))| {
                for ((o, &a), &b) in o.iter_mut().zip(a).zip(b) {
                    *o = a + b;
                }
            }),
        Broadcast::PerChannel { inner, .. } => out
            .par_chunks_mut(inner)
            .zip(x.par_chunks(inner))
            .enumerate()
            .for_each(|(c, (o, a))| o.iter_mut().zip(a).for_each(|(o, &a)| *o = a + y[c])),
        Broadcast::PerChannelLeft { inner, .. } => out
            .par_chunks_mut(inner)
            .zip(y.par_chunks(inner))
            .enumerate()
            .for_each(|(c, (o, b))| o.iter_mut().zip(b).for_each(|(o, &b)| *o = x[c] + b)),
        Broadcast::General => {
            let rank = dims.len();
            let strides = |d: &[usize]| -> Vec<usize> {
                let mut padded = vec![1; rank - d.len()];
                padded.extend_from_slice(d);
                let mut s = vec![0; rank];
                let mut acc = 1;
                for a in (0..rank).rev() {
                    s[a] = if padded[a] == 1 { 0 } else { acc };
                    acc *= padded[a];
                }
                s
            };
            let (sx, sy) = (strides(xd), strides(yd));
            let mut idx = vec![0usize; rank];
            for o in out.iter_mut() {
                let (mut ix, mut iy) = (0, 0);
                for a in 0..rank {
                    ix += idx[a] * sx[a];
                    iy += idx[a] * sy[a];
                }
                *o = x[ix] + y[iy];
                for a in (0..rank).rev() {
                    idx[a] += 1;
                    if idx[a] < dims[a] {
                        break;
                    }
                    idx[a] = 0;
                }
            }
        }
    }
    Ok(())
}

pub fn concat_channels(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let dims = concat_dims(x.dims(), y.dims())?;
    let mut out = vec![0.0; dims.iter().product()];
    concat_into(x.data(), y.data(), &mut out);
    Tensor::new(dims, out)
}

pub(crate) fn concat_dims(x: &[usize], y: &[usize]) -> Result<Vec<usize>> {
    if x.len() < 2 || x.len() != y.len() || x[1..] != y[1..] {
        return Err(Error::shape(format!("cannot concatenate dims {x:?} and {y:?} on channels")));
    }
    let mut d = x.to_vec();
    d[0] += y[0];
    Ok(d)
}

/// Channel-major layout makes channel concatenation a pair of block copies.
pub(crate) fn concat_into(x: &[f32], y: &[f32], out: &mut [f32]) {
    let (a, b) = out.split_at_mut(x.len());
    a.par_chunks_mut(ELEM_CHUNK)
        .zip(x.par_chunks(ELEM_CHUNK))
        .for_each(|(o, i)| o.copy_from_slice(i));
    b.par_chunks_mut(ELEM_CHUNK)
        .zip(y.par_chunks(ELEM_CHUNK))
        .for_each(|(o, i)| o.copy_from_slice(i));
}
