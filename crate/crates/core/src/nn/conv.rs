use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 3D convolution; axes are (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding `k / 2` per axis, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        ConvSpec {
            kernel,
            stride: [1; 3],
            padding: kernel.map(|k| k / 2),
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid(format!(
                "kernel {:?} and stride {:?} must be >= 1",
                self.kernel, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        Ok(())
    }

    /// `(Cout, Cin, kz, ky, kx)`.
    pub fn weight_dims(&self) -> Vec<usize> {
        let [kz, ky, kx] = self.kernel;
        vec![self.out_channels, self.in_channels, kz, ky, kx]
    }

    /// `(Cin, Cout, kz, ky, kx)` for transpose convolutions.
    pub fn transpose_weight_dims(&self) -> Vec<usize> {
        let [kz, ky, kx] = self.kernel;
        vec![self.in_channels, self.out_channels, kz, ky, kx]
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.taps()
            + if self.bias { self.out_channels } else { 0 }
    }

    /// Output extent `floor((n + 2p - k) / s) + 1` per axis.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::shape(format!(
                    "kernel {:?} does not fit input {:?} with padding {:?}",
                    self.kernel, input, self.padding
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extent `(n - 1) * s - 2p + k` per axis.
    pub fn transpose_output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::shape(format!(
                    "transpose conv output extent < 1 for input {input:?}"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

pub(crate) fn check_conv_args(
    x: [usize; 4],
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
    transpose: bool,
) -> Result<[usize; 3]> {
    spec.validate()?;
    let expected = if transpose {
        spec.transpose_weight_dims()
    } else {
        spec.weight_dims()
    };
    if w.dims() != &expected[..] {
        return Err(Error::shape(format!(
            "weight dims {:?} do not match spec {:?}",
            w.dims(),
            expected
        )));
    }
    if x[0] != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, spec expects {}",
            x[0], spec.in_channels
        )));
    }
    if let Some(b) = b {
        if b.dims() != [spec.out_channels] {
            return Err(Error::shape(format!(
                "bias dims {:?}, expected [{}]",
                b.dims(),
                spec.out_channels
            )));
        }
    }
    let spatial = [x[1], x[2], x[3]];
    if transpose {
        spec.transpose_output_extent(spatial)
    } else {
        spec.output_extent(spatial)
    }
}

/// Reference cross-correlation with zero padding.
///
/// Each output voxel is accumulated in `f64` in the fixed order
/// (ci, kz, ky, kx), the bias is added last and the sum is rounded once to
/// `f32`. Output channels are computed in parallel but the per-voxel
/// arithmetic does not depend on scheduling.
pub fn conv3d_direct(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape4()?;
    let [od, oh, ow] = check_conv_args(xs, w, b, spec, false)?;
    let [cin, id, ih, iw] = xs;
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let plane = od * oh * ow;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0f32; spec.out_channels * plane];

    out.par_chunks_mut(plane).enumerate().for_each(|(co, dst32)| {
        let mut dst = vec![0f64; plane];
        for ci in 0..cin {
            let src = &xd[ci * id * ih * iw..(ci + 1) * id * ih * iw];
            for dz in 0..kz {
                for dy in 0..ky {
                    for dx in 0..kx {
                        let wv = wd[(((co * cin + ci) * kz + dz) * ky + dy) * kx + dx] as f64;
                        for oz in 0..od {
                            let iz = (oz * sz + dz) as isize - pz as isize;
                            if iz < 0 || iz >= id as isize {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sy + dy) as isize - py as isize;
                                if iy < 0 || iy >= ih as isize {
                                    continue;
                                }
                                let row = &src[(iz as usize * ih + iy as usize) * iw..][..iw];
                                let orow = &mut dst[(oz * oh + oy) * ow..][..ow];
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox * sx + dx) as isize - px as isize;
                                    if ix >= 0 && ix < iw as isize {
                                        *o += wv * row[ix as usize] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let bv = b.map_or(0.0, |b| b.data()[co] as f64);
        for (o, acc) in dst32.iter_mut().zip(&dst) {
            *o = (acc + bv) as f32;
        }
    });
    Tensor::new(vec![spec.out_channels, od, oh, ow], out)
}
