//! CT preprocessing: intensity windowing into two contrast channels,
//! resampling to the network grid, and the air/body split of training labels.

mod morphology;
mod resample;

pub use morphology::{binary_closing, compute_body_mask, fill_holes};
pub use resample::{resample_image, resample_labels_nearest};


use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume_io::{LabelVolume, Volume};

/// Grid every scan is resampled to before inference.
pub const NETWORK_SHAPE: [usize; 3] = [96, 192, 192];

/// Class count of the training label scheme (air, body and four organs).
pub const TARGET_CLASSES: usize = 6;

/// Class count of gold/predicted segmentations (background and four organs).
pub const ORGAN_CLASSES: usize = 5;

/// Grey-level window in Hounsfield units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub width: f32,
    pub level: f32,
}

impl WindowSpec {
    /// General abdominal soft tissue.
    pub const SOFT_TISSUE: WindowSpec = WindowSpec {
        width: 400.0,
        level: 50.0,
    };
    /// Narrow window raising pancreas contrast.
    pub const PANCREAS: WindowSpec = WindowSpec {
        width: 100.0,
        level: 60.0,
    };

    pub fn new(width: f32, level: f32) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::invalid(format!("window width must be > 0, got {width}")));
        }
        Ok(WindowSpec { width, level })
    }

    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        ((hu - (self.level - self.width / 2.0)) / self.width).clamp(0.0, 1.0)
    }
}

/// Maps HU into [0, 1] through the window; returns a `(D, H, W)` tensor.
pub fn window_normalize(v: &Volume, w: WindowSpec) -> Tensor {
    let data = v.data().iter().map(|&x| w.apply(x)).collect();
    Tensor::new(v.shape().to_vec(), data).expect("volume shape is valid")
}

/// Two-channel network input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor(Tensor);

impl InputTensor {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Stacks the soft-tissue and pancreas windows of an already resampled
/// volume of shape [`NETWORK_SHAPE`].
pub fn make_input_channels(v: &Volume) -> Result<InputTensor> {
    if v.shape() != NETWORK_SHAPE {
        return Err(Error::shape(format!(
            "network input must be {:?}, got {:?}",
            NETWORK_SHAPE,
            v.shape()
        )));
    }
    Ok(InputTensor(stack_windows(v)))
}

/// Channel stacking without the fixed-shape check.
pub fn stack_windows(v: &Volume) -> Tensor {
    let n = v.data().len();
    let mut data = Vec::with_capacity(2 * n);
    data.extend(v.data().iter().map(|&x| WindowSpec::SOFT_TISSUE.apply(x)));
    data.extend(v.data().iter().map(|&x| WindowSpec::PANCREAS.apply(x)));
    let [d, h, w] = v.shape();
    Tensor::new(vec![2, d, h, w], data).expect("volume shape is valid")
}

/// Splits background into air (0) and body (1) and shifts organ labels up by
/// one. Input labels: 0 background, 1 liver, 2 kidney, 3 spleen, 4 pancreas.
pub fn split_background(lv: &LabelVolume, body: &[bool]) -> Result<LabelVolume> {
    if body.len() != lv.data().len() {
        return Err(Error::shape(format!(
            "body mask has {} voxels, labels have {}",
            body.len(),
            lv.data().len()
        )));
    }
    let mut out = Vec::with_capacity(body.len());
    for (&l, &inside) in lv.data().iter().zip(body) {
        if l as usize >= ORGAN_CLASSES {
            return Err(Error::invalid(format!("organ label {l} outside 0..{ORGAN_CLASSES}")));
        }
        out.push(match (l, inside) {
            (0, false) => 0,
            (0, true) => 1,
            (k, _) => k + 1,
        });
    }
    LabelVolume::new(*lv.geometry(), out, TARGET_CLASSES)
}
