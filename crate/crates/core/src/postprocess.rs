//! Network output → segmentation in the scan's original geometry.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::preprocess::{resample_labels_nearest, ORGAN_CLASSES, TARGET_CLASSES};
use crate::volume_io::{Geometry, LabelVolume};

/// Output label scheme.
pub const CLASS_NAMES: [&str; ORGAN_CLASSES] = ["background", "liver", "kidney", "spleen", "pancreas"];

/// Per-voxel index of the largest logit; ties go to the lowest index.
///
/// The result has unit spacing; attach the real grid with
/// [`LabelVolume::with_geometry`].
pub fn argmax_channels(logits: &Tensor) -> Result<LabelVolume> {
    let [k, d, h, w] = logits.shape4()?;
    if !(2..=256).contains(&k) {
        return Err(Error::shape(format!("argmax needs 2..=256 channels, got {k}")));
    }
    let plane = d * h * w;
    let x = logits.data();
    let mut out = vec![0u8; plane];
    out.par_chunks_mut(1 << 14).enumerate().for_each(|(ci, dst)| {
        let base = ci << 14;
        for (j, o) in dst.iter_mut().enumerate() {
            let v = base + j;
            let mut best = x[v];
            let mut arg = 0;
            for c in 1..k {
                let y = x[c * plane + v];
                // strict comparison keeps the first maximum
                if y > best {
                    best = y;
                    arg = c;
                }
            }
            *o = arg as u8;
        }
    });
    LabelVolume::new(Geometry::with_shape([d, h, w])?, out, k)
}

/// Nearest-neighbour resize to `target` (same centre rule as the label
/// downsampling in preprocessing).
pub fn upsample_nearest(lv: &LabelVolume, target: [usize; 3]) -> Result<LabelVolume> {
    resample_labels_nearest(lv, target)
}

/// Resize to `geometry.shape` and adopt its spacing and origin exactly.
pub fn restore_geometry(lv: &LabelVolume, geometry: &Geometry) -> Result<LabelVolume> {
    upsample_nearest(lv, geometry.shape)?.with_geometry(*geometry)
}

/// Training labels (0 air, 1 body, 2.. organs) → output labels (0
/// background, 1.. organs).
pub fn remap_labels(lv: &LabelVolume) -> Result<LabelVolume> {
    let data = lv
        .data()
        .iter()
        .map(|&l| match l {
            0 | 1 => Ok(0),
            k if (k as usize) < TARGET_CLASSES => Ok(k - 1),
            k => Err(Error::invalid(format!("label {k} outside 0..{TARGET_CLASSES}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelVolume::new(*lv.geometry(), data, ORGAN_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::split_background;

    fn logits(k: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![k, 1, 1, v.len() / k], v.to_vec()).unwrap()
    }

    #[test]
    fn argmax_picks_max_and_lowest_tie() {
        let l = argmax_channels(&logits(6, &[0.1, 0.9, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(l.data(), &[1]);
        let l = argmax_channels(&logits(6, &[0.0, 0.0, 3.0, 0.0, 3.0, 0.0])).unwrap();
        assert_eq!(l.data(), &[2]);
        assert!(argmax_channels(&logits(1, &[1.0])).is_err());
    }

    #[test]
    fn upsample_single_voxel_to_block() {
        let mut data = vec![0u8; 8];
        data[0] = 3;
        let lv = LabelVolume::new(Geometry::with_shape([2, 2, 2]).unwrap(), data, 5).unwrap();
        let up = upsample_nearest(&lv, [4, 4, 4]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let inside = z < 2 && y < 2 && x < 2;
                    assert_eq!(up.get(z, y, x), if inside { 3 } else { 0 });
                }
            }
        }
        assert_eq!(upsample_nearest(&lv, [2, 2, 2]).unwrap(), lv);
    }

    #[test]
    fn remap_inverts_split() {
        let g = Geometry::with_shape([1, 1, 6]).unwrap();
        let lv = LabelVolume::new(g, vec![0, 0, 1, 2, 3, 4], 5).unwrap();
        let split = split_background(&lv, &[true, false, true, false, true, false]).unwrap();
        assert_eq!(split.data(), &[1, 0, 2, 3, 4, 5]);
        assert_eq!(remap_labels(&split).unwrap().data(), lv.data());
    }

    #[test]
    fn restore_adopts_geometry() {
        let lv = LabelVolume::zeros(Geometry::with_shape([2, 3, 3]).unwrap(), 5).unwrap();
        let g = Geometry::new([5, 7, 6], [2.5, 0.7, 0.7], [1.0, -3.0, 4.0]).unwrap();
        assert_eq!(*restore_geometry(&lv, &g).unwrap().geometry(), g);
    }
}
