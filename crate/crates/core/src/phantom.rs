//! Synthetic abdominal CT phantom with known labels, for tests and
//! benchmarks.
//!
//! An elliptic body cylinder (0 HU soft tissue) running the full depth of
//! the volume sits in air (-1000 HU); four ellipsoidal organs carry labels
//! 1 liver, 2 kidney (both sides), 3 spleen, 4 pancreas. All organ
//! intensities lie above the body threshold, so the body mask of the scan
//! is exactly the cylinder.

use crate::error::Result;
use crate::volume_io::{Geometry, LabelVolume, Volume};

pub const AIR_HU: f32 = -1000.0;
pub const TISSUE_HU: f32 = 0.0;

/// `(label, HU, centre, radii)` with coordinates as fractions of the extent
/// in (z, y, x).
const ORGANS: [(u8, f32, [f64; 3], [f64; 3]); 5] = [
    (1, 60.0, [0.45, 0.45, 0.33], [0.30, 0.18, 0.16]),
    (2, 30.0, [0.55, 0.62, 0.30], [0.15, 0.06, 0.05]),
    (2, 30.0, [0.55, 0.62, 0.70], [0.15, 0.06, 0.05]),
    (3, 45.0, [0.40, 0.50, 0.72], [0.18, 0.08, 0.07]),
    (4, 40.0, [0.50, 0.52, 0.52], [0.14, 0.04, 0.12]),
];

#[derive(Debug, Clone)]
pub struct Phantom {
    pub ct: Volume,
    pub labels: LabelVolume,
    /// Ground-truth body region (the cylinder).
    pub body: Vec<bool>,
}

impl Phantom {
    pub fn new(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let geometry = Geometry::new(shape, spacing, [0.0; 3])?;
        let [d, h, w] = shape;
        let frac = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
        let mut hu = vec![AIR_HU; geometry.len()];
        let mut labels = vec![0u8; geometry.len()];
        let mut body = vec![false; geometry.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = geometry.index(z, y, x);
                    let (fy, fx) = ((frac(y, h) - 0.5) / 0.40, (frac(x, w) - 0.5) / 0.46);
                    if fy * fy + fx * fx > 1.0 {
                        continue;
                    }
                    body[i] = true;
                    hu[i] = TISSUE_HU;
                    let p = [frac(z, d), frac(y, h), frac(x, w)];
                    for (label, v, c, r) in ORGANS {
                        let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
                        if q <= 1.0 {
                            hu[i] = v;
                            labels[i] = label;
                        }
                    }
                }
            }
        }
        Ok(Phantom {
            ct: Volume::new(geometry, hu)?,
            labels: LabelVolume::new(geometry, labels, 5)?,
            body,
        })
    }
}
