//! Volumetric images and label maps with their voxel geometry.
//!
//! All volumes use (z, y, x) axis order with x varying fastest, which is
//! also the NIfTI storage order. Only axis-aligned geometry is modelled:
//! spacing and origin are kept, orientation matrices are not.

mod nifti;

pub use nifti::{read_labels, read_volume, write_labels, write_volume, DESCRIP};

use crate::error::{Error, Result};

/// Voxel grid extent, spacing (mm) and origin (mm), all in (z, y, x) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            shape,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn with_shape(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::invalid(format!(
                "volume extents must be >= 1, got {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "voxel spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same physical extent sampled on a different grid.
    pub fn resampled(&self, shape: [usize; 3]) -> Geometry {
        let mut spacing = self.spacing;
        for a in 0..3 {
            spacing[a] = self.spacing[a] * self.shape[a] as f64 / shape[a] as f64;
        }
        Geometry {
            shape,
            spacing,
            origin: self.origin,
        }
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }
}

/// A CT volume in Hounsfield units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::shape(format!(
                "volume of shape {:?} needs {} voxels, got {}",
                geometry.shape,
                geometry.len(),
                data.len()
            )));
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Result<Self> {
        geometry.validate()?;
        Ok(Volume {
            data: vec![value; geometry.len()],
            geometry,
        })
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        geometry.validate()?;
        let [d, h, w] = geometry.shape;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(z, y, x));
                }
            }
        }
        Ok(Volume { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.geometry.index(z, y, x)]
    }
}

/// A map of class labels sharing a [`Volume`]'s geometry.
///
/// Every voxel holds a value in `0..classes`; this is checked on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geometry: Geometry,
    classes: usize,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geometry: Geometry, data: Vec<u8>, classes: usize) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::shape(format!(
                "label volume of shape {:?} needs {} voxels, got {}",
                geometry.shape,
                geometry.len(),
                data.len()
            )));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::invalid(format!("class count {classes} out of range 1..=256")));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside the declared {classes} classes"
            )));
        }
        Ok(LabelVolume {
            geometry,
            classes,
            data,
        })
    }

    pub fn zeros(geometry: Geometry, classes: usize) -> Result<Self> {
        Self::new(geometry, vec![0; geometry.len()], classes)
    }

    /// Replaces spacing and origin; the shape must stay the same.
    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        if geometry.shape != self.geometry.shape {
            return Err(Error::shape(format!(
                "cannot relabel a {:?} volume with geometry of shape {:?}",
                self.geometry.shape, geometry.shape
            )));
        }
        self.geometry = geometry;
        Ok(self)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[self.geometry.index(z, y, x)]
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    /// Boolean mask of one class.
    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}
