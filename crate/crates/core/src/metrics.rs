//! Overlap (Dice) and boundary (normalized surface distance) scores.
//!
//! Surfaces are the voxels of a class whose 6-neighbourhood contains a voxel
//! of another class; voxels on the volume border count as surface, as if
//! the volume were padded with background. Distances are Euclidean between
//! voxel centres in millimetres.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume_io::{Geometry, LabelVolume};

/// NSD tolerance used for the reported scores, in mm.
pub const DEFAULT_NSD_TOLERANCE_MM: f64 = 1.0;

fn check_pair(pred: &LabelVolume, gold: &LabelVolume) -> Result<()> {
    if pred.shape() != gold.shape() {
        return Err(Error::shape(format!(
            "prediction shape {:?} differs from gold {:?}",
            pred.shape(),
            gold.shape()
        )));
    }
    let (a, b) = (pred.spacing(), gold.spacing());
    if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6 * x.abs().max(y.abs())) {
        return Err(Error::shape(format!("prediction spacing {a:?} differs from gold {b:?}")));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty.
pub fn dsc(pred: &LabelVolume, gold: &LabelVolume, class: u8) -> Result<f64> {
    check_pair(pred, gold)?;
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(gold.data()) {
        let (a, b) = (a == class, b == class);
        p += a as u64;
        g += b as u64;
        both += (a && b) as u64;
    }
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    })
}

/// Boundary voxels of `mask`.
pub fn surface_voxels(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    out.par_chunks_mut(h * w).enumerate().for_each(|(z, plane)| {
        for y in 0..h {
            for x in 0..w {
                if !mask[idx(z, y, x)] {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                plane[y * w + x] = border
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
            }
        }
    });
    out
}

/// Boundary voxel centres of one class, in mm relative to the first voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceCloud {
    pub points: Vec<[f64; 3]>,
}

impl SurfaceCloud {
    pub fn from_mask(mask: &[bool], geometry: &Geometry) -> Self {
        let [_, h, w] = geometry.shape;
        let s = geometry.spacing;
        let points = surface_voxels(mask, geometry.shape)
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| {
                let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
                [z as f64 * s[0], y as f64 * s[1], x as f64 * s[2]]
            })
            .collect();
        SurfaceCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// 1D lower envelope of parabolas: `out[p] = min_q f[q] + ((p - q) s)^2`.
fn edt_1d(f: &[f64], s2: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    v.clear();
    zb.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                zb.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let x = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if x <= *zb.last().expect("parallel to v") {
                v.pop();
                zb.pop();
            } else {
                v.push(q);
                zb.push(x);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && zb[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = f[v[k]] + s2 * d * d;
    }
}

/// Squared Euclidean distance (mm²) from every voxel centre to the nearest
/// site, separable over the three axes with anisotropic spacing.
pub fn squared_edt(sites: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut g: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    // axis 2 (contiguous rows)
    g.par_chunks_mut(w).for_each(|row| {
        let f = row.to_vec();
        edt_1d(&f, spacing[2] * spacing[2], row, &mut Vec::new(), &mut Vec::new());
    });
    // axis 1 within each z-plane
    g.par_chunks_mut(h * w).for_each(|plane| {
        let (mut f, mut o) = (vec![0.0; h], vec![0.0; h]);
        let (mut v, mut zb) = (Vec::new(), Vec::new());
        for x in 0..w {
            for y in 0..h {
                f[y] = plane[y * w + x];
            }
            edt_1d(&f, spacing[1] * spacing[1], &mut o, &mut v, &mut zb);
            for y in 0..h {
                plane[y * w + x] = o[y];
            }
        }
    });
    // axis 0, column by column
    let plane = h * w;
    let cols: Vec<Vec<f64>> = (0..plane)
        .into_par_iter()
        .map(|c| {
            let f: Vec<f64> = (0..d).map(|z| g[z * plane + c]).collect();
            let mut o = vec![0.0; d];
            edt_1d(&f, spacing[0] * spacing[0], &mut o, &mut Vec::new(), &mut Vec::new());
            o
        })
        .collect();
    for (c, col) in cols.iter().enumerate() {
        for (z, &v) in col.iter().enumerate() {
            g[z * plane + c] = v;
        }
    }
    g
}

/// Whether squared distance `d2` is within tolerance `tol` (shared with the
/// brute-force check; the slack absorbs rounding in `tol * tol`).
#[inline]
pub fn within_tolerance(d2: f64, tol: f64) -> bool {
    d2 <= tol * tol * (1.0 + 1e-12)
}

/// Normalized surface distance at tolerance `tol_mm`: the fraction of both
/// surfaces lying within `tol_mm` of the other. 1 when both surfaces are
/// empty, 0 when exactly one is.
pub fn nsd(pred: &LabelVolume, gold: &LabelVolume, class: u8, tol_mm: f64) -> Result<f64> {
    check_pair(pred, gold)?;
    if !(tol_mm > 0.0) {
        return Err(Error::invalid(format!("NSD tolerance must be > 0, got {tol_mm}")));
    }
    let shape = pred.shape();
    let spacing = pred.spacing();
    let sp = surface_voxels(&pred.mask(class), shape);
    let sg = surface_voxels(&gold.mask(class), shape);
    let np = sp.iter().filter(|&&b| b).count();
    let ng = sg.iter().filter(|&&b| b).count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let count_close = |from: &[bool], to: &[bool]| -> usize {
        let dist = squared_edt(to, shape, spacing);
        from.iter()
            .zip(&dist)
            .filter(|(&on, &d2)| on && within_tolerance(d2, tol_mm))
            .count()
    };
    let close = count_close(&sp, &sg) + count_close(&sg, &sp);
    Ok(close as f64 / (np + ng) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub class: u8,
    pub name: String,
    pub dsc: f64,
    pub nsd: f64,
}

/// DSC and NSD for each requested class.
pub fn evaluate(pred: &LabelVolume, gold: &LabelVolume, classes: &[u8], tol_mm: f64) -> Result<Vec<ClassScore>> {
    classes
        .iter()
        .map(|&c| {
            Ok(ClassScore {
                class: c,
                name: crate::postprocess::CLASS_NAMES
                    .get(c as usize)
                    .map_or_else(|| format!("class {c}"), |s| s.to_string()),
                dsc: dsc(pred, gold, c)?,
                nsd: nsd(pred, gold, c, tol_mm)?,
            })
        })
        .collect()
}
