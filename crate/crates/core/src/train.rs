//! Training-time mathematics: per-voxel softmax, weighted soft Dice loss
//! with its analytic gradient, and the geometric augmentations.
//!
//! Class maps are kept in `f64` so the gradient can be checked against
//! finite differences at tight tolerances.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::volume_io::{LabelVolume, Volume};

/// Image fill for voxels moved in from outside the field of view (air).
pub const AIR_HU: f32 = -1024.0;
/// Label fill for the same voxels.
pub const FILL_LABEL: u8 = 0;

/// `(K, D, H, W)` per-class values in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMaps {
    pub classes: usize,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl ClassMaps {
    pub fn new(classes: usize, shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = classes * shape.iter().product::<usize>();
        if classes == 0 || shape.contains(&0) || data.len() != n {
            return Err(Error::shape(format!(
                "class maps ({classes}, {shape:?}) need {n} values, got {}",
                data.len()
            )));
        }
        Ok(ClassMaps { classes, shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [k, d, h, w] = t.shape4()?;
        Self::new(k, [d, h, w], t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// One-hot encoding of `lv` over `classes` channels.
    pub fn one_hot(lv: &LabelVolume, classes: usize) -> Result<Self> {
        let n = lv.data().len();
        let mut data = vec![0.0; classes * n];
        for (i, &l) in lv.data().iter().enumerate() {
            if l as usize >= classes {
                return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
            }
            data[l as usize * n + i] = 1.0;
        }
        Self::new(classes, lv.shape(), data)
    }

    fn same_layout(&self, other: &ClassMaps) -> Result<()> {
        if self.classes != other.classes || self.shape != other.shape {
            return Err(Error::shape(format!(
                "class maps ({}, {:?}) and ({}, {:?}) differ",
                self.classes, self.shape, other.classes, other.shape
            )));
        }
        Ok(())
    }
}

/// Per-voxel softmax over the channel axis (max-subtracted).
pub fn softmax_channels(logits: &ClassMaps) -> Result<ClassMaps> {
    let k = logits.classes;
    if k < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {k}")));
    }
    let n = logits.voxels();
    let x = &logits.data;
    let mut out = vec![0.0; x.len()];
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|v| {
            let m = (0..k).map(|c| x[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..k).map(|c| (x[c * n + v] - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|e| e / s).collect()
        })
        .collect();
    for (v, col) in cols.iter().enumerate() {
        for (c, &p) in col.iter().enumerate() {
            out[c * n + v] = p;
        }
    }
    ClassMaps::new(k, logits.shape, out)
}

/// Class weights and smoothing of the soft Dice loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub weights: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;

impl LossSpec {
    pub fn new(weights: Vec<f64>, epsilon: f64) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("class weights must be finite and >= 0"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("class weights must not all be zero"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(LossSpec { weights, epsilon })
    }

    /// Equal weights, default smoothing.
    pub fn uniform(classes: usize) -> Self {
        LossSpec {
            weights: vec![1.0; classes],
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Weights proportional to inverse class frequency in `onehot`
    /// (absent classes get weight 0).
    pub fn inverse_frequency(onehot: &ClassMaps) -> Result<Self> {
        let w = (0..onehot.classes)
            .map(|c| {
                let f: f64 = onehot.channel(c).iter().sum();
                if f > 0.0 {
                    1.0 / f
                } else {
                    0.0
                }
            })
            .collect();
        Self::new(w, DEFAULT_EPSILON)
    }
}

fn check_inputs(probs: &ClassMaps, onehot: &ClassMaps, spec: &LossSpec) -> Result<()> {
    probs.same_layout(onehot)?;
    if spec.weights.len() != probs.classes {
        return Err(Error::shape(format!(
            "{} class weights for {} classes",
            spec.weights.len(),
            probs.classes
        )));
    }
    let n = onehot.voxels();
    for v in 0..n {
        let mut sum = 0.0;
        for c in 0..onehot.classes {
            let g = onehot.data[c * n + v];
            if g != 0.0 && g != 1.0 {
                return Err(Error::invalid(format!("target value {g} is not 0 or 1")));
            }
            sum += g;
        }
        if sum != 1.0 {
            return Err(Error::invalid(format!("voxel {v} has {sum} active classes, expected 1")));
        }
    }
    Ok(())
}

/// Per class: `(Σ p g, Σ p² + Σ g²)`.
fn class_sums(probs: &ClassMaps, onehot: &ClassMaps) -> Vec<(f64, f64)> {
    (0..probs.classes)
        .map(|c| {
            let (p, g) = (probs.channel(c), onehot.channel(c));
            let pg = p.iter().zip(g).map(|(a, b)| a * b).sum();
            let sq = p.iter().map(|a| a * a).sum::<f64>() + g.iter().map(|b| b * b).sum::<f64>();
            (pg, sq)
        })
        .collect()
}

/// `1 - Σ_c w_c d_c / Σ_c w_c` with
/// `d_c = (2 Σ p_c g_c + ε) / (Σ p_c² + Σ g_c² + ε)`.
pub fn weighted_soft_dice_loss(probs: &ClassMaps, onehot: &ClassMaps, spec: &LossSpec) -> Result<f64> {
    check_inputs(probs, onehot, spec)?;
    let eps = spec.epsilon;
    let wsum: f64 = spec.weights.iter().sum();
    let dice: f64 = class_sums(probs, onehot)
        .iter()
        .zip(&spec.weights)
        .map(|(&(pg, sq), &w)| w * (2.0 * pg + eps) / (sq + eps))
        .sum();
    Ok(1.0 - dice / wsum)
}

/// Analytic `∂loss/∂p`:
/// `-(w_c / Σw) (2 g (S + ε) - (2 Σpg + ε) 2 p) / (S + ε)²` with `S = Σp² + Σg²`.
pub fn soft_dice_grad(probs: &ClassMaps, onehot: &ClassMaps, spec: &LossSpec) -> Result<ClassMaps> {
    check_inputs(probs, onehot, spec)?;
    let eps = spec.epsilon;
    let wsum: f64 = spec.weights.iter().sum();
    let n = probs.voxels();
    let mut out = vec![0.0; probs.data.len()];
    for (c, &(pg, sq)) in class_sums(probs, onehot).iter().enumerate() {
        let scale = spec.weights[c] / wsum;
        let den = sq + eps;
        let num = 2.0 * pg + eps;
        let (p, g) = (probs.channel(c), onehot.channel(c));
        for (i, o) in out[c * n..(c + 1) * n].iter_mut().enumerate() {
            *o = -scale * (2.0 * g[i] * den - num * 2.0 * p[i]) / (den * den);
        }
    }
    ClassMaps::new(probs.classes, probs.shape, out)
}

/// A geometric augmentation applied identically to an image and its labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    /// Integer translation in voxels `(dz, dy, dx)`: output `p` takes input
    /// `p - shift`.
    Shift([i64; 3]),
    /// In-plane rotation by degrees about the `(y, x)` centre; positive
    /// angles turn the +x axis towards +y.
    Rotate(f64),
    /// Zoom about the volume centre; factors above 1 enlarge the content.
    Scale(f64),
}

impl Augment {
    fn validate(&self, shape: [usize; 3]) -> Result<()> {
        match *self {
            Augment::Shift(s) => {
                if s.iter().zip(&shape).any(|(&d, &n)| d.unsigned_abs() as usize > n) {
                    return Err(Error::invalid(format!("shift {s:?} exceeds extents {shape:?}")));
                }
            }
            Augment::Rotate(t) => {
                if !(-180.0..=180.0).contains(&t) {
                    return Err(Error::invalid(format!("rotation {t} outside [-180, 180]")));
                }
            }
            Augment::Scale(s) => {
                if !(s > 0.0 && s <= 4.0) {
                    return Err(Error::invalid(format!("scale {s} outside (0, 4]")));
                }
            }
        }
        Ok(())
    }

    /// Source coordinate (z, y, x) sampled by output voxel `p`.
    fn source(&self, p: [usize; 3], shape: [usize; 3]) -> [f64; 3] {
        let pf = p.map(|v| v as f64);
        let c = shape.map(|n| (n as f64 - 1.0) / 2.0);
        match *self {
            Augment::Shift(s) => [pf[0] - s[0] as f64, pf[1] - s[1] as f64, pf[2] - s[2] as f64],
            Augment::Rotate(deg) => {
                let (sin, cos) = deg.to_radians().sin_cos();
                let (y, x) = (pf[1] - c[1], pf[2] - c[2]);
                // inverse rotation
                [pf[0], c[1] + cos * y - sin * x, c[2] + sin * y + cos * x]
            }
            Augment::Scale(s) => [
                c[0] + (pf[0] - c[0]) / s,
                c[1] + (pf[1] - c[1]) / s,
                c[2] + (pf[2] - c[2]) / s,
            ],
        }
    }

    /// Trilinear resampling of the image; outside samples become air.
    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        let shape = v.shape();
        self.validate(shape)?;
        if let Augment::Shift(s) = *self {
            return Volume::new(*v.geometry(), shift_generic(v.data(), shape, s, AIR_HU));
        }
        let [_, h, w] = shape;
        let mut out = vec![0.0f32; v.data().len()];
        out.par_chunks_mut(h * w).enumerate().for_each(|(z, plane)| {
            for y in 0..h {
                for x in 0..w {
                    let src = self.source([z, y, x], shape);
                    plane[y * w + x] = trilinear(v, src).unwrap_or(AIR_HU);
                }
            }
        });
        Volume::new(*v.geometry(), out)
    }

    /// Nearest-neighbour resampling of labels; outside samples become 0.
    pub fn apply_labels(&self, lv: &LabelVolume) -> Result<LabelVolume> {
        let shape = lv.shape();
        self.validate(shape)?;
        if let Augment::Shift(s) = *self {
            let d = shift_generic(lv.data(), shape, s, FILL_LABEL);
            return LabelVolume::new(*lv.geometry(), d, lv.classes());
        }
        let [_, h, w] = shape;
        let mut out = vec![0u8; lv.data().len()];
        out.par_chunks_mut(h * w).enumerate().for_each(|(z, plane)| {
            for y in 0..h {
                for x in 0..w {
                    let src = self.source([z, y, x], shape);
                    plane[y * w + x] = nearest(src, shape).map_or(FILL_LABEL, |[a, b, c]| lv.get(a, b, c));
                }
            }
        });
        LabelVolume::new(*lv.geometry(), out, lv.classes())
    }
}

/// Tolerance for treating a sample just outside the grid as on its edge.
const EDGE_SLACK: f64 = 1e-9;

fn inside(c: f64, n: usize) -> bool {
    c >= -EDGE_SLACK && c <= n as f64 - 1.0 + EDGE_SLACK
}

fn trilinear(v: &Volume, p: [f64; 3]) -> Option<f32> {
    let shape = v.shape();
    if !(0..3).all(|a| inside(p[a], shape[a])) {
        return None;
    }
    let mut i0 = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let c = p[a].clamp(0.0, shape[a] as f64 - 1.0);
        let f = c.floor();
        i0[a] = f as usize;
        t[a] = c - f;
    }
    let mut acc = 0.0f64;
    for corner in 0..8usize {
        let mut wgt = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> (2 - a)) & 1 == 1;
            wgt *= if hi { t[a] } else { 1.0 - t[a] };
            idx[a] = if hi { (i0[a] + 1).min(shape[a] - 1) } else { i0[a] };
        }
        if wgt != 0.0 {
            acc += wgt * v.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    Some(acc as f32)
}

fn nearest(p: [f64; 3], shape: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if !inside(p[a], shape[a]) {
            return None;
        }
        out[a] = (p[a].round().max(0.0) as usize).min(shape[a] - 1);
    }
    Some(out)
}

fn shift_generic<T: Copy + Send + Sync>(data: &[T], shape: [usize; 3], s: [i64; 3], fill: T) -> Vec<T> {
    let [_, h, w] = shape;
    let mut out = vec![fill; data.len()];
    let src = |p: usize, a: usize| -> Option<usize> {
        let q = p as i64 - s[a];
        (q >= 0 && q < shape[a] as i64).then_some(q as usize)
    };
    out.par_chunks_mut(h * w).enumerate().for_each(|(z, plane)| {
        let Some(sz) = src(z, 0) else { return };
        for y in 0..h {
            let Some(sy) = src(y, 1) else { continue };
            for x in 0..w {
                if let Some(sx) = src(x, 2) {
                    plane[y * w + x] = data[(sz * h + sy) * w + sx];
                }
            }
        }
    });
    out
}

pub fn augment_shift(v: &Volume, shift: [i64; 3]) -> Result<Volume> {
    Augment::Shift(shift).apply(v)
}

pub fn augment_rotate_inplane(v: &Volume, degrees: f64) -> Result<Volume> {
    Augment::Rotate(degrees).apply(v)
}

pub fn augment_scale(v: &Volume, factor: f64) -> Result<Volume> {
    Augment::Scale(factor).apply(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Geometry;

    fn maps(k: usize, shape: [usize; 3], f: impl Fn(usize) -> f64) -> ClassMaps {
        let n = k * shape.iter().product::<usize>();
        ClassMaps::new(k, shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let s = softmax_channels(&maps(6, [2, 2, 2], |_| 0.3)).unwrap();
        assert!(s.data.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        let x = maps(3, [1, 1, 4], |i| (i as f64 * 0.7).sin() * 3.0);
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v += 100.0);
        let (a, b) = (softmax_channels(&x).unwrap(), softmax_channels(&y).unwrap());
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| (p - q).abs() < 1e-12));
        let gap = maps(2, [1, 1, 1], |i| if i == 0 { 20.0 } else { 0.0 });
        assert!(softmax_channels(&gap).unwrap().data[0] >= 1.0 - 1e-6);
    }

    fn labels(shape: [usize; 3], k: usize) -> ClassMaps {
        let g = Geometry::with_shape(shape).unwrap();
        let lv = LabelVolume::new(g, (0..g.len()).map(|i| ((i * 7 + 3) % k) as u8).collect(), k).unwrap();
        ClassMaps::one_hot(&lv, k).unwrap()
    }

    #[test]
    fn perfect_and_wrong_predictions() {
        let g = labels([4, 4, 4], 6);
        let spec = LossSpec::uniform(6);
        assert!(weighted_soft_dice_loss(&g, &g, &spec).unwrap() < 1e-6);
        // all mass moved to the next class
        let n = g.voxels();
        let mut wrong = g.clone();
        for c in 0..6 {
            let src = (c + 5) % 6;
            wrong.data[c * n..(c + 1) * n].copy_from_slice(g.channel(src));
        }
        let l = weighted_soft_dice_loss(&wrong, &g, &spec).unwrap();
        assert!((l - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = labels([3, 3, 3], 4);
        let p = softmax_channels(&maps(4, [3, 3, 3], |i| ((i * 31 % 17) as f64 * 0.37).cos())).unwrap();
        let spec = LossSpec::new(vec![1.0, 2.0, 0.5, 0.0], 1e-5).unwrap();
        let grad = soft_dice_grad(&p, &g, &spec).unwrap();
        let h = 1e-3;
        for i in 0..p.data.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a.data[i] += h;
            b.data[i] -= h;
            let fd = (weighted_soft_dice_loss(&a, &g, &spec).unwrap() - weighted_soft_dice_loss(&b, &g, &spec).unwrap())
                / (2.0 * h);
            let an = grad.data[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-12), "{i}: {fd} vs {an}");
        }
        // zero-weight class has zero gradient
        assert!(grad.channel(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_targets_rejected() {
        let g = labels([2, 2, 2], 3);
        let mut bad = g.clone();
        bad.data[0] = 0.5;
        assert!(weighted_soft_dice_loss(&g, &bad, &LossSpec::uniform(3)).is_err());
        assert!(weighted_soft_dice_loss(&g, &g, &LossSpec::uniform(4)).is_err());
        assert!(LossSpec::new(vec![0.0, 0.0], 1e-5).is_err());
    }

    fn blob(shape: [usize; 3]) -> Volume {
        let c = shape.map(|n| (n as f64 - 1.0) / 2.0);
        Volume::from_fn(Geometry::with_shape(shape).unwrap(), |z, y, x| {
            let r2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) / 4.0 + (x as f64 - c[2]).powi(2) / 9.0;
            (100.0 * (-r2 / 18.0).exp()) as f32
        })
        .unwrap()
    }

    #[test]
    fn identity_parameters() {
        let v = blob([5, 12, 14]);
        assert_eq!(augment_shift(&v, [0, 0, 0]).unwrap(), v);
        let r = augment_rotate_inplane(&v, 0.0).unwrap();
        let s = augment_scale(&v, 1.0).unwrap();
        for (a, b) in v.data().iter().zip(r.data()).chain(v.data().iter().zip(s.data())) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn shift_round_trip_fills_air() {
        let v = blob([3, 6, 10]);
        let back = augment_shift(&augment_shift(&v, [0, 0, 4]).unwrap(), [0, 0, -4]).unwrap();
        for z in 0..3 {
            for y in 0..6 {
                for x in 0..10 {
                    let want = if x >= 6 { AIR_HU } else { v.get(z, y, x) };
                    assert_eq!(back.get(z, y, x), want);
                }
            }
        }
    }

    #[test]
    fn label_augments_keep_label_set() {
        let g = Geometry::with_shape([4, 10, 10]).unwrap();
        let lv = LabelVolume::new(g, (0..400).map(|i| (i % 5) as u8 + 1).collect(), 6).unwrap();
        for a in [Augment::Rotate(17.0), Augment::Scale(0.8), Augment::Scale(1.2), Augment::Shift([1, -2, 3])] {
            let out = a.apply_labels(&lv).unwrap();
            let mut allowed = lv.label_set();
            allowed.push(FILL_LABEL);
            assert!(out.label_set().iter().all(|l| allowed.contains(l)), "{a:?}");
        }
    }
}
