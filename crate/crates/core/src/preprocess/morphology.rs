//! Binary morphology on (z, y, x) masks with the 6-connected cross.

use crate::volume_io::Volume;

/// HU threshold separating body from air.
pub const BODY_THRESHOLD_HU: f32 = -200.0;

const NEIGHBOURS: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

#[inline]
fn step(shape: [usize; 3], p: [usize; 3], d: [isize; 3]) -> Option<usize> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + d[a];
        if v < 0 || v >= shape[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some((q[0] * shape[1] + q[1]) * shape[2] + q[2])
}

fn for_each_voxel(shape: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    let mut i = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                f(i, [z, y, x]);
                i += 1;
            }
        }
    }
}

fn dilate(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let mut out = mask.to_vec();
    for_each_voxel(shape, |i, p| {
        if !mask[i] {
            out[i] = NEIGHBOURS
                .iter()
                .any(|&d| step(shape, p, d).is_some_and(|j| mask[j]));
        }
    });
    out
}

/// `outside` is the value assumed beyond the volume border.
fn erode(mask: &[bool], shape: [usize; 3], outside: bool) -> Vec<bool> {
    let mut out = mask.to_vec();
    for_each_voxel(shape, |i, p| {
        if mask[i] {
            out[i] = NEIGHBOURS
                .iter()
                .all(|&d| step(shape, p, d).map_or(outside, |j| mask[j]));
        }
    });
    out
}

/// Dilation followed by erosion. The erosion treats the exterior as
/// foreground so closing never removes voxels from the input mask.
pub fn binary_closing(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    erode(&dilate(mask, shape), shape, true)
}

/// Sets every background voxel not 6-connected to the volume border.
pub fn fill_holes(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let n = mask.len();
    let mut reached = vec![false; n];
    let mut stack = Vec::new();
    for_each_voxel(shape, |i, p| {
        let border = (0..3).any(|a| p[a] == 0 || p[a] + 1 == shape[a]);
        if border && !mask[i] {
            reached[i] = true;
            stack.push(i);
        }
    });
    let (hw, w) = (shape[1] * shape[2], shape[2]);
    while let Some(i) = stack.pop() {
        let p = [i / hw, (i % hw) / w, i % w];
        for d in NEIGHBOURS {
            if let Some(j) = step(shape, p, d) {
                if !mask[j] && !reached[j] {
                    reached[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    reached.iter().map(|&r| !r).collect()
}

/// Body mask: threshold at −200 HU, binary closing, 3D hole filling.
pub fn compute_body_mask(v: &Volume) -> Vec<bool> {
    let shape = v.shape();
    let raw: Vec<bool> = v.data().iter().map(|&x| x > BODY_THRESHOLD_HU).collect();
    fill_holes(&binary_closing(&raw, shape), shape)
}
