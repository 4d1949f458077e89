//! Shared oracles and generators for the integration suites.
#![allow(dead_code)]

use cobra_core::graph::{GraphBuilder, Model, Op, WeightStore};
use cobra_core::nn::{ConvSpec, CounterRng, Tensor};
use cobra_core::volume_io::{Geometry, LabelVolume};

pub fn rand_tensor(dims: &[usize], rng: &mut CounterRng, scale: f32) -> Tensor {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-scale, scale)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

fn out_extent(i: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (i + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

/// Seven-loop cross-correlation with zero padding, accumulated in f64.
/// Weight `(Cout, Cin, kz, ky, kx)`.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Vec<f64> {
    let [ci, d, h, wd] = x.shape4().unwrap();
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let od = out_extent(d, kz, sz, pz).unwrap();
    let oh = out_extent(h, ky, sy, py).unwrap();
    let ow = out_extent(wd, kx, sx, px).unwrap();
    let co = spec.out_channels;
    let (xv, wv) = (x.data(), w.data());
    let mut out = vec![0.0f64; co * od * oh * ow];
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                    for c in 0..ci {
                        for a in 0..kz {
                            let iz = (z * sz + a) as isize - pz as isize;
                            if iz < 0 || iz >= d as isize {
                                continue;
                            }
                            for bb in 0..ky {
                                let iy = (y * sy + bb) as isize - py as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for cc in 0..kx {
                                    let ix = (xx * sx + cc) as isize - px as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((c * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                    let wi = (((o * ci + c) * kz + a) * ky + bb) * kx + cc;
                                    acc += xv[xi] as f64 * wv[wi] as f64;
                                }
                            }
                        }
                    }
                    out[((o * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Scatter form of the transposed convolution: every input voxel adds
/// `x * w` into the window it covers. Weight `(Cin, Cout, kz, ky, kx)`.
pub fn naive_conv_transpose(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> (Vec<usize>, Vec<f64>) {
    let [ci, d, h, wd] = x.shape4().unwrap();
    let [kz, ky, kx] = spec.kernel;
    let [sz, sy, sx] = spec.stride;
    let [pz, py, px] = spec.padding;
    let full = |i: usize, k: usize, s: usize| (i - 1) * s + k;
    let (fd, fh, fw) = (full(d, kz, sz), full(h, ky, sy), full(wd, kx, sx));
    let (od, oh, ow) = (fd - 2 * pz, fh - 2 * py, fw - 2 * px);
    let co = spec.out_channels;
    let mut out = vec![0.0f64; co * od * oh * ow];
    for o in 0..co {
        let bias = b.map_or(0.0, |b| b.data()[o] as f64);
        out[o * od * oh * ow..(o + 1) * od * oh * ow].fill(bias);
    }
    for c in 0..ci {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((c * d + z) * h + y) * wd + xx] as f64;
                    for o in 0..co {
                        for a in 0..kz {
                            for bb in 0..ky {
                                for cc in 0..kx {
                                    let (tz, ty, tx) = (z * sz + a, y * sy + bb, xx * sx + cc);
                                    if tz < pz || ty < py || tx < px {
                                        continue;
                                    }
                                    let (tz, ty, tx) = (tz - pz, ty - py, tx - px);
                                    if tz >= od || ty >= oh || tx >= ow {
                                        continue;
                                    }
                                    let wi = (((c * co + o) * kz + a) * ky + bb) * kx + cc;
                                    out[((o * od + tz) * oh + ty) * ow + tx] += v * w.data()[wi] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (vec![co, od, oh, ow], out)
}

pub fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

pub fn max_diff_t(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch");
    a.max_abs_diff(b) as f64
}

/// Random valid model mixing every op kind: convolutions (cubic and
/// single-axis kernels, strided or not), transposed convolutions, ReLU,
/// adds, concats, identities, foldable constant chains, per-channel
/// constants feeding adds, and dead branches.
pub fn random_model(seed: u64) -> Model {
    let mut rng = CounterRng::new(seed);
    let mut b = GraphBuilder::new();
    let c0 = 1 + rng.below(3);
    let sp = [2 + rng.below(4), 2 + rng.below(4), 2 + rng.below(4)];
    let x = b.input("x", &[c0, sp[0], sp[1], sp[2]]);
    let mut ws = WeightStore::new();
    // live activations: (name, dims)
    let mut live: Vec<(String, Vec<usize>)> = vec![(x, vec![c0, sp[0], sp[1], sp[2]])];
    let mut cid = 0usize;
    let mut constant = |b: &mut GraphBuilder, ws: &mut WeightStore, rng: &mut CounterRng, dims: &[usize]| {
        cid += 1;
        let name = format!("k{cid}");
        ws.insert(name.as_str(), rand_tensor(dims, rng, 1.0)).unwrap();
        b.constant(&name, dims)
    };
    let steps = 3 + rng.below(8);
    for _ in 0..steps {
        let (t, dims) = live[rng.below(live.len())].clone();
        let c = dims[0];
        let spatial = [dims[1], dims[2], dims[3]];
        match rng.below(9) {
            0 | 1 => {
                let kernels = [[1, 1, 1], [3, 3, 3], [3, 1, 1], [1, 3, 1], [1, 1, 3], [2, 2, 2]];
                let k = kernels[rng.below(kernels.len())];
                let stride = if rng.below(3) == 0 { k.map(|v| if v > 1 { 2 } else { 1 }) } else { [1; 3] };
                let pad = k.map(|v| v / 2);
                let cout = 1 + rng.below(4);
                let spec = ConvSpec::new(c, cout, k)
                    .with_stride(stride)
                    .with_padding(pad)
                    .with_bias(rng.below(2) == 0);
                let Ok(out) = spec.output_extent(spatial) else { continue };
                let y = b.conv(&t, spec, "conv");
                ws.insert(format!("{y}.weight"), rand_tensor(&spec.weight_dims(), &mut rng, 0.5)).unwrap();
                if spec.bias {
                    ws.insert(format!("{y}.bias"), rand_tensor(&[cout], &mut rng, 0.5)).unwrap();
                }
                let y = if rng.below(2) == 0 { b.relu(&y) } else { y };
                live.push((y, vec![cout, out[0], out[1], out[2]]));
            }
            2 => {
                if spatial.iter().any(|&v| v > 6) {
                    continue;
                }
                let cout = 1 + rng.below(3);
                let spec = ConvSpec::new(c, cout, [2, 2, 2])
                    .with_stride([2, 2, 2])
                    .with_padding([0; 3])
                    .with_bias(rng.below(2) == 0);
                let y = b.conv_transpose(&t, spec, "up");
                ws.insert(format!("{y}.weight"), rand_tensor(&spec.transpose_weight_dims(), &mut rng, 0.5))
                    .unwrap();
                if spec.bias {
                    ws.insert(format!("{y}.bias"), rand_tensor(&[cout], &mut rng, 0.5)).unwrap();
                }
                live.push((y, vec![cout, 2 * spatial[0], 2 * spatial[1], 2 * spatial[2]]));
            }
            3 => {
                let y = b.relu(&t);
                live.push((y, dims));
            }
            4 => {
                let y = b.identity(&t);
                let y = if rng.below(2) == 0 { b.identity(&y) } else { y };
                live.push((y, dims));
            }
            5 => {
                // a second tensor of the same shape, or a full-size constant
                let other = live.iter().filter(|(n, d)| *d == dims && *n != t).map(|(n, _)| n.clone()).next();
                let other = other.unwrap_or_else(|| constant(&mut b, &mut ws, &mut rng, &dims));
                let y = if rng.below(2) == 0 { b.add(&t, &other) } else { b.add(&other, &t) };
                live.push((y, dims));
            }
            6 => {
                let other = live
                    .iter()
                    .filter(|(_, d)| d[1..] == dims[1..])
                    .map(|(n, d)| (n.clone(), d[0]))
                    .nth(rng.below(2));
                let Some((o, oc)) = other else { continue };
                let y = b.concat(&t, &o);
                live.push((y, vec![c + oc, spatial[0], spatial[1], spatial[2]]));
            }
            7 => {
                // foldable constant chain, per channel, feeding an add
                let pc = [c, 1, 1, 1];
                let k1 = constant(&mut b, &mut ws, &mut rng, &pc);
                let k2 = constant(&mut b, &mut ws, &mut rng, &pc);
                let mut k = b.add(&k1, &k2);
                if rng.below(2) == 0 {
                    k = b.relu(&k);
                }
                if rng.below(2) == 0 {
                    k = b.identity(&k);
                }
                let y = if rng.below(2) == 0 { b.add(&t, &k) } else { b.add(&k, &t) };
                live.push((y, dims));
            }
            _ => {
                // conv followed by a per-channel constant add (bias fusion)
                let cout = 1 + rng.below(4);
                let spec = ConvSpec::new(c, cout, [1, 1, 3]).with_bias(rng.below(2) == 0);
                let y = b.conv(&t, spec, "conv");
                ws.insert(format!("{y}.weight"), rand_tensor(&spec.weight_dims(), &mut rng, 0.5)).unwrap();
                if spec.bias {
                    ws.insert(format!("{y}.bias"), rand_tensor(&[cout], &mut rng, 0.5)).unwrap();
                }
                let k = constant(&mut b, &mut ws, &mut rng, &[cout, 1, 1, 1]);
                let y = if rng.below(2) == 0 { b.add(&y, &k) } else { b.add(&k, &y) };
                live.push((y, vec![cout, spatial[0], spatial[1], spatial[2]]));
            }
        }
    }
    let last = live.last().unwrap().0.clone();
    if last == "x" {
        let y = b.relu(&last);
        b.output(&y);
    } else {
        b.output(&last);
    }
    // occasionally a second output; everything else not reaching an
    // output is dead code
    if live.len() > 2 && rng.below(3) == 0 {
        let (n, _) = &live[1 + rng.below(live.len() - 2)];
        let g_out = b.identity(n);
        b.output(&g_out);
    }
    Model::new(b.finish(), ws).unwrap()
}

pub fn model_input(m: &Model, seed: u64) -> Tensor {
    let mut rng = CounterRng::new(seed);
    rand_tensor(&m.graph.inputs[0].dims, &mut rng, 1.0)
}

pub fn count_kind(m: &Model, f: impl Fn(&Op) -> bool) -> usize {
    m.graph.nodes.iter().filter(|n| f(&n.op)).count()
}

/// Random label volume with blob-like classes (smooth random field
/// thresholded per class) so surfaces are non-trivial.
pub fn random_labels(rng: &mut CounterRng, shape: [usize; 3], spacing: [f64; 3], classes: usize) -> LabelVolume {
    let g = Geometry::new(shape, spacing, [0.0; 3]).unwrap();
    let mode = rng.below(4);
    let centres: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.uniform() * shape[0] as f64,
                rng.uniform() * shape[1] as f64,
                rng.uniform() * shape[2] as f64,
                1.0 + rng.uniform() * 4.0,
            ]
        })
        .collect();
    let mut data = Vec::with_capacity(g.len());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let l = if mode == 0 {
                    rng.below(classes) as u8
                } else {
                    let mut l = 0u8;
                    for (k, c) in centres.iter().enumerate() {
                        let d2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
                        if d2 <= c[3] * c[3] {
                            l = (k % (classes - 1)) as u8 + 1;
                        }
                    }
                    l
                };
                data.push(l);
            }
        }
    }
    LabelVolume::new(g, data, classes).unwrap()
}

/// 6-connected boundary with the volume border counting as outside.
pub fn oracle_surface(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let [d, h, w] = shape;
    let at = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && mask[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut pts = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let n = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if n.iter().any(|&(a, b, c)| !at(z + a, y + b, x + c)) {
                    pts.push([z as usize, y as usize, x as usize]);
                }
            }
        }
    }
    pts
}

/// All-pairs NSD.
pub fn oracle_nsd(pred: &LabelVolume, gold: &LabelVolume, class: u8, tol: f64) -> f64 {
    let shape = pred.shape();
    let s = pred.spacing();
    let a = oracle_surface(&pred.mask(class), shape);
    let b = oracle_surface(&gold.mask(class), shape);
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let d2 = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * s[i]).powi(2)).sum()
    };
    let close = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .filter(|p| to.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min) <= tol * tol * (1.0 + 1e-12))
            .count()
    };
    (close(&a, &b) + close(&b, &a)) as f64 / (a.len() + b.len()) as f64
}

pub fn oracle_dsc(pred: &LabelVolume, gold: &LabelVolume, class: u8) -> f64 {
    let p = pred.data().iter().filter(|&&l| l == class).count();
    let g = gold.data().iter().filter(|&&l| l == class).count();
    let both = pred.data().iter().zip(gold.data()).filter(|(&a, &b)| a == class && b == class).count();
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Double-double number `hi + lo` (about 32 significant digits), used where
/// an f64 oracle would lose the quantity under test to cancellation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd(pub f64, pub f64);

impl Dd {
    pub fn from(v: f64) -> Dd {
        Dd(v, 0.0)
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        Dd(s, (a - (s - bb)) + (b - bb))
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.0, o.0);
        let t = Dd::two_sum(self.1, o.1);
        let s = Dd::two_sum(s.0, s.1 + t.0);
        Dd::two_sum(s.0, s.1 + t.1)
    }

    pub fn neg(self) -> Dd {
        Dd(-self.0, -self.1)
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let e = self.0.mul_add(o.0, -p);
        Dd::two_sum(p, e + (self.0 * o.1 + self.1 * o.0))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.0 / o.0;
        let r = self.add(o.mul(Dd::from(q1)).neg());
        let q2 = r.0 / o.0;
        let r = r.add(o.mul(Dd::from(q2)).neg());
        let q3 = r.0 / o.0;
        Dd::two_sum(q1, q2).add(Dd::from(q3))
    }

    pub fn to_f64(self) -> f64 {
        self.0 + self.1
    }
}

/// Weighted soft Dice loss evaluated in double-double, with voxel `i` of
/// the flat `(K, N)` probability array replaced by `p[i] + delta`.
pub fn soft_dice_loss_dd(p: &[f64], g: &[f64], classes: usize, weights: &[f64], eps: f64, i: usize, delta: f64) -> Dd {
    let n = p.len() / classes;
    let mut acc = Dd::from(0.0);
    let mut wsum = Dd::from(0.0);
    for c in 0..classes {
        let (mut pg, mut s) = (Dd::from(0.0), Dd::from(0.0));
        for v in 0..n {
            let j = c * n + v;
            let pj = if j == i { Dd::from(p[j]).add(Dd::from(delta)) } else { Dd::from(p[j]) };
            let gj = Dd::from(g[j]);
            pg = pg.add(pj.mul(gj));
            s = s.add(pj.mul(pj)).add(gj.mul(gj));
        }
        let d = pg.mul(Dd::from(2.0)).add(Dd::from(eps)).div(s.add(Dd::from(eps)));
        acc = acc.add(Dd::from(weights[c]).mul(d));
        wsum = wsum.add(Dd::from(weights[c]));
    }
    Dd::from(1.0).add(acc.div(wsum).neg())
}
