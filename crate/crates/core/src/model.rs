//! The segmentation network: architecture configuration, graph construction
//! and parameter / FLOP accounting.
//!
//! Layout (all convolutions biased, ReLU after every convolution except the
//! ones feeding a residual add or the head):
//!
//! ```text
//! stem      7x1x1/s(2,1,1) -> 1x7x1/s(1,2,1) -> 1x1x7/s(1,1,2)       Cin -> w0
//! enc i     1x1x1 reduce -> fact 3^3 (stride 2 if i > 0) -> fact 3^3
//!           -> 1x1x1 restore, + residual (1x1x1 projection if needed)
//! dec i     1x1x1 reduce -> 2x2x2/s2 transpose -> 1x1x1 to w_i,
//!           concat skip_i, bottlenecked double conv, + projection
//! head      1x1x1 w0 -> classes, 2x2x2/s2 transpose back to input size
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, Op, WeightStore};
use crate::nn::{he_normal_init, zero_bias, ConvSpec, CounterRng};

const REFERENCE_CONFIG: &str = include_str!("../../../configs/cobra-reference");

/// Parameter count of the published network.
pub const PUBLISHED_PARAMS: usize = 436_982;
/// Published cost of one forward pass on a 96x192x192 volume.
pub const PUBLISHED_GFLOPS: f64 = 48.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub class_count: usize,
    pub levels: usize,
    pub widths: Vec<usize>,
    pub bottleneck_factor_default: usize,
    pub bottleneck_factor_wide: usize,
    /// How many of the deepest levels use the wide factor.
    pub wide_levels: usize,
    pub input_shape: [usize; 3],
    /// Cubic kernels when false (debugging aid).
    pub factorize: bool,
}

impl ArchConfig {
    /// The configuration checked in at `configs/cobra-reference`.
    pub fn reference() -> Self {
        REFERENCE_CONFIG.parse().expect("reference config is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn with_input_shape(mut self, shape: [usize; 3]) -> Self {
        self.input_shape = shape;
        self
    }

    pub fn factor(&self, level: usize) -> usize {
        if level + self.wide_levels >= self.levels {
            self.bottleneck_factor_wide
        } else {
            self.bottleneck_factor_default
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.class_count == 0 || self.levels == 0 {
            return Err(Error::invalid("input_channels, class_count and levels must be >= 1"));
        }
        if self.widths.len() != self.levels {
            return Err(Error::invalid(format!(
                "{} widths given for {} levels",
                self.widths.len(),
                self.levels
            )));
        }
        if self.bottleneck_factor_default == 0 || self.bottleneck_factor_wide == 0 {
            return Err(Error::invalid("bottleneck factors must be >= 1"));
        }
        if self.wide_levels > self.levels {
            return Err(Error::invalid("wide_levels exceeds levels"));
        }
        for (i, &w) in self.widths.iter().enumerate() {
            let f = self.factor(i);
            if w == 0 || w % f != 0 {
                return Err(Error::invalid(format!(
                    "width {w} at level {i} is not divisible by its bottleneck factor {f}"
                )));
            }
        }
        let down = 1usize << (self.levels - 1);
        for &n in &self.input_shape {
            if n % 2 != 0 || (n / 2) % down != 0 {
                return Err(Error::invalid(format!(
                    "input shape {:?}: each extent must be even and, after the stem, divisible by {down}",
                    self.input_shape
                )));
            }
        }
        Ok(())
    }

    /// `key = value` text accepted by [`FromStr`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        format!(
            "input_channels = {}\nclass_count = {}\nlevels = {}\nwidths = {}\n\
             bottleneck_factor_default = {}\nbottleneck_factor_wide = {}\nwide_levels = {}\n\
             input_shape = {}\nfactorize = {}\n",
            self.input_channels,
            self.class_count,
            self.levels,
            list(&self.widths),
            self.bottleneck_factor_default,
            self.bottleneck_factor_wide,
            self.wide_levels,
            list(&self.input_shape),
            self.factorize
        )
    }
}

impl FromStr for ArchConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected `key = value`", lineno + 1)))?;
            if kv.insert(k.trim().to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::invalid(format!("config key `{}` repeated", k.trim())));
            }
        }
        let mut take = |key: &str| kv.remove(key);
        let int = |key: &str, v: Option<String>| -> Result<usize> {
            let v = v.ok_or_else(|| Error::invalid(format!("config key `{key}` missing")))?;
            v.parse()
                .map_err(|_| Error::invalid(format!("config key `{key}`: `{v}` is not an integer")))
        };
        let list = |key: &str, v: Option<String>| -> Result<Vec<usize>> {
            let v = v.ok_or_else(|| Error::invalid(format!("config key `{key}` missing")))?;
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::invalid(format!("config key `{key}`: bad entry `{s}`")))
                })
                .collect()
        };
        let input_channels = int("input_channels", take("input_channels"))?;
        let class_count = int("class_count", take("class_count"))?;
        let levels = int("levels", take("levels"))?;
        let widths = list("widths", take("widths"))?;
        let bottleneck_factor_default = int("bottleneck_factor_default", take("bottleneck_factor_default"))?;
        let bottleneck_factor_wide = int("bottleneck_factor_wide", take("bottleneck_factor_wide"))?;
        let wide_levels = match take("wide_levels") {
            Some(v) => int("wide_levels", Some(v))?,
            None => 1,
        };
        let shape = list("input_shape", take("input_shape"))?;
        let input_shape: [usize; 3] = shape
            .try_into()
            .map_err(|_| Error::invalid("input_shape needs three extents"))?;
        let factorize = match take("factorize").as_deref() {
            None | Some("true") => true,
            Some("false") => false,
            Some(v) => return Err(Error::invalid(format!("factorize: expected true/false, got `{v}`"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::invalid(format!("unknown config key `{k}`")));
        }
        let cfg = ArchConfig {
            input_channels,
            class_count,
            levels,
            widths,
            bottleneck_factor_default,
            bottleneck_factor_wide,
            wide_levels,
            input_shape,
            factorize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits a cubic `k x k x k` convolution into `(k,1,1) -> (1,k,1) -> (1,1,k)`.
///
/// Intermediate widths equal the output width; stride and padding are
/// applied by each 1D convolution along its own axis.
pub fn factorize_conv(spec: &ConvSpec) -> Result<[ConvSpec; 3]> {
    let [k, ky, kx] = spec.kernel;
    if k != ky || k != kx {
        return Err(Error::invalid(format!("kernel {:?} is not cubic", spec.kernel)));
    }
    if k < 2 {
        return Err(Error::invalid("a 1x1x1 kernel has nothing to factorize"));
    }
    spec.validate()?;
    let c = spec.out_channels;
    let axis = |a: usize, cin: usize| {
        let mut kernel = [1; 3];
        let mut stride = [1; 3];
        let mut padding = [0; 3];
        kernel[a] = k;
        stride[a] = spec.stride[a];
        padding[a] = spec.padding[a];
        ConvSpec {
            kernel,
            stride,
            padding,
            in_channels: cin,
            out_channels: c,
            bias: spec.bias,
        }
    };
    Ok([axis(0, spec.in_channels), axis(1, c), axis(2, c)])
}

/// A 1x1x1 reduce / restore pair around a block.
///
/// The block runs at `width / factor` channels; the reduce reads
/// `in_channels` and the restore writes `out_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bottleneck {
    pub in_channels: usize,
    pub width: usize,
    pub factor: usize,
    pub out_channels: usize,
}

impl Bottleneck {
    /// `channels -> channels / factor -> channels`.
    pub fn new(channels: usize, factor: usize) -> Self {
        Bottleneck {
            in_channels: channels,
            width: channels,
            factor,
            out_channels: channels,
        }
    }

    pub fn with_io(mut self, in_channels: usize, out_channels: usize) -> Self {
        self.in_channels = in_channels;
        self.out_channels = out_channels;
        self
    }

    pub fn inner(&self) -> Result<usize> {
        if self.factor == 0 || !self.width.is_multiple_of(self.factor) {
            return Err(Error::invalid(format!(
                "width {} is not divisible by bottleneck factor {}",
                self.width, self.factor
            )));
        }
        Ok(self.width / self.factor)
    }
}

/// Emits `reduce (1x1x1) -> ReLU -> body(inner width) -> restore (1x1x1)`.
///
/// `body` receives the reduced tensor and its channel count and must
/// return a tensor with the same channel count.
pub fn wrap_bottleneck(
    b: &mut GraphBuilder,
    x: &str,
    bn: &Bottleneck,
    hint: &str,
    body: impl FnOnce(&mut GraphBuilder, &str, usize) -> Result<String>,
) -> Result<String> {
    let inner = bn.inner()?;
    let r = b.conv(x, ConvSpec::new(bn.in_channels, inner, [1, 1, 1]), &format!("{hint}_reduce"));
    let r = b.relu(&r);
    let y = body(b, &r, inner)?;
    Ok(b.conv(&y, ConvSpec::new(inner, bn.out_channels, [1, 1, 1]), &format!("{hint}_restore")))
}

/// Convolution with ReLU after it; factorized into three 1D convolutions
/// (each followed by ReLU) when `factorize` is set.
fn conv_relu(b: &mut GraphBuilder, x: &str, spec: ConvSpec, factorize: bool, hint: &str) -> Result<String> {
    if !factorize {
        let y = b.conv(x, spec, hint);
        return Ok(b.relu(&y));
    }
    let mut t = x.to_owned();
    for (s, axis) in factorize_conv(&spec)?.into_iter().zip(["z", "y", "x"]) {
        t = b.conv(&t, s, &format!("{hint}{axis}"));
        t = b.relu(&t);
    }
    Ok(t)
}

/// Bottlenecked double 3^3 convolution with a residual connection.
fn residual_block(
    b: &mut GraphBuilder,
    x: &str,
    bn: Bottleneck,
    stride: usize,
    factorize: bool,
    hint: &str,
) -> Result<String> {
    let y = wrap_bottleneck(b, x, &bn, hint, |b, r, c| {
        let first = ConvSpec::new(c, c, [3, 3, 3]).with_stride([stride; 3]);
        let t = conv_relu(b, r, first, factorize, &format!("{hint}_conv1"))?;
        conv_relu(b, &t, ConvSpec::new(c, c, [3, 3, 3]), factorize, &format!("{hint}_conv2"))
    })?;
    let skip = if bn.in_channels != bn.out_channels || stride != 1 {
        let p = ConvSpec::new(bn.in_channels, bn.out_channels, [1, 1, 1]).with_stride([stride; 3]);
        b.conv(x, p, &format!("{hint}_proj"))
    } else {
        x.to_owned()
    };
    let s = b.add(&y, &skip);
    Ok(b.relu(&s))
}

/// Builds the network graph for `cfg`; input `"ct"` of dims
/// `(input_channels, D, H, W)`, output `"logits"`-producing node last.
pub fn build_cobra(cfg: &ArchConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let [d, h, w] = cfg.input_shape;
    let x = b.input("ct", &[cfg.input_channels, d, h, w]);
    let w0 = cfg.widths[0];

    let stem = ConvSpec::new(cfg.input_channels, w0, [7, 7, 7]).with_stride([2, 2, 2]);
    let mut t = conv_relu(&mut b, &x, stem, cfg.factorize, "stem")?;

    let mut skips = Vec::with_capacity(cfg.levels);
    let mut cin = w0;
    for (i, &c) in cfg.widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let bn = Bottleneck::new(c, cfg.factor(i)).with_io(cin, c);
        t = residual_block(&mut b, &t, bn, stride, cfg.factorize, &format!("enc{i}"))?;
        skips.push(t.clone());
        cin = c;
    }

    for i in (0..cfg.levels - 1).rev() {
        let c = cfg.widths[i];
        let hint = format!("dec{i}");
        let up = Bottleneck {
            in_channels: cin,
            width: cin,
            factor: cfg.factor(i + 1),
            out_channels: c,
        };
        let u = wrap_bottleneck(&mut b, &t, &up, &format!("{hint}_up"), |b, r, k| {
            let tc = ConvSpec::new(k, k, [2, 2, 2]).with_stride([2, 2, 2]).with_padding([0, 0, 0]);
            let y = b.conv_transpose(r, tc, &format!("{hint}_upconv"));
            Ok(b.relu(&y))
        })?;
        let u = b.relu(&u);
        let cat = b.concat(&u, &skips[i]);
        let bn = Bottleneck::new(c, cfg.factor(i)).with_io(2 * c, c);
        t = residual_block(&mut b, &cat, bn, 1, cfg.factorize, &hint)?;
        cin = c;
    }

    let logits = b.conv(&t, ConvSpec::new(cin, cfg.class_count, [1, 1, 1]), "head");
    let k = cfg.class_count;
    let restore = ConvSpec::new(k, k, [2, 2, 2]).with_stride([2, 2, 2]).with_padding([0, 0, 0]);
    let out = b.conv_transpose(&logits, restore, "head_up");
    b.output(&out);
    let g = b.finish();
    g.validate()?;
    Ok(g)
}

/// He-normal weights and zero biases for every convolution in `g`.
///
/// Each node draws from its own stream (forked by node index), so adding a
/// node never perturbs the weights of the others.
pub fn init_weights(g: &Graph, seed: u64) -> Result<WeightStore> {
    let root = CounterRng::new(seed);
    let mut ws = WeightStore::new();
    for (i, n) in g.nodes.iter().enumerate() {
        let node_seed = root.fork(i as u64).next_u64();
        match &n.op {
            Op::Conv { spec, weight, bias, .. } => {
                ws.insert(weight.clone(), he_normal_init(spec, node_seed))?;
                if let Some(bname) = bias {
                    ws.insert(bname.clone(), zero_bias(spec))?;
                }
            }
            Op::ConvTranspose { spec, weight, bias } => {
                let w = he_normal_init(spec, node_seed).reshape(spec.transpose_weight_dims())?;
                ws.insert(weight.clone(), w)?;
                if let Some(bname) = bias {
                    ws.insert(bname.clone(), zero_bias(spec))?;
                }
            }
            Op::Constant { weight, .. } => {
                return Err(Error::invalid(format!(
                    "constant `{weight}` has no initializer; supply it explicitly"
                )))
            }
            _ => {}
        }
    }
    Ok(ws)
}

/// Builds the graph for `cfg` together with freshly initialized weights.
pub fn build_model(cfg: &ArchConfig, seed: u64) -> Result<crate::graph::Model> {
    let g = build_cobra(cfg)?;
    let ws = init_weights(&g, seed)?;
    crate::graph::Model::new(g, ws)
}

/// Learnable scalars implied by the graph's node attributes.
pub fn count_params(g: &Graph) -> usize {
    g.nodes
        .iter()
        .map(|n| match &n.op {
            Op::Conv { spec, .. } | Op::ConvTranspose { spec, .. } => spec.param_count(),
            Op::Constant { dims, .. } => dims.iter().product(),
            _ => 0,
        })
        .sum()
}

/// Floating-point operations of one forward pass: a multiply-add counts
/// as 2, a bias add, ReLU or elementwise add as 1 per output element.
/// Concatenation and identities are free.
pub fn count_flops(g: &Graph) -> Result<u64> {
    let shapes = g.infer_shapes()?;
    let numel = |t: &str| shapes[t].iter().product::<usize>() as u64;
    let mut total = 0u64;
    for n in &g.nodes {
        let out = numel(&n.output);
        total += match &n.op {
            Op::Conv { spec, activation, .. } => {
                let vol = out / spec.out_channels as u64;
                let macs = (spec.taps() * spec.in_channels * spec.out_channels) as u64 * vol;
                let act = if *activation == crate::nn::Activation::Relu { out } else { 0 };
                2 * macs + if spec.bias { out } else { 0 } + act
            }
            Op::ConvTranspose { spec, .. } => {
                let vol_in = numel(&n.inputs[0]) / spec.in_channels as u64;
                let macs = (spec.taps() * spec.in_channels * spec.out_channels) as u64 * vol_in;
                2 * macs + if spec.bias { out } else { 0 }
            }
            Op::Relu | Op::Add => out,
            Op::Concat | Op::Identity | Op::Constant { .. } => 0,
        };
    }
    Ok(total)
}

/// Sum of element counts of every stored tensor.
pub fn stored_params(ws: &WeightStore) -> usize {
    ws.element_count()
}
