//! Computational-graph IR for the network, its weight store, the `.cbr`
//! container format, a reference interpreter and compile-time rewrites.

mod builder;
mod format;
mod interpret;
mod passes;
mod weights;

pub use builder::GraphBuilder;
pub use format::{
    deserialize, deserialize_bytes, read_weight_file, serialize, serialize_bytes, write_weight_file,
    FORMAT_VERSION, MODEL_MAGIC, WEIGHT_MAGIC,
};
pub use interpret::{eval_node_reference, interpret};
pub use passes::{eliminate_redundant, fold_constants, fuse_nodes, optimize, OptimizeReport, Pass};
pub use weights::WeightStore;

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Convolution, optionally with a fused activation.
    Conv {
        spec: ConvSpec,
        weight: String,
        bias: Option<String>,
        activation: Activation,
    },
    ConvTranspose {
        spec: ConvSpec,
        weight: String,
        bias: Option<String>,
    },
    Relu,
    Add,
    Concat,
    Constant {
        weight: String,
        dims: Vec<usize>,
    },
    Identity,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv {
                activation: Activation::Relu,
                ..
            } => "conv_relu",
            Op::Conv { .. } => "conv",
            Op::ConvTranspose { .. } => "conv_transpose",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Constant { .. } => "constant",
            Op::Identity => "identity",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Constant { .. } => 0,
            Op::Add | Op::Concat => 2,
            _ => 1,
        }
    }

    /// Weight names referenced by this op.
    pub fn weight_refs(&self) -> Vec<&str> {
        match self {
            Op::Conv { weight, bias, .. } | Op::ConvTranspose { weight, bias, .. } => {
                let mut v = vec![weight.as_str()];
                v.extend(bias.as_deref());
                v
            }
            Op::Constant { weight, .. } => vec![weight.as_str()],
            _ => Vec::new(),
        }
    }
}

/// One operation producing exactly one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Port {
    pub name: String,
    pub dims: Vec<usize>,
}

/// Nodes are stored in topological order; [`Graph::validate`] enforces it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub inputs: Vec<Port>,
    pub outputs: Vec<String>,
    pub nodes: Vec<Node>,
}

/// A graph together with the weights it references.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub graph: Graph,
    pub weights: WeightStore,
}

impl Model {
    pub fn new(graph: Graph, weights: WeightStore) -> Result<Self> {
        let m = Model { graph, weights };
        m.validate()?;
        Ok(m)
    }

    /// Structural checks plus resolution of every weight reference.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        for node in &self.graph.nodes {
            let expected: Vec<(String, Vec<usize>)> = match &node.op {
                Op::Conv { spec, weight, bias, .. } => {
                    let mut v = vec![(weight.clone(), spec.weight_dims())];
                    v.extend(bias.iter().map(|b| (b.clone(), vec![spec.out_channels])));
                    v
                }
                Op::ConvTranspose { spec, weight, bias } => {
                    let mut v = vec![(weight.clone(), spec.transpose_weight_dims())];
                    v.extend(bias.iter().map(|b| (b.clone(), vec![spec.out_channels])));
                    v
                }
                Op::Constant { weight, dims } => vec![(weight.clone(), dims.clone())],
                _ => Vec::new(),
            };
            for (name, dims) in expected {
                let t = self
                    .weights
                    .get(&name)
                    .ok_or_else(|| Error::DanglingWeight(name.clone()))?;
                if t.dims() != &dims[..] {
                    return Err(Error::graph(format!(
                        "weight `{name}` has dims {:?}, node `{}` expects {dims:?}",
                        t.dims(),
                        node.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Drops weights no node references.
    pub fn prune_weights(&mut self) {
        let used: HashSet<String> = self
            .graph
            .nodes
            .iter()
            .flat_map(|n| n.op.weight_refs())
            .map(str::to_owned)
            .collect();
        self.weights.retain(|name| used.contains(name));
    }
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Checks names, arities, attribute consistency and topological order.
    pub fn validate(&self) -> Result<()> {
        let mut defined: HashSet<&str> = HashSet::new();
        let mut node_names: HashSet<&str> = HashSet::new();
        for p in &self.inputs {
            if p.dims.is_empty() || p.dims.contains(&0) {
                return Err(Error::graph(format!("input `{}` has invalid dims {:?}", p.name, p.dims)));
            }
            if !defined.insert(&p.name) {
                return Err(Error::graph(format!("tensor `{}` defined twice", p.name)));
            }
        }
        for n in &self.nodes {
            if !node_names.insert(&n.name) {
                return Err(Error::graph(format!("node name `{}` used twice", n.name)));
            }
            if n.inputs.len() != n.op.arity() {
                return Err(Error::graph(format!(
                    "node `{}` ({}) takes {} inputs, has {}",
                    n.name,
                    n.op.kind(),
                    n.op.arity(),
                    n.inputs.len()
                )));
            }
            for i in &n.inputs {
                if !defined.contains(i.as_str()) {
                    return Err(Error::graph(format!(
                        "node `{}` consumes `{i}` before it is produced (cycle or missing producer)",
                        n.name
                    )));
                }
            }
            match &n.op {
                Op::Conv { spec, bias, .. } | Op::ConvTranspose { spec, bias, .. } => {
                    spec.validate()?;
                    if spec.bias != bias.is_some() {
                        return Err(Error::graph(format!(
                            "node `{}`: bias flag disagrees with bias reference",
                            n.name
                        )));
                    }
                }
                Op::Constant { dims, .. } if dims.is_empty() || dims.contains(&0) => {
                    return Err(Error::graph(format!("constant `{}` has invalid dims", n.name)));
                }
                _ => {}
            }
            if !defined.insert(&n.output) {
                return Err(Error::graph(format!("tensor `{}` defined twice", n.output)));
            }
        }
        for o in &self.outputs {
            if !defined.contains(o.as_str()) {
                return Err(Error::graph(format!("graph output `{o}` is never produced")));
            }
        }
        Ok(())
    }

    /// Dims of every tensor, keyed by name.
    pub fn infer_shapes(&self) -> Result<HashMap<String, Vec<usize>>> {
        self.validate()?;
        let mut shapes: HashMap<String, Vec<usize>> = self
            .inputs
            .iter()
            .map(|p| (p.name.clone(), p.dims.clone()))
            .collect();
        for n in &self.nodes {
            let args: Vec<&[usize]> = n.inputs.iter().map(|i| shapes[i].as_slice()).collect();
            let dims = node_output_dims(n, &args)?;
            shapes.insert(n.output.clone(), dims);
        }
        Ok(shapes)
    }

    /// Number of consuming nodes per tensor (graph outputs add one).
    pub fn use_counts(&self) -> HashMap<&str, usize> {
        let mut uses: HashMap<&str, usize> = HashMap::new();
        for n in &self.nodes {
            for i in &n.inputs {
                *uses.entry(i.as_str()).or_default() += 1;
            }
        }
        for o in &self.outputs {
            *uses.entry(o.as_str()).or_default() += 1;
        }
        uses
    }

    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.output == tensor)
    }

    /// Rewrites every consumer reference (and graph output) from `from` to `to`.
    pub(crate) fn rename_uses(&mut self, from: &str, to: &str) {
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                if i == from {
                    *i = to.to_owned();
                }
            }
        }
        for o in &mut self.outputs {
            if o == from {
                *o = to.to_owned();
            }
        }
    }
}

pub(crate) fn node_output_dims(n: &Node, args: &[&[usize]]) -> Result<Vec<usize>> {
    let feature = |d: &[usize]| -> Result<[usize; 4]> {
        match d {
            [c, z, y, x] => Ok([*c, *z, *y, *x]),
            _ => Err(Error::shape(format!("node `{}` needs a (C,D,H,W) input, got {d:?}", n.name))),
        }
    };
    match &n.op {
        Op::Conv { spec, .. } => {
            let [c, z, y, x] = feature(args[0])?;
            if c != spec.in_channels {
                return Err(Error::shape(format!(
                    "node `{}` expects {} channels, input has {c}",
                    n.name, spec.in_channels
                )));
            }
            let o = spec.output_extent([z, y, x])?;
            Ok(vec![spec.out_channels, o[0], o[1], o[2]])
        }
        Op::ConvTranspose { spec, .. } => {
            let [c, z, y, x] = feature(args[0])?;
            if c != spec.in_channels {
                return Err(Error::shape(format!(
                    "node `{}` expects {} channels, input has {c}",
                    n.name, spec.in_channels
                )));
            }
            let o = spec.transpose_output_extent([z, y, x])?;
            Ok(vec![spec.out_channels, o[0], o[1], o[2]])
        }
        Op::Relu | Op::Identity => Ok(args[0].to_vec()),
        Op::Add => crate::nn::ops_broadcast_dims(args[0], args[1]),
        Op::Concat => crate::nn::ops_concat_dims(args[0], args[1]),
        Op::Constant { dims, .. } => Ok(dims.clone()),
    }
}
