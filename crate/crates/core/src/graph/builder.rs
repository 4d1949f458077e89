use super::{Graph, Node, Op, Port};
use crate::nn::{Activation, ConvSpec};

/// Incremental graph construction with generated, unique node names.
///
/// Convolution weights are referenced as `<node>.weight` / `<node>.bias`;
/// filling the [`super::WeightStore`] is left to the caller.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    counter: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, hint: &str, op: Op, inputs: Vec<String>) -> String {
        self.counter += 1;
        let name = format!("{hint}_{}", self.counter);
        self.graph.nodes.push(Node {
            name: name.clone(),
            op,
            inputs,
            output: name.clone(),
        });
        name
    }

    pub fn input(&mut self, name: &str, dims: &[usize]) -> String {
        self.graph.inputs.push(Port {
            name: name.to_owned(),
            dims: dims.to_vec(),
        });
        name.to_owned()
    }

    pub fn conv(&mut self, x: &str, spec: ConvSpec, hint: &str) -> String {
        let name = format!("{hint}_{}", self.counter + 1);
        let op = Op::Conv {
            spec,
            weight: format!("{name}.weight"),
            bias: spec.bias.then(|| format!("{name}.bias")),
            activation: Activation::None,
        };
        self.push(hint, op, vec![x.to_owned()])
    }

    pub fn conv_transpose(&mut self, x: &str, spec: ConvSpec, hint: &str) -> String {
        let name = format!("{hint}_{}", self.counter + 1);
        let op = Op::ConvTranspose {
            spec,
            weight: format!("{name}.weight"),
            bias: spec.bias.then(|| format!("{name}.bias")),
        };
        self.push(hint, op, vec![x.to_owned()])
    }

    pub fn relu(&mut self, x: &str) -> String {
        self.push("relu", Op::Relu, vec![x.to_owned()])
    }

    pub fn add(&mut self, a: &str, b: &str) -> String {
        self.push("add", Op::Add, vec![a.to_owned(), b.to_owned()])
    }

    pub fn concat(&mut self, a: &str, b: &str) -> String {
        self.push("concat", Op::Concat, vec![a.to_owned(), b.to_owned()])
    }

    pub fn identity(&mut self, x: &str) -> String {
        self.push("identity", Op::Identity, vec![x.to_owned()])
    }

    /// Constant node backed by weight `weight` of the given dims.
    pub fn constant(&mut self, weight: &str, dims: &[usize]) -> String {
        let op = Op::Constant {
            weight: weight.to_owned(),
            dims: dims.to_vec(),
        };
        self.push("const", op, Vec::new())
    }

    pub fn output(&mut self, tensor: &str) {
        self.graph.outputs.push(tensor.to_owned());
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}
