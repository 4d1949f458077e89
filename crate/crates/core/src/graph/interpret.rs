use std::collections::HashMap;

use super::{Model, Node, Op, WeightStore};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Tensor};

/// Evaluates one node with the straightforward reference kernels.
pub fn eval_node_reference(node: &Node, args: &[&Tensor], weights: &WeightStore) -> Result<Tensor> {
    match &node.op {
        Op::Conv {
            spec,
            weight,
            bias,
            activation,
        } => {
            let w = weights.require(weight)?;
            let b = bias.as_deref().map(|b| weights.require(b)).transpose()?;
            let mut y = nn::conv3d_direct(args[0], w, b, spec)?;
            if *activation == Activation::Relu {
                y = nn::relu(&y);
            }
            Ok(y)
        }
        Op::ConvTranspose { spec, weight, bias } => {
            let w = weights.require(weight)?;
            let b = bias.as_deref().map(|b| weights.require(b)).transpose()?;
            nn::conv_transpose3d_direct(args[0], w, b, spec)
        }
        Op::Relu => Ok(nn::relu(args[0])),
        Op::Add => nn::add(args[0], args[1]),
        Op::Concat => nn::concat_channels(args[0], args[1]),
        Op::Identity => Ok(args[0].clone()),
        Op::Constant { weight, dims } => {
            let t = weights.require(weight)?;
            if t.dims() != &dims[..] {
                return Err(Error::shape(format!("constant `{}` dims disagree with its weight", node.name)));
            }
            Ok(t.clone())
        }
    }
}

/// Unoptimized, node-by-node evaluation; the semantic baseline every
/// compiled execution is compared against. Returns the graph outputs in
/// declaration order.
pub fn interpret(model: &Model, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let g = &model.graph;
    model.validate()?;
    if inputs.len() != g.inputs.len() {
        return Err(Error::invalid(format!(
            "graph takes {} inputs, {} given",
            g.inputs.len(),
            inputs.len()
        )));
    }
    let mut uses = g.use_counts().into_iter().map(|(k, v)| (k.to_owned(), v)).collect::<HashMap<_, _>>();
    let mut env: HashMap<String, Tensor> = HashMap::new();
    for (p, t) in g.inputs.iter().zip(inputs) {
        if t.dims() != &p.dims[..] {
            return Err(Error::shape(format!(
                "input `{}` expects dims {:?}, got {:?}",
                p.name,
                p.dims,
                t.dims()
            )));
        }
        env.insert(p.name.clone(), t.clone());
    }
    for n in &g.nodes {
        let args: Vec<&Tensor> = n.inputs.iter().map(|i| &env[i]).collect();
        let y = eval_node_reference(n, &args, &model.weights)?;
        for i in &n.inputs {
            let u = uses.get_mut(i).expect("consumed tensor is counted");
            *u -= 1;
            if *u == 0 {
                env.remove(i);
            }
        }
        env.insert(n.output.clone(), y);
    }
    Ok(g.outputs.iter().map(|o| env[o].clone()).collect())
}
