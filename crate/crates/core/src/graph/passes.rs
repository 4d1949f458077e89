//! Compile-time graph rewrites. Every pass takes a valid model, returns a
//! new one with identical output names and shapes, and re-validates the
//! result (topological order included) before handing it back.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use super::{eval_node_reference, Graph, Model, Node, Op};
use crate::error::{Error, Result};
use crate::nn::{Activation, Tensor};

/// Upper bound on fold → eliminate → fuse rounds.
pub const MAX_ITERATIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    Fold,
    Eliminate,
    Fuse,
}

impl Pass {
    pub const ALL: [Pass; 3] = [Pass::Fold, Pass::Eliminate, Pass::Fuse];

    pub fn run(self, m: &Model) -> Result<Model> {
        match self {
            Pass::Fold => fold_constants(m),
            Pass::Eliminate => eliminate_redundant(m),
            Pass::Fuse => fuse_nodes(m),
        }
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Fold => "fold",
            Pass::Eliminate => "eliminate",
            Pass::Fuse => "fuse",
        })
    }
}

impl FromStr for Pass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fold" => Ok(Pass::Fold),
            "eliminate" => Ok(Pass::Eliminate),
            "fuse" => Ok(Pass::Fuse),
            other => Err(Error::invalid(format!(
                "unknown pass `{other}` (expected fold, eliminate or fuse)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub iterations: usize,
    /// Node count after each pass application, in order.
    pub trace: Vec<(Pass, usize)>,
}

/// Runs `passes` in the given order repeatedly until a full round changes
/// nothing, or [`MAX_ITERATIONS`] rounds have run.
pub fn optimize(m: &Model, passes: &[Pass]) -> Result<(Model, OptimizeReport)> {
    m.validate()?;
    let mut cur = m.clone();
    let mut report = OptimizeReport {
        nodes_before: m.graph.node_count(),
        nodes_after: 0,
        iterations: 0,
        trace: Vec::new(),
    };
    for _ in 0..MAX_ITERATIONS {
        report.iterations += 1;
        let mut next = cur.clone();
        for &p in passes {
            next = p.run(&next)?;
            report.trace.push((p, next.graph.node_count()));
        }
        let changed = next != cur;
        cur = next;
        if !changed {
            break;
        }
    }
    report.nodes_after = cur.graph.node_count();
    log::debug!(
        "optimize: {} -> {} nodes in {} round(s)",
        report.nodes_before,
        report.nodes_after,
        report.iterations
    );
    Ok((cur, report))
}

fn finish(mut m: Model) -> Result<Model> {
    drop_orphan_constants(&mut m.graph);
    m.prune_weights();
    m.validate()?;
    Ok(m)
}

fn drop_orphan_constants(g: &mut Graph) {
    loop {
        let uses: HashSet<String> = g.use_counts().into_keys().map(str::to_owned).collect();
        let before = g.nodes.len();
        g.nodes
            .retain(|n| !matches!(n.op, Op::Constant { .. }) || uses.contains(&n.output));
        if g.nodes.len() == before {
            break;
        }
    }
}

/// Replaces every node whose inputs are all constants with a constant
/// holding its value, computed with the reference kernels.
pub fn fold_constants(m: &Model) -> Result<Model> {
    m.validate()?;
    let mut out = m.clone();
    let mut constant: HashMap<String, Tensor> = HashMap::new();
    for i in 0..out.graph.nodes.len() {
        let node = &out.graph.nodes[i];
        if let Op::Constant { weight, .. } = &node.op {
            constant.insert(node.output.clone(), out.weights.require(weight)?.clone());
            continue;
        }
        if !node.inputs.iter().all(|t| constant.contains_key(t)) {
            continue;
        }
        let args: Vec<&Tensor> = node.inputs.iter().map(|t| &constant[t]).collect();
        let value = eval_node_reference(node, &args, &out.weights)?;
        let weight = out.weights.fresh_name(&format!("folded:{}", node.output));
        let output = node.output.clone();
        out.graph.nodes[i].op = Op::Constant {
            weight: weight.clone(),
            dims: value.dims().to_vec(),
        };
        out.graph.nodes[i].inputs.clear();
        out.weights.insert(weight, value.clone())?;
        constant.insert(output, value);
    }
    finish(out)
}

/// Splices out identity nodes and removes nodes no graph output depends on.
pub fn eliminate_redundant(m: &Model) -> Result<Model> {
    m.validate()?;
    let mut g = m.graph.clone();
    let graph_inputs: HashSet<String> = g.inputs.iter().map(|p| p.name.clone()).collect();

    let mut i = 0;
    while i < g.nodes.len() {
        if g.nodes[i].op != Op::Identity {
            i += 1;
            continue;
        }
        let src = g.nodes[i].inputs[0].clone();
        let dst = g.nodes[i].output.clone();
        let dst_is_output = g.outputs.contains(&dst);
        if !dst_is_output {
            g.nodes.remove(i);
            g.rename_uses(&dst, &src);
            continue;
        }
        // The identity names a graph output: rename the producer instead,
        // unless `src` is itself externally visible.
        let src_visible = graph_inputs.contains(&src) || g.outputs.contains(&src);
        match g.producer(&src) {
            Some(p) if !src_visible => {
                g.nodes.remove(i);
                g.nodes[p].output = dst.clone();
                g.rename_uses(&src, &dst);
                // `rename_uses` leaves graph outputs that were `src` alone;
                // none exist since `src` is not visible.
            }
            _ => i += 1,
        }
    }

    // reachability from outputs
    let mut live: HashSet<String> = g.outputs.iter().cloned().collect();
    let mut keep = vec![false; g.nodes.len()];
    for (k, n) in g.nodes.iter().enumerate().rev() {
        if live.contains(&n.output) {
            keep[k] = true;
            live.extend(n.inputs.iter().cloned());
        }
    }
    let mut k = 0;
    g.nodes.retain(|_| {
        k += 1;
        keep[k - 1]
    });
    finish(Model {
        graph: g,
        weights: m.weights.clone(),
    })
}

fn per_channel_constant(g: &Graph, tensor: &str, m: &Model, channels: usize) -> Option<Tensor> {
    let p = g.producer(tensor)?;
    match &g.nodes[p].op {
        Op::Constant { weight, dims } if dims[..] == [channels, 1, 1, 1] => m.weights.get(weight).cloned(),
        _ => None,
    }
}

/// Fuses `conv + per-channel constant add` into the conv bias and
/// `conv + relu` into a single conv-relu node.
pub fn fuse_nodes(m: &Model) -> Result<Model> {
    m.validate()?;
    let mut out = m.clone();
    let mut i = 0;
    while i < out.graph.nodes.len() {
        let uses: HashMap<String, usize> = out
            .graph
            .use_counts()
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect();
        let node = out.graph.nodes[i].clone();
        let single_conv = |t: &str, g: &Graph| -> Option<usize> {
            let p = g.producer(t)?;
            let sole_use = uses.get(t).copied() == Some(1);
            match &g.nodes[p].op {
                Op::Conv {
                    activation: Activation::None,
                    ..
                } if sole_use => Some(p),
                _ => None,
            }
        };
        match node.op {
            Op::Relu => {
                if let Some(p) = single_conv(&node.inputs[0], &out.graph) {
                    if let Op::Conv { activation, .. } = &mut out.graph.nodes[p].op {
                        *activation = Activation::Relu;
                    }
                    out.graph.nodes[p].output = node.output.clone();
                    out.graph.nodes.remove(i);
                    continue;
                }
            }
            Op::Add => {
                let candidates = [(0usize, 1usize), (1, 0)];
                let hit = candidates.iter().find_map(|&(a, b)| {
                    let p = single_conv(&node.inputs[a], &out.graph)?;
                    let Op::Conv { spec, .. } = &out.graph.nodes[p].op else {
                        return None;
                    };
                    let k = per_channel_constant(&out.graph, &node.inputs[b], &out, spec.out_channels)?;
                    Some((p, k))
                });
                if let Some((p, k)) = hit {
                    fuse_bias(&mut out, p, &k, &node)?;
                    out.graph.nodes.remove(i);
                    continue;
                }
            }
            _ => {}
        }
        i += 1;
    }
    finish(out)
}

fn fuse_bias(m: &mut Model, conv: usize, k: &Tensor, add: &Node) -> Result<()> {
    let conv_node = &m.graph.nodes[conv];
    let Op::Conv { spec, bias, .. } = &conv_node.op else {
        unreachable!("caller checked the op");
    };
    let mut b: Vec<f32> = match bias {
        Some(name) => m.weights.require(name)?.data().to_vec(),
        None => vec![0.0; spec.out_channels],
    };
    for (bi, ki) in b.iter_mut().zip(k.data()) {
        *bi += *ki;
    }
    let name = m.weights.fresh_name(&format!("fused:{}.bias", conv_node.name));
    m.weights.insert(name.clone(), Tensor::new(vec![b.len()], b)?)?;
    let node = &mut m.graph.nodes[conv];
    if let Op::Conv { spec, bias, .. } = &mut node.op {
        spec.bias = true;
        *bias = Some(name);
    }
    node.output = add.output.clone();
    Ok(())
}
