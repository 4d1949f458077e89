//! CPU execution of a graph with a static memory plan.
//!
//! Nodes run one after another in stored order; each kernel splits its
//! output into fixed, shape-derived chunks that a per-call worker pool
//! processes. Chunking never depends on the worker count, so results are
//! bit-identical for any thread count.

use std::collections::HashMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{optimize, Model, Op, Pass};
use crate::nn::{self, Activation, CounterRng, Tensor};

/// Buffer sizes are rounded up to this many bytes, and buffers start on
/// such a boundary.
pub const BUFFER_ALIGN: usize = 64;
const ALIGN_ELEMS: usize = BUFFER_ALIGN / 4;

/// One planned tensor: its size and inclusive lifetime `[first, last]` in
/// execution steps (step 0 loads the inputs, node `i`
/// runs at step `i + 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub elements: usize,
    pub first: usize,
    pub last: usize,
    pub buffer: usize,
}

/// Static assignment of every intermediate tensor to a reusable buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPlan {
    /// Capacity of each buffer in `f32` elements (multiple of 16).
    pub buffers: Vec<usize>,
    pub slots: Vec<TensorSlot>,
    index: HashMap<String, usize>,
}

fn round_up(n: usize) -> usize {
    n.div_ceil(ALIGN_ELEMS) * ALIGN_ELEMS
}

/// Greedy interval allocation over the stored topological order.
///
/// Tensors are visited by definition step. A buffer becomes free once the
/// last consumer of its current tensor has run; among free buffers the
/// smallest one that fits is taken, otherwise the largest free buffer is
/// grown, otherwise a new buffer is opened. Constants live in the weight
/// store and are not planned.
pub fn plan_memory(model: &Model) -> Result<MemoryPlan> {
    let g = &model.graph;
    let shapes = g.infer_shapes()?;
    let end = g.nodes.len() + 1;
    let mut slots: Vec<TensorSlot> = Vec::new();
    let mut index = HashMap::new();
    let mut define = |name: &str, step: usize, slots: &mut Vec<TensorSlot>| {
        index.insert(name.to_owned(), slots.len());
        slots.push(TensorSlot {
            name: name.to_owned(),
            elements: shapes[name].iter().product(),
            first: step,
            last: step,
            buffer: usize::MAX,
        });
    };
    for p in &g.inputs {
        define(&p.name, 0, &mut slots);
    }
    for (i, n) in g.nodes.iter().enumerate() {
        if !matches!(n.op, Op::Constant { .. }) {
            define(&n.output, i + 1, &mut slots);
        }
    }
    for (i, n) in g.nodes.iter().enumerate() {
        for t in &n.inputs {
            if let Some(&s) = index.get(t) {
                slots[s].last = slots[s].last.max(i + 1);
            }
        }
    }
    for o in &g.outputs {
        if let Some(&s) = index.get(o) {
            slots[s].last = end;
        }
    }

    let mut buffers: Vec<usize> = Vec::new();
    let mut busy_until: Vec<usize> = Vec::new();
    for s in slots.iter_mut() {
        let need = round_up(s.elements);
        let free = (0..buffers.len()).filter(|&b| busy_until[b] < s.first);
        let fit = free
            .clone()
            .filter(|&b| buffers[b] >= need)
            .min_by_key(|&b| (buffers[b], b));
        let b = match fit.or_else(|| free.max_by_key(|&b| (buffers[b], usize::MAX - b))) {
            Some(b) => {
                buffers[b] = buffers[b].max(need);
                b
            }
            None => {
                buffers.push(need);
                busy_until.push(0);
                buffers.len() - 1
            }
        };
        busy_until[b] = s.last;
        s.buffer = b;
    }
    let plan = MemoryPlan {
        buffers,
        slots,
        index,
    };
    plan.verify()?;
    Ok(plan)
}

impl MemoryPlan {
    /// Bytes held by the buffer pool.
    pub fn peak_bytes(&self) -> usize {
        self.buffers.iter().sum::<usize>() * 4
    }

    /// Bytes needed if every tensor had its own allocation.
    pub fn unplanned_bytes(&self) -> usize {
        self.slots.iter().map(|s| s.elements * 4).sum()
    }

    pub fn slot(&self, tensor: &str) -> Option<&TensorSlot> {
        self.index.get(tensor).map(|&i| &self.slots[i])
    }

    pub fn buffer_of(&self, tensor: &str) -> Option<usize> {
        self.slot(tensor).map(|s| s.buffer)
    }

    /// Rebinds a tensor to another buffer without any checking; meant for
    /// fault injection against [`Executor::run_checked`].
    pub fn force_binding(&mut self, tensor: &str, buffer: usize) -> Result<()> {
        let &i = self
            .index
            .get(tensor)
            .ok_or_else(|| Error::invalid(format!("tensor `{tensor}` is not planned")))?;
        if buffer >= self.buffers.len() {
            return Err(Error::invalid(format!("buffer {buffer} does not exist")));
        }
        self.slots[i].buffer = buffer;
        self.buffers[buffer] = self.buffers[buffer].max(round_up(self.slots[i].elements));
        Ok(())
    }

    /// Every tensor fits its buffer and no two tensors sharing a buffer
    /// are alive at the same step.
    pub fn verify(&self) -> Result<()> {
        let mut per_buffer: Vec<Vec<&TensorSlot>> = vec![Vec::new(); self.buffers.len()];
        for s in &self.slots {
            let cap = *self
                .buffers
                .get(s.buffer)
                .ok_or_else(|| Error::PlanViolation(format!("`{}` bound to missing buffer", s.name)))?;
            if cap < s.elements {
                return Err(Error::PlanViolation(format!(
                    "`{}` needs {} elements, buffer {} holds {cap}",
                    s.name, s.elements, s.buffer
                )));
            }
            per_buffer[s.buffer].push(s);
        }
        for (b, list) in per_buffer.iter_mut().enumerate() {
            list.sort_by_key(|s| s.first);
            for w in list.windows(2) {
                if w[1].first <= w[0].last {
                    return Err(Error::PlanViolation(format!(
                        "`{}` (steps {}..={}) and `{}` (steps {}..={}) share buffer {b}",
                        w[0].name, w[0].first, w[0].last, w[1].name, w[1].first, w[1].last
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
#[repr(C, align(64))]
struct Block([f32; ALIGN_ELEMS]);

/// Heap buffer whose start is 64-byte aligned.
#[derive(Default)]
struct AlignedBuf {
    blocks: Vec<Block>,
}

impl AlignedBuf {
    fn new(elements: usize) -> Self {
        AlignedBuf {
            blocks: vec![Block([0.0; ALIGN_ELEMS]); elements / ALIGN_ELEMS],
        }
    }

    fn slice(&self, n: usize) -> &[f32] {
        let all = self.blocks.len() * ALIGN_ELEMS;
        assert!(n <= all, "buffer holds {all} elements, {n} requested");
        // SAFETY: `Block` is a repr(C) array of f32 with no padding, so the
        // block storage is `all` contiguous initialized f32 values.
        unsafe { std::slice::from_raw_parts(self.blocks.as_ptr().cast::<f32>(), n) }
    }

    fn slice_mut(&mut self, n: usize) -> &mut [f32] {
        let all = self.blocks.len() * ALIGN_ELEMS;
        assert!(n <= all, "buffer holds {all} elements, {n} requested");
        // SAFETY: as in `slice`; the exclusive borrow guarantees uniqueness.
        unsafe { std::slice::from_raw_parts_mut(self.blocks.as_mut_ptr().cast::<f32>(), n) }
    }
}

enum Src<'a> {
    Buffer(usize, usize),
    Weight(&'a Tensor),
}

/// Runs one model repeatedly with a preallocated buffer pool.
///
/// The model is shared read-only; each executor owns its pool, so distinct
/// executors may run concurrently.
pub struct Executor<'m> {
    model: &'m Model,
    plan: MemoryPlan,
    shapes: HashMap<String, Vec<usize>>,
    pool: Vec<AlignedBuf>,
    threads: usize,
}

impl<'m> Executor<'m> {
    pub fn new(model: &'m Model, threads: usize) -> Result<Self> {
        model.validate()?;
        let plan = plan_memory(model)?;
        Self::with_plan(model, plan, threads)
    }

    /// Uses `plan` as given; [`Executor::run_checked`] audits it at run time.
    pub fn with_plan(model: &'m Model, plan: MemoryPlan, threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::invalid("thread count must be >= 1"));
        }
        let shapes = model.graph.infer_shapes()?;
        let pool = plan.buffers.iter().map(|&n| AlignedBuf::new(n)).collect();
        Ok(Executor {
            model,
            plan,
            shapes,
            pool,
            threads,
        })
    }

    pub fn plan(&self) -> &MemoryPlan {
        &self.plan
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn run(&mut self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.run_inner(inputs, None, false)
    }

    /// Like [`Executor::run`], also returning per-node wall times in seconds.
    pub fn run_timed(&mut self, inputs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<f64>)> {
        let mut times = vec![0.0; self.model.graph.nodes.len()];
        let out = self.run_inner(inputs, Some(&mut times), false)?;
        Ok((out, times))
    }

    /// Instrumented run: tracks which tensor occupies every buffer and
    /// fails if a write would clobber a tensor that is still needed, or a
    /// read finds its buffer taken over by another tensor.
    pub fn run_checked(&mut self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.run_inner(inputs, None, true)
    }

    fn run_inner(&mut self, inputs: &[Tensor], times: Option<&mut Vec<f64>>, check: bool) -> Result<Vec<Tensor>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        pool.install(|| self.run_sequence(inputs, times, check))
    }

    fn src(&self, tensor: &str) -> Result<Src<'m>> {
        if let Some(s) = self.plan.slot(tensor) {
            return Ok(Src::Buffer(s.buffer, s.elements));
        }
        let p = self
            .model
            .graph
            .producer(tensor)
            .ok_or_else(|| Error::graph(format!("tensor `{tensor}` has no producer")))?;
        match &self.model.graph.nodes[p].op {
            Op::Constant { weight, .. } => Ok(Src::Weight(self.model.weights.require(weight)?)),
            _ => Err(Error::PlanViolation(format!("tensor `{tensor}` has no buffer"))),
        }
    }

    fn read<'a>(&'a self, src: &'a Src<'m>) -> &'a [f32] {
        match src {
            Src::Buffer(b, n) => self.pool[*b].slice(*n),
            Src::Weight(t) => t.data(),
        }
    }

    fn run_sequence(&mut self, inputs: &[Tensor], mut times: Option<&mut Vec<f64>>, check: bool) -> Result<Vec<Tensor>> {
        let model = self.model;
        let g = &model.graph;
        if inputs.len() != g.inputs.len() {
            return Err(Error::invalid(format!(
                "graph takes {} inputs, {} given",
                g.inputs.len(),
                inputs.len()
            )));
        }
        // slot index currently stored in each buffer (checked mode only)
        let mut owner: Vec<Option<usize>> = vec![None; self.pool.len()];
        let slot_id = |plan: &MemoryPlan, t: &str| plan.index.get(t).copied();

        for (p, x) in g.inputs.iter().zip(inputs) {
            if x.dims() != &p.dims[..] {
                return Err(Error::shape(format!(
                    "input `{}` expects dims {:?}, got {:?}",
                    p.name,
                    p.dims,
                    x.dims()
                )));
            }
            let s = &self.plan.slots[self.plan.index[&p.name]];
            if check {
                claim(&self.plan, &mut owner, self.plan.index[&p.name], 0)?;
            }
            self.pool[s.buffer].slice_mut(s.elements).copy_from_slice(x.data());
        }

        for (i, n) in g.nodes.iter().enumerate() {
            let step = i + 1;
            let Some(out_slot) = slot_id(&self.plan, &n.output) else {
                continue; // constants
            };
            let started = Instant::now();
            let srcs: Vec<Src> = n.inputs.iter().map(|t| self.src(t)).collect::<Result<_>>()?;
            if check {
                for t in &n.inputs {
                    if let Some(s) = slot_id(&self.plan, t) {
                        let b = self.plan.slots[s].buffer;
                        if owner[b] != Some(s) {
                            return Err(Error::PlanViolation(format!(
                                "node `{}` reads `{t}` but buffer {b} was overwritten",
                                n.name
                            )));
                        }
                    }
                }
                claim(&self.plan, &mut owner, out_slot, step)?;
            }
            let ob = self.plan.slots[out_slot].buffer;
            let on = self.plan.slots[out_slot].elements;
            if srcs.iter().any(|s| matches!(s, Src::Buffer(b, _) if *b == ob)) {
                return Err(Error::PlanViolation(format!(
                    "node `{}` writes into the buffer of its own input",
                    n.name
                )));
            }
            let mut out_buf = std::mem::take(&mut self.pool[ob]);
            let res = self.eval(i, &srcs, out_buf.slice_mut(on));
            self.pool[ob] = out_buf;
            res?;
            if let Some(t) = times.as_deref_mut() {
                t[i] = started.elapsed().as_secs_f64();
            }
        }

        g.outputs
            .iter()
            .map(|o| {
                let src = self.src(o)?;
                Tensor::new(self.shapes[o].clone(), self.read(&src).to_vec())
            })
            .collect()
    }

    fn eval(&self, i: usize, srcs: &[Src], out: &mut [f32]) -> Result<()> {
        let n = &self.model.graph.nodes[i];
        let ws = &self.model.weights;
        let dims = |k: usize| self.shapes[&n.inputs[k]].as_slice();
        let feat = |k: usize| -> [usize; 4] {
            let d = dims(k);
            [d[0], d[1], d[2], d[3]]
        };
        match &n.op {
            Op::Conv {
                spec,
                weight,
                bias,
                activation,
            } => {
                let w = ws.require(weight)?.data();
                let b = bias.as_deref().map(|b| ws.require(b).map(Tensor::data)).transpose()?;
                nn::conv3d_fast_into(self.read(&srcs[0]), feat(0), w, b, spec, *activation, out);
            }
            Op::ConvTranspose { spec, weight, bias } => {
                let w = ws.require(weight)?.data();
                let b = bias.as_deref().map(|b| ws.require(b).map(Tensor::data)).transpose()?;
                nn::conv_transpose3d_into(self.read(&srcs[0]), feat(0), w, b, spec, Activation::None, out);
            }
            Op::Relu => nn::relu_into(self.read(&srcs[0]), out),
            Op::Add => nn::add_into(self.read(&srcs[0]), dims(0), self.read(&srcs[1]), dims(1), out)?,
            Op::Concat => nn::concat_into(self.read(&srcs[0]), self.read(&srcs[1]), out),
            Op::Identity => out.copy_from_slice(self.read(&srcs[0])),
            Op::Constant { .. } => unreachable!("constants are not executed"),
        }
        Ok(())
    }
}

fn claim(plan: &MemoryPlan, owner: &mut [Option<usize>], slot: usize, step: usize) -> Result<()> {
    let b = plan.slots[slot].buffer;
    if let Some(prev) = owner[b] {
        if prev != slot && plan.slots[prev].last >= step {
            return Err(Error::PlanViolation(format!(
                "writing `{}` at step {step} clobbers live tensor `{}` in buffer {b}",
                plan.slots[slot].name, plan.slots[prev].name
            )));
        }
    }
    owner[b] = Some(slot);
    Ok(())
}

/// Runs a single-input, single-output model once.
pub fn execute(model: &Model, x: &Tensor, threads: usize) -> Result<Tensor> {
    let mut out = Executor::new(model, threads)?.run(std::slice::from_ref(x))?;
    if out.len() != 1 {
        return Err(Error::invalid(format!("model has {} outputs, expected 1", out.len())));
    }
    Ok(out.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingStats {
    /// Timed samples in seconds, warmup excluded.
    pub samples: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// `max - min`.
    pub spread: f64,
}

impl TimingStats {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let mut s = samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let min = s.first().copied().unwrap_or(f64::NAN);
        let max = s.last().copied().unwrap_or(f64::NAN);
        TimingStats {
            samples,
            median,
            min,
            max,
            spread: max - min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeTiming {
    pub name: String,
    pub kind: &'static str,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub threads: usize,
    pub logical_cores: usize,
    pub warmup_seconds: f64,
    /// Network forward pass only.
    pub network: TimingStats,
    /// Resample, normalize, forward pass and postprocessing, when measured.
    pub end_to_end: Option<TimingStats>,
    /// Per-node breakdown of the fastest timed run.
    pub node_times: Vec<NodeTiming>,
    pub peak_memory_bytes: usize,
    pub unplanned_memory_bytes: usize,
    /// Effect of the graph passes, when measured.
    pub optimization: Option<PassDelta>,
}

/// Network-only timing of a model before and after the graph passes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassDelta {
    pub passes: Vec<String>,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub median_before: f64,
    pub median_after: f64,
    /// `median_before / median_after`.
    pub speedup: f64,
}

impl RunReport {
    pub fn node_time_total(&self) -> f64 {
        self.node_times.iter().map(|n| n.seconds).sum()
    }
}

pub fn logical_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Random input in [0, 1) matching the model's single input port.
pub fn random_input(model: &Model, seed: u64) -> Result<Tensor> {
    let p = model
        .graph
        .inputs
        .first()
        .ok_or_else(|| Error::invalid("model has no inputs"))?;
    let mut rng = CounterRng::new(seed);
    let n = p.dims.iter().product();
    Tensor::new(p.dims.clone(), (0..n).map(|_| rng.uniform() as f32).collect())
}

/// Times `runs` forward passes (the first is a discarded warmup).
pub fn benchmark(model: &Model, runs: usize, threads: usize, input: Option<&Tensor>) -> Result<RunReport> {
    if runs < 3 {
        return Err(Error::invalid("benchmark needs at least 3 runs (the first is warmup)"));
    }
    let owned;
    let x = match input {
        Some(x) => x,
        None => {
            owned = random_input(model, 0)?;
            &owned
        }
    };
    let mut exec = Executor::new(model, threads)?;
    let inputs = std::slice::from_ref(x);
    let t0 = Instant::now();
    exec.run(inputs)?;
    let warmup_seconds = t0.elapsed().as_secs_f64();

    let mut samples = Vec::with_capacity(runs - 1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 1..runs {
        let t = Instant::now();
        let (_, times) = exec.run_timed(inputs)?;
        let wall = t.elapsed().as_secs_f64();
        samples.push(wall);
        if best.as_ref().is_none_or(|(w, _)| wall < *w) {
            best = Some((wall, times));
        }
        log::debug!("benchmark run: {wall:.3} s");
    }
    let (_, times) = best.expect("at least two timed runs");
    let node_times = model
        .graph
        .nodes
        .iter()
        .zip(times)
        .map(|(n, seconds)| NodeTiming {
            name: n.name.clone(),
            kind: n.op.kind(),
            seconds,
        })
        .collect();
    Ok(RunReport {
        threads,
        logical_cores: logical_cores(),
        warmup_seconds,
        network: TimingStats::from_samples(samples),
        end_to_end: None,
        node_times,
        peak_memory_bytes: exec.plan().peak_bytes(),
        unplanned_memory_bytes: exec.plan().unplanned_bytes(),
        optimization: None,
    })
}

/// Benchmarks `model` as given and after `passes`, network only. Returns
/// `None` when the passes leave the model unchanged.
pub fn benchmark_passes(
    model: &Model,
    passes: &[Pass],
    runs: usize,
    threads: usize,
    input: Option<&Tensor>,
) -> Result<Option<PassDelta>> {
    let (opt, _) = optimize(model, passes)?;
    if &opt == model {
        return Ok(None);
    }
    let before = benchmark(model, runs, threads, input)?;
    let after = benchmark(&opt, runs, threads, input)?;
    Ok(Some(PassDelta {
        passes: passes.iter().map(|p| p.to_string()).collect(),
        nodes_before: model.graph.node_count(),
        nodes_after: opt.graph.node_count(),
        median_before: before.network.median,
        median_after: after.network.median,
        speedup: before.network.median / after.network.median,
    }))
}
