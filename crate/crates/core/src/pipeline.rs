//! End-to-end segmentation: resample → window → network → argmax →
//! upsample → label remap, plus the matching training-data preparation.

use std::path::Path;
use std::time::Instant;

use crate::engine::{benchmark, Executor, RunReport, TimingStats};
use crate::error::{Error, Result};
use crate::graph::{Model, WeightStore};
use crate::nn::Tensor;
use crate::postprocess::{argmax_channels, remap_labels, restore_geometry};
use crate::preprocess::{
    compute_body_mask, resample_image, resample_labels_nearest, split_background, stack_windows,
};
use crate::volume_io::{Geometry, LabelVolume, Volume};

/// Spatial extent the model expects, read from its input port.
pub fn network_shape(model: &Model) -> Result<[usize; 3]> {
    match model.graph.inputs.as_slice() {
        [p] => match p.dims.as_slice() {
            [2, d, h, w] => Ok([*d, *h, *w]),
            d => Err(Error::shape(format!("model input must be (2, D, H, W), got {d:?}"))),
        },
        ports => Err(Error::invalid(format!("model must have one input, has {}", ports.len()))),
    }
}

/// Two-channel network input for `ct` at `shape`.
pub fn prepare_input(ct: &Volume, shape: [usize; 3]) -> Result<Tensor> {
    let small = resample_image(ct, shape, 3)?;
    Ok(stack_windows(&small))
}

/// Network output → labels on `original`'s grid (0 background, 1..4 organs).
pub fn finish_segmentation(logits: &Tensor, network_geometry: Geometry, original: &Geometry) -> Result<LabelVolume> {
    let hard = argmax_channels(logits)?.with_geometry(network_geometry)?;
    let full = restore_geometry(&hard, original)?;
    remap_labels(&full)
}

/// Reusable inference context owning the executor's buffer pool.
pub struct Segmenter<'m> {
    executor: Executor<'m>,
    shape: [usize; 3],
}

impl<'m> Segmenter<'m> {
    pub fn new(model: &'m Model, threads: usize) -> Result<Self> {
        let shape = network_shape(model)?;
        Ok(Segmenter {
            executor: Executor::new(model, threads)?,
            shape,
        })
    }

    pub fn segment(&mut self, ct: &Volume) -> Result<LabelVolume> {
        let input = prepare_input(ct, self.shape)?;
        let mut out = self.executor.run(std::slice::from_ref(&input))?;
        let logits = out.pop().ok_or_else(|| Error::invalid("model produced no output"))?;
        let seg = finish_segmentation(&logits, ct.geometry().resampled(self.shape), ct.geometry())?;
        if seg.geometry() != ct.geometry() {
            return Err(Error::shape("segmentation geometry differs from the scan"));
        }
        Ok(seg)
    }
}

/// Segments one scan.
pub fn infer(model: &Model, ct: &Volume, threads: usize) -> Result<LabelVolume> {
    Segmenter::new(model, threads)?.segment(ct)
}

/// Network-only benchmark on `ct`'s preprocessed input plus end-to-end
/// timings of the whole pipeline (first run of each discarded).
pub fn benchmark_pipeline(model: &Model, ct: &Volume, runs: usize, threads: usize) -> Result<RunReport> {
    let input = prepare_input(ct, network_shape(model)?)?;
    let mut report = benchmark(model, runs, threads, Some(&input))?;
    let mut seg = Segmenter::new(model, threads)?;
    seg.segment(ct)?;
    let mut samples = Vec::with_capacity(runs - 1);
    for _ in 1..runs {
        let t = Instant::now();
        seg.segment(ct)?;
        samples.push(t.elapsed().as_secs_f64());
    }
    report.end_to_end = Some(TimingStats::from_samples(samples));
    Ok(report)
}

/// Network-resolution input and (optionally) training targets.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub input: Tensor,
    /// Labels 0 air, 1 body, 2.. organs at the network shape.
    pub targets: Option<LabelVolume>,
    pub original: Geometry,
    pub network: Geometry,
}

/// Preprocessing for training: the body mask is computed and the
/// background split at the scan's own resolution, then the targets are
/// downsampled with nearest-neighbour sampling.
pub fn prepare_case(ct: &Volume, labels: Option<&LabelVolume>, shape: [usize; 3]) -> Result<PreparedCase> {
    let input = prepare_input(ct, shape)?;
    let targets = match labels {
        Some(lv) => {
            if lv.shape() != ct.shape() {
                return Err(Error::shape(format!(
                    "labels {:?} do not match scan {:?}",
                    lv.shape(),
                    ct.shape()
                )));
            }
            let body = compute_body_mask(ct);
            let split = split_background(lv, &body)?;
            Some(resample_labels_nearest(&split, shape)?)
        }
        None => None,
    };
    Ok(PreparedCase {
        input,
        targets,
        original: *ct.geometry(),
        network: ct.geometry().resampled(shape),
    })
}

impl PreparedCase {
    /// Writes `case.cbr` (weight-file container holding `input` and, when
    /// present, `targets` as label values) and `case.meta` (key = value).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut ws = WeightStore::new();
        ws.insert("input", self.input.clone())?;
        if let Some(t) = &self.targets {
            let [d, h, w] = t.shape();
            let data = t.data().iter().map(|&l| l as f32).collect();
            ws.insert("targets", Tensor::new(vec![d, h, w], data)?)?;
        }
        crate::graph::write_weight_file(&ws, dir.join("case.cbr"))?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(", ");
        let fmtu = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let meta = format!(
            "original_shape = {}\noriginal_spacing = {}\noriginal_origin = {}\nnetwork_shape = {}\nnetwork_spacing = {}\n",
            fmtu(&self.original.shape),
            fmt(&self.original.spacing),
            fmt(&self.original.origin),
            fmtu(&self.network.shape),
            fmt(&self.network.spacing),
        );
        let p = dir.join("case.meta");
        std::fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }
}
