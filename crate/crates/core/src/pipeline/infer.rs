use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::step::candidate_masks;
use super::{nms, point_stage, superpoint_align, EncoderRows, ModelParams, PipelineConfig};
use crate::aggregator::pa_stack;
use crate::error::{Error, Result};
use crate::geom::{Point3, Scene, SoftMask};
use crate::nn::{sigmoid, softmax};
use crate::sampling::{ia_fps_infer, OccupancyState};

/// One detected instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub score: f64,
    pub bbox: [f64; 6],
    pub mask: Vec<bool>,
}

impl Prediction {
    /// Indices of the points in the mask, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// Wall-clock milliseconds of the three inference stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    /// Encoder and pointwise heads.
    pub encoder_ms: f64,
    /// Sampling, aggregation and candidate heads.
    pub instance_ms: f64,
    /// Dynamic-convolution mask decoding.
    pub decoder_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.encoder_ms + self.instance_ms + self.decoder_ms
    }
}

/// Every sampled candidate before scoring and NMS.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub candidates: Vec<usize>,
    /// `K x (C + 1)` class probabilities, last column no-object.
    pub class_probs: Array2<f64>,
    /// Predicted mask quality in `[0, 1]`.
    pub quality: Vec<f64>,
    pub boxes: Vec<[f64; 6]>,
    /// `K x N` pre-sigmoid mask logits.
    pub mask_logits: Array2<f64>,
    pub timings: StageTimings,
}

impl InferenceOutput {
    fn empty(n: usize, classes: usize, timings: StageTimings) -> Self {
        InferenceOutput {
            candidates: Vec::new(),
            class_probs: Array2::zeros((0, classes + 1)),
            quality: Vec::new(),
            boxes: Vec::new(),
            mask_logits: Array2::zeros((0, n)),
            timings,
        }
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the network with chunked instance-aware sampling. A scene with no
/// predicted foreground yields no candidates.
pub fn infer_raw(scene: &Scene, params: &ModelParams, config: &PipelineConfig) -> Result<InferenceOutput> {
    config.validate()?;
    if scene.is_empty() {
        return Err(Error::invalid("scene has no points"));
    }
    let n = scene.len();
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let rows = EncoderRows::build(scene, config)?;
    let stage = point_stage(scene, &rows, params)?;
    let pw = &stage.pointwise;
    let background = pw.background_prob(config);
    timings.encoder_ms = ms_since(t);

    let mut state = OccupancyState::new(background, config.tau)?;
    let mut class_logits = Vec::new();
    let mut quality = Vec::new();
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    let positions = &scene.positions;
    let threshold = config.binarize_threshold;
    let result = ia_fps_infer(&mut state, positions, &config.chunks, None, |chunk| {
        let t = Instant::now();
        let stages = vec![chunk.to_vec(); params.blocks.len()];
        let e = pa_stack(&params.blocks, stage.features.view(), positions, &stages)?;
        let anchors: Vec<Point3> = chunk.iter().map(|&i| positions[i]).collect();
        let heads = params.heads.forward(e.view(), &anchors)?;
        timings.instance_ms += ms_since(t);

        let t = Instant::now();
        let logits = candidate_masks(
            params,
            &pw.mask_features,
            &pw.boxes,
            positions,
            &anchors,
            &heads.boxes,
            &heads.kernels,
        )?;
        timings.decoder_ms += ms_since(t);
        let claims = logits
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&z| if sigmoid(z) > threshold { 1.0 } else { 0.0 }).collect())
            .collect();
        class_logits.push(heads.class_logits);
        quality.extend(heads.quality_logits.iter().map(|&q| sigmoid(q)));
        boxes.extend(heads.boxes);
        masks.push(logits);
        Ok(claims)
    });
    let candidates = match result {
        Ok(c) => c,
        Err(Error::NoForeground) => return Ok(InferenceOutput::empty(n, params.config.num_classes, timings)),
        Err(e) => return Err(e),
    };
    let stack = |parts: &[Array2<f64>], cols: usize| -> Result<Array2<f64>> {
        if parts.is_empty() {
            return Ok(Array2::zeros((0, cols)));
        }
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
    };
    let logits = stack(&class_logits, params.config.num_classes + 1)?;
    let mut class_probs = logits.clone();
    for mut row in class_probs.rows_mut() {
        let p = softmax(&row.to_vec());
        row.iter_mut().zip(p).for_each(|(dst, v)| *dst = v);
    }
    Ok(InferenceOutput {
        candidates,
        class_probs,
        quality,
        boxes,
        mask_logits: stack(&masks, n)?,
        timings,
    })
}

/// Scores, filters and ranks the raw candidates.
pub fn postprocess(raw: &InferenceOutput, scene: &Scene, config: &PipelineConfig) -> Result<Vec<Prediction>> {
    let classes = raw.class_probs.ncols().saturating_sub(1);
    let mut preds = Vec::new();
    for (k, probs) in raw.class_probs.rows().into_iter().enumerate() {
        let best = (0..classes)
            .filter(|&c| !config.is_background(c))
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)));
        let Some(class) = best else { continue };
        let soft = SoftMask(raw.mask_logits.row(k).iter().map(|&z| sigmoid(z)).collect());
        let mask = if config.superpoint_align {
            superpoint_align(&soft, scene.superpoints.as_deref())?
        } else {
            soft.0.iter().map(|&v| v > config.binarize_threshold).collect()
        };
        if !mask.iter().any(|&m| m) {
            continue;
        }
        preds.push(Prediction {
            class,
            score: probs[class] * raw.quality[k],
            bbox: raw.boxes[k],
            mask,
        });
    }
    let masks: Vec<Vec<bool>> = preds.iter().map(|p| p.mask.clone()).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let kept = nms(&masks, &scores, config.nms_threshold)?;
    // `nms` returns indices in descending score order
    Ok(kept.into_iter().map(|i| preds[i].clone()).collect())
}

/// Predictions plus per-stage timings.
pub fn infer_timed(scene: &Scene, params: &ModelParams, config: &PipelineConfig) -> Result<(Vec<Prediction>, StageTimings)> {
    let raw = infer_raw(scene, params, config)?;
    let preds = postprocess(&raw, scene, config)?;
    Ok((preds, raw.timings))
}

/// Instance predictions sorted by descending score.
pub fn infer(scene: &Scene, params: &ModelParams, config: &PipelineConfig) -> Result<Vec<Prediction>> {
    infer_timed(scene, params, config).map(|(p, _)| p)
}
